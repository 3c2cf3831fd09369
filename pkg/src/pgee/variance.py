"""Sandwich covariance estimators, overcorrection diagnostic, Wald inference.

Fourteen estimators are indexed by :class:`~pgee.data.EstimatorId`.  All
share the outer sandwich ``info_inv @ M @ info_inv`` and differ in the
middle matrix M:

    LZ   outer products of cluster scores
    DF   LZ inflated by N / (N - p)
    KC   residuals corrected by (I - H)^{-1/2}
    MD   residuals corrected by (I - H)^{-1}
    FG   score-level diagonal leverage inflation with clipping
    MBN  finite-population and Bessel factors on mean-centered scores,
         plus a trace-scaled ridge
    PAN  pooled unscaled correlation across clusters (1/N)
    GST  pooled correlation with 1/(N - p)
    WL   pooling with the full leverage correction inside the pool
    WB   pooling with exponent-c leverage correction (default c = 1/2)
    RS   PAN plus a determinant-scaled ridge
    FW   entrywise average of KC and MD
    FZ   full leverage correction minus estimated cross-cluster
         contamination (middle matrix can be indefinite)
    AR   leverage-corrected scores, mean-centered, scaled by the
         finite-population and Bessel factors

Leverage powers are computed on a symmetric similar form: with the
Cholesky factor L of the cluster covariance and ``dt = L^{-1} dmat``, the
matrix ``S = dt @ info_inv @ dt'`` is symmetric positive semidefinite with
eigenvalues in [0, 1), and ``(I - H)^{-c} r = L Q (1-lam)^{-c} Q' L^{-1} r``.

Pooling estimators require equal cluster sizes; on unbalanced data they
are reported as not computable (never a wrong number).  A cluster whose
leverage is numerically singular marks leverage-requiring estimators as
not computable instead of aborting the replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular, LinAlgError
from scipy.stats import t as student_t

from .core import FitKernel
from .data import EstimatorId, POOLING_IDS
from .errors import SingularLeverage, ZeroSE

#: (I - H) is declared singular when 1 - max eigenvalue of the symmetrized
#: hat block falls at or below this threshold.
LEVERAGE_TOL = 1e-10

#: Default pooled leverage exponent for the WB estimator.
WB_EXPONENT = 0.5

#: Default clipping threshold for the FG diagonal leverage inflation.
FG_CLIP = 0.75

_REASON_UNBALANCED = "UnbalancedPooling"
_REASON_SINGULAR = "SingularLeverage"
_REASON_NEGDIAG = "NegativeDiagonal"


@dataclass(frozen=True)
class VarianceEstimate:
    """One estimator's p x p covariance with a computability flag."""

    id: EstimatorId
    cov: Optional[np.ndarray]
    se: Optional[np.ndarray]
    computable: bool
    incomputable_reason: Optional[str] = None


@dataclass(frozen=True)
class OvercorrectionDiagnostic:
    """Leverage-overcorrection matrix, per-parameter ratios, and the
    eigenvalues of info_inv @ matrix."""

    matrix: np.ndarray
    ratios: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class WaldResult:
    """Two-sided Wald t-test with N - p degrees of freedom and 95% CI."""

    estimate: float
    se: float
    t: float
    dof: int
    p_value: float
    ci_low: float
    ci_high: float


def _geometry(kernel: FitKernel, i: int):
    """Residual-independent leverage factorization for cluster i.

    Returns (L, dt, lam, Q): Cholesky factor of vmat, transformed
    derivative matrix, and the eigendecomposition of the symmetrized hat
    block.  Cached on the kernel.
    """
    cache = kernel._geom_cache
    key = ("geom", i)
    hit = cache.get(key)
    if hit is not None:
        return hit
    q = kernel.cq[i]
    L = np.linalg.cholesky(q.vmat)
    dt = solve_triangular(L, q.dmat, lower=True, check_finite=False)
    S = dt @ kernel.info_inv @ dt.T
    lam, Q = np.linalg.eigh(0.5 * (S + S.T))
    out = (L, dt, lam, Q)
    cache[key] = out
    return out


def _check_invertible(kernel: FitKernel, i: int, lam: np.ndarray) -> None:
    if 1.0 - lam[-1] <= LEVERAGE_TOL:
        cid = kernel.data.clusters[i].id
        raise SingularLeverage(
            f"cluster {cid}: (I - H) numerically singular "
            f"(max hat eigenvalue {lam[-1]:.12g})",
            cluster_id=cid,
        )


def _corrected_pieces(kernel: FitKernel, i: int, c: float):
    """Score and residual corrected by (I - H)^{-c} for cluster i.

    Returns (f, corrected_resid) where f = dmat' vinv (I-H)^{-c} r and
    corrected_resid = (I-H)^{-c} r.
    """
    q = kernel.cq[i]
    if c == 0.0:
        return q.score, q.resid
    L, dt, lam, Q = _geometry(kernel, i)
    _check_invertible(kernel, i, lam)
    rt = solve_triangular(L, q.resid, lower=True, check_finite=False)
    z = Q.T @ rt
    z = z * (1.0 - lam) ** (-c)
    u = Q @ z
    f = dt.T @ u
    corrected = L @ u
    return f, corrected


def leverage_scores(kernel: FitKernel, c: float) -> list:
    """Leverage-corrected score contributions dmat' vinv (I - H)^{-c} r.

    c = 0 returns the plain scores exactly; c = 1/2 and c = 1 give the
    KC- and MD/AR-type corrections.  Raises SingularLeverage when some
    (I - H) is numerically singular and c > 0.
    """
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"leverage exponent must lie in [0, 1], got {c}")
    return [_corrected_pieces(kernel, i, c)[0] for i in range(kernel.n_clusters)]


def _fz_pmat(kernel: FitKernel, i: int) -> np.ndarray:
    """P_i = dmat' vinv (I - H)^{-1} dmat, used by the FZ middle."""
    cache = kernel._geom_cache
    key = ("fz_pmat", i)
    hit = cache.get(key)
    if hit is not None:
        return hit
    L, dt, lam, Q = _geometry(kernel, i)
    _check_invertible(kernel, i, lam)
    z = Q.T @ dt
    z = z * ((1.0 - lam) ** (-1.0))[:, None]
    out = dt.T @ (Q @ z)
    cache[key] = out
    return out


def _middle_lz(kernel: FitKernel) -> np.ndarray:
    p = kernel.p
    m = np.zeros((p, p))
    for q in kernel.cq:
        m += np.outer(q.score, q.score)
    return m


def _middle_outer(scores) -> np.ndarray:
    p = scores[0].shape[0]
    m = np.zeros((p, p))
    for f in scores:
        m += np.outer(f, f)
    return m


def _fpc_bessel(kernel: FitKernel) -> float:
    n_star = kernel.n_total
    n_clusters = kernel.n_clusters
    p = kernel.p
    return (n_star - 1) / (n_star - p) * n_clusters / (n_clusters - 1)


def _centered_outer(scores) -> np.ndarray:
    arr = np.asarray(scores)
    centered = arr - arr.mean(axis=0)
    return centered.T @ centered


def _pooled_correlation(kernel: FitKernel, c: float, denom: float) -> np.ndarray:
    """Pooled unscaled correlation with optional leverage exponent c."""
    n = kernel.cluster_sizes[0]
    ru = np.zeros((n, n))
    for i, q in enumerate(kernel.cq):
        _, corrected = _corrected_pieces(kernel, i, c)
        e = corrected / np.sqrt(q.w)
        ru += np.outer(e, e)
    return ru / denom


def _pooled_middle(kernel: FitKernel, ru: np.ndarray) -> np.ndarray:
    p = kernel.p
    m = np.zeros((p, p))
    for q in kernel.cq:
        tmat = q.dmat.T @ q.vinv * np.sqrt(q.w)[None, :]
        m += tmat @ ru @ tmat.T
    return m


def _sandwich(kernel: FitKernel, middle: np.ndarray) -> np.ndarray:
    v = kernel.info_inv @ middle @ kernel.info_inv
    return 0.5 * (v + v.T)


def _delta_n(kernel: FitKernel) -> float:
    n_clusters, p = kernel.n_clusters, kernel.p
    return min(0.5, p / (n_clusters - p))


def estimate_variance(
    kernel: FitKernel,
    estimator: EstimatorId,
    wb_exponent: float = WB_EXPONENT,
    fg_clip: float = FG_CLIP,
) -> VarianceEstimate:
    """Evaluate one covariance estimator at an assembled kernel.

    Pooling estimators on unbalanced data and leverage estimators on
    clusters with singular (I - H) come back flagged as not computable;
    an indefinite FZ middle with a negative variance diagonal is flagged
    likewise rather than reporting an invalid standard error.
    """
    n_clusters = kernel.n_clusters
    p = kernel.p

    if estimator in POOLING_IDS and not kernel.balanced:
        return VarianceEstimate(
            id=estimator,
            cov=None,
            se=None,
            computable=False,
            incomputable_reason=_REASON_UNBALANCED,
        )

    try:
        if estimator is EstimatorId.LZ:
            cov = _sandwich(kernel, _middle_lz(kernel))
        elif estimator is EstimatorId.DF:
            cov = (n_clusters / (n_clusters - p)) * _sandwich(kernel, _middle_lz(kernel))
        elif estimator is EstimatorId.KC:
            cov = _sandwich(kernel, _middle_outer(leverage_scores(kernel, 0.5)))
        elif estimator is EstimatorId.MD:
            cov = _sandwich(kernel, _middle_outer(leverage_scores(kernel, 1.0)))
        elif estimator is EstimatorId.FG:
            m = np.zeros((p, p))
            for q in kernel.cq:
                lmat_diag = np.diag(q.info @ kernel.info_inv)
                fdiag = (1.0 - np.minimum(fg_clip, lmat_diag)) ** -0.5
                g = fdiag * q.score
                m += np.outer(g, g)
            cov = _sandwich(kernel, m)
        elif estimator is EstimatorId.MBN:
            scores = [q.score for q in kernel.cq]
            centered = _centered_outer(scores)
            kappa = max(1.0, float(np.trace(kernel.info_inv @ centered)) / p)
            cov = _sandwich(kernel, _fpc_bessel(kernel) * centered)
            cov = cov + kappa * _delta_n(kernel) * kernel.info_inv
            cov = 0.5 * (cov + cov.T)
        elif estimator is EstimatorId.PAN:
            ru = _pooled_correlation(kernel, 0.0, float(n_clusters))
            cov = _sandwich(kernel, _pooled_middle(kernel, ru))
        elif estimator is EstimatorId.GST:
            ru = _pooled_correlation(kernel, 0.0, float(n_clusters - p))
            cov = _sandwich(kernel, _pooled_middle(kernel, ru))
        elif estimator is EstimatorId.WL:
            ru = _pooled_correlation(kernel, 1.0, float(n_clusters))
            cov = _sandwich(kernel, _pooled_middle(kernel, ru))
        elif estimator is EstimatorId.WB:
            ru = _pooled_correlation(kernel, wb_exponent, float(n_clusters))
            cov = _sandwich(kernel, _pooled_middle(kernel, ru))
        elif estimator is EstimatorId.RS:
            ru = _pooled_correlation(kernel, 0.0, float(n_clusters))
            middle = _pooled_middle(kernel, ru)
            d_det = max(1.0, abs(np.linalg.det(kernel.info_inv @ middle)) ** (1.0 / p))
            cov = _sandwich(kernel, middle) + _delta_n(kernel) * d_det * kernel.info_inv
            cov = 0.5 * (cov + cov.T)
        elif estimator is EstimatorId.FW:
            kc = _sandwich(kernel, _middle_outer(leverage_scores(kernel, 0.5)))
            md = _sandwich(kernel, _middle_outer(leverage_scores(kernel, 1.0)))
            cov = 0.5 * (kc + md)
        elif estimator is EstimatorId.FZ:
            m1 = _middle_lz(kernel)
            m = np.zeros((p, p))
            for i, q in enumerate(kernel.cq):
                f, _ = _corrected_pieces(kernel, i, 1.0)
                pmat = _fz_pmat(kernel, i)
                others = m1 - np.outer(q.score, q.score)
                contamination = pmat @ kernel.info_inv @ others @ kernel.info_inv @ pmat.T
                m += np.outer(f, f) - contamination
            cov = _sandwich(kernel, m)
        elif estimator is EstimatorId.AR:
            scores = leverage_scores(kernel, 1.0)
            cov = _sandwich(kernel, _fpc_bessel(kernel) * _centered_outer(scores))
        else:  # pragma: no cover - closed enumeration
            raise ValueError(f"unhandled estimator {estimator}")
    except SingularLeverage:
        return VarianceEstimate(
            id=estimator,
            cov=None,
            se=None,
            computable=False,
            incomputable_reason=_REASON_SINGULAR,
        )

    diag = np.diag(cov).copy()
    roundoff = 1e-12 * (1.0 + float(np.max(np.abs(diag))))
    if np.any(diag < -roundoff):
        # Only FZ can produce an indefinite middle; report the covariance
        # but flag the standard errors as unavailable.
        return VarianceEstimate(
            id=estimator,
            cov=cov,
            se=None,
            computable=False,
            incomputable_reason=_REASON_NEGDIAG,
        )
    se = np.sqrt(np.clip(diag, 0.0, None))
    return VarianceEstimate(
        id=estimator, cov=cov, se=se, computable=True, incomputable_reason=None
    )


def estimate_all(kernel: FitKernel, estimators=None) -> dict:
    """Evaluate several estimators, sharing leverage factorizations."""
    if estimators is None:
        estimators = list(EstimatorId)
    return {e: estimate_variance(kernel, e) for e in estimators}


def overcorrection_diagnostic(kernel: FitKernel) -> OvercorrectionDiagnostic:
    """Overcorrection matrix sum_i A_i (I0 - A_i)^{-1} A_i and ratios.

    ``ratios[s]`` divides the diagonal of the matrix by the diagonal of
    the sensitivity matrix; ``eigenvalues`` are those of info_inv times
    the matrix (computed on a symmetric similar form, so real).
    Raises SingularLeverage when some (I0 - A_i) is singular, i.e. one
    cluster carries all information in some direction.
    """
    p = kernel.p
    blev = np.zeros((p, p))
    for q, cluster in zip(kernel.cq, kernel.data.clusters):
        rest = kernel.info - q.info
        rest = 0.5 * (rest + rest.T)
        try:
            cho = cho_factor(rest, lower=True)
        except (LinAlgError, np.linalg.LinAlgError) as exc:
            raise SingularLeverage(
                f"cluster {cluster.id}: remaining information singular",
                cluster_id=cluster.id,
            ) from exc
        blev += q.info @ cho_solve(cho, q.info)
    blev = 0.5 * (blev + blev.T)
    ratios = np.diag(blev) / np.diag(kernel.info)
    l0 = np.linalg.cholesky(kernel.info)
    sim = solve_triangular(l0, blev, lower=True)
    sim = solve_triangular(l0, sim.T, lower=True).T
    eigenvalues = np.linalg.eigvalsh(0.5 * (sim + sim.T))
    return OvercorrectionDiagnostic(matrix=blev, ratios=ratios, eigenvalues=eigenvalues)


def wald_test(
    estimate: float,
    se: float,
    n_clusters: int,
    n_params: int,
    null_value: float = 0.0,
) -> WaldResult:
    """Two-sided Wald t-test with N - p degrees of freedom and a 95% CI."""
    if n_clusters <= n_params:
        raise ValueError("need more clusters than parameters for the t-test")
    if not se > 0:
        raise ZeroSE(f"standard error must be positive, got {se}")
    dof = n_clusters - n_params
    tstat = (estimate - null_value) / se
    p_value = 2.0 * float(student_t.sf(abs(tstat), dof))
    crit = float(student_t.ppf(0.975, dof))
    return WaldResult(
        estimate=float(estimate),
        se=float(se),
        t=float(tstat),
        dof=dof,
        p_value=p_value,
        ci_low=float(estimate - crit * se),
        ci_high=float(estimate + crit * se),
    )
