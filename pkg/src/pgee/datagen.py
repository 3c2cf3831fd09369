"""Correlated binary data generation via sequential conditional means.

A cluster with target means mu and correlation matrix R (exchangeable or
AR(1)) is drawn one position at a time.  Position j is Bernoulli with
conditional mean

    lam_j = mu_j + sum_{k<j} b_jk sqrt(w_j / w_k) (y_k - mu_k),

where w = mu (1 - mu) and the weights b solve
``R[1:j-1, 1:j-1] b = R[1:j-1, j]``.  This construction reproduces the
target means and pairwise correlations exactly whenever every realized
conditional mean stays inside (0, 1); a draw whose conditional mean
leaves (0, 1) is reported as invalid (counted, never clamped).

Scenarios describe the simulation designs: N clusters whose first
``round(gamma N)`` members are treated, observation times ``0.2 j``, and a
logistic marginal model with intercept calibrated so the design-average
event probability hits the target rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import working_correlation
from .data import Cluster, LongitudinalDataset, normalize_structure
from .errors import BracketFailure, SingularR

#: Observation time step: t_ij = TIME_STEP * j.
TIME_STEP = 0.2

_TRUE_STRUCTURES = ("exchangeable", "ar1")


@dataclass(frozen=True)
class Scenario:
    """One simulation cell: design, truth, and working assumptions."""

    n_clusters: int
    n_pattern: tuple = (4,)
    event_rate: float = 0.2
    rho: float = 0.2
    true_structure: str = "exchangeable"
    working_structure: str = "exchangeable"
    gamma: float = 0.3
    beta1: float = 0.0
    beta2: float = 0.2
    model: str = "full"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "true_structure", normalize_structure(self.true_structure)
        )
        object.__setattr__(
            self, "working_structure", normalize_structure(self.working_structure)
        )
        if self.true_structure not in _TRUE_STRUCTURES:
            raise ValueError(
                f"true structure must be one of {_TRUE_STRUCTURES}, "
                f"got {self.true_structure!r}"
            )
        pattern = self.n_pattern
        if isinstance(pattern, int):
            pattern = (pattern,)
        pattern = tuple(int(n) for n in pattern)
        if not pattern or any(n < 2 for n in pattern):
            raise ValueError(f"cluster sizes must all be >= 2, got {pattern}")
        object.__setattr__(self, "n_pattern", pattern)
        if not 0.0 < self.event_rate < 1.0:
            raise ValueError(f"event rate must lie in (0, 1), got {self.event_rate}")
        n_max = max(pattern)
        if self.true_structure == "exchangeable":
            if not -1.0 / (n_max - 1) < self.rho < 1.0:
                raise ValueError(f"rho {self.rho} inadmissible for exchangeable")
        elif not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho {self.rho} inadmissible for ar1")
        n_treated = round(self.gamma * self.n_clusters)
        if n_treated < 1 or self.n_clusters - n_treated < 1:
            raise ValueError(
                f"gamma {self.gamma} leaves an empty arm at N = {self.n_clusters}"
            )
        if self.model not in ("full", "reduced"):
            raise ValueError(f"model must be 'full' or 'reduced', got {self.model!r}")

    @property
    def n_treated(self) -> int:
        return round(self.gamma * self.n_clusters)

    @property
    def p(self) -> int:
        return 3 if self.model == "full" else 2

    def cluster_sizes(self) -> list:
        pattern = self.n_pattern
        return [pattern[i % len(pattern)] for i in range(self.n_clusters)]

    def design_rows(self) -> np.ndarray:
        """All (treatment, time) rows of the design, pooled over clusters."""
        rows = []
        for i, n in enumerate(self.cluster_sizes()):
            x = 1.0 if i < self.n_treated else 0.0
            for j in range(1, n + 1):
                rows.append((x, TIME_STEP * j))
        return np.array(rows)


def calibrate_intercept(scenario: Scenario, tol: float = 1e-8) -> float:
    """Intercept making the design-average event probability hit the target.

    Bisection on [-20, 20]; raises BracketFailure when the target rate is
    unreachable there.
    """
    rows = scenario.design_rows()
    shift = scenario.beta1 * rows[:, 0]
    if scenario.model == "full":
        shift = shift + scenario.beta2 * rows[:, 1]

    def excess(b0: float) -> float:
        return float(np.mean(expit(b0 + shift))) - scenario.event_rate

    lo, hi = -20.0, 20.0
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0 or f_hi < 0:
        raise BracketFailure(
            f"event rate {scenario.event_rate} unreachable on [{lo}, {hi}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = excess(mid)
        if abs(f_mid) <= tol and hi - lo <= 1e-12:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clf_coefficients(mu: np.ndarray, structure: str, rho: float) -> np.ndarray:
    """Lower-triangular table of conditional regression weights.

    Row j holds the weights of the standardized history y_1..y_{j-1} on
    position j, obtained by solving R[:j, :j] b = R[:j, j].  Closed forms
    emerge: AR(1) gives a single-lag weight rho; exchangeable gives the
    common weight rho / (1 + (j - 2) rho).
    """
    n = len(mu)
    R = working_correlation(structure, rho, n)
    coef = np.zeros((n, n))
    for j in range(1, n):
        try:
            coef[j, :j] = np.linalg.solve(R[:j, :j], R[:j, j])
        except np.linalg.LinAlgError as exc:
            raise SingularR(
                f"target correlation singular at position {j + 1}"
            ) from exc
    return coef


def clf_sample(
    mu: np.ndarray,
    structure: str,
    rho: float,
    rng: np.random.Generator,
    size: int,
) -> tuple:
    """Draw ``size`` correlated binary vectors with the target moments.

    Returns (draws, n_invalid): draws is a (valid, n) 0/1 array containing
    only rows whose conditional means all stayed inside (0, 1); invalid
    rows are counted and dropped.  Each row consumes exactly n uniforms,
    so the stream layout does not depend on the realized values.
    """
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    w = mu * (1.0 - mu)
    coef = clf_coefficients(mu, structure, rho)
    sw = np.sqrt(w)
    scaled = coef * (sw[:, None] / sw[None, :])

    unif = rng.random((size, n))
    y = np.empty((size, n))
    resid = np.empty((size, n))
    invalid = np.zeros(size, dtype=bool)
    for j in range(n):
        lam = mu[j] + resid[:, :j] @ scaled[j, :j]
        invalid |= (lam <= 0.0) | (lam >= 1.0)
        yj = (unif[:, j] < np.clip(lam, 0.0, 1.0)).astype(float)
        y[:, j] = yj
        resid[:, j] = yj - mu[j]
    return y[~invalid], int(invalid.sum())


def clf_generate(
    mu: np.ndarray,
    structure: str,
    rho: float,
    rng: np.random.Generator,
) -> Optional[np.ndarray]:
    """Single correlated binary draw; None when a conditional mean left (0, 1)."""
    draws, n_invalid = clf_sample(mu, structure, rho, rng, size=1)
    if n_invalid:
        return None
    return draws[0]


def generate_dataset(
    scenario: Scenario,
    rng: np.random.Generator,
    intercept: Optional[float] = None,
) -> Optional[LongitudinalDataset]:
    """Draw one dataset for a scenario, or None when any cluster draw is invalid.

    The caller decides the retry policy for invalid draws (the simulation
    harness regenerates on the next substream and counts the event).
    Passing a pre-calibrated ``intercept`` skips re-calibration.
    """
    if intercept is None:
        intercept = calibrate_intercept(scenario)
    sizes = scenario.cluster_sizes()
    clusters = []
    for i, n in enumerate(sizes):
        x = 1.0 if i < scenario.n_treated else 0.0
        t = TIME_STEP * np.arange(1, n + 1)
        eta = intercept + scenario.beta1 * x
        if scenario.model == "full":
            eta = eta + scenario.beta2 * t
        else:
            eta = np.full(n, eta)
        mu = expit(eta)
        y = clf_generate(mu, scenario.true_structure, scenario.rho, rng)
        if y is None:
            return None
        ones = np.ones((n, 1))
        if scenario.model == "full":
            X = np.hstack([ones, np.full((n, 1), x), t[:, None]])
            clusters.append(Cluster(id=i + 1, y=y, X=X, t=t))
        else:
            X = np.hstack([ones, np.full((n, 1), x)])
            clusters.append(Cluster(id=i + 1, y=y, X=X))
    colnames = (
        ("intercept", "treat", "time")
        if scenario.model == "full"
        else ("intercept", "treat")
    )
    return LongitudinalDataset(clusters=tuple(clusters), colnames=colnames)
