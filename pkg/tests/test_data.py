"""Dataset validation, CSV round-trips, working-model checks."""

import numpy as np
import pytest

from pgee import (
    EstimatorId,
    WorkingModel,
    read_csv,
    validate_dataset,
    write_csv,
)
from pgee.errors import (
    DatasetError,
    NonBinaryOutcome,
    RaggedCovariates,
    SingletonCluster,
    TooFewClusters,
)


def _balanced_rows(n_clusters=10, size=7, k=2):
    rows = []
    rng = np.random.default_rng(3)
    for i in range(n_clusters):
        x = float(i % 2)
        for j in range(size):
            rows.append((f"c{i}", float(rng.random() < 0.4), (x, j * 0.1), 0.2 * (j + 1)))
    return rows


def test_balanced_grouping():
    ds = validate_dataset(_balanced_rows())
    assert ds.n_clusters == 10
    assert ds.cluster_sizes == (7,) * 10
    assert ds.p == 4  # intercept + 2 covariates + time
    assert ds.colnames[0] == "intercept"
    assert ds.colnames[-1] == "t"
    assert ds.balanced
    # intercept synthesized, time in last column
    c = ds.clusters[0]
    assert np.all(c.X[:, 0] == 1.0)
    assert np.allclose(c.X[:, -1], c.t)


def test_cluster_order_is_first_appearance():
    rows = [
        ("b", 0.0, (1.0,), None),
        ("a", 1.0, (0.0,), None),
        ("b", 1.0, (1.0,), None),
        ("a", 0.0, (0.0,), None),
        ("c", 0.0, (1.0,), None),
        ("c", 1.0, (1.0,), None),
    ]
    ds = validate_dataset(rows)
    assert [c.id for c in ds.clusters] == ["b", "a", "c"]
    assert np.array_equal(ds.clusters[0].y, [0.0, 1.0])


def test_singleton_cluster_rejected():
    rows = _balanced_rows()
    rows.append(("lonely", 1.0, (0.0, 0.0), 0.2))
    with pytest.raises(SingletonCluster):
        validate_dataset(rows)


def test_non_binary_outcome_rejected():
    rows = _balanced_rows()
    rows[3] = (rows[3][0], 2.0, rows[3][2], rows[3][3])
    with pytest.raises(NonBinaryOutcome):
        validate_dataset(rows)


def test_ragged_covariates_rejected():
    rows = _balanced_rows()
    rows[5] = (rows[5][0], rows[5][1], (1.0,), rows[5][3])
    with pytest.raises(RaggedCovariates):
        validate_dataset(rows)


def test_too_few_clusters_rejected():
    rows = [
        ("a", 0.0, (1.0, 0.5), None),
        ("a", 1.0, (1.0, 0.2), None),
        ("b", 0.0, (0.0, 0.1), None),
        ("b", 1.0, (0.0, 0.7), None),
    ]
    # p = 3 (intercept + 2) needs at least 4 clusters
    with pytest.raises(TooFewClusters):
        validate_dataset(rows)


def test_non_finite_covariate_rejected():
    rows = _balanced_rows()
    rows[0] = (rows[0][0], rows[0][1], (float("nan"), 0.0), rows[0][3])
    with pytest.raises(DatasetError):
        validate_dataset(rows)


def test_csv_round_trip_identity(tmp_path):
    ds = validate_dataset(_balanced_rows())
    path = tmp_path / "data.csv"
    write_csv(ds, path)
    back = read_csv(path)
    assert [c.id for c in back.clusters] == [str(c.id) for c in ds.clusters]
    for a, b in zip(ds.clusters, back.clusters):
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.X, b.X)  # exact: 17 significant digits round-trip


def test_read_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,outcome,x1\n1,0,0.5\n")
    with pytest.raises(DatasetError):
        read_csv(path)


def test_arrays_are_immutable():
    ds = validate_dataset(_balanced_rows())
    with pytest.raises(ValueError):
        ds.clusters[0].y[0] = 1.0
    with pytest.raises(ValueError):
        ds.clusters[0].X[0, 0] = 2.0


def test_working_model_validation():
    wm = WorkingModel(structure="exch", alpha=0.3)
    assert wm.structure == "exchangeable"
    assert not wm.estimates_alpha
    assert WorkingModel(structure="ind").alpha == 0.0
    with pytest.raises(ValueError):
        WorkingModel(structure="independence", alpha=0.2)
    with pytest.raises(ValueError):
        WorkingModel(structure="ar1", alpha=1.5)
    with pytest.raises(ValueError):
        WorkingModel(structure="exchangeable", alpha="adaptive")
    with pytest.raises(ValueError):
        WorkingModel(dispersion=-1.0)
    with pytest.raises(ValueError):
        WorkingModel(structure="toeplitz")
    # per-dataset admissibility
    wm = WorkingModel(structure="exchangeable", alpha=-0.4)
    with pytest.raises(ValueError):
        wm.check_alpha(-0.4, n_max=5)
    wm.check_alpha(-0.4, n_max=3)


def test_estimator_id_closed_enumeration():
    assert len(EstimatorId) == 14
    assert EstimatorId.parse("kc") is EstimatorId.KC
    with pytest.raises(ValueError):
        EstimatorId.parse("XX")
