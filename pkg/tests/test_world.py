import csv
import json

import numpy as np
import pytest

from conftest import philox
from selfroll.world import WorldConfig, check_sequences, drift_report, fit_slope, marginal_moments, \
    mean_marginal_mmd_test, median_bandwidth, mmd_permutation_test, mmd_squared, sample_ground_truth, \
    slope_null_band


def test_mmd_two_points_by_hand():
    assert abs(mmd_squared([[0.0]], [[1.0]], 1.0) - (2 - 2 * np.exp(-0.5))) < 1e-15
    assert mmd_squared([[0.0], [1.0]], [[1.0], [0.0]], 0.7) == 0.0
    with pytest.raises(ValueError):
        mmd_squared([[0.0]], [[1.0]], 0.0)


def test_median_bandwidth_by_hand():
    # pairwise distances 1, 2, 3 -> median 2
    assert median_bandwidth([[0.0], [1.0], [3.0]]) == 2.0


def test_default_world_is_stationary():
    w = WorldConfig()
    _, covs = marginal_moments(w, 6)
    np.testing.assert_allclose(covs, np.broadcast_to(np.eye(2), covs.shape), atol=1e-12)
    x = sample_ground_truth(w, 6, 0, philox(0), 20_000)
    emp = np.einsum("nfi,nfj->fij", x, x) / len(x)
    # standard error of a unit-variance second moment is about sqrt(2 / n) = 0.01
    assert np.abs(emp - covs).max() < 0.05


def test_one_step_transition_by_hand():
    w = WorldConfig(rho=1.0, sigma_w=0.0, angles_deg=(90.0,))
    x = sample_ground_truth(w, 3, 0, philox(1), 1, x1=[1.0, 0.0])
    np.testing.assert_allclose(x[0], [[1, 0], [0, 1], [-1, 0]], atol=1e-15)


def test_conditions_and_validation():
    w = WorldConfig(angles_deg=(30.0, 60.0))
    assert w.n_conditions == 2
    x = sample_ground_truth(w, 4, np.array([0, 1, 1]), philox(2), 3)
    assert x.shape == (3, 4, 2)
    with pytest.raises(ValueError):
        sample_ground_truth(w, 4, 2, philox(2), 1)
    with pytest.raises(ValueError):
        WorldConfig(rho=1.5)
    with pytest.raises(ValueError):
        check_sequences(np.zeros((3, 2)))


def test_permutation_tests_separate_distributions():
    r = philox(3)
    a = r.standard_normal((150, 2))
    b = r.standard_normal((150, 2))
    _, p_same = mmd_permutation_test(a, b, 1.0, r)
    _, p_diff = mmd_permutation_test(a, b + 1.0, 1.0, r)
    assert p_same > 0.01 and p_diff < 0.01
    w = WorldConfig()
    s1 = sample_ground_truth(w, 4, 0, r, 120)
    s2 = sample_ground_truth(w, 4, 0, r, 120)
    assert mean_marginal_mmd_test(s1, s2, 1.0, r, 100)[1] > 0.01
    assert mean_marginal_mmd_test(s1, 0.5 * s2, 1.0, r, 100)[1] < 0.01


def test_fit_slope_exact():
    slope, icpt = fit_slope([1.0, 3.0, 5.0])
    assert abs(slope - 2.0) < 1e-12 and abs(icpt + 1.0) < 1e-12


def test_drift_report_files(tmp_path):
    r = philox(4)
    w = WorldConfig()
    truth = sample_ground_truth(w, 5, 0, r, 100)
    drifted = truth * np.linspace(1, 2, 5)[None, :, None]
    rep = drift_report(drifted, truth, 1.0)
    assert rep.slope > 0 and rep.distances[0] == 0.0
    rep.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["frame_index", "mmd2", "n_samples"]
    assert [row[0] for row in rows[1:]] == ["1", "2", "3", "4", "5"]
    rep.to_json(tmp_path / "d.json")
    assert json.loads((tmp_path / "d.json").read_text())["n_frames"] == 5
    with pytest.raises(ValueError):
        drift_report(truth[:50], truth[:50])
    with pytest.raises(ValueError):
        drift_report(truth[:, :3], truth, min_samples=1)


def test_slope_null_band_is_small_for_identical_worlds():
    r = philox(5)
    w = WorldConfig()
    a = sample_ground_truth(w, 6, 0, r, 100)
    b = sample_ground_truth(w, 6, 0, r, 100)
    band = slope_null_band(a, b, 1.0, r, n_boot=30)
    assert 0 < band < 0.01
