import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from tscopula import _kernels
from tscopula.metrics import (
    MetricReport,
    crps,
    crps_matrix,
    crps_quantile_form,
    crps_sum,
    energy_score,
    newey_west_se,
    normalized_crps,
    results_table,
)

GAUSSIAN_CRPS = math.sqrt(2 / math.pi) - 1 / math.sqrt(math.pi)


def brute_newey_west(x, lags=3):
    """Bartlett-weighted HAC standard error written out term by term."""
    t = len(x)
    mean = sum(x) / t
    e = [xi - mean for xi in x]

    def gamma(lag):
        return sum(e[i] * e[i - lag] for i in range(lag, t)) / t

    var = gamma(0)
    for lag in range(1, lags + 1):
        var += 2 * (1 - lag / (lags + 1)) * gamma(lag)
    return math.sqrt(max(var / t, 0.0))


def brute_crps(samples, x):
    s = np.asarray(samples, dtype=np.float64)
    return np.mean(np.abs(s - x)) - 0.5 * np.mean(np.abs(s[:, None] - s[None, :]))


# -- CRPS -------------------------------------------------------------------------------


def test_perfect_and_point_forecasts():
    assert crps(np.full(10, 2.5), 2.5) == 0.0
    assert crps(np.full(10, 2.5 + 0.75), 2.5) == 0.75
    assert crps(np.full(7, -1.0), 3.0) == 4.0


def test_gaussian_closed_form():
    samples = np.random.default_rng(0).standard_normal(100_000)
    assert crps(samples, 0.0) == pytest.approx(GAUSSIAN_CRPS, abs=0.005)


def test_energy_and_quantile_forms_agree():
    rng = np.random.default_rng(1)
    for _ in range(5):
        samples = rng.normal(rng.normal(), rng.uniform(0.5, 2), size=4000)
        x = rng.normal()
        assert crps_quantile_form(samples, x) == pytest.approx(crps(samples, x), rel=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(-100, 100))
def test_crps_matches_pairwise_definition(samples, x):
    assert crps(samples, x) == pytest.approx(brute_crps(samples, x), abs=1e-9)
    assert crps(samples, x) >= -1e-12


def test_crps_needs_samples():
    with pytest.raises(ValueError):
        crps([], 0.0)


def test_normalized_crps_scales_by_series_level():
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(200, 4))
    truth = np.array([1.0, 3.0, -2.0, 2.0])
    series = np.array([0, 0, 1, 1])
    per = crps_matrix(samples, truth)
    expected = np.mean([per[0] / 2, per[1] / 2, per[2] / 2, per[3] / 2])
    assert normalized_crps(samples, truth, series) == pytest.approx(expected)


# -- CRPS-Sum ---------------------------------------------------------------------------


def test_crps_sum_single_series_equals_crps():
    rng = np.random.default_rng(3)
    samples = rng.normal(size=(300, 1, 4))
    truth = rng.normal(size=(1, 4))
    per_time = [crps(samples[:, 0, t], truth[0, t]) for t in range(4)]
    assert crps_sum(samples, truth) == pytest.approx(np.mean(per_time))


def test_crps_sum_blind_spot():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 3))
    samples = np.stack([x, -x], axis=1)
    truth = np.zeros((2, 3))
    assert crps_sum(samples, truth) == 0.0
    assert crps_matrix(samples[:, 0, :], truth[0]).min() > 0


def test_crps_sum_permutation_and_flat_form():
    rng = np.random.default_rng(5)
    samples = rng.normal(size=(50, 3, 4))
    truth = rng.normal(size=(3, 4))
    perm = [2, 0, 1]
    assert crps_sum(samples[:, perm], truth[perm]) == pytest.approx(crps_sum(samples, truth))
    flat = samples.reshape(50, 12)
    series = np.repeat(np.arange(3), 4)
    times = np.tile(np.arange(4), 3)
    assert crps_sum(flat, truth.ravel(), series=series, time_index=times) == pytest.approx(crps_sum(samples, truth))


def test_crps_sum_shape_errors():
    with pytest.raises(ValueError):
        crps_sum(np.zeros((5, 2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        crps_sum(np.zeros((5, 3)), np.zeros(3), series=np.array([0, 0, 1]), time_index=np.array([0, 1, 0]))


# -- energy score -------------------------------------------------------------------------


def test_energy_perfect_forecast():
    assert energy_score(np.tile([1.0, 2.0], (5, 1)), np.array([1.0, 2.0])) == 0.0


def test_energy_two_samples_by_hand():
    a, b, t = np.array([0.0, 1.0]), np.array([2.0, -1.0]), np.array([1.0, 1.0])
    expected = 0.5 * (np.linalg.norm(a - t) + np.linalg.norm(b - t)) - 0.5 * np.linalg.norm(a - b)
    assert energy_score(np.stack([a, b]), t) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    t = rng.normal(size=3)
    v = rng.normal(size=3) * 10
    assert energy_score(x + v, t + v) == pytest.approx(energy_score(x, t), abs=1e-9)
    assert energy_score(x, t) >= 0


def test_energy_errors():
    with pytest.raises(ValueError):
        energy_score(np.zeros((0, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        energy_score(np.zeros((3, 2)), np.zeros(3))


# -- Newey-West ---------------------------------------------------------------------------


def test_newey_west_constant_is_zero():
    assert newey_west_se(np.full(10, 3.5)) == 0.0


def test_newey_west_matches_brute_force():
    x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert newey_west_se(x) == pytest.approx(brute_newey_west(x), abs=1e-10)
    rng = np.random.default_rng(6)
    y = np.cumsum(rng.normal(size=50))
    assert newey_west_se(y) == pytest.approx(brute_newey_west(list(y)), abs=1e-10)


def test_newey_west_equals_classical_se_without_autocovariance():
    rng = np.random.default_rng(7)

    def residual(x):
        e = x - x.mean()
        return [e[lag:] @ e[:-lag] for lag in (1, 2, 3)] + [e @ e - len(x)]

    x = optimize.least_squares(residual, rng.normal(size=24), xtol=1e-15, ftol=1e-15, gtol=1e-15).x
    assert np.abs(residual(x)).max() < 1e-10
    classical = x.std() / math.sqrt(x.size)
    assert newey_west_se(x) == pytest.approx(classical, abs=1e-10)


def test_newey_west_truncates_long_lags():
    with pytest.warns(UserWarning, match="truncating"):
        value = newey_west_se([1.0, 3.0, 2.0], lags=5)
    assert value == pytest.approx(brute_newey_west([1.0, 3.0, 2.0], lags=2))
    with pytest.raises(ValueError):
        newey_west_se([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_newey_west_nonnegative(values):
    assert newey_west_se(values, lags=min(3, len(values) - 1)) >= 0


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba not installed")
def test_metric_kernels_agree_across_backends():
    rng = np.random.default_rng(8)
    s = rng.normal(size=(4, 100))
    t = rng.normal(size=4)
    np.testing.assert_allclose(_kernels.NUMBA_KERNELS["crps_rows"](s, t), _kernels.NUMPY_KERNELS["crps_rows"](s, t), atol=1e-12)
    x = rng.normal(size=(60, 3))
    assert _kernels.NUMBA_KERNELS["energy_score"](x, t[:3]) == pytest.approx(_kernels.NUMPY_KERNELS["energy_score"](x, t[:3]))
    y = rng.normal(size=40)
    assert _kernels.NUMBA_KERNELS["newey_west_var"](y, 3) == pytest.approx(_kernels.NUMPY_KERNELS["newey_west_var"](y, 3))


# -- reports ------------------------------------------------------------------------------


def test_report_mean_and_serialization(tmp_path):
    rep = MetricReport()
    rep.add(0.0, crps=1.0, crps_sum=0.5, energy=2.0, nll=-1.0)
    rep.add(1.0, crps=3.0, crps_sum=1.5, energy=4.0, nll=1.0)
    rep.add(2.0, crps=2.0, crps_sum=1.0, energy=3.0, nll=0.0)
    assert rep.mean("crps") == 2.0 and rep.mean("nll") == 0.0
    assert rep.se("crps") >= 0
    rep.to_json(tmp_path / "m.json")
    rep.to_csv(tmp_path / "m.csv")
    import csv
    import json

    loaded = json.loads((tmp_path / "m.json").read_text())
    assert loaded["schema"] == "metric-report/1"
    assert MetricReport.from_dict(loaded).values == rep.values
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [float(r["energy"]) for r in rows] == [2.0, 4.0, 3.0]
    table = results_table({"synthetic": rep})
    assert "| crps |" in table and "2.0000 ±" in table
