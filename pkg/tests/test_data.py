import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tscopula.data import (
    CsvParseError,
    CsvSchema,
    TaskKind,
    TaskSpec,
    TimeSeriesWindow,
    apply_task_mask,
    corrupt_unaligned,
    corrupt_uneven,
    de_standardize,
    gen_noisy_sines,
    load_csv,
    load_jsonl,
    read_long_csv,
    save_jsonl,
    slice_time_windows,
    split_train_validation,
    standardize,
)


def grid_window(n_series, length, seed=0):
    rng = np.random.default_rng(seed)
    return TimeSeriesWindow.from_grid(rng.normal(size=(n_series, length)))


# -- window type ---------------------------------------------------------------


def test_window_sorts_and_validates():
    w = TimeSeriesWindow([1, 0, 0], [0.0, 2.0, 1.0], [5.0, 2.0, 1.0])
    assert w.series.tolist() == [0, 0, 1]
    assert w.timestamps.tolist() == [1.0, 2.0, 0.0]
    with pytest.raises(ValueError, match="strictly increase"):
        TimeSeriesWindow([0, 0], [1.0, 1.0], [0.0, 0.0])


def test_window_is_immutable():
    w = grid_window(1, 3)
    with pytest.raises(AttributeError):
        w.values = np.zeros(3)
    with pytest.raises(ValueError):
        w.values[0] = 1.0


def test_covariate_width_is_constant():
    with pytest.raises(ValueError):
        TimeSeriesWindow([0, 0], [0.0, 1.0], [1.0, 2.0], covariates=np.zeros((3, 2)))


def test_tokens_carry_all_fields():
    w = TimeSeriesWindow([0, 0], [0.0, 1.0], [1.0, 2.0], covariates=[[0.5], [0.25]], mask=[True, False])
    tok = w.tokens[1]
    assert (tok.series_id, tok.timestamp, tok.value, tok.covariates, tok.mask) == (0, 1.0, 2.0, (0.25,), 0)


def test_jsonl_round_trip(tmp_path):
    ws = [apply_task_mask(grid_window(2, 6, s), TaskSpec(horizon=2)) for s in range(3)]
    save_jsonl(ws, tmp_path / "w.jsonl")
    assert load_jsonl(tmp_path / "w.jsonl") == ws


# -- task masks ----------------------------------------------------------------


def test_forecast_mask_single_series():
    w = apply_task_mask(grid_window(1, 5), TaskSpec(kind="forecast", horizon=2))
    assert w.mask.astype(int).tolist() == [1, 1, 1, 0, 0]


def test_interpolation_mask_single_series():
    w = apply_task_mask(grid_window(1, 6), TaskSpec(kind="interpolation", inner_range=(3, 4)))
    assert w.mask.astype(int).tolist() == [1, 1, 0, 0, 1, 1]


def test_forecast_two_series_counts():
    w = apply_task_mask(grid_window(2, 4), TaskSpec(horizon=1))
    assert w.d == 2


def test_centered_interpolation_has_equal_context():
    task = TaskSpec.centered_interpolation(prediction_length=4, context_each_side=3)
    w = apply_task_mask(grid_window(2, task.window_length), task)
    m = w.mask[w.series == 0]
    first, last = np.flatnonzero(~m)[[0, -1]]
    assert first == m.size - 1 - last == 3


def test_horizon_too_long_is_bounds_error():
    with pytest.raises(IndexError):
        apply_task_mask(grid_window(1, 3), TaskSpec(horizon=4))
    with pytest.raises(IndexError):
        apply_task_mask(grid_window(1, 3), TaskSpec(kind="interpolation", inner_range=(2, 4)))


def test_custom_mask_and_cutoff():
    w = grid_window(2, 3)
    mask = (1, 0, 1, 1, 1, 0)
    assert apply_task_mask(w, TaskSpec(kind=TaskKind.CUSTOM, mask=mask)).mask.astype(int).tolist() == list(mask)
    assert apply_task_mask(w, TaskSpec(cutoff=0.5)).d == 4


@settings(max_examples=40, deadline=None)
@given(
    n_series=st.integers(1, 4),
    length=st.integers(2, 12),
    data=st.data(),
)
def test_masking_idempotent_and_partitions(n_series, length, data):
    w = grid_window(n_series, length)
    if data.draw(st.booleans()):
        task = TaskSpec(horizon=data.draw(st.integers(1, length)))
    else:
        lo = data.draw(st.integers(1, length))
        task = TaskSpec(kind="interpolation", inner_range=(lo, data.draw(st.integers(lo, length))))
    once = apply_task_mask(w, task)
    assert apply_task_mask(once, task) == once
    obs, miss = once.partition
    assert np.intersect1d(obs, miss).size == 0
    assert np.union1d(obs, miss).tolist() == list(range(len(w)))


# -- normalization -------------------------------------------------------------


def test_standardize_two_values():
    w = TimeSeriesWindow([0, 0], [0.0, 1.0], [2.0, 4.0])
    out, state = standardize(w)
    np.testing.assert_allclose(out.values, [-1.0, 1.0])
    assert state.mean[0] == 3.0 and state.std[0] == 1.0


def test_standardize_constant_series_floors_std():
    out, state = standardize(TimeSeriesWindow.from_grid([[5.0, 5.0, 5.0]]))
    np.testing.assert_array_equal(out.values, 0.0)
    assert state.std[0] == 1e-8


def test_standardize_ignores_masked_values():
    w = TimeSeriesWindow([0, 0, 0], [0.0, 1.0, 2.0], [2.0, 4.0, 1e6], mask=[True, True, False])
    out, state = standardize(w)
    assert state.mean[0] == 3.0
    assert out.values[2] == pytest.approx((1e6 - 3.0) / 1.0)


def test_standardize_all_masked_series_errors():
    w = TimeSeriesWindow([0, 1], [0.0, 0.0], [1.0, 2.0], mask=[True, False])
    with pytest.raises(ValueError, match="no observed"):
        standardize(w)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20), st.integers(1, 3))
def test_standardize_round_trip(values, n_series):
    n_series = min(n_series, len(values))
    n = len(values) // n_series * n_series
    grid = np.asarray(values[:n]).reshape(n_series, -1)
    w = TimeSeriesWindow.from_grid(grid)
    out, state = standardize(w)
    np.testing.assert_allclose(de_standardize(out, state).values, w.values, atol=1e-10 * max(1.0, np.abs(grid).max()))


# -- generators and corruption -------------------------------------------------


def test_noisy_sines_noise_free_and_deterministic():
    w = gen_noisy_sines(2, 50, [0.05, 0.1], 0.0, seed=1, spacing="uneven+unaligned")
    f = np.where(w.series == 0, 0.05, 0.1)
    np.testing.assert_array_equal(w.values, np.sin(2 * np.pi * f * w.timestamps))
    assert gen_noisy_sines(2, 50, [0.05, 0.1], 0.3, seed=4) == gen_noisy_sines(2, 50, [0.05, 0.1], 0.3, seed=4)


def test_noisy_sines_frequency_ratio_from_autocorrelation():
    w = gen_noisy_sines(2, 400, [1 / 20, 1 / 10], 0.05, seed=0)
    grid = w.grid()

    def first_peak(x):
        x = x - x.mean()
        spec = np.abs(np.fft.rfft(x, 2 * x.size)) ** 2
        acf = np.fft.irfft(spec)[: x.size]
        lag = 2
        while not (acf[lag] > acf[lag - 1] and acf[lag] >= acf[lag + 1]):
            lag += 1
        return lag

    assert first_peak(grid[0]) / first_peak(grid[1]) == pytest.approx(2.0, abs=0.1)


def test_noisy_sines_rejects_bad_frequency():
    with pytest.raises(ValueError):
        gen_noisy_sines(1, 10, 0.0, 0.1, seed=0)


def test_uneven_with_unit_gap_is_noop():
    w = grid_window(2, 20)
    assert corrupt_uneven(w, 0, choices=(1,)) == w


def test_uneven_gaps_and_kept_fraction():
    w = grid_window(1, 300)
    out = corrupt_uneven(w, 3)
    gaps = np.diff(out.timestamps)
    assert set(gaps.tolist()) <= {1.0, 2.0, 3.0}
    assert len(out) / len(w) == pytest.approx(0.5, abs=0.05)


def test_unaligned_counts_and_difference():
    w = grid_window(2, 16)
    assert corrupt_unaligned(w, 0, factors=(1,)) == w
    assert len(corrupt_unaligned(grid_window(1, 16), 0, factors=(4,))) == 4
    for seed in range(50):
        out = corrupt_unaligned(w, seed)
        a, b = (set(out.timestamps[out.series == s].tolist()) for s in (0, 1))
        if len(a) != len(b):
            assert a != b
            break
    else:
        pytest.fail("no seed produced different draws")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 40))
def test_corruption_never_creates_tokens(seed, n_series, length):
    w = grid_window(n_series, length)
    for out in (corrupt_uneven(w, seed), corrupt_unaligned(w, seed)):
        before = set(zip(w.series.tolist(), w.timestamps.tolist(), w.values.tolist()))
        after = set(zip(out.series.tolist(), out.timestamps.tolist(), out.values.tolist()))
        assert after <= before


# -- CSV ingestion -----------------------------------------------------------------


def write_csv(path, n_steps=100, n_series=1):
    rows = ["series,timestamp,value"]
    for s in range(n_series):
        rows += [f"s{s},{t},{np.sin(t / 5 + s):.6f}" for t in range(n_steps)]
    path.write_text("\n".join(rows) + "\n")
    return path


def test_load_csv_window_length(tmp_path):
    schema = CsvSchema(prediction_length=10, history_ratio=3, reserve_validation=False)
    windows = load_csv(write_csv(tmp_path / "a.csv"), schema)
    assert windows and all(len(w) == 40 for w in windows)


def test_validation_reservation_excludes_tail(tmp_path):
    schema = CsvSchema(prediction_length=10, history_ratio=3, stride=1)
    full = read_long_csv(write_csv(tmp_path / "a.csv", n_steps=200), schema)
    split = split_train_validation(full, schema)
    assert max(w.timestamps.max() for w in split.train) == 129.0
    assert len(split.validation) == 7
    assert max(w.timestamps.max() for w in split.validation) == 199.0


def test_empty_csv_warns(tmp_path, caplog):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert load_csv(path, CsvSchema()) == []
    assert "no rows" in caplog.text


def test_csv_errors_report_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("series,timestamp,value\na,0,1\na,1,oops\n")
    with pytest.raises(CsvParseError, match="row 3"):
        read_long_csv(path, CsvSchema())
    path.write_text("series,timestamp,value\na,0,1\na,2,1\na,1,1\n")
    with pytest.raises(CsvParseError, match="row 4"):
        read_long_csv(path, CsvSchema())


def test_time_windows_on_irregular_data():
    w = gen_noisy_sines(2, 400, [0.05, 0.1], 0.1, seed=2, spacing="uneven+unaligned")
    windows = slice_time_windows(w, span=40.0, stride=20.0, horizon_span=10.0)
    assert windows
    for win in windows:
        assert win.timestamps.max() - win.timestamps.min() < 40.0
        for s in win.series_ids:
            m = win.mask[win.series == s]
            assert m.any() and (~m).any()
