"""Data model for masked, possibly unaligned multivariate series.

A :class:`TimeSeriesWindow` is a flat set of tokens ``(series, timestamp,
value, covariates, mask)`` stored as numpy arrays in series-major,
time-ascending order.  ``mask == True`` marks an observed token, ``False`` a
token whose value has to be inferred.  Windows are immutable: every
transformation returns a new window.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class Token(NamedTuple):
    series_id: int
    timestamp: float
    value: float
    covariates: tuple
    mask: int


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class TimeSeriesWindow:
    """Ragged multivariate window of tokens."""

    __slots__ = ("series", "timestamps", "values", "covariates", "mask")

    def __init__(self, series, timestamps, values, covariates=None, mask=None, *, sort=True):
        series = np.asarray(series, dtype=np.int64).ravel()
        timestamps = np.asarray(timestamps, dtype=np.float64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        n = series.shape[0]
        if timestamps.shape[0] != n or values.shape[0] != n:
            raise ValueError("series, timestamps and values must have the same length")
        if covariates is None:
            covariates = np.zeros((n, 0))
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim == 1:
            covariates = covariates.reshape(n, -1) if n else np.zeros((0, 0))
        if covariates.shape[0] != n:
            raise ValueError("covariates must have one row per token")
        mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
        if mask.shape[0] != n:
            raise ValueError("mask must have one entry per token")
        if sort and n:
            order = np.lexsort((timestamps, series))
            series, timestamps, values = series[order], timestamps[order], values[order]
            covariates, mask = covariates[order], mask[order]
        if n > 1:
            same = series[1:] == series[:-1]
            if np.any(same & (np.diff(timestamps) <= 0)):
                raise ValueError("timestamps must strictly increase within each series")
        object.__setattr__(self, "series", _frozen(series, np.int64))
        object.__setattr__(self, "timestamps", _frozen(timestamps, np.float64))
        object.__setattr__(self, "values", _frozen(values, np.float64))
        object.__setattr__(self, "covariates", _frozen(covariates, np.float64))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    def __setattr__(self, name, value):
        raise AttributeError("TimeSeriesWindow is immutable")

    @classmethod
    def from_grid(cls, values, timestamps=None, covariates=None, series_ids=None):
        """Build an aligned window from a ``(n_series, length)`` value grid."""
        values = np.asarray(values, dtype=np.float64)
        n, length = values.shape
        if timestamps is None:
            timestamps = np.arange(length, dtype=np.float64)
        timestamps = np.broadcast_to(np.asarray(timestamps, dtype=np.float64), (n, length))
        ids = np.arange(n) if series_ids is None else np.asarray(series_ids)
        series = np.repeat(ids, length)
        cov = None
        if covariates is not None:
            covariates = np.asarray(covariates, dtype=np.float64)
            cov = covariates.reshape(n * length, -1)
        return cls(series, timestamps.ravel(), values.ravel(), cov)

    # -- basic views -------------------------------------------------------
    def __len__(self):
        return self.series.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesWindow):
            return NotImplemented
        return (
            np.array_equal(self.series, other.series)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.mask, other.mask)
        )

    def __repr__(self):
        return f"TimeSeriesWindow(n_series={self.n_series}, tokens={len(self)}, missing={self.d})"

    @property
    def tokens(self):
        return [
            Token(int(s), float(t), float(v), tuple(c), int(m))
            for s, t, v, c, m in zip(self.series, self.timestamps, self.values, self.covariates, self.mask)
        ]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def series_ids(self):
        return np.unique(self.series)

    @property
    def n_series(self):
        return int(self.series_ids.size)

    @property
    def observed_idx(self):
        return np.flatnonzero(self.mask)

    @property
    def missing_idx(self):
        return np.flatnonzero(~self.mask)

    @property
    def partition(self):
        return self.observed_idx, self.missing_idx

    @property
    def d(self):
        """Number of missing tokens (dimension of the predicted joint)."""
        return int((~self.mask).sum())

    def positions(self):
        """0-based index of every token within its own series."""
        pos = np.zeros(len(self), dtype=np.int64)
        if len(self):
            starts = np.r_[0, np.flatnonzero(np.diff(self.series)) + 1]
            for start, stop in zip(starts, np.r_[starts[1:], len(self)]):
                pos[start:stop] = np.arange(stop - start)
        return pos

    def series_lengths(self):
        ids, counts = np.unique(self.series, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def with_mask(self, mask):
        return TimeSeriesWindow(self.series, self.timestamps, self.values, self.covariates, mask, sort=False)

    def with_values(self, values):
        return TimeSeriesWindow(self.series, self.timestamps, values, self.covariates, self.mask, sort=False)

    def select(self, idx):
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return TimeSeriesWindow(
            self.series[idx], self.timestamps[idx], self.values[idx], self.covariates[idx], self.mask[idx], sort=False
        )

    def time_slice(self, start=-np.inf, stop=np.inf):
        """Tokens with ``start <= t < stop``."""
        return self.select((self.timestamps >= start) & (self.timestamps < stop))

    def position_slice(self, start, stop):
        """Tokens whose per-series position lies in ``[start, stop)``."""
        pos = self.positions()
        return self.select((pos >= start) & (pos < stop))

    def grid(self, field_name="values"):
        """Return ``field_name`` as an ``(n_series, length)`` grid (aligned windows only)."""
        lengths = set(self.series_lengths().values())
        if len(lengths) != 1:
            raise ValueError("window is not aligned")
        return getattr(self, field_name).reshape(self.n_series, -1)

    # -- serialization -----------------------------------------------------
    def to_record(self):
        return {
            "schema": "window/1",
            "series": self.series.tolist(),
            "timestamps": self.timestamps.tolist(),
            "values": self.values.tolist(),
            "covariates": self.covariates.tolist(),
            "n_covariates": self.n_covariates,
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_record(cls, rec):
        if rec.get("schema") != "window/1":
            raise ValueError(f"unsupported window schema {rec.get('schema')!r}")
        n = len(rec["series"])
        cov = np.asarray(rec["covariates"], dtype=np.float64).reshape(n, rec.get("n_covariates", 0))
        return cls(rec["series"], rec["timestamps"], rec["values"], cov, rec["mask"], sort=False)


def save_jsonl(windows, path):
    with open(path, "w") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_record()) + "\n")


def load_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(TimeSeriesWindow.from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


class TaskKind(str, Enum):
    FORECAST = "forecast"
    INTERPOLATION = "interpolation"
    CUSTOM = "custom-mask"


@dataclass(frozen=True)
class TaskSpec:
    """What to predict inside a window.

    ``forecast`` masks the last ``horizon`` positions of every series (or,
    with ``cutoff`` set, every token with ``t > cutoff``).  ``interpolation``
    masks 1-based positions ``inner_range[0]..inner_range[1]`` inclusive.
    ``custom-mask`` uses ``mask`` verbatim.
    """

    kind: TaskKind = TaskKind.FORECAST
    horizon: int | None = None
    inner_range: tuple | None = None
    history_ratio: int = 1
    cutoff: float | None = None
    mask: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.history_ratio < 1:
            raise ValueError("history_ratio must be a positive integer")

    @classmethod
    def centered_interpolation(cls, prediction_length, context_each_side):
        """Interpolation window with equal observed context before and after."""
        k = context_each_side + 1
        return cls(kind=TaskKind.INTERPOLATION, inner_range=(k, k + prediction_length - 1))

    @property
    def window_length(self):
        """Tokens per series needed for one window of this task."""
        if self.kind == TaskKind.FORECAST and self.horizon:
            return self.horizon * (self.history_ratio + 1)
        if self.kind == TaskKind.INTERPOLATION:
            lo, hi = self.inner_range
            return hi + (lo - 1)
        raise ValueError("window length undefined for this task")


def apply_task_mask(window, task):
    """Return ``window`` with mask bits set for ``task``."""
    pos = window.positions()
    lengths = window.series_lengths()
    length_of = np.array([lengths[s] for s in window.series.tolist()], dtype=np.int64)
    if task.kind == TaskKind.FORECAST:
        if task.cutoff is not None:
            mask = window.timestamps <= task.cutoff
        else:
            k = task.horizon
            if k is None or k < 1:
                raise ValueError("forecast horizon must be >= 1")
            if any(k > n for n in lengths.values()):
                raise IndexError(f"horizon {k} exceeds series length {min(lengths.values())}")
            mask = pos < length_of - k
    elif task.kind == TaskKind.INTERPOLATION:
        lo, hi = task.inner_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid interpolation range {task.inner_range}")
        if any(hi > n for n in lengths.values()):
            raise IndexError(f"interpolation range {task.inner_range} exceeds series length")
        mask = ~((pos + 1 >= lo) & (pos + 1 <= hi))
    else:
        if task.mask is None or len(task.mask) != len(window):
            raise ValueError("custom-mask task needs one mask bit per token")
        mask = np.asarray(task.mask, dtype=bool)
    return window.with_mask(mask)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationState:
    series_ids: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def _lookup(self, series):
        idx = np.searchsorted(self.series_ids, series)
        if np.any(idx >= self.series_ids.size) or np.any(self.series_ids[np.minimum(idx, self.series_ids.size - 1)] != series):
            raise KeyError("series not covered by this normalization state")
        return idx

    def normalize(self, values, series):
        idx = self._lookup(np.asarray(series))
        return (np.asarray(values) - self.mean[idx]) / self.std[idx]

    def denormalize(self, values, series):
        idx = self._lookup(np.asarray(series))
        return np.asarray(values) * self.std[idx] + self.mean[idx]

    def log_scale(self, series):
        """``log std`` per token: the Jacobian term between normalized and original units."""
        return np.log(self.std[self._lookup(np.asarray(series))])

    def to_dict(self):
        return {"series_ids": self.series_ids.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["series_ids"]), np.asarray(d["mean"]), np.asarray(d["std"]))

    @classmethod
    def identity(cls, series_ids):
        ids = np.asarray(sorted(set(np.asarray(series_ids).tolist())), dtype=np.int64)
        return cls(ids, np.zeros(ids.size), np.ones(ids.size))


def standardize(window):
    """Per-series standardization using observed tokens only (population std)."""
    ids = window.series_ids
    mean = np.empty(ids.size)
    std = np.empty(ids.size)
    for k, s in enumerate(ids):
        sel = (window.series == s) & window.mask
        if not sel.any():
            raise ValueError(f"series {s} has no observed tokens; cannot standardize")
        vals = window.values[sel]
        mean[k] = vals.mean()
        std[k] = max(vals.std(), STD_FLOOR)
    state = NormalizationState(ids, mean, std)
    return window.with_values(state.normalize(window.values, window.series)), state


def de_standardize(window, state):
    return window.with_values(state.denormalize(window.values, window.series))


# ---------------------------------------------------------------------------
# corruption processes (delete tokens, never mask them)
# ---------------------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def corrupt_uneven(window, seed, choices=(1, 2, 3)):
    """Per series, keep position 0 then jump ``delta ~ U{choices}`` positions at a time."""
    rng = _rng(seed)
    keep = np.zeros(len(window), dtype=bool)
    for s in window.series_ids:
        sel = np.flatnonzero(window.series == s)
        n = sel.size
        j = 0
        kept = []
        while j < n:
            kept.append(j)
            j += int(rng.choice(choices))
        keep[sel[np.asarray(kept)]] = True
    return window.select(keep)


def corrupt_unaligned(window, seed, factors=(1, 2, 4)):
    """Per series, subsample at the original, half or quarter frequency."""
    rng = _rng(seed)
    pos = window.positions()
    keep = np.zeros(len(window), dtype=bool)
    for s in window.series_ids:
        sel = window.series == s
        factor = int(rng.choice(factors))
        keep |= sel & (pos % factor == 0)
    return window.select(keep)


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def gen_noisy_sines(
    n_series,
    length,
    frequency_spec,
    noise_std,
    seed,
    amplitude=1.0,
    phase=0.0,
    dt=1.0,
    spacing="regular",
):
    """Sinusoids ``amplitude * sin(2 pi f t + phase)`` plus Gaussian noise.

    ``frequency_spec`` is a scalar or one frequency per series (cycles per unit
    time).  ``spacing`` is ``regular``, ``uneven``, ``unaligned`` or
    ``uneven+unaligned``; irregular grids are produced by the corruption
    processes on an evenly sampled base grid with spacing ``dt``.
    """
    freqs = np.broadcast_to(np.asarray(frequency_spec, dtype=np.float64), (n_series,))
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    amp = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n_series,))
    ph = np.broadcast_to(np.asarray(phase, dtype=np.float64), (n_series,))
    rng = np.random.default_rng(seed)
    t = np.arange(length) * dt
    clean = amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + ph[:, None])
    values = clean + noise_std * rng.standard_normal(clean.shape) if noise_std > 0 else clean
    window = TimeSeriesWindow.from_grid(values, t)
    parts = set(spacing.split("+")) if spacing != "regular" else set()
    unknown = parts - {"uneven", "unaligned"}
    if unknown:
        raise ValueError(f"unknown spacing {spacing!r}")
    if "uneven" in parts:
        window = corrupt_uneven(window, rng)
    if "unaligned" in parts:
        window = corrupt_unaligned(window, rng)
    return window


def gen_factor_sines(n_series, length, seed, period_range=(8.0, 24.0), factor_std=0.6, factor_ar=0.9,
                     noise_std=0.15, loading_range=(0.5, 1.5)):
    """Sines sharing a common AR(1) factor; gives cross-series and temporal dependence.

    ``x_i(t) = sin(2 pi t / P_i + phase_i) + loading_i * f(t) + eps_i(t)``
    with ``f`` a stationary AR(1) process of standard deviation ``factor_std``.
    Periods, phases and loadings are drawn once per call.
    """
    rng = np.random.default_rng(seed)
    periods = rng.uniform(*period_range, size=n_series)
    phases = rng.uniform(0, 2 * np.pi, size=n_series)
    loadings = rng.uniform(*loading_range, size=n_series)
    t = np.arange(length, dtype=np.float64)
    innov = factor_std * math.sqrt(1 - factor_ar**2)
    f = np.empty(length)
    f[0] = factor_std * rng.standard_normal()
    eps = rng.standard_normal(length)
    for i in range(1, length):
        f[i] = factor_ar * f[i - 1] + innov * eps[i]
    values = (
        np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])
        + loadings[:, None] * f[None, :]
        + noise_std * rng.standard_normal((n_series, length))
    )
    return TimeSeriesWindow.from_grid(values, t)


# ---------------------------------------------------------------------------
# CSV ingestion and windowing
# ---------------------------------------------------------------------------


class CsvParseError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    series_col: str = "series"
    timestamp_col: str = "timestamp"
    value_col: str = "value"
    covariate_cols: tuple = ()
    prediction_length: int = 1
    history_ratio: int = 1
    stride: int | None = None
    reserve_validation: bool = True
    validation_multiple: int = 7


def read_long_csv(path, schema):
    """Parse a long-format CSV into a single window holding every series."""
    series, times, values, covs = [], [], [], []
    ids = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return None
        needed = [schema.series_col, schema.timestamp_col, schema.value_col, *schema.covariate_cols]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise CsvParseError(f"missing columns {missing}")
        last_t = {}
        for rowno, row in enumerate(reader, start=2):
            try:
                key = row[schema.series_col]
                t = float(row[schema.timestamp_col])
                v = float(row[schema.value_col])
                c = [float(row[col]) for col in schema.covariate_cols]
            except (TypeError, ValueError) as exc:
                raise CsvParseError(f"row {rowno}: {exc}") from exc
            sid = ids.setdefault(key, len(ids))
            if sid in last_t and t <= last_t[sid]:
                raise CsvParseError(f"row {rowno}: timestamp {t} not increasing for series {key!r}")
            last_t[sid] = t
            series.append(sid)
            times.append(t)
            values.append(v)
            covs.append(c)
    if not series:
        return None
    return TimeSeriesWindow(series, times, values, np.asarray(covs, dtype=np.float64).reshape(len(series), -1))


def slice_windows(full, length, stride, stop=None, start=0):
    """Cut windows of ``length`` positions per series, ending at or before ``stop``."""
    lengths = full.series_lengths()
    limit = min(lengths.values()) if stop is None else stop
    out = []
    for s0 in range(start, limit - length + 1, stride):
        out.append(full.position_slice(s0, s0 + length))
    return out


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)


def split_train_validation(full, schema):
    """Training windows plus validation windows from the reserved tail.

    The last ``validation_multiple * prediction_length`` positions are kept
    out of training; validation windows are the non-overlapping prediction
    windows that fit in that tail, each with its own history in front.
    """
    pl = schema.prediction_length
    length = pl * (schema.history_ratio + 1)
    stride = schema.stride or pl
    total = min(full.series_lengths().values())
    reserve = schema.validation_multiple * pl if schema.reserve_validation else 0
    train_stop = total - reserve
    split = DatasetSplit(train=slice_windows(full, length, stride, stop=train_stop))
    if reserve:
        for k in range(schema.validation_multiple):
            end = train_stop + (k + 1) * pl
            if end - length >= 0 and end <= total:
                split.validation.append(full.position_slice(end - length, end))
    return split


def slice_time_windows(full, span, stride, horizon_span, start=None, stop=None):
    """Forecast windows cut by time rather than by position.

    Each window holds the tokens with ``t0 <= t < t0 + span``; tokens with
    ``t >= t0 + span - horizon_span`` are masked.  Windows where some series
    has no observed token or no missing token are dropped, which makes this
    the slicer of choice for uneven or unaligned data.
    """
    t_lo = full.timestamps.min() if start is None else start
    t_hi = full.timestamps.max() if stop is None else stop
    out = []
    t0 = t_lo
    ids = full.series_ids
    while t0 + span <= t_hi + 1e-12:
        w = full.time_slice(t0, t0 + span)
        observed = w.timestamps < t0 + span - horizon_span
        w = w.with_mask(observed)
        ok = len(w) > 0 and all(
            np.any(observed[w.series == s]) and np.any(~observed[w.series == s]) for s in ids
        )
        if ok:
            out.append(w)
        t0 += stride
    return out


def load_csv(path, schema):
    """Read a long-format CSV and return its training windows."""
    full = read_long_csv(path, schema)
    if full is None:
        logger.warning("%s contains no rows", path)
        return []
    return split_train_validation(full, schema).train
