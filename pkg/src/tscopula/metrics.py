"""Proper scoring rules and the Newey-West standard error of a mean."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

METRICS = ("crps", "crps_sum", "energy", "nll")


def crps(samples, x_star):
    """Sample CRPS, ``E|X - x*| - 0.5 E|X - X'|`` under the empirical distribution.

    This equals the quantile-integral definition evaluated on the empirical
    CDF of ``samples`` and runs in O(m log m).
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("crps needs at least one sample")
    return float(_kernels.crps_rows(s[None, :], np.array([float(x_star)]))[0])


def crps_quantile_form(samples, x_star, n_levels=1999):
    """Discretised quantile-integral CRPS (independent check on :func:`crps`)."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    q = np.arange(1, n_levels + 1) / (n_levels + 1)
    fq = np.quantile(s, q, method="inverted_cdf")
    diff = fq - x_star
    return float(2.0 * np.mean(((diff > 0).astype(np.float64) - q) * diff))


def crps_matrix(samples, truth):
    """Per-variable CRPS for joint samples of shape ``(m, d)`` against ``truth`` ``(d,)``."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != truth.shape[0]:
        raise ValueError(f"shape mismatch: samples {samples.shape}, truth {truth.shape}")
    if samples.shape[0] == 0:
        raise ValueError("crps needs at least one sample")
    return _kernels.crps_rows(samples.T, truth)


def normalized_crps(samples, truth, series):
    """Mean CRPS where each series is scaled by the mean |ground truth| of that series."""
    per_var = crps_matrix(samples, truth)
    series = np.asarray(series)
    out = []
    for s in np.unique(series):
        idx = series == s
        scale = np.mean(np.abs(truth[idx]))
        out.append(per_var[idx] / scale if scale > 0 else per_var[idx])
    return float(np.mean(np.concatenate(out)))


def crps_sum(samples, truth, series=None, time_index=None, normalize=False):
    """CRPS of the across-series sums.

    ``samples`` is either ``(m, n_series, n_time)`` with ``truth`` of shape
    ``(n_series, n_time)``, or flat ``(m, d)`` with per-variable ``series`` and
    ``time_index`` labels on an aligned grid.  With ``normalize`` the result
    is divided by the mean absolute ground-truth sum.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim == 2:
        if series is None or time_index is None:
            raise ValueError("flat samples need series and time_index labels")
        samples, truth = _to_grid(samples, truth, np.asarray(series), np.asarray(time_index))
    if samples.ndim != 3 or samples.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch: samples {samples.shape}, truth {truth.shape}")
    sum_samples = samples.sum(axis=1)  # (m, n_time)
    sum_truth = truth.sum(axis=0)
    per_time = crps_matrix(sum_samples, sum_truth)
    value = float(per_time.mean())
    if normalize:
        scale = float(np.mean(np.abs(sum_truth)))
        if scale > 0:
            value /= scale
    return value


def _to_grid(samples, truth, series, time_index):
    ids = np.unique(series)
    times = np.unique(time_index)
    if ids.size * times.size != series.size:
        raise ValueError("crps_sum needs aligned series x time grids")
    grid_s = np.empty((samples.shape[0], ids.size, times.size))
    grid_t = np.empty((ids.size, times.size))
    si = np.searchsorted(ids, series)
    ti = np.searchsorted(times, time_index)
    grid_s[:, si, ti] = samples
    grid_t[si, ti] = truth
    return grid_s, grid_t


def energy_score(samples, x_star):
    """Energy score with beta = 1; the spread term averages all distinct pairs."""
    samples = np.asarray(samples, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64).ravel()
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise ValueError("energy score needs at least one sample")
    if samples.shape[1] != x_star.shape[0]:
        raise ValueError(f"shape mismatch: samples {samples.shape}, truth {x_star.shape}")
    return float(_kernels.energy_score(samples, x_star))


def newey_west_se(values, lags=3):
    """HAC standard error of the mean with Bartlett weights ``1 - l / (lags + 1)``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("newey_west_se needs at least two values")
    if lags >= x.size:
        warnings.warn(f"lags={lags} >= length {x.size}; truncating to {x.size - 1}", stacklevel=2)
        lags = x.size - 1
    var = _kernels.newey_west_var(x, lags)
    return float(np.sqrt(max(var, 0.0)))


@dataclass
class MetricReport:
    """Per-window metric values with means and Newey-West standard errors."""

    windows: list = field(default_factory=list)  # cutoff labels
    values: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    skipped: list = field(default_factory=list)

    def add(self, label, **metric_values):
        self.windows.append(label)
        for name in METRICS:
            self.values[name].append(float(metric_values.get(name, np.nan)))

    def __len__(self):
        return len(self.windows)

    def mean(self, name):
        vals = np.asarray(self.values[name], dtype=np.float64)
        return float(vals.mean()) if vals.size else float("nan")

    def se(self, name, lags=3):
        vals = np.asarray(self.values[name], dtype=np.float64)
        if vals.size < 2:
            return 0.0 if vals.size == 1 else float("nan")
        return newey_west_se(vals, lags=min(lags, vals.size - 1))

    def summary(self):
        return {name: {"mean": self.mean(name), "se": self.se(name)} for name in METRICS}

    def to_dict(self):
        return {"schema": "metric-report/1", **asdict(self), "summary": self.summary()}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=True)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window", *METRICS])
            for i, label in enumerate(self.windows):
                writer.writerow([label, *(self.values[m][i] for m in METRICS)])

    @classmethod
    def from_dict(cls, data):
        return cls(windows=list(data["windows"]), values={k: list(v) for k, v in data["values"].items()},
                   skipped=list(data.get("skipped", [])))


def results_table(reports):
    """Render ``{dataset: MetricReport}`` as a metric x dataset "mean ± se" table."""
    names = list(reports)
    lines = ["| metric | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for metric in METRICS:
        cells = []
        for name in names:
            rep = reports[name]
            cells.append(f"{rep.mean(metric):.4f} ± {rep.se(metric):.4f}")
        lines.append(f"| {metric} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
