"""Rolling-window evaluation with periodic retraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import CsvSchema, TaskKind, TaskSpec, apply_task_mask, split_train_validation
from .metrics import MetricReport, crps_sum, energy_score, normalized_crps
from .model import collate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BacktestSchedule:
    """Cutoffs are the first timestamp of each prediction window.

    ``retrain_every`` is the cadence: a new model is trained at cutoff 0 and
    then at every ``retrain_every``-th cutoff; the other cutoffs reuse the
    latest model.
    """

    cutoffs: tuple = ()
    prediction_length: int = 1
    history_ratio: int = 1
    retrain_every: int = 1
    task: str = "forecast"  # or "interpolation"
    n_samples: int = 100
    stride: int | None = None
    reserve_validation: bool = True
    validation_multiple: int = 7
    seed: int = 0

    def schema(self):
        return CsvSchema(
            prediction_length=self.prediction_length,
            history_ratio=self.history_ratio,
            stride=self.stride,
            reserve_validation=self.reserve_validation,
            validation_multiple=self.validation_multiple,
        )

    def task_spec(self):
        if self.task == "forecast":
            return TaskSpec(kind=TaskKind.FORECAST, horizon=self.prediction_length, history_ratio=self.history_ratio)
        if self.task == "interpolation":
            side = self.history_ratio * self.prediction_length // 2
            return TaskSpec.centered_interpolation(self.prediction_length, side)
        raise ValueError(f"unknown backtest task {self.task!r}")

    def context(self):
        """Observed positions before and after the prediction window."""
        if self.task == "forecast":
            return self.history_ratio * self.prediction_length, 0
        side = self.history_ratio * self.prediction_length // 2
        return side, side


def score_window(model, window, n_samples, rng):
    """All metrics for one masked window; NLL is per dimension in original units."""
    samples = model.predict_samples(window, n_samples, rng)
    miss = ~window.mask
    truth = window.values[miss]
    series = window.series[miss]
    times = window.timestamps[miss]
    out = {"crps": float("nan"), "crps_sum": float("nan"), "energy": float("nan")}
    if samples.shape[0] > 0:
        out["crps"] = normalized_crps(samples, truth, series)
        out["energy"] = energy_score(samples, truth)
        try:
            out["crps_sum"] = crps_sum(samples, truth, series=series, time_index=times, normalize=True)
        except ValueError:
            pass  # unaligned windows have no summed target
    batch = collate([model.prepare(window)])
    with torch.no_grad():
        out["nll"] = float(model.window_nll(batch, original_units=True)[0])
    return out, samples


def window_at(data, cutoff, before, after, horizon):
    """Slice ``before`` positions ahead of ``cutoff``, ``horizon`` from it, then ``after``."""
    parts = []
    for s in data.series_ids:
        sel = np.flatnonzero(data.series == s)
        t = data.timestamps[sel]
        start = int(np.searchsorted(t, cutoff, side="left"))
        lo, hi = start - before, start + horizon + after
        if lo < 0 or hi > sel.size:
            return None
        parts.append(sel[lo:hi])
    return data.select(np.concatenate(parts))


def backtest(model_factory, data, schedule, return_samples=False):
    """Evaluate ``model_factory``-built models at every cutoff of ``schedule``.

    ``model_factory(split, cutoff)`` receives a :class:`DatasetSplit` built
    only from data strictly before the evaluation window and returns a
    trained model.  Cutoffs with too little history or future data are
    skipped and listed in ``report.skipped``.
    """
    report = MetricReport()
    samples_out = []
    rng = np.random.default_rng(schedule.seed)
    task = schedule.task_spec()
    before, after = schedule.context()
    model = None
    for k, cutoff in enumerate(schedule.cutoffs):
        window = window_at(data, cutoff, before, after, schedule.prediction_length)
        if window is None:
            report.skipped.append({"cutoff": float(cutoff), "reason": "insufficient history or horizon"})
            logger.warning("skipping cutoff %s: not enough data", cutoff)
            continue
        window = apply_task_mask(window, task)
        window_start = float(window.timestamps.min())
        # training data ends before the evaluation window starts, so the
        # interpolation context after the gap never appears in training
        limit = cutoff if schedule.task == "forecast" else window_start
        if model is None or k % schedule.retrain_every == 0:
            history = data.time_slice(stop=limit)
            split = split_train_validation(history, schedule.schema())
            split.train = [apply_task_mask(w, task) for w in split.train]
            split.validation = [apply_task_mask(w, task) for w in split.validation]
            if not split.train:
                report.skipped.append({"cutoff": float(cutoff), "reason": "no training windows"})
                logger.warning("skipping cutoff %s: no training windows", cutoff)
                continue
            model = model_factory(split, cutoff)
        scores, samples = score_window(model, window, schedule.n_samples, rng)
        report.add(float(cutoff), **scores)
        samples_out.append(samples)
    if not schedule.cutoffs:
        logger.warning("backtest schedule has no cutoffs")
    return (report, samples_out) if return_samples else report
