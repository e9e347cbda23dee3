"""Synthetic experiments used by the CLI and the acceptance suite.

Each runner is a plain function of its configuration and seed and returns a
JSON-serializable summary plus the trained models.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import stats

from .data import (
    CsvSchema,
    DatasetSplit,
    TaskSpec,
    apply_task_mask,
    corrupt_unaligned,
    corrupt_uneven,
    gen_factor_sines,
    gen_noisy_sines,
    slice_time_windows,
    split_train_validation,
)
from .model import ModelConfig
from .oracle import (
    GROUND_TRUTH,
    binned_copula_nll_bound,
    ground_truth_nll,
    points_to_windows,
    sample_ground_truth_with_density,
)
from .training import (
    StageConfig,
    TrainConfig,
    evaluate_nll,
    flops_to_reach,
    train_curriculum,
    train_joint_ablation,
)

logger = logging.getLogger(__name__)


def _train(mode, split, train_config, model_config):
    if mode == "curriculum":
        return train_curriculum(split, train_config, model_config)
    if mode == "joint":
        return train_joint_ablation(split, train_config, model_config)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# bivariate copula recovery
# ---------------------------------------------------------------------------


def oracle_model_config(**overrides):
    base = ModelConfig(
        max_series=2,
        encoder_layers=1,
        encoder_heads=2,
        encoder_head_dim=8,
        flow_layers=2,
        flow_hidden=16,
        hypernet_dim=32,
        copula_layers=1,
        copula_heads=2,
        copula_head_dim=8,
        copula_mlp_dim=64,
        n_bins=50,
        normalization="global",
    )
    return replace(base, **overrides)


def oracle_train_config(seed=0, **overrides):
    base = TrainConfig(
        batch_size=256,
        batches_per_epoch=100,
        patience=6,
        seed=seed,
        val_batch_size=2048,
        stage1=StageConfig(lr=3e-3, max_epochs=60, max_wall_clock=420),
        stage2=StageConfig(lr=2e-3, max_epochs=60, max_wall_clock=420),
        joint=StageConfig(lr=3e-3, max_epochs=120, max_wall_clock=840),
    )
    return replace(base, **overrides)


@dataclass
class OracleData:
    train: list
    validation: list
    test: list
    test_points: np.ndarray
    test_exact_logpdf: np.ndarray


def make_oracle_data(n_train=100_000, n_val=5_000, n_test=20_000, seed=0):
    pts, _ = sample_ground_truth_with_density(n_train + n_val, seed)
    test_pts, test_lp = sample_ground_truth_with_density(n_test, seed + 10_000)
    windows = points_to_windows(pts)
    return OracleData(windows[:n_train], windows[n_train:], points_to_windows(test_pts), test_pts, test_lp)


def ks_uniform(u):
    """Per-column KS statistic against U(0, 1)."""
    u = np.asarray(u)
    return [float(stats.kstest(u[:, j], "uniform").statistic) for j in range(u.shape[1])]


def run_copula_recovery(mode="curriculum", data=None, seed=0, model_config=None, train_config=None, n_copula_samples=10_000):
    data = data or make_oracle_data(seed=seed)
    model_config = model_config or oracle_model_config()
    train_config = train_config or oracle_train_config(seed)
    started = time.perf_counter()
    result = _train(mode, DatasetSplit(data.train, data.validation), train_config, model_config)
    model = result.model
    elapsed = time.perf_counter() - started
    prepared = [model.prepare(w) for w in data.test]
    per_dim = evaluate_nll(model, prepared, batch_size=4096, original_units=True)
    model_nll = 2.0 * per_dim  # the oracle reports NLL per bivariate point
    rng = np.random.default_rng(seed + 1)
    u = model.sample_copula(data.test[0], n_copula_samples, rng)
    ks = ks_uniform(u)
    exact_nll = float(-np.mean(data.test_exact_logpdf))
    pointwise_nll, flags = ground_truth_nll(data.test_points, return_flags=True)
    uv_true = GROUND_TRUTH.to_unit(data.test_points)
    summary = {
        "mode": mode,
        "seed": seed,
        "train_seconds": elapsed,
        "model_nll": model_nll,
        "ground_truth_nll_exact": exact_nll,
        "ground_truth_nll_pointwise": pointwise_nll,
        "pointwise_floored_fraction": float(np.mean(flags)),
        "histogram_resolution_nll": binned_copula_nll_bound(uv_true, model_config.n_bins)
        + float(-np.mean(GROUND_TRUTH.marginal_logpdf(data.test_points))),
        "gap_exact": model_nll - exact_nll,
        "ks": ks,
        "best_val": result.best_val,
        "stop_reason": result.stop_reason,
        "total_flops": result.ledger.total,
    }
    return summary, result


# ---------------------------------------------------------------------------
# forecasting (FLOP efficiency) and interpolation on factor sines
# ---------------------------------------------------------------------------


def forecast_model_config(n_series=10, **overrides):
    base = ModelConfig(
        max_series=n_series,
        encoder_layers=2,
        encoder_heads=2,
        encoder_head_dim=8,
        flow_layers=2,
        flow_hidden=8,
        hypernet_dim=32,
        copula_layers=1,
        copula_heads=2,
        copula_head_dim=8,
        copula_mlp_dim=32,
        n_bins=20,
    )
    return replace(base, **overrides)


def forecast_train_config(seed=0, **overrides):
    base = TrainConfig(
        batch_size=16,
        batches_per_epoch=25,
        patience=8,
        seed=seed,
        stage1=StageConfig(lr=3e-3, max_epochs=60, max_wall_clock=300),
        stage2=StageConfig(lr=3e-3, max_epochs=60, max_wall_clock=300),
        joint=StageConfig(lr=3e-3, max_epochs=120, max_wall_clock=600),
    )
    return replace(base, **overrides)


def make_panel_split(task, n_series=10, length=600, seed=0, prediction_length=5, history_ratio=3, stride=1,
                     n_test_windows=20, validation_multiple=7, **gen_kwargs):
    """Train/validation/test windows cut from one factor-sines panel.

    The last ``n_test_windows`` non-overlapping windows are held out for
    testing; the validation windows come from the reserved tail in front of
    them.
    """
    full = gen_factor_sines(n_series, length, seed, **gen_kwargs)
    win_len = prediction_length * (history_ratio + 1)
    test_start = length - n_test_windows * win_len
    test = [full.position_slice(s, s + win_len) for s in range(test_start, length - win_len + 1, win_len)]
    head = full.position_slice(0, test_start)
    split = split_train_validation(head, CsvSchema(
        prediction_length=prediction_length, history_ratio=history_ratio, stride=stride,
        validation_multiple=validation_multiple,
    ))
    mask = lambda ws: [apply_task_mask(w, task) for w in ws]  # noqa: E731
    return DatasetSplit(mask(split.train), mask(split.validation)), mask(test)


def criterion3_configs(seed=0):
    """Model, training and panel settings for the FLOP-efficiency comparison.

    The shared factor is strong and only weakly predictable from history
    (AR coefficient 0.5), so most of the attainable likelihood gain comes from
    cross-series dependence in the forecast horizon.
    """
    panel = dict(length=2000, validation_multiple=40, prediction_length=3, factor_ar=0.5, factor_std=1.0,
                 noise_std=0.1)
    # the copula loss sits on a plateau for 10-30 epochs before it drops, so
    # stage 2 and the joint run get a long patience; the marginal curve is flat
    train = forecast_train_config(
        seed,
        patience=25,
        stage1=StageConfig(lr=3e-3, max_epochs=200, max_wall_clock=300, patience=4),
        stage2=StageConfig(lr=3e-3, max_epochs=200, max_wall_clock=300),
        joint=StageConfig(lr=3e-3, max_epochs=400, max_wall_clock=600),
    )
    return forecast_model_config(10), train, panel


def run_forecast_efficiency(seed=0, n_series=10, model_config=None, train_config=None, **panel_kwargs):
    task = TaskSpec(horizon=panel_kwargs.get("prediction_length", 5), history_ratio=panel_kwargs.get("history_ratio", 3))
    split, test = make_panel_split(task, n_series=n_series, seed=seed, **panel_kwargs)
    model_config = model_config or forecast_model_config(n_series)
    train_config = train_config or forecast_train_config(seed)
    cur = train_curriculum(split, train_config, model_config)
    joint = train_joint_ablation(split, train_config, model_config)
    joint_best = min(r["val_nll"] for r in joint.history)
    joint_flops_at_best = flops_to_reach(joint.history, joint_best)
    cur_flops = flops_to_reach(cur.history, joint_best)
    ratio = None if cur_flops is None else cur_flops / joint_flops_at_best
    summary = {
        "seed": seed,
        "joint_best_val_nll": joint_best,
        "curriculum_best_val_nll": min(r["val_nll"] for r in cur.history if r["stage"] == "stage2"),
        "joint_flops_to_best": joint_flops_at_best,
        "joint_total_flops": joint.ledger.total,
        "curriculum_flops_to_joint_best": cur_flops,
        "flop_ratio": ratio,
        "curriculum_stage_flops": {s: cur.ledger.stage_total(s) for s in ("stage1", "stage2")},
        "n_train": len(split.train),
        "n_val": len(split.validation),
    }
    return summary, cur, joint


def criterion8_configs(seed=0):
    """Training and panel settings for the interpolation comparison.

    Uses the same weakly predictable shared factor as the forecasting
    comparison, so the centered gap is mostly explained by the other series.
    """
    panel = dict(length=2000, validation_multiple=40, factor_ar=0.5, factor_std=1.0, noise_std=0.1)
    # long stage-2 patience to get past the uniform-histogram plateau
    train = forecast_train_config(
        seed,
        patience=25,
        stage1=StageConfig(lr=3e-3, max_epochs=200, max_wall_clock=300, patience=4),
        stage2=StageConfig(lr=3e-3, max_epochs=200, max_wall_clock=300),
    )
    return train, panel


def run_interpolation(seed=0, n_series=5, model_config=None, train_config=None, prediction_length=6,
                      history_ratio=2, **panel_kwargs):
    side = history_ratio * prediction_length // 2
    task = TaskSpec.centered_interpolation(prediction_length, side)
    split, test = make_panel_split(task, n_series=n_series, seed=seed, prediction_length=prediction_length,
                                   history_ratio=history_ratio, **panel_kwargs)
    model_config = model_config or forecast_model_config(n_series)
    train_config = train_config or forecast_train_config(seed)
    result = train_curriculum(split, train_config, model_config)
    model = result.model
    # marginals-only model: same marginal path, copula left at its uniform init
    baseline = _marginals_only_copy(model)
    prepared = [model.prepare(w) for w in test]
    full_nll = evaluate_nll(model, prepared, original_units=True)
    base_nll = evaluate_nll(baseline, prepared, original_units=True)
    summary = {
        "seed": seed,
        "copula_nll": full_nll,
        "marginal_only_nll": base_nll,
        "improvement": base_nll - full_nll,
        "n_train": len(split.train),
    }
    return summary, result


def _marginals_only_copy(model):
    import copy

    from .copula import AttentionalCopula

    clone = copy.deepcopy(model)
    cfg = model.config
    clone.copula = AttentionalCopula(
        clone.marginal_encoder.dim,
        n_layers=cfg.copula_layers,
        n_heads=cfg.copula_heads,
        head_dim=cfg.copula_head_dim,
        u_embed_dim=cfg.u_embed_dim,
        mlp_dim=cfg.copula_mlp_dim,
        n_bins=cfg.n_bins,
    ).to(torch.float64)
    return clone


# ---------------------------------------------------------------------------
# irregular noisy sines
# ---------------------------------------------------------------------------


def make_irregular_sines(n_series=2, length=3000, seed=0, frequencies=(1 / 20, 1 / 10), noise_std=0.1,
                         span=40.0, horizon_span=10.0, stride=5.0, n_test_windows=20, n_val_windows=10):
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=n_series)
    full = gen_noisy_sines(n_series, length, frequencies[:n_series], noise_std, rng, phase=phases)
    full = corrupt_uneven(full, rng)
    full = corrupt_unaligned(full, rng, factors=(1, 2))
    t_end = float(full.timestamps.max()) + 1.0
    test_start = t_end - n_test_windows * span
    test = slice_time_windows(full, span, span, horizon_span, start=test_start, stop=t_end)
    val_start = test_start - n_val_windows * span
    val = slice_time_windows(full, span, span, horizon_span, start=val_start, stop=test_start)
    train = slice_time_windows(full, span, stride, horizon_span, start=0.0, stop=val_start)
    return DatasetSplit(train, val), test, full


def band_coverage(model, windows, n_samples, rng, lo=0.05, hi=0.95):
    """Fraction of missing ground-truth values inside the empirical [lo, hi] sample band."""
    inside = total = 0
    for w in windows:
        samples = model.predict_samples(w, n_samples, rng)
        truth = w.values[~w.mask]
        q_lo, q_hi = np.quantile(samples, [lo, hi], axis=0)
        inside += int(np.sum((truth >= q_lo) & (truth <= q_hi)))
        total += truth.size
    return inside / max(total, 1)


def criterion7_configs(seed=0):
    """Training and data settings for the irregular-sines calibration check.

    A long series with overlapping training windows, and enough validation and
    test windows that early stopping and the coverage estimate are not noisy.
    """
    data = dict(length=10000, stride=2.0, n_val_windows=40, n_test_windows=50)
    # the stage-1 curve is noisy at lr 3e-3 and keeps improving slowly
    train = forecast_train_config(
        seed,
        patience=25,
        stage1=StageConfig(lr=1e-3, max_epochs=200, max_wall_clock=300, patience=20),
        stage2=StageConfig(lr=3e-3, max_epochs=200, max_wall_clock=300),
    )
    return train, data


def run_flexibility(seed=0, model_config=None, train_config=None, n_samples=200, **kwargs):
    split, test, _ = make_irregular_sines(seed=seed, **kwargs)
    model_config = model_config or forecast_model_config(2, n_bins=20)
    train_config = train_config or forecast_train_config(seed)
    result = train_curriculum(split, train_config, model_config)
    model = result.model
    prepared = [model.prepare(w) for w in test]
    nll = evaluate_nll(model, prepared, original_units=True)
    coverage = band_coverage(model, test, n_samples, np.random.default_rng(seed + 7))
    return {"seed": seed, "nll": nll, "coverage_5_95": coverage, "n_test": len(test), "n_train": len(split.train)}, result
