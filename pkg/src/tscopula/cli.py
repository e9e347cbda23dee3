"""Command-line entry point: ``tscopula {train,eval,sample,copula-demo}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import plots
from .backtest import BacktestSchedule, backtest, score_window, window_at
from .config import ConfigError, dump_config, load_config
from .data import (
    CsvSchema,
    DatasetSplit,
    TaskKind,
    TaskSpec,
    apply_task_mask,
    gen_factor_sines,
    gen_noisy_sines,
    load_jsonl,
    read_long_csv,
    save_jsonl,
    slice_time_windows,
    split_train_validation,
)
from .experiments import make_oracle_data, run_copula_recovery
from .metrics import MetricReport, results_table
from .model import ModelConfig
from .oracle import points_to_windows, sample_ground_truth
from .training import (
    TrainingDiverged,
    load_checkpoint,
    read_history,
    save_checkpoint,
    train_curriculum,
    train_joint_ablation,
    write_history,
)

logger = logging.getLogger("tscopula")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# data assembly from a config
# ---------------------------------------------------------------------------


def task_from_config(cfg):
    d = cfg.data
    if cfg.task.kind == "forecast":
        return TaskSpec(kind=TaskKind.FORECAST, horizon=d.prediction_length, history_ratio=d.history_ratio)
    side = d.history_ratio * d.prediction_length // 2
    return TaskSpec.centered_interpolation(d.prediction_length, side)


def _schema(cfg):
    d = cfg.data
    return CsvSchema(
        series_col=d.series_col,
        timestamp_col=d.timestamp_col,
        value_col=d.value_col,
        covariate_cols=tuple(d.covariate_cols),
        prediction_length=d.prediction_length,
        history_ratio=d.history_ratio,
        stride=d.stride,
        reserve_validation=d.reserve_validation,
        validation_multiple=d.validation_multiple,
    )


def load_series(cfg):
    """Full series window for grid-like sources (None for window-only sources)."""
    d = cfg.data
    seed = cfg.seed if d.seed is None else d.seed
    if d.source == "factor_sines":
        return gen_factor_sines(d.n_series, d.length, seed)
    if d.source == "noisy_sines":
        freqs = [d.frequencies[i % len(d.frequencies)] for i in range(d.n_series)]
        return gen_noisy_sines(d.n_series, d.length, freqs, d.noise_std, seed, spacing=d.spacing)
    if d.source == "csv":
        full = read_long_csv(d.path, _schema(cfg))
        if full is None:
            raise ValueError(f"{d.path} contains no rows")
        return full
    return None


def build_split(cfg, full=None):
    d = cfg.data
    task = task_from_config(cfg)
    if d.source == "oracle":
        seed = cfg.seed if d.seed is None else d.seed
        pts = sample_ground_truth(d.n_points, seed)
        windows = points_to_windows(pts)
        n_val = max(1, len(windows) // 20)
        return DatasetSplit(windows[:-n_val], windows[-n_val:])
    if d.source == "jsonl":
        windows = load_jsonl(d.path)
        n_val = max(1, min(d.validation_multiple, len(windows) // 5))
        return DatasetSplit(windows[:-n_val], windows[-n_val:])
    full = full if full is not None else load_series(cfg)
    if d.source == "noisy_sines" and d.spacing != "regular":
        span = float(d.prediction_length * (d.history_ratio + 1))
        windows = slice_time_windows(full, span, float(d.stride or d.prediction_length), float(d.prediction_length))
        n_val = d.validation_multiple if d.reserve_validation else 0
        return DatasetSplit(windows[: len(windows) - n_val], windows[len(windows) - n_val :])
    split = split_train_validation(full, _schema(cfg))
    split.train = [apply_task_mask(w, task) for w in split.train]
    split.validation = [apply_task_mask(w, task) for w in split.validation]
    return split


def _configure_model(cfg, split):
    mc = cfg.model_settings()
    if cfg.data.source == "oracle" and mc.normalization == "window":
        # windows from the oracle have no observed tokens to standardize with
        mc = ModelConfig(**{**mc.to_dict(), "normalization": "global"})
    return mc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    cfg = load_config(args.config, overrides)
    torch.manual_seed(cfg.seed)
    return cfg


def cmd_train(args):
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    split = build_split(cfg)
    if not split.train:
        raise ValueError("configuration produced no training windows")
    mc = _configure_model(cfg, split)
    tc = cfg.train_settings()
    trainer = train_curriculum if cfg.mode == "curriculum" else train_joint_ablation
    status = EXIT_OK
    try:
        result = trainer(split, tc, mc)
    except TrainingDiverged as exc:
        logger.error("%s; writing last good checkpoint", exc)
        result = exc.result
        status = EXIT_RUNTIME
    save_checkpoint(out / "checkpoint.pt", result.model, tc, result.rng, phase=cfg.mode)
    write_history(result.history, out / "history.jsonl")
    (out / "flops.json").write_text(json.dumps(result.ledger.to_dict(), indent=2))
    (out / "summary.json").write_text(
        json.dumps(
            {
                "mode": cfg.mode,
                "best_val": result.best_val,
                "stop_reason": result.stop_reason,
                "phase_boundary_epoch": result.phase_boundary_epoch,
                "n_train": len(split.train),
                "n_val": len(split.validation),
            },
            indent=2,
        )
    )
    print(f"wrote {out / 'checkpoint.pt'} ({len(result.history)} epochs)")
    return status


def _check_compatible(cfg, archive):
    wanted = cfg.model_settings().to_dict()
    stored = dict(archive["model_config"])
    mismatched = [k for k, v in wanted.items() if k != "normalization" and stored.get(k) != v]
    if mismatched:
        raise ConfigError([f"model.{k}: config has {wanted[k]!r}, checkpoint has {stored.get(k)!r}" for k in mismatched])


def _eval_inputs(args):
    cfg = _load(args)
    model, archive = load_checkpoint(args.checkpoint)
    _check_compatible(cfg, archive)
    return cfg, model, archive


def cmd_eval(args):
    cfg, model, _ = _eval_inputs(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = load_series(cfg)
    d = cfg.data
    schedule = BacktestSchedule(
        cutoffs=tuple(cfg.evaluation.cutoffs),
        prediction_length=d.prediction_length,
        history_ratio=d.history_ratio,
        retrain_every=cfg.evaluation.retrain_every,
        task=cfg.task.kind,
        n_samples=cfg.evaluation.n_samples,
        stride=d.stride,
        reserve_validation=d.reserve_validation,
        validation_multiple=d.validation_multiple,
        seed=cfg.seed,
    )
    if not schedule.cutoffs or full is None:
        logger.warning("no evaluation cutoffs configured; writing an empty report")
        report, samples = MetricReport(), []
    else:
        report, samples = backtest(lambda split, cutoff: model, full, schedule, return_samples=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    (out / "results.md").write_text(results_table({d.source: report}) + "\n")
    if samples and cfg.evaluation.fan_chart:
        before, after = schedule.context()
        window = apply_task_mask(
            window_at(full, report.windows[0], before, after, schedule.prediction_length), schedule.task_spec()
        )
        plots.fan_chart(window, samples[0], out / "fan_chart.png")
    history = Path(args.checkpoint).with_name("history.jsonl")
    if history.exists():
        plots.nll_vs_flops({"run": read_history(history)}, out / "nll_vs_flops.png")
    print(f"evaluated {len(report)} cutoffs ({len(report.skipped)} skipped) -> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_sample(args):
    cfg, model, _ = _eval_inputs(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = build_split(cfg)
    windows = split.validation or split.train
    window = windows[-1]
    rng = np.random.default_rng(cfg.seed)
    scores, samples = score_window(model, window, args.n_samples, rng)
    miss = ~window.mask
    header = ",".join(f"s{s}_t{t:g}" for s, t in zip(window.series[miss], window.timestamps[miss]))
    np.savetxt(out / "samples.csv", samples, delimiter=",", header=header, comments="")
    save_jsonl([window], out / "window.jsonl")
    (out / "sample_scores.json").write_text(json.dumps({**scores, **model.last_sample_report}, indent=2))
    print(f"wrote {samples.shape[0]} samples of {samples.shape[1]} values -> {out / 'samples.csv'}")
    return EXIT_OK


def cmd_copula_demo(args):
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    demo = cfg.copula_demo
    data = make_oracle_data(demo.n_train, demo.n_val, demo.n_test, seed=cfg.seed)
    mc = ModelConfig(**{**cfg.model_settings().to_dict(), "normalization": "global", "max_series": 2})
    tc = cfg.train_settings()
    report = {}
    for mode in demo.modes:
        summary, result = run_copula_recovery(mode, data, cfg.seed, mc, tc, demo.n_copula_samples)
        figures = plots.copula_demo_figures(result.model, out, mode)
        summary["figures"] = {k: str(v.name) for k, v in figures.items()}
        if mode == "curriculum":
            summary["ks_below_0.05"] = all(k < 0.05 for k in summary["ks"])
        write_history(result.history, out / f"{mode}_history.jsonl")
        report[mode] = summary
    (out / "ks_report.json").write_text(json.dumps(report, indent=2, default=float))
    for mode, s in report.items():
        print(f"{mode}: KS={['%.4f' % k for k in s['ks']]} NLL={s['model_nll']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="tscopula", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=None, help="batch-preparation workers")
        if with_mode:
            p.add_argument("--mode", choices=("curriculum", "joint"), default=None)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="backtest a checkpoint")
    common(p, with_mode=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw joint samples for one window")
    common(p, with_mode=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-samples", type=int, default=100)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("copula-demo", help="bivariate copula recovery under both training modes")
    common(p, with_mode=False)
    p.set_defaults(func=cmd_copula_demo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        logger.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
