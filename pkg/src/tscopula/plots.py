"""Static figures: forecast fan charts, NLL-vs-FLOPs curves, copula demo panels."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .model import collate  # noqa: E402
from .oracle import GROUND_TRUTH, points_to_windows  # noqa: E402


def fan_chart(window, samples, path, levels=(0.05, 0.25, 0.5, 0.75, 0.95), max_series=6):
    """History, ground truth and sample quantile bands for each series of ``window``."""
    miss = ~window.mask
    ids = window.series_ids[:max_series]
    fig, axes = plt.subplots(len(ids), 1, figsize=(7, 1.8 * len(ids)), squeeze=False, sharex=True)
    q = np.quantile(samples, levels, axis=0) if samples.shape[0] else None
    miss_series = window.series[miss]
    miss_t = window.timestamps[miss]
    for ax, s in zip(axes[:, 0], ids):
        sel = window.series == s
        ax.plot(window.timestamps[sel & window.mask], window.values[sel & window.mask], "k.-", lw=0.8, ms=3)
        ax.plot(window.timestamps[sel & miss], window.values[sel & miss], "k.", ms=3, alpha=0.5)
        if q is not None:
            cols = miss_series == s
            t = miss_t[cols]
            ax.fill_between(t, q[0, cols], q[-1, cols], color="tab:blue", alpha=0.2, lw=0)
            ax.fill_between(t, q[1, cols], q[-2, cols], color="tab:blue", alpha=0.35, lw=0)
            ax.plot(t, q[len(levels) // 2, cols], color="tab:blue", lw=1)
        ax.set_ylabel(f"series {s}")
    axes[-1, 0].set_xlabel("time")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def nll_vs_flops(histories, path):
    """Validation NLL against cumulative training FLOPs, one line per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, history in histories.items():
        for stage in ("stage1", "stage2", "joint"):
            recs = [r for r in history if r["stage"] == stage]
            if not recs:
                continue
            ax.plot([r["cumulative_flops"] for r in recs], [r["val_nll"] for r in recs], ".-", label=f"{label} {stage}")
    ax.set_xscale("log")
    ax.set_xlabel("cumulative training FLOPs")
    ax.set_ylabel("validation NLL per dimension")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


@torch.no_grad()
def _model_joint_logpdf(model, points, chunk=8192):
    out = []
    for start in range(0, len(points), chunk):
        ws = points_to_windows(points[start : start + chunk])
        batch = collate([model.prepare(w) for w in ws])
        out.append(-(model.window_nll(batch, original_units=True) * 2.0).numpy())
    return np.concatenate(out)


@torch.no_grad()
def _model_marginal_logpdf(model, points):
    ws = points_to_windows(points)
    batch = collate([model.prepare(w) for w in ws])
    _, fe = model.marginal_eval(batch)
    return (fe.log_density - batch.log_scale).numpy()


@torch.no_grad()
def _model_copula_logpdf(model, uv):
    template = points_to_windows(np.zeros((1, 2)))[0]
    batch = collate([model.prepare(template)])
    z_c = model.copula_encoder(*batch.encoder_inputs())
    n = uv.shape[0]
    z = z_c.expand(n, -1, -1)
    u = torch.as_tensor(uv, dtype=z.dtype)
    rep = lambda t: t.expand(n, *t.shape[1:])  # noqa: E731
    log_c, _ = model.copula.batch_log_density(
        z, u, rep(batch.observed), rep(batch.valid), rep(batch.rank), rep(batch.miss_index), rep(batch.miss_valid)
    )
    return log_c.numpy()


def copula_demo_figures(model, out_dir, prefix, grid=120):
    """Joint, copula and both marginal panels (learned vs ground truth)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    m1, m2 = GROUND_TRUTH.marginals
    xs = np.linspace(m1.ppf(0.001), m1.ppf(0.995), grid)
    ys = np.linspace(m2.ppf(0.005), m2.ppf(0.995), grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])

    learned = np.exp(_model_joint_logpdf(model, pts)).reshape(grid, grid)
    truth = np.exp(GROUND_TRUTH.logpdf(pts)).reshape(grid, grid)
    paths["joint"] = _contour_pair(gx, gy, learned, truth, out_dir / f"{prefix}_joint.png", "x1", "x2")

    us = (np.arange(grid) + 0.5) / grid
    gu, gv = np.meshgrid(us, us)
    uv = np.column_stack([gu.ravel(), gv.ravel()])
    learned_c = np.exp(_model_copula_logpdf(model, uv)).reshape(grid, grid)
    truth_c = GROUND_TRUTH.copula.pdf(uv[:, 0], uv[:, 1]).reshape(grid, grid)
    paths["copula"] = _contour_pair(gu, gv, learned_c, truth_c, out_dir / f"{prefix}_copula.png", "u1", "u2", log=True)

    for k, (dist, grid_x) in enumerate(((m1, xs), (m2, ys))):
        probe = np.zeros((grid, 2))
        probe[:, k] = grid_x
        learned_m = np.exp(_model_marginal_logpdf(model, probe)[:, k])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(grid_x, dist.pdf(grid_x), "k-", label="ground truth")
        ax.plot(grid_x, learned_m, "tab:red", ls="--", label="learned flow")
        ax.set_xlabel(f"x{k + 1}")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{prefix}_marginal{k + 1}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths[f"marginal{k + 1}"] = path
    return paths


def _contour_pair(gx, gy, learned, truth, path, xlabel, ylabel, log=False):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    f = (lambda a: np.log(np.maximum(a, 1e-6))) if log else (lambda a: a)
    levels = np.linspace(np.nanmin(f(truth)), np.nanpercentile(f(truth), 99.5), 10)
    ax.contour(gx, gy, f(truth), levels=levels, colors="k", linewidths=0.8)
    ax.contour(gx, gy, f(learned), levels=levels, colors="tab:red", linewidths=0.8, linestyles="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title("ground truth (black) vs learned (red)" + (", log density" if log else ""))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
