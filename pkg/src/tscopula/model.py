"""Copula-based density estimator for masked windows.

``CopulaModel`` glues together the two token encoders, the hypernetwork
producing one marginal flow per token and the attentional copula.  The joint
log density of the missing values of a window is

    log c(u_1, ..., u_d | observed) + sum_i log f_i(x_i),   u_i = F_i(x_i)

and every loss used during training is one of its two terms or their sum.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .copula import AttentionalCopula
from .data import NormalizationState, TimeSeriesWindow, standardize
from .encoder import TokenEncoder
from .flops import phase_flops
from .flow import MarginalHypernet, cdf_forward, cdf_inverse_flagged, flow_eval_flops

logger = logging.getLogger(__name__)

DTYPE = torch.float64

PHASES = ("stage1", "stage2", "joint")


@dataclass
class ModelConfig:
    n_covariates: int = 0
    max_series: int = 16
    max_tokens: int = 4096
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_head_dim: int = 16
    encoder_ffn_dim: int | None = None
    dropout: float = 0.0
    pe_base: float = 10000.0
    flow_layers: int = 2
    flow_hidden: int = 8
    hypernet_dim: int = 32
    hypernet_layers: int = 1
    copula_layers: int = 1
    copula_heads: int = 4
    copula_head_dim: int = 8
    u_embed_dim: int = 8
    copula_mlp_dim: int = 32
    n_bins: int = 50
    # "window": per-window standardization from observed tokens;
    # "global": one state per series fitted on the training set; "none": identity
    normalization: str = "window"

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# window preparation and batching
# ---------------------------------------------------------------------------


@dataclass
class PreparedWindow:
    window: TimeSeriesWindow
    state: NormalizationState
    values: np.ndarray  # normalized
    log_scale: np.ndarray  # per-token log std

    @property
    def n_tokens(self):
        return len(self.window)

    @property
    def d(self):
        return self.window.d


@dataclass
class Batch:
    values: torch.Tensor
    covariates: torch.Tensor
    observed: torch.Tensor
    valid: torch.Tensor
    series: torch.Tensor
    time: torch.Tensor
    log_scale: torch.Tensor
    rank: torch.Tensor
    miss_index: torch.Tensor
    miss_valid: torch.Tensor
    n_tokens: list = field(default_factory=list)
    n_missing: list = field(default_factory=list)

    @property
    def missing(self):
        return self.valid & ~self.observed

    @property
    def d(self):
        return self.missing.sum(dim=-1).to(DTYPE)

    def encoder_inputs(self):
        return self.values, self.covariates, self.observed, self.series, self.time, self.valid


def fit_global_normalization(windows):
    """Per-series mean/std over every token of the training ``windows`` (population std).

    Training targets are known at fit time, so masked tokens count too; the
    state is then frozen and reused for validation, test and sampling.
    """
    series = np.concatenate([w.series for w in windows])
    values = np.concatenate([w.values for w in windows])
    ids = np.unique(series)
    mean = np.array([values[series == s].mean() for s in ids])
    std = np.array([max(values[series == s].std(), 1e-8) for s in ids])
    return NormalizationState(ids, mean, std)


def prepare_window(window, mode="window", state=None):
    if mode == "window":
        std_window, state = standardize(window)
        values = np.asarray(std_window.values)
    elif mode == "global":
        if state is None:
            raise ValueError("global normalization needs a fitted state")
        values = state.normalize(window.values, window.series)
    elif mode == "none":
        state = NormalizationState.identity(window.series)
        values = np.asarray(window.values, dtype=np.float64)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return PreparedWindow(window, state, values, state.log_scale(window.series))


def collate(prepared, order="canonical", rng=None):
    """Pad a list of :class:`PreparedWindow` into a :class:`Batch`.

    ``order`` selects the copula ordering of missing tokens: ``canonical``
    (series-major, time-ascending) or ``random`` (a fresh permutation per
    window drawn from ``rng``).
    """
    if len({p.n_tokens for p in prepared}) == 1 and len({p.d for p in prepared}) == 1:
        return _collate_uniform(prepared, order, rng)
    b = len(prepared)
    n_max = max(p.n_tokens for p in prepared)
    d_max = max(max(p.d for p in prepared), 1)
    p_cov = prepared[0].window.n_covariates
    values = np.zeros((b, n_max))
    cov = np.zeros((b, n_max, p_cov))
    observed = np.zeros((b, n_max), dtype=bool)
    valid = np.zeros((b, n_max), dtype=bool)
    series = np.zeros((b, n_max), dtype=np.int64)
    time = np.zeros((b, n_max))
    log_scale = np.zeros((b, n_max))
    rank = np.full((b, n_max), -1, dtype=np.int64)
    miss_index = np.zeros((b, d_max), dtype=np.int64)
    miss_valid = np.zeros((b, d_max), dtype=bool)
    for k, p in enumerate(prepared):
        w = p.window
        n = p.n_tokens
        if w.n_covariates != p_cov:
            raise ValueError("all windows in a batch need the same covariate width")
        values[k, :n] = p.values
        cov[k, :n] = w.covariates
        observed[k, :n] = w.mask
        valid[k, :n] = True
        series[k, :n] = w.series
        time[k, :n] = w.timestamps
        log_scale[k, :n] = p.log_scale
        miss = np.flatnonzero(~w.mask)
        if order == "random":
            if rng is None:
                raise ValueError("random ordering needs an rng")
            rank[k, miss] = rng.permutation(miss.size)
        elif order == "canonical":
            rank[k, miss] = np.arange(miss.size)
        else:
            raise ValueError(f"unknown ordering {order!r}")
        miss_index[k, : miss.size] = miss
        miss_valid[k, : miss.size] = True
    t = lambda a, dt=DTYPE: torch.as_tensor(a, dtype=dt)  # noqa: E731
    return Batch(
        values=t(values),
        covariates=t(cov),
        observed=t(observed, torch.bool),
        valid=t(valid, torch.bool),
        series=t(series, torch.long),
        time=t(time),
        log_scale=t(log_scale),
        rank=t(rank, torch.long),
        miss_index=t(miss_index, torch.long),
        miss_valid=t(miss_valid, torch.bool),
        n_tokens=[p.n_tokens for p in prepared],
        n_missing=[p.d for p in prepared],
    )


def _collate_uniform(prepared, order, rng):
    # every window has the same token count and missing count: stack directly
    b = len(prepared)
    n = prepared[0].n_tokens
    d = prepared[0].d
    windows = [p.window for p in prepared]
    observed = np.stack([w.mask for w in windows])
    miss_index = np.nonzero(~observed)[1].reshape(b, d) if d else np.zeros((b, 1), dtype=np.int64)
    rank = np.full((b, n), -1, dtype=np.int64)
    if d:
        if order == "random":
            if rng is None:
                raise ValueError("random ordering needs an rng")
            ranks = np.argsort(rng.random((b, d)), axis=1)
        elif order == "canonical":
            ranks = np.broadcast_to(np.arange(d), (b, d))
        else:
            raise ValueError(f"unknown ordering {order!r}")
        np.put_along_axis(rank, miss_index, ranks, axis=1)
    t = lambda a, dt=DTYPE: torch.as_tensor(np.asarray(a), dtype=dt)  # noqa: E731
    return Batch(
        values=t(np.stack([p.values for p in prepared])),
        covariates=t(np.stack([w.covariates for w in windows])),
        observed=t(observed, torch.bool),
        valid=torch.ones(b, n, dtype=torch.bool),
        series=t(np.stack([w.series for w in windows]), torch.long),
        time=t(np.stack([w.timestamps for w in windows])),
        log_scale=t(np.stack([p.log_scale for p in prepared])),
        rank=t(rank, torch.long),
        miss_index=t(miss_index, torch.long),
        miss_valid=torch.full((b, max(d, 1)), d > 0, dtype=torch.bool),
        n_tokens=[n] * b,
        n_missing=[d] * b,
    )


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class CopulaModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        enc_kwargs = dict(
            n_covariates=config.n_covariates,
            max_series=config.max_series,
            n_layers=config.encoder_layers,
            n_heads=config.encoder_heads,
            head_dim=config.encoder_head_dim,
            ffn_dim=config.encoder_ffn_dim,
            dropout=config.dropout,
            max_tokens=config.max_tokens,
            pe_base=config.pe_base,
        )
        self.marginal_encoder = TokenEncoder(**enc_kwargs)
        self.copula_encoder = TokenEncoder(**enc_kwargs)
        dim = self.marginal_encoder.dim
        self.hypernet = MarginalHypernet(
            dim, config.flow_layers, config.flow_hidden, config.hypernet_dim, config.hypernet_layers
        )
        self.copula = AttentionalCopula(
            dim,
            n_layers=config.copula_layers,
            n_heads=config.copula_heads,
            head_dim=config.copula_head_dim,
            u_embed_dim=config.u_embed_dim,
            mlp_dim=config.copula_mlp_dim,
            n_bins=config.n_bins,
        )
        self.normalization = None  # fitted NormalizationState for "global" mode
        self.to(DTYPE)

    # -- parameter groups ----------------------------------------------------
    def marginal_parameters(self):
        return [*self.marginal_encoder.parameters(), *self.hypernet.parameters()]

    def copula_parameters(self):
        return [*self.copula_encoder.parameters(), *self.copula.parameters()]

    def marginal_state(self):
        return {
            **{f"marginal_encoder.{k}": v for k, v in self.marginal_encoder.state_dict().items()},
            **{f"hypernet.{k}": v for k, v in self.hypernet.state_dict().items()},
        }

    def copula_state(self):
        return {
            **{f"copula_encoder.{k}": v for k, v in self.copula_encoder.state_dict().items()},
            **{f"copula.{k}": v for k, v in self.copula.state_dict().items()},
        }

    def theta_m_hash(self):
        h = hashlib.sha256()
        for name, tensor in sorted(self.marginal_state().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def set_marginal_trainable(self, flag):
        for p in self.marginal_parameters():
            p.requires_grad_(flag)

    # -- data plumbing -------------------------------------------------------
    def prepare(self, window):
        return prepare_window(window, self.config.normalization, self.normalization)

    def batch(self, windows, order="canonical", rng=None):
        return collate([self.prepare(w) for w in windows], order, rng)

    # -- forward pieces ------------------------------------------------------
    def marginal_eval(self, batch):
        z_m = self.marginal_encoder(*batch.encoder_inputs())
        params = self.hypernet(z_m)
        return params, cdf_forward(params, batch.values)

    def log_terms(self, batch, with_copula=True, marginal_grad=True):
        """Per-window ``(sum log f over missing, copula log density or None)``."""
        missing = batch.missing
        if marginal_grad:
            _, fe = self.marginal_eval(batch)
        else:
            with torch.no_grad():
                _, fe = self.marginal_eval(batch)
        log_f = (fe.log_density * missing).sum(dim=-1)
        if not with_copula:
            return log_f, None
        z_c = self.copula_encoder(*batch.encoder_inputs())
        u = fe.u if marginal_grad else fe.u.detach()
        log_c, _ = self.copula.batch_log_density(
            z_c, u, batch.observed, batch.valid, batch.rank, batch.miss_index, batch.miss_valid
        )
        return log_f, log_c

    def jacobian(self, batch):
        """Per-window ``sum log std`` over missing tokens (nats added in original units)."""
        return (batch.log_scale * batch.missing).sum(dim=-1)

    # -- losses ----------------------------------------------------------------
    def window_nll(self, batch, original_units=False, marginal_only=False):
        """Per-window NLL divided by the number of missing values."""
        log_f, log_c = self.log_terms(batch, with_copula=not marginal_only)
        total = log_f if log_c is None else log_f + log_c
        nll = -total
        if original_units:
            nll = nll + self.jacobian(batch)
        return nll / batch.d.clamp(min=1)

    def joint_nll(self, batch, original_units=False):
        return self.window_nll(batch, original_units).mean()

    def stage1_loss(self, batch):
        """``-sum log f`` over missing tokens (independence copula), averaged over windows."""
        log_f, _ = self.log_terms(batch, with_copula=False)
        return -log_f.mean()

    def stage2_loss(self, batch):
        """``-log c`` with PIT values from the frozen marginals, averaged over windows."""
        _, log_c = self.log_terms(batch, marginal_grad=False)
        return -log_c.mean()

    def objective(self, batch, phase):
        """Training objective for ``phase``, normalized per missing value."""
        d = batch.d.clamp(min=1)
        if phase == "stage1":
            log_f, _ = self.log_terms(batch, with_copula=False)
            loss = -(log_f / d).mean()
        elif phase == "stage2":
            _, log_c = self.log_terms(batch, marginal_grad=False)
            loss = -(log_c / d).mean()
        elif phase == "joint":
            log_f, log_c = self.log_terms(batch)
            loss = -((log_f + log_c) / d).mean()
        else:
            raise ValueError(f"unknown phase {phase!r}")
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite {phase} loss", batch)
        return loss

    # -- sampling ------------------------------------------------------------
    @torch.no_grad()
    def predict_samples(self, window, n_samples, rng):
        """Joint samples of the missing values of ``window`` in original units.

        Columns follow the canonical token order of the missing tokens.
        Samples whose inverse-CDF bracket failed are dropped; the count is
        kept in ``self.last_sample_report``.
        """
        was_training = self.training
        self.eval()
        try:
            prepared = self.prepare(window)
            d = prepared.d
            if n_samples == 0 or d == 0:
                self.last_sample_report = {"requested": n_samples, "dropped": 0}
                return np.empty((0, d))
            batch = collate([prepared])
            params, fe = self.marginal_eval(batch)
            z_c = self.copula_encoder(*batch.encoder_inputs())
            miss = np.flatnonzero(~window.mask)
            u = self.copula.sample(z_c[0], fe.u[0], batch.observed[0], miss, n_samples, rng)
            x, ok = cdf_inverse_flagged(params.select((0, torch.as_tensor(miss))), u)
            good = ok.all(axis=1)
            dropped = int((~good).sum())
            if dropped:
                logger.warning("dropped %d of %d samples after inverse-CDF failure", dropped, n_samples)
            self.last_sample_report = {"requested": n_samples, "dropped": dropped}
            x = x[good]
            return prepared.state.denormalize(x, window.series[miss][None, :].repeat(x.shape[0], axis=0))
        finally:
            self.train(was_training)

    @torch.no_grad()
    def sample_copula(self, window, n_samples, rng):
        """PIT-space samples ``(n_samples, d)`` from the copula alone."""
        was_training = self.training
        self.eval()
        try:
            batch = collate([self.prepare(window)])
            _, fe = self.marginal_eval(batch)
            z_c = self.copula_encoder(*batch.encoder_inputs())
            miss = np.flatnonzero(~window.mask)
            return self.copula.sample(z_c[0], fe.u[0], batch.observed[0], miss, n_samples, rng)
        finally:
            self.train(was_training)

    @torch.no_grad()
    def marginal_quantiles(self, window, levels):
        """Per-missing-token quantiles of the marginal flows, shape ``(len(levels), d)``."""
        prepared = self.prepare(window)
        batch = collate([prepared])
        params, _ = self.marginal_eval(batch)
        miss = np.flatnonzero(~window.mask)
        levels = np.asarray(levels, dtype=np.float64)
        u = np.repeat(levels[:, None], miss.size, axis=1)
        x, _ = cdf_inverse_flagged(params.select((0, torch.as_tensor(miss))), u)
        return prepared.state.denormalize(x, np.broadcast_to(window.series[miss], x.shape))

    # -- FLOPs -----------------------------------------------------------------
    def forward_flops(self, n_tokens, n_missing):
        """Analytic forward FLOPs of each path for one window."""
        cfg = self.config
        marginal = self.marginal_encoder.flops(n_tokens) + n_tokens * (
            self.hypernet.flops_per_token() + flow_eval_flops(cfg.flow_layers, cfg.flow_hidden)
        )
        copula = self.copula_encoder.flops(n_tokens) + self.copula.flops(n_tokens, n_missing)
        return marginal, copula

    def batch_flops(self, batch, phase):
        """``(forward, backward)`` training FLOPs for one batch in ``phase``."""
        marginal = copula = 0
        for n, d in zip(batch.n_tokens, batch.n_missing):
            m, c = self.forward_flops(n, d)
            marginal += m
            copula += c
        return phase_flops(marginal, copula, phase)
