"""Marginal CDFs as [0,1]-valued Deep Sigmoidal Flows.

Each missing variable gets its own flow whose parameters are produced by a
hypernetwork from the token's marginal embedding.  A flow is a stack of L
sigmoid-mixture layers of width H; layers 1..L-1 are followed by a logit so
they map R -> R, while the last layer keeps its (0,1) output and therefore
is directly a CDF.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import _kernels

logger = logging.getLogger(__name__)

SLOPE_EPS = 1e-6
LOG_DENSITY_FLOOR = -700.0


class FlowNumericError(RuntimeError):
    pass


@dataclass
class DSFParams:
    """Constrained flow parameters, each of shape ``(..., L, H)``.

    ``a`` holds positive slopes, ``b`` biases and ``logw`` log mixture
    weights (a log-softmax over the last axis).
    """

    a: torch.Tensor
    b: torch.Tensor
    logw: torch.Tensor

    @classmethod
    def from_raw(cls, raw, n_layers, hidden):
        """Split raw hypernetwork output ``(..., 3*L*H)`` laid out as per-layer ``[a|b|w]`` blocks."""
        if raw.shape[-1] != 3 * n_layers * hidden:
            raise ValueError(f"expected {3 * n_layers * hidden} raw parameters, got {raw.shape[-1]}")
        blocks = raw.reshape(*raw.shape[:-1], n_layers, 3, hidden)
        a = F.softplus(blocks[..., 0, :]) + SLOPE_EPS
        b = blocks[..., 1, :]
        logw = torch.log_softmax(blocks[..., 2, :], dim=-1)
        return cls(a, b, logw)

    @classmethod
    def sigmoid(cls, shape=()):
        """Single-layer, single-unit flow with a=1, b=0: F is the logistic sigmoid."""
        one = torch.ones(*shape, 1, 1, dtype=torch.float64)
        return cls(one, torch.zeros_like(one), torch.zeros_like(one))

    @property
    def n_layers(self):
        return self.a.shape[-2]

    @property
    def hidden(self):
        return self.a.shape[-1]

    def select(self, idx):
        return DSFParams(self.a[idx], self.b[idx], self.logw[idx])

    def numpy(self):
        return tuple(t.detach().cpu().numpy().astype(np.float64) for t in (self.a, self.b, self.logw))


@dataclass
class FlowEval:
    u: torch.Tensor
    log_density: torch.Tensor
    floored: torch.Tensor  # True where the log-derivative hit the floor


def cdf_forward(params, x):
    """Evaluate ``u = F(x)`` and ``log f(x)`` elementwise.

    ``x`` broadcasts against the leading dims of ``params``.  The log-density
    is accumulated analytically layer by layer in log space.
    """
    if not torch.all(torch.isfinite(x)):
        raise FlowNumericError("cdf_forward received non-finite inputs")
    h = x
    log_det = torch.zeros_like(x)
    n_layers = params.n_layers
    for layer in range(n_layers):
        a = params.a[..., layer, :]
        b = params.b[..., layer, :]
        lw = params.logw[..., layer, :]
        z = a * h.unsqueeze(-1) + b
        ls_pos = F.logsigmoid(z)
        ls_neg = F.logsigmoid(-z)
        log_y = torch.logsumexp(lw + ls_pos, dim=-1)
        log_dy = torch.logsumexp(lw + torch.log(a) + ls_pos + ls_neg, dim=-1)
        if layer == n_layers - 1:
            log_det = log_det + log_dy
            u = torch.exp(log_y)
        else:
            log_1my = torch.logsumexp(lw + ls_neg, dim=-1)
            h = log_y - log_1my
            log_det = log_det + log_dy - log_y - log_1my
    floored = log_det < LOG_DENSITY_FLOOR
    if torch.any(floored):
        logger.debug("flow log-density floored at %d points", int(floored.sum()))
        log_det = torch.clamp(log_det, min=LOG_DENSITY_FLOOR)
    return FlowEval(u, log_det, floored)


def cdf_inverse(params, u):
    """Invert the flow by bracketed bisection.

    ``params`` has leading shape ``(d,)`` and ``u`` shape ``(S, d)`` (or
    ``(d,)``).  Raises :class:`FlowNumericError` if any bracket had to grow
    past the kernel's limit; see :func:`cdf_inverse_flagged` for a version
    that reports failures instead.
    """
    x, ok = cdf_inverse_flagged(params, u)
    if not np.all(ok):
        raise FlowNumericError(f"inverse bracket exceeded {_kernels.BRACKET_LIMIT:g} for {int((~ok).sum())} values")
    return x


def cdf_inverse_flagged(params, u):
    a, b, logw = params.numpy()
    if a.ndim == 2:
        a, b, logw = a[None], b[None], logw[None]
    u = np.asarray(u, dtype=np.float64)
    squeeze = u.ndim == 1
    u2 = u[None, :] if squeeze else u
    if u2.shape[-1] != a.shape[0]:
        raise ValueError(f"u has {u2.shape[-1]} columns but params describe {a.shape[0]} flows")
    if np.any((u2 <= 0) | (u2 >= 1)):
        raise ValueError("cdf_inverse needs u strictly inside (0, 1)")
    x, ok = _kernels.dsf_inverse(a, b, logw, np.ascontiguousarray(u2))
    return (x[0], ok[0]) if squeeze else (x, ok)


def cdf_numpy(params, x):
    """Numpy evaluation of F on ``x`` of shape ``(S, d)`` (used by tests and plots)."""
    a, b, logw = params.numpy()
    return _kernels.dsf_cdf(a, b, logw, np.ascontiguousarray(x, dtype=np.float64))


class MarginalHypernet(nn.Module):
    """MLP mapping a marginal embedding to the raw parameters of one DSF.

    With ``zero_init`` the output layer starts at exactly zero; otherwise the
    output bias spreads the sigmoid biases over ``[-2, 2]`` so hidden units
    are not symmetric at initialization.
    """

    def __init__(self, embed_dim, n_layers=2, hidden=8, mlp_dim=32, mlp_layers=1, zero_init=False):
        super().__init__()
        self.n_layers = n_layers
        self.hidden = hidden
        layers = []
        width = embed_dim
        for _ in range(mlp_layers):
            layers += [nn.Linear(width, mlp_dim), nn.ReLU()]
            width = mlp_dim
        self.trunk = nn.Sequential(*layers)
        self.out = nn.Linear(width, 3 * n_layers * hidden)
        self.reset_output(zero_init)

    def reset_output(self, zero_init=False):
        with torch.no_grad():
            if zero_init:
                self.out.weight.zero_()
                self.out.bias.zero_()
                return
            self.out.weight.mul_(0.1)
            bias = torch.zeros(self.n_layers, 3, self.hidden)
            bias[:, 0, :] = math.log(math.expm1(1.0))  # slopes start at 1
            bias[:, 1, :] = torch.linspace(-2.0, 2.0, self.hidden) if self.hidden > 1 else 0.0
            self.out.bias.copy_(bias.reshape(-1))

    def forward(self, z_m):
        if not torch.all(torch.isfinite(z_m)):
            bad = (~torch.isfinite(z_m)).any(dim=-1)
            raise FlowNumericError(f"non-finite marginal embedding at {int(bad.sum())} tokens")
        return DSFParams.from_raw(self.out(self.trunk(z_m)), self.n_layers, self.hidden)

    def flops_per_token(self):
        total = 0
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                total += 2 * mod.in_features * mod.out_features
        return total


def flow_eval_flops(n_layers, hidden):
    """Rough elementwise cost of one forward flow evaluation (per variable)."""
    return 16 * n_layers * hidden
