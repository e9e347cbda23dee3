"""Attentional copula with histogram conditionals.

The copula density over the missing PIT values is factorised
autoregressively along an ordering of the missing tokens.  Conditional ``i``
is a B-bin histogram on [0,1] whose logits come from attention: the query is
the copula embedding of token ``i``; keys and values are built from the
copula embeddings concatenated with an embedding of the PIT value, over all
observed tokens and the missing tokens preceding ``i``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import MultiHeadAttention

logger = logging.getLogger(__name__)

U_EPS = 1e-6


@dataclass
class CopulaStep:
    bin_probs: np.ndarray
    unconditional: bool = False


@dataclass
class CopulaInput:
    """Copula conditioning for one window (no batch dimension)."""

    z_obs: torch.Tensor  # (n_obs, D)
    u_obs: torch.Tensor  # (n_obs,)
    z_miss: torch.Tensor  # (d, D), already in the chosen ordering
    u_miss: torch.Tensor | None = None  # (d,)

    @property
    def d(self):
        return self.z_miss.shape[0]


class CopulaLayer(nn.Module):
    def __init__(self, dim, kv_dim, n_heads, head_dim, ffn_dim):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads, head_dim, kv_dim=kv_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, q, kv, allowed):
        q = self.norm1(q + self.attn(q, kv, allowed))
        return self.norm2(q + self.ffn(q))

    def flops(self, n_query, n_key):
        return self.attn.flops(n_query, n_key) + 2 * n_query * 2 * self.ffn[0].in_features * self.ffn[0].out_features


def bin_index(u, n_bins):
    """Bin of each ``u`` after clamping to ``[U_EPS, 1 - U_EPS]``."""
    u = torch.clamp(u, U_EPS, 1.0 - U_EPS)
    return torch.clamp((u * n_bins).long(), 0, n_bins - 1)


class AttentionalCopula(nn.Module):
    def __init__(
        self,
        embed_dim,
        n_layers=1,
        n_heads=4,
        head_dim=8,
        u_embed_dim=8,
        ffn_dim=None,
        mlp_dim=32,
        n_bins=50,
        zero_init_head=True,
    ):
        super().__init__()
        self.n_bins = n_bins
        self.embed_dim = embed_dim
        self.u_embed = nn.Sequential(nn.Linear(1, u_embed_dim), nn.ReLU(), nn.Linear(u_embed_dim, u_embed_dim))
        kv_dim = embed_dim + u_embed_dim
        self.layers = nn.ModuleList(
            [CopulaLayer(embed_dim, kv_dim, n_heads, head_dim, ffn_dim or 2 * embed_dim) for _ in range(n_layers)]
        )
        self.head = nn.Sequential(nn.Linear(embed_dim, mlp_dim), nn.ReLU(), nn.Linear(mlp_dim, n_bins))
        self.unconditional_logits = nn.Parameter(torch.zeros(n_bins))
        if zero_init_head:
            with torch.no_grad():
                self.head[-1].weight.zero_()
                self.head[-1].bias.zero_()

    def keys(self, z, u):
        return torch.cat([z, self.u_embed(u.unsqueeze(-1))], dim=-1)

    def logits(self, z_query, kv, allowed):
        """Histogram logits for each query; rows without keys use the unconditional logits.

        ``z_query`` is ``(..., Q, D)``, ``kv`` ``(..., K, D+E)``, ``allowed``
        ``(..., Q, K)``.  Returns ``(logits, fallback)``.
        """
        h = z_query
        for layer in self.layers:
            h = layer(h, kv, allowed)
        out = self.head(h)
        fallback = ~allowed.any(dim=-1)
        out = torch.where(fallback.unsqueeze(-1), self.unconditional_logits.expand_as(out), out)
        return out, fallback

    def batch_log_density(self, z, u, observed, valid, rank, miss_index, miss_valid):
        """Per-window copula log density of the missing PIT values.

        ``z``/``u``/``observed``/``valid``/``rank`` are token tensors of shape
        ``(B, N[, D])``; ``rank`` gives each missing token's position in the
        ordering (-1 elsewhere).  ``miss_index`` ``(B, Dm)`` gathers the
        missing tokens, padded where ``miss_valid`` is False.
        """
        kv = self.keys(z, u)
        gather = miss_index.unsqueeze(-1)
        zq = torch.gather(z, 1, gather.expand(-1, -1, z.shape[-1]))
        uq = torch.gather(u, 1, miss_index)
        rq = torch.gather(rank, 1, miss_index)
        is_miss_key = (rank >= 0).unsqueeze(1)
        allowed = valid.unsqueeze(1) & (observed.unsqueeze(1) | (is_miss_key & (rank.unsqueeze(1) < rq.unsqueeze(-1))))
        allowed = allowed & miss_valid.unsqueeze(-1)
        logits, fallback = self.logits(zq, kv, allowed)
        logp = torch.log_softmax(logits, dim=-1)
        idx = bin_index(uq, self.n_bins).unsqueeze(-1)
        terms = torch.gather(logp, -1, idx).squeeze(-1) + math.log(self.n_bins)
        # a copula of a single variable is C(u) = u, whatever the conditioning
        nontrivial = miss_valid.sum(dim=-1, keepdim=True) > 1
        terms = terms * (miss_valid & nontrivial)
        return terms.sum(dim=-1), {"fallback": fallback & miss_valid, "terms": terms}

    def log_density(self, inp):
        """Copula log density for a single window given as :class:`CopulaInput`."""
        if inp.u_miss is None:
            raise ValueError("log_density needs u_miss")
        z, u, observed, rank = _flatten_input(inp)
        n = z.shape[0]
        valid = torch.ones(1, n, dtype=torch.bool)
        miss_index = torch.arange(inp.z_obs.shape[0], n).unsqueeze(0)
        total, _ = self.batch_log_density(
            z.unsqueeze(0), u.unsqueeze(0), observed.unsqueeze(0), valid, rank.unsqueeze(0), miss_index,
            torch.ones_like(miss_index, dtype=torch.bool),
        )
        return total[0]

    def conditional_params(self, inp, i):
        """Histogram of missing variable ``i`` (0-based) given observed tokens and the prefix ``< i``."""
        if not 0 <= i < inp.d:
            raise IndexError(f"variable index {i} outside 0..{inp.d - 1}")
        if inp.d == 1:
            return CopulaStep(np.full(self.n_bins, 1.0 / self.n_bins), False)
        u_miss = inp.u_miss if inp.u_miss is not None else torch.full((inp.d,), 0.5, dtype=inp.z_miss.dtype)
        z = torch.cat([inp.z_obs, inp.z_miss[:i]], dim=0)
        u = torch.cat([inp.u_obs, u_miss[:i]], dim=0)
        kv = self.keys(z, u)
        allowed = torch.ones(1, z.shape[0], dtype=torch.bool)
        with torch.no_grad():
            logits, fallback = self.logits(inp.z_miss[i : i + 1], kv, allowed)
        probs = torch.softmax(logits, dim=-1)[0].cpu().numpy()
        if bool(fallback[0]):
            logger.debug("no conditioning tokens for variable %d; using unconditional histogram", i)
        return CopulaStep(probs, bool(fallback[0]))

    @torch.no_grad()
    def sample(self, z, u, observed, order, n_samples, rng):
        """Draw ``n_samples`` joint PIT vectors for the missing tokens of one window.

        ``z`` ``(N, D)``, ``u`` ``(N,)`` (only observed entries are read),
        ``observed`` ``(N,)`` bool, ``order`` the missing token indices in
        sampling order.  Returns a ``(n_samples, d)`` numpy array whose columns
        follow ``order``.
        """
        d = len(order)
        out = np.empty((n_samples, d))
        if n_samples == 0 or d == 0:
            return out
        if d == 1:
            out[:, 0] = np.clip(rng.random(n_samples), 1e-12, 1.0 - 1e-12)
            return out
        n = z.shape[0]
        u_cur = u.unsqueeze(0).expand(n_samples, n).clone()
        known = observed.clone()
        z_s = z.unsqueeze(0).expand(n_samples, n, z.shape[-1])
        edges = np.arange(self.n_bins + 1) / self.n_bins
        for step, j in enumerate(order):
            kv = self.keys(z_s, u_cur)
            allowed = known.view(1, 1, n).expand(n_samples, 1, n)
            logits, _ = self.logits(z_s[:, j : j + 1], kv, allowed)
            probs = torch.softmax(logits[:, 0], dim=-1).cpu().numpy()
            cdf = np.cumsum(probs, axis=1)
            cdf[:, -1] = 1.0
            draws = rng.random(n_samples)
            bins = np.minimum((cdf < draws[:, None]).sum(axis=1), self.n_bins - 1)
            within = rng.random(n_samples)
            vals = edges[bins] + within / self.n_bins
            vals = np.clip(vals, 1e-12, 1.0 - 1e-12)
            out[:, step] = vals
            u_cur[:, j] = torch.as_tensor(vals, dtype=u_cur.dtype)
            known[j] = True
        return out

    def flops(self, n_tokens, n_missing):
        e = self.u_embed[0].out_features
        total = n_tokens * (2 * e + 2 * e * e)
        for layer in self.layers:
            total += layer.flops(n_missing, n_tokens)
        total += n_missing * 2 * (self.head[0].in_features * self.head[0].out_features + self.head[2].in_features * self.n_bins)
        return total


def _flatten_input(inp):
    n_obs = inp.z_obs.shape[0]
    z = torch.cat([inp.z_obs, inp.z_miss], dim=0)
    u = torch.cat([inp.u_obs, inp.u_miss], dim=0)
    observed = torch.zeros(z.shape[0], dtype=torch.bool)
    observed[:n_obs] = True
    rank = torch.full((z.shape[0],), -1, dtype=torch.long)
    rank[n_obs:] = torch.arange(inp.d)
    return z, u, observed, rank
