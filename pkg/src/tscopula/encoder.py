"""Token encoders.

Every token of a window (all series, all timestamps) becomes one element of
a flat sequence.  Its input features are ``[x * m ; c ; m]`` mapped by a
linear layer, plus a learned per-series embedding and an additive
sinusoidal encoding of its timestamp.  Self-attention is full (non-causal)
and padding-aware, so ragged and unaligned windows need no special casing.
"""

from __future__ import annotations

import math

import torch
from torch import nn

TIME_RANGE = 100.0


class CapacityError(ValueError):
    pass


def rescale_timestamps(t, valid):
    """Affinely map each window's valid timestamps onto ``[0, TIME_RANGE]``."""
    big = torch.finfo(t.dtype).max
    t_min = torch.where(valid, t, torch.full_like(t, big)).min(dim=-1, keepdim=True).values
    t_max = torch.where(valid, t, torch.full_like(t, -big)).max(dim=-1, keepdim=True).values
    span = t_max - t_min
    scaled = torch.where(span > 0, (t - t_min) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(t))
    return torch.where(valid, scaled * TIME_RANGE, torch.zeros_like(t))


def sinusoidal_encoding(t, dim, base=10000.0):
    """Interleaved ``[sin, cos, sin, cos, ...]`` features of ``t`` (any shape)."""
    half = (dim + 1) // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=t.dtype, device=t.device) * 2.0 / dim)
    angles = t.unsqueeze(-1) * freqs
    pe = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)
    return pe[..., :dim]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value inputs."""

    def __init__(self, dim, n_heads, head_dim, kv_dim=None, bias=True):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        inner = n_heads * head_dim
        self.q = nn.Linear(dim, inner, bias=bias)
        self.k = nn.Linear(kv_dim, inner, bias=bias)
        self.v = nn.Linear(kv_dim, inner, bias=bias)
        self.o = nn.Linear(inner, dim, bias=bias)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.n_heads, self.head_dim).transpose(-2, -3)

    def forward(self, query, keys, allowed, values=None):
        """``allowed`` is a boolean ``(..., Nq, Nk)`` mask; rows with no allowed key return 0."""
        values = keys if values is None else values
        q = self._split(self.q(query))
        k = self._split(self.k(keys))
        v = self._split(self.v(values))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed_h = allowed.unsqueeze(-3)
        scores = scores.masked_fill(~allowed_h, float("-inf"))
        any_key = allowed_h.any(dim=-1, keepdim=True)
        scores = torch.where(any_key, scores, torch.zeros_like(scores))
        attn = torch.softmax(scores, dim=-1) * any_key
        out = (attn @ v).transpose(-2, -3).flatten(-2)
        return self.o(out)

    def flops(self, n_query, n_key):
        inner = self.n_heads * self.head_dim
        proj = 2 * n_query * self.q.in_features * inner + 2 * n_key * self.k.in_features * inner * 2
        attn = 2 * n_query * n_key * inner * 2  # scores and weighted sum
        return proj + attn + 2 * n_query * inner * self.o.out_features


class EncoderLayer(nn.Module):
    def __init__(self, dim, n_heads, head_dim, ffn_dim, dropout=0.0, use_ffn=True, use_norm=True):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads, head_dim)
        self.use_ffn = use_ffn
        self.use_norm = use_norm
        self.norm1 = nn.LayerNorm(dim) if use_norm else nn.Identity()
        self.norm2 = nn.LayerNorm(dim) if use_norm else nn.Identity()
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim)) if use_ffn else None
        self.dropout = nn.Dropout(dropout)

    def forward(self, h, allowed):
        h = self.norm1(h + self.dropout(self.attn(h, h, allowed)))
        if self.ffn is not None:
            h = self.norm2(h + self.dropout(self.ffn(h)))
        return h

    def flops(self, n_tokens):
        total = self.attn.flops(n_tokens, n_tokens)
        if self.ffn is not None:
            total += 2 * n_tokens * 2 * self.ffn[0].in_features * self.ffn[0].out_features
        return total


class TokenEncoder(nn.Module):
    """One transformer encoder over the flat token sequence of each window."""

    def __init__(
        self,
        n_covariates=0,
        max_series=16,
        n_layers=2,
        n_heads=4,
        head_dim=16,
        ffn_dim=None,
        dropout=0.0,
        max_tokens=4096,
        pe_base=10000.0,
        use_ffn=True,
        use_norm=True,
    ):
        super().__init__()
        dim = n_heads * head_dim
        self.dim = dim
        self.n_covariates = n_covariates
        self.max_series = max_series
        self.max_tokens = max_tokens
        self.pe_base = pe_base
        self.input = nn.Linear(2 + n_covariates, dim)
        self.series_embedding = nn.Embedding(max_series, dim)
        self.layers = nn.ModuleList(
            [EncoderLayer(dim, n_heads, head_dim, ffn_dim or 2 * dim, dropout, use_ffn, use_norm) for _ in range(n_layers)]
        )

    def embed_input(self, values, covariates, observed, series, time, valid):
        """Input features before attention, shape ``(B, N, dim)``."""
        if covariates.shape[-1] != self.n_covariates:
            raise ValueError(f"encoder expects {self.n_covariates} covariates, got {covariates.shape[-1]}")
        if torch.any(series[valid] >= self.max_series):
            raise ValueError(f"series id exceeds max_series={self.max_series}")
        m = observed.to(values.dtype)
        feats = torch.cat([(values * m).unsqueeze(-1), covariates, m.unsqueeze(-1)], dim=-1)
        h = self.input(feats) + self.series_embedding(series.clamp(min=0))
        h = h + sinusoidal_encoding(rescale_timestamps(time, valid), self.dim, self.pe_base)
        return h * valid.unsqueeze(-1)

    def forward(self, values, covariates, observed, series, time, valid):
        if values.shape[-1] > self.max_tokens:
            raise CapacityError(f"window has {values.shape[-1]} tokens, encoder capacity is {self.max_tokens}")
        h = self.embed_input(values, covariates, observed, series, time, valid)
        allowed = valid.unsqueeze(-1) & valid.unsqueeze(-2)
        for layer in self.layers:
            h = layer(h, allowed)
        return h * valid.unsqueeze(-1)

    def flops(self, n_tokens):
        total = 2 * n_tokens * self.input.in_features * self.dim
        for layer in self.layers:
            total += layer.flops(n_tokens)
        return total


class DualEncoder(nn.Module):
    """Two parameter-disjoint encoders: one feeds the marginals, one the copula."""

    def __init__(self, **kwargs):
        super().__init__()
        self.marginal = TokenEncoder(**kwargs)
        self.copula = TokenEncoder(**kwargs)

    def forward(self, *inputs):
        return self.marginal(*inputs), self.copula(*inputs)
