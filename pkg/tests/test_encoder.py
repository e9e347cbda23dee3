import math

import numpy as np
import pytest
import torch

from tscopula.encoder import (
    CapacityError,
    DualEncoder,
    MultiHeadAttention,
    TokenEncoder,
    rescale_timestamps,
    sinusoidal_encoding,
)

torch.set_default_dtype(torch.float64)


def inputs(b=2, n=6, n_cov=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    values = torch.randn(b, n, generator=g)
    cov = torch.randn(b, n, n_cov, generator=g)
    observed = torch.rand(b, n, generator=g) > 0.4
    series = torch.arange(n).remainder(2).expand(b, n).clone()
    time = torch.arange(n, dtype=torch.float64).expand(b, n).clone() * 1.5
    valid = torch.ones(b, n, dtype=torch.bool)
    return values, cov, observed, series, time, valid


def make_encoder(**kw):
    torch.manual_seed(0)
    return TokenEncoder(**{"n_covariates": 1, "max_series": 4, "n_layers": 2, "n_heads": 2, "head_dim": 4, **kw}).double()


def test_positional_encoding_at_zero_alternates():
    pe = sinusoidal_encoding(torch.zeros(1), 8)
    assert pe[0].tolist() == [0.0, 1.0] * 4


def test_positional_encoding_bounded():
    pe = sinusoidal_encoding(torch.linspace(0, 100, 500), 16)
    assert pe.abs().max() <= 1.0


def test_rescale_to_fixed_range_with_padding():
    t = torch.tensor([[3.0, 5.0, 7.0, 99.0]])
    valid = torch.tensor([[True, True, True, False]])
    assert rescale_timestamps(t, valid).tolist() == [[0.0, 50.0, 100.0, 0.0]]
    assert rescale_timestamps(torch.tensor([[4.0]]), torch.tensor([[True]])).tolist() == [[0.0]]


def test_masked_value_channel_is_zero():
    enc = make_encoder()
    values, cov, observed, series, time, valid = inputs()
    observed[:] = False
    a = enc.embed_input(values, cov, observed, series, time, valid)
    b = enc.embed_input(values * 100 + 3, cov, observed, series, time, valid)
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_timestamp_only_changes_positional_term():
    enc = make_encoder()
    values = torch.tensor([[0.3, 0.3, 0.0]])
    cov = torch.zeros(1, 3, 1)
    observed = torch.ones(1, 3, dtype=torch.bool)
    series = torch.zeros(1, 3, dtype=torch.long)
    time = torch.tensor([[0.0, 1.0, 2.0]])
    valid = torch.ones(1, 3, dtype=torch.bool)
    h = enc.embed_input(values, cov, observed, series, time, valid)
    pe = sinusoidal_encoding(rescale_timestamps(time, valid), enc.dim)
    torch.testing.assert_close(h[0, 1] - h[0, 0], pe[0, 1] - pe[0, 0])


def test_covariate_mismatch_errors():
    enc = make_encoder(n_covariates=2)
    with pytest.raises(ValueError, match="covariates"):
        enc(*inputs(n_cov=1))


def test_capacity_error():
    enc = make_encoder(max_tokens=5)
    with pytest.raises(CapacityError):
        enc(*inputs(n=6))


def test_permutation_equivariance():
    enc = make_encoder().eval()
    x = inputs(b=1, n=7)
    perm = torch.randperm(7, generator=torch.Generator().manual_seed(1))
    out = enc(*x)
    permuted = [t[:, perm] for t in x]
    out_p = enc(*permuted)
    torch.testing.assert_close(out_p, out[:, perm])


def test_no_cross_window_leakage():
    enc = make_encoder().eval()
    one = inputs(b=1)
    two = [torch.cat([t, t]) for t in one]
    out1, out2 = enc(*one), enc(*two)
    torch.testing.assert_close(out2[0], out1[0])
    torch.testing.assert_close(out2[1], out1[0])


def test_padding_does_not_change_valid_tokens():
    enc = make_encoder().eval()
    x = inputs(b=1, n=5)
    padded = [torch.cat([t, torch.zeros_like(t[:, :2])], dim=1) for t in x]
    padded[-1][:, 5:] = False
    torch.testing.assert_close(enc(*padded)[:, :5], enc(*x))
    assert torch.all(enc(*padded)[:, 5:] == 0)


def test_row_without_keys_returns_zero():
    torch.manual_seed(0)
    attn = MultiHeadAttention(4, 2, 2, bias=False)
    h = torch.randn(1, 3, 4)
    allowed = torch.zeros(1, 3, 3, dtype=torch.bool)
    assert torch.all(attn(h, h, allowed) == 0)


def two_token_oracle(h, n_heads, head_dim):
    """Residual plus softmax attention for two tokens with identity projections (numpy)."""
    out = h.copy()
    for k in range(n_heads):
        sl = slice(k * head_dim, (k + 1) * head_dim)
        x = h[:, sl]
        s = x @ x.T / math.sqrt(head_dim)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] += w @ x
    return out


def test_two_token_closed_form():
    enc = make_encoder(n_layers=1, use_ffn=False, use_norm=False).eval()
    attn = enc.layers[0].attn
    with torch.no_grad():
        for lin in (attn.q, attn.k, attn.v, attn.o):
            lin.weight.copy_(torch.eye(enc.dim))
            lin.bias.zero_()
    x = inputs(b=1, n=2)
    h0 = enc.embed_input(*x)[0].detach().numpy()
    out = enc(*x)[0].detach().numpy()
    np.testing.assert_allclose(out, two_token_oracle(h0, 2, 4), atol=1e-12)


def test_dual_encoders_are_parameter_disjoint():
    torch.manual_seed(0)
    dual = DualEncoder(n_covariates=1, max_series=4, n_layers=1, n_heads=2, head_dim=4).double()
    ids_m = {id(p) for p in dual.marginal.parameters()}
    assert not ids_m & {id(p) for p in dual.copula.parameters()}
    z_m, z_c = dual(*inputs())
    grads = torch.autograd.grad(z_c.sum(), list(dual.marginal.parameters()), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)
    before = z_m.detach().clone()
    with torch.no_grad():
        for p in dual.copula.parameters():
            p.zero_()
    torch.testing.assert_close(dual(*inputs())[0], before, rtol=0, atol=0)


def test_eval_mode_is_deterministic():
    enc = make_encoder(dropout=0.5).eval()
    x = inputs()
    torch.testing.assert_close(enc(*x), enc(*x), rtol=0, atol=0)


def test_flops_grow_quadratically_in_tokens():
    enc = make_encoder()
    f1, f2, f4 = enc.flops(10), enc.flops(20), enc.flops(40)
    assert f4 - f2 > 2 * (f2 - f1)
