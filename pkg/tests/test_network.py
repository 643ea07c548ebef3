"""Encoder/decoder/generator forwards against hand-traced oracles."""

import math

import numpy as np
import pytest
from scipy.special import erf

import maskdistill.numcore as nc
from maskdistill.network import (
    DecoderConfig,
    EncoderConfig,
    GeneratorConfig,
    decoder_forward,
    encoder_forward,
    generator_forward,
    init_decoder,
    init_encoder,
    init_generator,
    init_projection,
    project,
)
from maskdistill.tokens import TokenGrid, sinusoidal_pe


def rng(seed=0):
    return np.random.default_rng(seed)


# --- independent scalar/numpy re-implementation used as the oracle ---------


def _np_ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _np_mha(x, p, prefix, heads):
    n, d = x.shape
    dh = d // heads
    q = x @ p[f"{prefix}wq"] + p[f"{prefix}bq"]
    k = x @ p[f"{prefix}wk"] + p[f"{prefix}bk"]
    v = x @ p[f"{prefix}wv"] + p[f"{prefix}bv"]
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        scores = scores - scores.max(-1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(-1, keepdims=True)
        out[:, sl] = attn @ v[:, sl]
    return out @ p[f"{prefix}wo"] + p[f"{prefix}bo"]


def _np_block(x, p, prefix, heads):
    a = _np_ln(x, p[f"{prefix}ln1.g"], p[f"{prefix}ln1.b"])
    x = x + _np_mha(a, p, f"{prefix}attn.", heads)
    m = _np_ln(x, p[f"{prefix}ln2.g"], p[f"{prefix}ln2.b"])
    h = _np_gelu(m @ p[f"{prefix}mlp.w1"] + p[f"{prefix}mlp.b1"])
    return x + h @ p[f"{prefix}mlp.w2"] + p[f"{prefix}mlp.b2"]


def _data(params):
    return {k: v.data for k, v in params.items()}


# ---------------------------------------------------------------------------


def test_depth_zero_is_tokens_plus_pe():
    cfg = EncoderConfig(depth=0, width=8, heads=2)
    params = init_encoder(cfg, cube_dim=12, rng=rng(0))
    tokens = nc.Tensor(rng(1).normal(size=(5, 8)))
    pe = nc.Tensor(rng(2).normal(size=(5, 8)))
    out, taps = encoder_forward(tokens, pe, params, cfg)
    assert np.array_equal(out.data, tokens.data + pe.data)
    assert taps == {}


def test_encoder_matches_numpy_oracle():
    cfg = EncoderConfig(depth=2, width=8, heads=2)
    params = init_encoder(cfg, cube_dim=12, rng=rng(3))
    tokens = rng(4).normal(size=(6, 8))
    pe = rng(5).normal(size=(6, 8))
    out, taps = encoder_forward(
        nc.Tensor(tokens), nc.Tensor(pe), params, cfg, tap_layers=(1, 2)
    )
    p = _data(params)
    x = tokens + pe
    x = _np_block(x, p, "blocks.0.", cfg.heads)
    assert np.allclose(taps[1].data, x, atol=1e-12)
    x = _np_block(x, p, "blocks.1.", cfg.heads)
    assert np.allclose(taps[2].data, x, atol=1e-12)
    final = _np_ln(x, p["norm.g"], p["norm.b"])
    assert np.allclose(out.data, final, atol=1e-12)


def test_tap_after_final_norm_flag():
    cfg = EncoderConfig(depth=2, width=8, heads=2)
    params = init_encoder(cfg, cube_dim=12, rng=rng(3))
    tokens = nc.Tensor(rng(4).normal(size=(6, 8)))
    pe = nc.Tensor(rng(5).normal(size=(6, 8)))
    out, taps = encoder_forward(tokens, pe, params, cfg, tap_layers=(2,), tap_after_final_norm=True)
    assert np.array_equal(taps[2].data, out.data)


def test_tap_layer_out_of_range_rejected():
    cfg = EncoderConfig(depth=2, width=8, heads=2)
    params = init_encoder(cfg, cube_dim=12, rng=rng(0))
    x = nc.Tensor(np.zeros((2, 8)))
    with pytest.raises(ValueError, match="tap layer"):
        encoder_forward(x, x, params, cfg, tap_layers=(3,))


def test_permutation_equivariance():
    cfg = EncoderConfig(depth=2, width=12, heads=3)
    params = init_encoder(cfg, cube_dim=10, rng=rng(6))
    tokens = rng(7).normal(size=(7, 12))
    pe = rng(8).normal(size=(7, 12))
    out, _ = encoder_forward(nc.Tensor(tokens), nc.Tensor(pe), params, cfg)
    perm = rng(9).permutation(7)
    out_p, _ = encoder_forward(nc.Tensor(tokens[perm]), nc.Tensor(pe[perm]), params, cfg)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-12)


def test_single_token_attention_is_value_projection():
    """With one token the softmax collapses, so the attention output is the
    token's value projection pushed through the output projection."""
    cfg = EncoderConfig(depth=1, width=6, heads=2)
    params = init_encoder(cfg, cube_dim=4, rng=rng(10))
    token = rng(11).normal(size=(1, 6))
    pe = np.zeros((1, 6))
    out, taps = encoder_forward(nc.Tensor(token), nc.Tensor(pe), params, cfg, tap_layers=(1,))
    p = _data(params)
    a = _np_ln(token, p["blocks.0.ln1.g"], p["blocks.0.ln1.b"])
    v = a @ p["blocks.0.attn.wv"] + p["blocks.0.attn.bv"]
    attn_out = v @ p["blocks.0.attn.wo"] + p["blocks.0.attn.bo"]
    x = token + attn_out
    m = _np_ln(x, p["blocks.0.ln2.g"], p["blocks.0.ln2.b"])
    x = x + _np_gelu(m @ p["blocks.0.mlp.w1"] + p["blocks.0.mlp.b1"]) @ p["blocks.0.mlp.w2"] + p["blocks.0.mlp.b2"]
    assert np.allclose(taps[1].data, x, atol=1e-12)


# --- decoder ----------------------------------------------------------------


def test_decoder_covers_full_grid():
    grid = TokenGrid(2, 2, 2)
    cfg = DecoderConfig(depth=1, width=8, heads=2)
    params = init_decoder(cfg, latent_width=6, cube_dim=12, rng=rng(12))
    for n_vis in (2, 4, 8):
        latent = nc.Tensor(rng(13).normal(size=(n_vis, 6)))
        visible = np.arange(n_vis)
        out = decoder_forward(latent, visible, grid, params, cfg)
        assert out.shape == (grid.n, 12)


def test_decoder_zero_weights_zero_output():
    grid = TokenGrid(2, 2, 2)
    cfg = DecoderConfig(depth=1, width=8, heads=2)
    params = init_decoder(cfg, latent_width=6, cube_dim=12, rng=rng(14))
    for key in params:
        params[key] = nc.Tensor(np.zeros_like(params[key].data), requires_grad=True)
    latent = nc.Tensor(rng(15).normal(size=(4, 6)))
    out = decoder_forward(latent, np.arange(4), grid, params, cfg)
    assert np.all(out.data == 0.0)


def test_decoder_mask_token_placement():
    """Rows at invisible positions are the decoded mask vector, rows at
    visible positions depend on the latent; check via a depth-0 decoder."""
    grid = TokenGrid(1, 2, 2)
    cfg = DecoderConfig(depth=0, width=4, heads=2)
    params = init_decoder(cfg, latent_width=4, cube_dim=6, rng=rng(16))
    params["proj.w"] = nc.Tensor(np.eye(4), requires_grad=True)
    params["proj.b"] = nc.Tensor(np.zeros(4), requires_grad=True)
    params["mask"] = nc.Tensor(np.full((1, 4), 9.0), requires_grad=True)
    latent = nc.Tensor(np.arange(8.0).reshape(2, 4))
    visible = np.array([1, 3])
    out = decoder_forward(latent, visible, grid, params, cfg)
    p = _data(params)
    pe = sinusoidal_pe(grid.n, 4)
    seq = np.stack([np.full(4, 9.0), latent.data[0], np.full(4, 9.0), latent.data[1]])
    expected = _np_ln(seq + pe, p["norm.g"], p["norm.b"]) @ p["out.w"] + p["out.b"]
    assert np.allclose(out.data, expected, atol=1e-12)


def test_decoder_rejects_out_of_grid_index():
    grid = TokenGrid(1, 2, 2)
    cfg = DecoderConfig(depth=0, width=4, heads=2)
    params = init_decoder(cfg, latent_width=4, cube_dim=6, rng=rng(17))
    latent = nc.Tensor(np.zeros((1, 4)))
    with pytest.raises(ValueError, match="out of grid"):
        decoder_forward(latent, np.array([4]), grid, params, cfg)


def test_decoder_no_mask_tokens_when_everything_visible():
    grid = TokenGrid(1, 2, 2)
    cfg = DecoderConfig(depth=0, width=4, heads=2)
    params = init_decoder(cfg, latent_width=4, cube_dim=6, rng=rng(18))
    params["mask"] = nc.Tensor(np.full((1, 4), np.nan), requires_grad=True)
    latent = nc.Tensor(rng(19).normal(size=(4, 4)))
    out = decoder_forward(latent, np.arange(4), grid, params, cfg)
    assert np.all(np.isfinite(out.data))  # NaN mask vector never used


# --- generator --------------------------------------------------------------


def test_generator_row_counts_and_economy():
    cfg = GeneratorConfig(depth=1, heads=2)
    params = init_generator(cfg, width=8, rng=rng(20))
    z = nc.Tensor(rng(21).normal(size=(3, 8)))
    visible = np.array([0, 2, 5])
    diff = np.array([1, 4])
    trace = {}
    out = generator_forward(z, visible, diff, params, cfg, pe_length=8, trace=trace)
    assert out.shape == (2, 8)
    assert trace["seq_len"] == 5  # student + diff, never the full grid


def test_generator_empty_diff_returns_empty():
    cfg = GeneratorConfig(depth=1, heads=2)
    params = init_generator(cfg, width=8, rng=rng(22))
    z = nc.Tensor(rng(23).normal(size=(3, 8)))
    out = generator_forward(z, np.array([0, 1, 2]), np.array([], dtype=int), params, cfg, pe_length=8)
    assert out.shape == (0, 8)


def test_generator_matches_numpy_oracle_single_tokens():
    cfg = GeneratorConfig(depth=1, heads=1)
    params = init_generator(cfg, width=4, rng=rng(24))
    z = rng(25).normal(size=(1, 4))
    visible = np.array([2])
    diff = np.array([5])
    out = generator_forward(nc.Tensor(z), visible, diff, params, cfg, pe_length=8)
    p = _data(params)
    pe = sinusoidal_pe(8, 4)
    seq = np.vstack([z, p["mask"]]) + pe[[2, 5]]
    x = _np_block(seq, p, "blocks.0.", 1)
    assert np.allclose(out.data, x[1:], atol=1e-12)


# --- projections ------------------------------------------------------------


def test_linear_projection_identity():
    params = {
        "w": nc.Tensor(np.eye(5), requires_grad=True),
        "b": nc.Tensor(np.zeros(5), requires_grad=True),
    }
    x = nc.Tensor(rng(26).normal(size=(3, 5)))
    out = project(x, "linear", params)
    assert np.array_equal(out.data, x.data)


def test_mlp2_zero_second_layer_gives_bias():
    params = init_projection("mlp2", 4, 6, rng(27))
    params["w2"] = nc.Tensor(np.zeros((6, 6)), requires_grad=True)
    params["b2"] = nc.Tensor(np.full(6, 1.5), requires_grad=True)
    out = project(nc.Tensor(rng(28).normal(size=(3, 4))), "mlp2", params)
    assert np.allclose(out.data, 1.5)


def test_zero_input_linear_gives_bias_rows():
    params = init_projection("linear", 4, 6, rng(29))
    out = project(nc.Tensor(np.zeros((2, 4))), "linear", params)
    assert np.allclose(out.data, np.tile(params["b"].data, (2, 1)))


def test_project_rejects_unknown_mode():
    with pytest.raises(ValueError, match="projection mode"):
        project(nc.Tensor(np.zeros((1, 2))), "cubic", {})
