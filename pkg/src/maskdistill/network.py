"""Encoder, reconstruction decoder, feature generator, and projections.

All three sequence models share the same pre-norm transformer block
(norm -> MHA -> residual, norm -> GELU MLP -> residual) with full
self-attention over whatever tokens they are given; joint space-time
attention is exactly that, since tokens arrive already flattened. None of
them use a class token. Parameters live in flat name->Tensor dicts so the
optimizer and the checkpoint container can treat every model uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .tokens import TokenGrid, sinusoidal_pe

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    width: int
    heads: int
    mlp_ratio: int = 4

    def violations(self, role: str = "encoder") -> list[str]:
        errs = []
        if self.depth < 0:
            errs.append(f"{role} depth must be >= 0, got {self.depth}")
        if self.width < 2 or self.width % 2 != 0:
            errs.append(f"{role} width must be a positive even number, got {self.width}")
        if self.heads < 1 or self.width % self.heads != 0:
            errs.append(f"{role} width ({self.width}) must be divisible by heads ({self.heads})")
        if self.mlp_ratio < 1:
            errs.append(f"{role} mlp_ratio must be >= 1, got {self.mlp_ratio}")
        return errs


@dataclass(frozen=True)
class DecoderConfig:
    depth: int
    width: int
    heads: int
    mlp_ratio: int = 4

    def violations(self) -> list[str]:
        return EncoderConfig(self.depth, self.width, self.heads, self.mlp_ratio).violations("decoder")


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int
    heads: int
    mlp_ratio: int = 4

    def violations(self) -> list[str]:
        errs = []
        if self.depth < 1:
            errs.append(f"generator depth must be >= 1, got {self.depth}")
        if self.heads < 1:
            errs.append(f"generator heads must be >= 1, got {self.heads}")
        if self.mlp_ratio < 1:
            errs.append(f"generator mlp_ratio must be >= 1, got {self.mlp_ratio}")
        return errs


# ---------------------------------------------------------------------------
# parameter initialization


def trunc_normal(shape, rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within 2 std."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2.0 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2.0 * std
    return vals


def _weight_std(shape) -> float:
    # width-aware scale: a flat 0.02 (the ViT-B/L convention) collapses
    # attention logits at desk widths, so matrices use the Glorot rule,
    # which lands near 0.02 again at production widths
    if len(shape) == 2:
        return math.sqrt(2.0 / (shape[0] + shape[1]))
    return INIT_STD


def _param(shape, rng, kind="weight") -> nc.Tensor:
    if kind == "weight":
        data = trunc_normal(shape, rng, std=_weight_std(shape))
    elif kind == "head":
        # prediction heads start near zero so training begins at the
        # zero-predictor baseline instead of amplified random output
        data = trunc_normal(shape, rng, std=INIT_STD)
    elif kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    else:  # pragma: no cover
        raise ValueError(kind)
    return nc.Tensor(data, requires_grad=True)


def _init_block(params: dict, prefix: str, width: int, mlp_ratio: int, rng) -> None:
    hidden = width * mlp_ratio
    params[f"{prefix}ln1.g"] = _param((width,), rng, "ones")
    params[f"{prefix}ln1.b"] = _param((width,), rng, "zeros")
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}attn.{name}"] = _param((width, width), rng)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}attn.{name}"] = _param((width,), rng, "zeros")
    params[f"{prefix}ln2.g"] = _param((width,), rng, "ones")
    params[f"{prefix}ln2.b"] = _param((width,), rng, "zeros")
    params[f"{prefix}mlp.w1"] = _param((width, hidden), rng)
    params[f"{prefix}mlp.b1"] = _param((hidden,), rng, "zeros")
    params[f"{prefix}mlp.w2"] = _param((hidden, width), rng)
    params[f"{prefix}mlp.b2"] = _param((width,), rng, "zeros")


def init_encoder(cfg: EncoderConfig, cube_dim: int, rng) -> dict[str, nc.Tensor]:
    params: dict[str, nc.Tensor] = {}
    params["embed.w"] = _param((cube_dim, cfg.width), rng)
    params["embed.b"] = _param((cfg.width,), rng, "zeros")
    for i in range(cfg.depth):
        _init_block(params, f"blocks.{i}.", cfg.width, cfg.mlp_ratio, rng)
    if cfg.depth > 0:
        params["norm.g"] = _param((cfg.width,), rng, "ones")
        params["norm.b"] = _param((cfg.width,), rng, "zeros")
    return params


def init_decoder(cfg: DecoderConfig, latent_width: int, cube_dim: int, rng) -> dict[str, nc.Tensor]:
    params: dict[str, nc.Tensor] = {}
    params["proj.w"] = _param((latent_width, cfg.width), rng)
    params["proj.b"] = _param((cfg.width,), rng, "zeros")
    params["mask"] = _param((1, cfg.width), rng, "zeros")
    for i in range(cfg.depth):
        _init_block(params, f"blocks.{i}.", cfg.width, cfg.mlp_ratio, rng)
    params["norm.g"] = _param((cfg.width,), rng, "ones")
    params["norm.b"] = _param((cfg.width,), rng, "zeros")
    params["out.w"] = _param((cfg.width, cube_dim), rng, "head")
    params["out.b"] = _param((cube_dim,), rng, "zeros")
    return params


def init_generator(cfg: GeneratorConfig, width: int, rng) -> dict[str, nc.Tensor]:
    params: dict[str, nc.Tensor] = {}
    params["mask"] = _param((1, width), rng, "zeros")
    for i in range(cfg.depth):
        _init_block(params, f"blocks.{i}.", width, cfg.mlp_ratio, rng)
    return params


def init_projection(mode: str, d_in: int, d_out: int, rng) -> dict[str, nc.Tensor]:
    if mode == "linear":
        return {"w": _param((d_in, d_out), rng), "b": _param((d_out,), rng, "zeros")}
    if mode == "mlp2":
        return {
            "w1": _param((d_in, d_out), rng),
            "b1": _param((d_out,), rng, "zeros"),
            "w2": _param((d_out, d_out), rng),
            "b2": _param((d_out,), rng, "zeros"),
        }
    raise ValueError(f"unknown projection mode {mode!r}")


def count_params(params: dict[str, nc.Tensor]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# forward passes


def _affine_norm(x, params, prefix):
    y = nc.layer_norm(x)
    return nc.add(nc.mul(y, params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _linear(x, w, b):
    return nc.add(nc.matmul(x, w), b)


def _mha(x, params, prefix, heads):
    n, width = x.shape
    dh = width // heads
    q = _linear(x, params[f"{prefix}wq"], params[f"{prefix}bq"])
    k = _linear(x, params[f"{prefix}wk"], params[f"{prefix}bk"])
    v = _linear(x, params[f"{prefix}wv"], params[f"{prefix}bv"])
    # (n, width) -> (heads, n, dh)
    q = nc.transpose(nc.reshape(q, (n, heads, dh)), axes=(1, 0, 2))
    k = nc.transpose(nc.reshape(k, (n, heads, dh)), axes=(1, 0, 2))
    v = nc.transpose(nc.reshape(v, (n, heads, dh)), axes=(1, 0, 2))
    scores = nc.scale(nc.matmul(q, nc.transpose(k, axes=(0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = nc.softmax(scores)
    ctx = nc.matmul(attn, v)
    ctx = nc.reshape(nc.transpose(ctx, axes=(1, 0, 2)), (n, width))
    return _linear(ctx, params[f"{prefix}wo"], params[f"{prefix}bo"])


def _block(x, params, prefix, heads):
    a = _affine_norm(x, params, f"{prefix}ln1")
    x = nc.add(x, _mha(a, params, f"{prefix}attn.", heads))
    m = _affine_norm(x, params, f"{prefix}ln2")
    h = nc.gelu(_linear(m, params[f"{prefix}mlp.w1"], params[f"{prefix}mlp.b1"]))
    return nc.add(x, _linear(h, params[f"{prefix}mlp.w2"], params[f"{prefix}mlp.b2"]))


def encoder_forward(
    tokens: nc.Tensor,
    pe_rows: nc.Tensor,
    params: dict[str, nc.Tensor],
    cfg: EncoderConfig,
    tap_layers: tuple[int, ...] = (),
    tap_after_final_norm: bool = False,
) -> tuple[nc.Tensor, dict[int, nc.Tensor]]:
    """Run the visible tokens through the encoder, recording requested taps.

    Taps are keyed by 1-based block index and are the post-residual block
    outputs; with `tap_after_final_norm`, the deepest tap is replaced by
    the post-norm output. A depth-0 encoder is the identity on tokens+PE.
    """
    for layer in tap_layers:
        if not 1 <= layer <= cfg.depth:
            raise ValueError(f"tap layer {layer} out of range for depth {cfg.depth}")
    n_visible = tokens.shape[0]
    x = nc.add(tokens, pe_rows)
    taps: dict[int, nc.Tensor] = {}
    for i in range(cfg.depth):
        x = _block(x, params, f"blocks.{i}.", cfg.heads)
        assert x.shape[0] == n_visible, "token count changed inside an encoder block"
        if (i + 1) in tap_layers:
            taps[i + 1] = x
    if cfg.depth == 0:
        return x, taps
    final = _affine_norm(x, params, "norm")
    if tap_after_final_norm and cfg.depth in tap_layers:
        taps[cfg.depth] = final
    return final, taps


def embed_visible(cubes: np.ndarray, visible: np.ndarray, params: dict[str, nc.Tensor]) -> nc.Tensor:
    """Embed only the visible cubes of one sample: cubes[visible] @ W + b."""
    rows = nc.Tensor(cubes[visible])
    return _linear(rows, params["embed.w"], params["embed.b"])


def _grid_order_permutation(grid: TokenGrid, visible: np.ndarray) -> np.ndarray:
    n = grid.n
    if visible.size and (visible.min() < 0 or visible.max() >= n):
        raise ValueError(f"visible index out of grid (N={n})")
    hidden = np.ones(n, dtype=bool)
    hidden[visible] = False
    perm = np.empty(n, dtype=np.intp)
    perm[visible] = np.arange(visible.size)
    perm[np.flatnonzero(hidden)] = visible.size + np.arange(int(hidden.sum()))
    return perm


def decoder_forward(
    latent: nc.Tensor,
    visible: np.ndarray,
    grid: TokenGrid,
    params: dict[str, nc.Tensor],
    cfg: DecoderConfig,
) -> nc.Tensor:
    """Reconstruct pixel cubes for every grid position.

    The encoder latent is mapped to decoder width, the learnable mask
    vector fills every invisible slot, rows are re-ordered into canonical
    grid order, full-grid PE is added, and the blocks plus the output
    projection produce an (N, cube_dim) prediction.
    """
    n = grid.n
    n_visible = latent.shape[0]
    z = _linear(latent, params["proj.w"], params["proj.b"])
    n_hidden = n - n_visible
    if n_hidden > 0:
        mask_rows = nc.gather(params["mask"], np.zeros(n_hidden, dtype=np.intp))
        seq = nc.concat(z, mask_rows, axis=0)
    else:
        seq = z
    seq = nc.gather(seq, _grid_order_permutation(grid, visible))
    x = nc.add(seq, nc.Tensor(sinusoidal_pe(n, cfg.width)))
    for i in range(cfg.depth):
        x = _block(x, params, f"blocks.{i}.", cfg.heads)
    x = _affine_norm(x, params, "norm")
    return _linear(x, params["out.w"], params["out.b"])


def generator_forward(
    z_tilde: nc.Tensor,
    visible_student: np.ndarray,
    diff: np.ndarray,
    params: dict[str, nc.Tensor],
    cfg: GeneratorConfig,
    pe_length: int,
    trace: dict | None = None,
) -> nc.Tensor:
    """Predict teacher features at the teacher-only positions.

    The mask vector is repeated exactly len(diff) times (not once per
    invisible grid slot), concatenated after the projected student rows,
    and PE rows for the true grid positions are added; the rows sitting at
    the diff slots after the blocks are returned.
    """
    n_diff = int(diff.size)
    width = z_tilde.shape[1]
    if n_diff == 0:
        return nc.Tensor(np.zeros((0, width)))
    mask_rows = nc.gather(params["mask"], np.zeros(n_diff, dtype=np.intp))
    seq = nc.concat(z_tilde, mask_rows, axis=0)
    n_stu = int(visible_student.size)
    assert seq.shape[0] == n_stu + n_diff, "generator sequence must cover exactly the teacher's visible set"
    if trace is not None:
        trace["seq_len"] = seq.shape[0]
    pe = sinusoidal_pe(pe_length, width)
    positions = np.concatenate([visible_student, diff])
    x = nc.add(seq, nc.Tensor(pe[positions]))
    for i in range(cfg.depth):
        x = _block(x, params, f"blocks.{i}.", cfg.heads)
    return nc.gather(x, np.arange(n_stu, n_stu + n_diff, dtype=np.intp))


def project(features: nc.Tensor, mode: str, params: dict[str, nc.Tensor]) -> nc.Tensor:
    """Map student features to teacher width; inputs are not normalized first."""
    if mode == "linear":
        return _linear(features, params["w"], params["b"])
    if mode == "mlp2":
        h = nc.gelu(_linear(features, params["w1"], params["b1"]))
        return _linear(h, params["w2"], params["b2"])
    raise ValueError(f"unknown projection mode {mode!r}")
