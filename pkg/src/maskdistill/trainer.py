"""Training loops: teacher MAE pre-training and frozen-teacher distillation.

Everything is driven by counter-based random streams keyed on (seed,
purpose, step, sample), so a run is fully determined by (config, seed),
resuming from a checkpoint replays nothing, and metrics streams from two
runs with the same inputs are identical apart from wall-clock fields.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numcore as nc
from .checkpoint import (
    CheckpointShapeError,
    check_shapes,
    content_hash,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig
from .distill import (
    BatchItem,
    ModelBundle,
    build_bundle,
    distill_objective,
    mae_objective,
    prefixed,
    subparams,
    teacher_taps_for,
    _pair_projections,
)
from .masking import sample_asymmetric_pair
from .network import encoder_forward, embed_visible, init_decoder, init_encoder, project
from .rng import stream
from .tokens import ClipSpec, normalize_target, patchify, sinusoidal_pe

ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    """Raised when a run hits a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainState:
    """Everything needed to continue (or reproduce) a run from step `step`."""

    step: int
    params: dict[str, nc.Tensor]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    seed: int
    teacher: dict[str, nc.Tensor] | None = None
    teacher_hash: str | None = None


# ---------------------------------------------------------------------------
# synthetic clips


def synthesize_clip(spec: ClipSpec, rng: np.random.Generator) -> np.ndarray:
    """Procedural clip in [0, 1]: a smooth brightness gradient (one of
    eight orientations) under two rectangles moving at constant velocity.

    The gradient is static and inferable from any visible tube, so most
    of the reconstruction target is learnable from heavily masked input;
    the rectangles contribute motion and locally unpredictable content.
    """
    t, h, w, c = spec.frames, spec.height, spec.width, spec.channels
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    theta = float(rng.integers(0, 8)) * (math.pi / 4.0)
    ramp = math.cos(theta) * xx + math.sin(theta) * yy
    span = float(ramp.max() - ramp.min())
    ramp = (ramp - ramp.min()) / (span if span > 0 else 1.0)
    base = 0.15 + 0.75 * ramp
    rects = []
    for _ in range(2):
        # small enough that the smooth background dominates the targets
        rh = int(rng.integers(max(2, h // 6), max(3, h // 4) + 1))
        rw = int(rng.integers(max(2, w // 6), max(3, w // 4) + 1))
        rects.append(
            (
                rh,
                rw,
                float(rng.uniform(0, max(h - rh, 1))),
                float(rng.uniform(0, max(w - rw, 1))),
                float(rng.uniform(-1.5, 1.5)),
                float(rng.uniform(-1.5, 1.5)),
                rng.uniform(0.0, 1.0, size=c),
            )
        )
    clip = np.empty((t, h, w, c))
    for f in range(t):
        frame = np.repeat(base[..., None], c, axis=2)
        for rh, rw, y0, x0, vy, vx, color in rects:
            y = min(max(int(round(y0 + vy * f)), 0), h - rh)
            x = min(max(int(round(x0 + vx * f)), 0), w - rw)
            frame[y : y + rh, x : x + rw, :] = color
        clip[f] = frame
    return np.clip(clip, 0.0, 1.0)


def make_batch(cfg: RunConfig, step: int, symmetric_ratio: float | None = None) -> list[BatchItem]:
    """Synthesize one batch; `symmetric_ratio` switches to the degenerate
    equal-ratio mask pair used for plain MAE pre-training."""
    grid = cfg.clip.grid()
    seed = cfg.train.seed
    r_stu = cfg.train.r_student if symmetric_ratio is None else symmetric_ratio
    r_tea = cfg.train.r_teacher if symmetric_ratio is None else symmetric_ratio
    items = []
    for j in range(cfg.train.batch_size):
        clip = synthesize_clip(cfg.clip, stream(seed, "clip", step, j))
        cubes = patchify(clip, cfg.clip)
        mask = sample_asymmetric_pair(grid, r_stu, r_tea, stream(seed, "mask", step, j))
        items.append(BatchItem(cubes=cubes, targets=normalize_target(cubes), mask=mask))
    return items


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup ({warmup_steps}) must be shorter than the run ({total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: Mapping[str, nc.Tensor],
    grads: Mapping[str, np.ndarray],
    opt_m: dict[str, np.ndarray],
    opt_v: dict[str, np.ndarray],
    t: int,
    lr: float,
    betas: tuple[float, float],
    weight_decay: float,
    eps: float = ADAM_EPS,
) -> None:
    """Decoupled-weight-decay Adam update with bias correction; t is 1-based."""
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r} at step {t - 1}", t - 1)
        opt_m[name] = b1 * opt_m[name] + (1.0 - b1) * g
        opt_v[name] = b2 * opt_v[name] + (1.0 - b2) * g * g
        m_hat = opt_m[name] / (1.0 - b1**t)
        v_hat = opt_v[name] / (1.0 - b2**t)
        p.data = p.data - lr * weight_decay * p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _grads_by_name(params: Mapping[str, nc.Tensor], grad_map: Mapping[int, nc.Tensor]) -> dict[str, np.ndarray]:
    return {name: grad_map[p.id].data for name, p in params.items()}


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.data for k, v in state.params.items()}
    out.update({f"m/{k}": v for k, v in state.opt_m.items()})
    out.update({f"v/{k}": v for k, v in state.opt_v.items()})
    return out


def save_state(state: TrainState, path: str | Path, cfg: RunConfig, role: str) -> None:
    meta = {
        "role": role,
        "step": state.step,
        "seed": state.seed,
        "teacher_hash": state.teacher_hash,
        "config": cfg.to_dict(),
    }
    save_checkpoint(path, meta, _state_tensors(state))


def restore_state(state: TrainState, path: str | Path) -> dict:
    """Load params and moments back into an initialized state; returns meta."""
    meta, tensors = load_checkpoint(path)
    expected = {f"param/{k}": v.shape for k, v in state.params.items()}
    expected.update({f"m/{k}": v.shape for k, v in state.opt_m.items()})
    expected.update({f"v/{k}": v.shape for k, v in state.opt_v.items()})
    check_shapes(tensors, expected, "resume checkpoint")
    for k, p in state.params.items():
        p.data = tensors[f"param/{k}"]
    for k in state.opt_m:
        state.opt_m[k] = tensors[f"m/{k}"]
        state.opt_v[k] = tensors[f"v/{k}"]
    state.step = int(meta["step"])
    return meta


def write_metrics(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def metrics_path(out_path: str | Path) -> Path:
    out_path = Path(out_path)
    return out_path.parent / (out_path.stem + ".metrics.jsonl")


def _teacher_expected_shapes(cfg: RunConfig) -> dict[str, tuple[int, ...]]:
    probe = init_encoder(cfg.teacher, cfg.clip.cube_dim, stream(0, "shape-probe"))
    return {f"enc.{k}": v.shape for k, v in probe.items()}


def load_teacher_tensors(cfg: RunConfig, path: str | Path) -> dict[str, np.ndarray]:
    """Teacher encoder weights from a pre-training checkpoint, shape-checked
    against the configured teacher architecture."""
    _, tensors = load_checkpoint(path)
    enc = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/enc.")}
    check_shapes(enc, _teacher_expected_shapes(cfg), "teacher checkpoint")
    return enc


# ---------------------------------------------------------------------------
# training loops


def _metrics_record(step: int, lr: float, l_recon: float, l_dir: float, l_gen: float, wall_ms: float) -> dict:
    return {
        "step": step,
        "lr": lr,
        "l_recon": l_recon,
        "l_dir": l_dir,
        "l_gen": l_gen,
        "l_total": (l_recon + l_dir) + l_gen,
        "wall_ms": wall_ms,
    }


def pretrain_teacher(cfg: RunConfig, out_path: str | Path | None = None) -> tuple[TrainState, list[dict]]:
    """Train the teacher architecture as a plain masked autoencoder (tube
    mask at the teacher's own ratio, reconstruction loss only)."""
    cfg.validate()
    grid = cfg.clip.grid()
    seed = cfg.train.seed
    enc = init_encoder(cfg.teacher, cfg.clip.cube_dim, stream(seed, "init-teacher"))
    dec = init_decoder(cfg.decoder, cfg.teacher.width, cfg.clip.cube_dim, stream(seed, "init-teacher-decoder"))
    params = prefixed(enc, "enc.")
    params.update(prefixed(dec, "dec."))
    state = TrainState(
        step=0,
        params=params,
        opt_m={k: np.zeros_like(p.data) for k, p in params.items()},
        opt_v={k: np.zeros_like(p.data) for k, p in params.items()},
        seed=seed,
    )
    tr = cfg.train
    records: list[dict] = []
    for step in range(tr.total_steps):
        t0 = time.perf_counter()
        items = make_batch(cfg, step, symmetric_ratio=tr.r_teacher)
        with nc.Graph() as graph:
            loss_val, root = mae_objective(items, enc, dec, cfg.teacher, cfg.decoder, grid)
        if not math.isfinite(loss_val):
            if out_path is not None:
                save_state(state, out_path, cfg, role="teacher-mae")
            raise TrainingAborted(f"non-finite reconstruction loss at step {step}", step)
        grad_map = nc.backward(graph, root, leaves=params.values())
        lr = lr_schedule(step, tr.total_steps, tr.warmup_steps, tr.base_lr)
        adamw_step(params, _grads_by_name(params, grad_map), state.opt_m, state.opt_v, step + 1, lr, tr.betas, tr.weight_decay)
        state.step = step + 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        records.append(_metrics_record(step, lr, loss_val, 0.0, 0.0, wall_ms))
    if out_path is not None:
        save_state(state, out_path, cfg, role="teacher-mae")
        write_metrics(metrics_path(out_path), records)
    return state, records


def distill(
    cfg: RunConfig,
    teacher_tensors: Mapping[str, np.ndarray],
    out_path: str | Path | None = None,
    resume_path: str | Path | None = None,
    stop_step: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Frozen-teacher distillation of a fresh (or resumed) student.

    Trains the student encoder+decoder together with the projection and
    generator parameters against reconstruction plus feature alignment;
    the teacher is never touched, which is verified by content hash.
    """
    cfg.validate()
    seed = cfg.train.seed
    bundle = build_bundle(cfg, seed, teacher_tensors=teacher_tensors)
    check_shapes(
        {k: v.data for k, v in bundle.teacher.items()}, _teacher_expected_shapes(cfg), "teacher checkpoint"
    )
    params = bundle.trainable()
    state = TrainState(
        step=0,
        params=params,
        opt_m={k: np.zeros_like(p.data) for k, p in params.items()},
        opt_v={k: np.zeros_like(p.data) for k, p in params.items()},
        seed=seed,
        teacher=bundle.teacher,
        teacher_hash=content_hash({k: v.data for k, v in bundle.teacher.items()}),
    )
    if resume_path is not None:
        restore_state(state, resume_path)
    tr = cfg.train
    last = tr.total_steps if stop_step is None else min(stop_step, tr.total_steps)
    records: list[dict] = []
    for step in range(state.step, last):
        t0 = time.perf_counter()
        items = make_batch(cfg, step)
        with nc.Graph() as graph:
            breakdown, terms = distill_objective(items, bundle)
        if not math.isfinite(breakdown.l_total):
            if out_path is not None:
                save_state(state, out_path, cfg, role="distilled-student")
            raise TrainingAborted(f"non-finite loss at step {step}", step)
        grad_map = nc.backward(graph, terms["total"], leaves=params.values())
        lr = lr_schedule(step, tr.total_steps, tr.warmup_steps, tr.base_lr)
        adamw_step(params, _grads_by_name(params, grad_map), state.opt_m, state.opt_v, step + 1, lr, tr.betas, tr.weight_decay)
        state.step = step + 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        records.append(_metrics_record(step, lr, breakdown.l_recon, breakdown.l_dir, breakdown.l_gen, wall_ms))
    final_hash = content_hash({k: v.data for k, v in bundle.teacher.items()})
    if final_hash != state.teacher_hash:
        raise RuntimeError("teacher parameters changed during distillation")
    if out_path is not None:
        save_state(state, out_path, cfg, role="distilled-student")
        if records:
            write_metrics(metrics_path(out_path), records)
    return state, records


# ---------------------------------------------------------------------------
# evaluation


def load_student_into_bundle(bundle: ModelBundle, tensors: Mapping[str, np.ndarray]) -> None:
    """Install "param/student.*" and "param/aux.*" arrays from a checkpoint."""
    params = bundle.trainable()
    expected = {f"param/{k}": v.shape for k, v in params.items()}
    present = {k: v for k, v in tensors.items() if k.startswith("param/")}
    check_shapes(present, expected, "student checkpoint")
    for k, p in params.items():
        p.data = np.array(tensors[f"param/{k}"])


def evaluate_alignment(
    cfg: RunConfig,
    student_tensors: Mapping[str, np.ndarray],
    teacher_tensors: Mapping[str, np.ndarray],
    n_samples: int,
    seed: int = 0,
) -> dict:
    """Mean per-layer direct-alignment error on held-out synthetic samples.

    Masks and clips come from dedicated "eval-*" streams, so they are
    disjoint from every training draw regardless of the training seed.
    """
    if n_samples < 1:
        raise ValueError(f"evaluation needs at least one sample, got {n_samples}")
    cfg.validate()
    bundle = build_bundle(cfg, cfg.train.seed, teacher_tensors=teacher_tensors)
    load_student_into_bundle(bundle, student_tensors)
    grid = bundle.grid
    align = bundle.align
    projections = _pair_projections(bundle, "dir")
    pe = sinusoidal_pe(grid.n, bundle.student_cfg.width)
    student_enc = subparams(bundle.student, "enc.")
    sums = {pair: 0.0 for pair in align.layer_pairs}
    for i in range(n_samples):
        clip = synthesize_clip(cfg.clip, stream(seed, "eval-clip", i))
        cubes = patchify(clip, cfg.clip)
        mask = sample_asymmetric_pair(grid, cfg.train.r_student, cfg.train.r_teacher, stream(seed, "eval-mask", i))
        taps_tea = teacher_taps_for(bundle, cubes, mask)
        tokens = embed_visible(cubes, mask.visible_student, student_enc)
        _, taps_stu = encoder_forward(
            tokens,
            nc.Tensor(pe[mask.visible_student]),
            student_enc,
            bundle.student_cfg,
            tap_layers=align.student_taps,
            tap_after_final_norm=align.tap_after_final_norm,
        )
        pos = np.searchsorted(mask.visible_teacher, mask.visible_student)
        for pair in align.layer_pairs:
            ls, lt = pair
            mode, pp = projections[pair]
            predicted = project(taps_stu[ls], mode, pp)
            target = taps_tea[lt].data[pos]
            resid = target - predicted.data
            sums[pair] += float((resid * resid).sum()) / mask.n_student
    per_layer = [
        {"student_layer": ls, "teacher_layer": lt, "mean_error": sums[(ls, lt)] / n_samples}
        for ls, lt in align.layer_pairs
    ]
    overall = sum(entry["mean_error"] for entry in per_layer)
    return {"samples": n_samples, "seed": seed, "per_layer": per_layer, "overall": overall}
