"""Feature alignment strategies, loss terms, and the training objective.

Four alignment strategies are supported:

    direct_only      per-pair 2-layer MLP projection, no generator
    generation_only  per-pair linear projection into a generator
    parallel         both, with separate (unshared) linear projections
    serial           both, with one shared linear projection per pair
                     feeding the direct loss and the generator (default)

Losses follow one reduction convention, centralized in `alignment_penalty`:
the alignment terms sum squared (or absolute) residuals over channels and
average over tokens; the reconstruction term averages squared error over
each masked token's pixel-cube entries and then over the masked tokens.
The three terms are added in a fixed order, so the total is bitwise
reproducible and exactly equals their sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numcore as nc
from .masking import MaskPair
from .network import (
    DecoderConfig,
    EncoderConfig,
    GeneratorConfig,
    decoder_forward,
    embed_visible,
    encoder_forward,
    generator_forward,
    init_decoder,
    init_encoder,
    init_generator,
    init_projection,
    project,
)
from .tokens import ClipSpec, TokenGrid, sinusoidal_pe

STRATEGIES = ("direct_only", "generation_only", "parallel", "serial")
LOSS_KINDS = ("mse", "l1")
LAYER_CHOICES = ("last_only", "middle_and_last")


def map_layers(depth_student: int, depth_teacher: int, choice: str) -> tuple[tuple[int, int], ...]:
    """Resolve a layer-choice name into aligned (student, teacher) block pairs."""
    if choice == "last_only":
        if depth_student < 1 or depth_teacher < 1:
            raise ValueError("last_only needs at least one block in both encoders")
        return ((depth_student, depth_teacher),)
    if choice == "middle_and_last":
        if depth_student < 2 or depth_teacher < 2:
            raise ValueError("middle_and_last needs depth >= 2 in both encoders")
        if depth_student % 2 or depth_teacher % 2:
            raise ValueError(
                f"middle_and_last needs even depths, got {depth_student} and {depth_teacher}"
            )
        return ((depth_student // 2, depth_teacher // 2), (depth_student, depth_teacher))
    raise ValueError(f"unknown layer choice {choice!r}; options: {', '.join(LAYER_CHOICES)}")


@dataclass(frozen=True)
class AlignmentConfig:
    strategy: str
    layer_pairs: tuple[tuple[int, int], ...]
    share_projection: bool
    loss_kind: str = "mse"
    tap_after_final_norm: bool = False

    def violations(self, depth_student: int, depth_teacher: int) -> list[str]:
        errs = []
        if self.strategy not in STRATEGIES:
            errs.append(f"unknown alignment strategy {self.strategy!r}; options: {', '.join(STRATEGIES)}")
        if self.loss_kind not in LOSS_KINDS:
            errs.append(f"unknown alignment loss kind {self.loss_kind!r}; options: {', '.join(LOSS_KINDS)}")
        if self.strategy == "serial" and not self.share_projection:
            errs.append(
                "serial strategy requires share_projection=true: the direct and generation "
                "alignments use one shared projection per layer pair"
            )
        if self.strategy != "serial" and self.share_projection:
            errs.append(f"share_projection=true is only meaningful for the serial strategy, not {self.strategy!r}")
        if not self.layer_pairs:
            errs.append("at least one alignment layer pair is required")
        for ls, lt in self.layer_pairs:
            if not 1 <= ls <= depth_student:
                errs.append(f"student alignment layer {ls} out of range [1, {depth_student}]")
            if not 1 <= lt <= depth_teacher:
                errs.append(f"teacher alignment layer {lt} out of range [1, {depth_teacher}]")
        return errs

    @property
    def student_taps(self) -> tuple[int, ...]:
        return tuple(sorted({ls for ls, _ in self.layer_pairs}))

    @property
    def teacher_taps(self) -> tuple[int, ...]:
        return tuple(sorted({lt for _, lt in self.layer_pairs}))


@dataclass(frozen=True)
class LossBreakdown:
    l_recon: float
    l_dir: float
    l_gen: float
    l_total: float


def alignment_penalty(target_rows: nc.Tensor, predicted_rows: nc.Tensor, loss_kind: str) -> nc.Tensor:
    """Per-layer alignment penalty: residuals summed over channels, averaged over tokens.

    The single place that fixes how the channel dimension is reduced, so
    sensitivity to that convention can be probed by swapping this helper.
    """
    n_tokens = target_rows.shape[0]
    if loss_kind == "mse":
        resid = nc.squared_difference(target_rows, predicted_rows)
    elif loss_kind == "l1":
        resid = nc.absolute_difference(target_rows, predicted_rows)
    else:
        raise ValueError(f"unknown alignment loss kind {loss_kind!r}")
    return nc.scale(nc.tsum(resid), 1.0 / n_tokens)


def _teacher_rows(tap: nc.Tensor, mask: MaskPair, positions: np.ndarray) -> nc.Tensor:
    if tap.shape[0] != mask.n_teacher:
        raise ValueError(
            f"teacher tap has {tap.shape[0]} rows but the teacher visible set has {mask.n_teacher}"
        )
    # teacher features are constants; a plain slice keeps them off the tape
    return nc.Tensor(tap.data[positions])


def direct_align_loss(
    taps_student: Mapping[int, nc.Tensor],
    taps_teacher: Mapping[int, nc.Tensor],
    mask: MaskPair,
    projections: Mapping[tuple[int, int], tuple[str, Mapping[str, nc.Tensor]]],
    cfg: AlignmentConfig,
) -> nc.Tensor:
    """Sum over layer pairs of the penalty at tokens both branches see."""
    pos = np.searchsorted(mask.visible_teacher, mask.visible_student)
    total = None
    for pair in cfg.layer_pairs:
        ls, lt = pair
        stu = taps_student[ls]
        if stu.shape[0] != mask.n_student:
            raise ValueError(
                f"student tap has {stu.shape[0]} rows but the student visible set has {mask.n_student}"
            )
        mode, params = projections[pair]
        predicted = project(stu, mode, params)
        target = _teacher_rows(taps_teacher[lt], mask, pos)
        term = alignment_penalty(target, predicted, cfg.loss_kind)
        total = term if total is None else nc.add(total, term)
    return total


def gen_align_loss(
    taps_student: Mapping[int, nc.Tensor],
    taps_teacher: Mapping[int, nc.Tensor],
    mask: MaskPair,
    projections: Mapping[tuple[int, int], tuple[str, Mapping[str, nc.Tensor]]],
    generators: Mapping[tuple[int, int], Mapping[str, nc.Tensor]],
    generator_cfg: GeneratorConfig,
    cfg: AlignmentConfig,
    pe_length: int,
) -> nc.Tensor:
    """Sum over layer pairs of the penalty at teacher-only tokens; 0 when there are none."""
    if mask.n_diff == 0:
        return nc.Tensor(0.0)
    pos = np.searchsorted(mask.visible_teacher, mask.diff)
    total = None
    for pair in cfg.layer_pairs:
        ls, lt = pair
        mode, params = projections[pair]
        z_tilde = project(taps_student[ls], mode, params)
        generated = generator_forward(
            z_tilde, mask.visible_student, mask.diff, generators[pair], generator_cfg, pe_length
        )
        if generated.shape[0] != mask.n_diff:
            raise ValueError(
                f"generator produced {generated.shape[0]} rows for {mask.n_diff} teacher-only tokens"
            )
        target = _teacher_rows(taps_teacher[lt], mask, pos)
        term = alignment_penalty(target, generated, cfg.loss_kind)
        total = term if total is None else nc.add(total, term)
    return total


def recon_loss(targets: np.ndarray, predicted: nc.Tensor, mask: MaskPair, grid: TokenGrid) -> nc.Tensor:
    """Mean squared error over the student-masked tokens' pixel-cube entries."""
    if predicted.shape[0] != grid.n:
        raise ValueError(f"prediction covers {predicted.shape[0]} tokens, grid has {grid.n}")
    hidden = mask.masked_student()
    if hidden.size == 0:
        return nc.Tensor(0.0)
    pred_rows = nc.gather(predicted, hidden)
    target_rows = nc.Tensor(targets[hidden])
    return nc.mean(nc.squared_difference(target_rows, pred_rows))


# ---------------------------------------------------------------------------
# model bundle and the composed objective


@dataclass
class ModelBundle:
    """Everything the objective needs: geometry, configs, and parameter dicts.

    `student` holds "enc.*" and "dec.*" entries, `teacher` holds frozen
    "enc.*" entries, `aux` holds per-pair projection and generator entries
    ("pair{i}.shared.*" / "pair{i}.dir.*" / "pair{i}.gen.*" /
    "pair{i}.generator.*").
    """

    clip: ClipSpec
    grid: TokenGrid
    student_cfg: EncoderConfig
    teacher_cfg: EncoderConfig
    decoder_cfg: DecoderConfig
    generator_cfg: GeneratorConfig
    align: AlignmentConfig
    student: dict[str, nc.Tensor]
    teacher: dict[str, nc.Tensor]
    aux: dict[str, nc.Tensor]

    def trainable(self) -> dict[str, nc.Tensor]:
        merged = {f"student.{k}": v for k, v in self.student.items()}
        merged.update({f"aux.{k}": v for k, v in self.aux.items()})
        return merged


def prefixed(params: Mapping[str, nc.Tensor], prefix: str) -> dict[str, nc.Tensor]:
    return {prefix + k: v for k, v in params.items()}


def subparams(params: Mapping[str, nc.Tensor], prefix: str) -> dict[str, nc.Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def init_aux(
    align: AlignmentConfig,
    width_student: int,
    width_teacher: int,
    generator_cfg: GeneratorConfig,
    rng,
) -> dict[str, nc.Tensor]:
    """Projection and generator parameters demanded by the strategy."""
    aux: dict[str, nc.Tensor] = {}
    for i, _pair in enumerate(align.layer_pairs):
        p = f"pair{i}."
        if align.strategy == "direct_only":
            aux.update(prefixed(init_projection("mlp2", width_student, width_teacher, rng), p + "dir."))
        elif align.strategy == "generation_only":
            aux.update(prefixed(init_projection("linear", width_student, width_teacher, rng), p + "gen."))
            aux.update(prefixed(init_generator(generator_cfg, width_teacher, rng), p + "generator."))
        elif align.strategy == "parallel":
            aux.update(prefixed(init_projection("linear", width_student, width_teacher, rng), p + "dir."))
            aux.update(prefixed(init_projection("linear", width_student, width_teacher, rng), p + "gen."))
            aux.update(prefixed(init_generator(generator_cfg, width_teacher, rng), p + "generator."))
        elif align.strategy == "serial":
            aux.update(prefixed(init_projection("linear", width_student, width_teacher, rng), p + "shared."))
            aux.update(prefixed(init_generator(generator_cfg, width_teacher, rng), p + "generator."))
        else:
            raise ValueError(f"unknown alignment strategy {align.strategy!r}")
    return aux


def _pair_projections(bundle: ModelBundle, role: str) -> dict[tuple[int, int], tuple[str, dict[str, nc.Tensor]]]:
    """Projection (mode, params) per layer pair for `role` in {"dir", "gen"}."""
    out = {}
    strategy = bundle.align.strategy
    for i, pair in enumerate(bundle.align.layer_pairs):
        p = f"pair{i}."
        if strategy == "serial":
            out[pair] = ("linear", subparams(bundle.aux, p + "shared."))
        elif strategy == "direct_only":
            out[pair] = ("mlp2", subparams(bundle.aux, p + "dir."))
        elif strategy == "generation_only":
            out[pair] = ("linear", subparams(bundle.aux, p + "gen."))
        else:  # parallel
            out[pair] = ("linear", subparams(bundle.aux, p + f"{role}."))
    return out


def _pair_generators(bundle: ModelBundle) -> dict[tuple[int, int], dict[str, nc.Tensor]]:
    return {
        pair: subparams(bundle.aux, f"pair{i}.generator.")
        for i, pair in enumerate(bundle.align.layer_pairs)
    }


@dataclass(frozen=True)
class BatchItem:
    """One prepared sample: raw cubes, normalized targets, and its mask pair."""

    cubes: np.ndarray
    targets: np.ndarray
    mask: MaskPair
    teacher_taps: Mapping[int, nc.Tensor] | None = None


def teacher_taps_for(bundle: ModelBundle, cubes: np.ndarray, mask: MaskPair) -> dict[int, nc.Tensor]:
    """Frozen-teacher features at the aligned layers for one sample."""
    enc = subparams(bundle.teacher, "enc.")
    tokens = embed_visible(cubes, mask.visible_teacher, enc)
    pe = sinusoidal_pe(bundle.grid.n, bundle.teacher_cfg.width)
    pe_rows = nc.Tensor(pe[mask.visible_teacher])
    _, taps = encoder_forward(
        tokens,
        pe_rows,
        enc,
        bundle.teacher_cfg,
        tap_layers=bundle.align.teacher_taps,
        tap_after_final_norm=bundle.align.tap_after_final_norm,
    )
    return taps


def _mean_of(terms: list[nc.Tensor]) -> nc.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = nc.add(acc, t)
    return nc.scale(acc, 1.0 / len(terms))


def distill_objective(
    items: list[BatchItem], bundle: ModelBundle
) -> tuple[LossBreakdown, dict[str, nc.Tensor]]:
    """Batch-averaged losses plus the differentiable scalars per term.

    The returned dict has keys "recon", "dir", "gen", "total"; "total" is
    always computed as (recon + dir) + gen in that order.
    """
    align = bundle.align
    grid = bundle.grid
    student_enc = subparams(bundle.student, "enc.")
    student_dec = subparams(bundle.student, "dec.")
    pe_student = sinusoidal_pe(grid.n, bundle.student_cfg.width)
    want_dir = align.strategy != "generation_only"
    want_gen = align.strategy != "direct_only"

    recon_terms, dir_terms, gen_terms = [], [], []
    for item in items:
        mask = item.mask
        taps_tea = item.teacher_taps
        if taps_tea is None:
            taps_tea = teacher_taps_for(bundle, item.cubes, mask)
        tokens = embed_visible(item.cubes, mask.visible_student, student_enc)
        pe_rows = nc.Tensor(pe_student[mask.visible_student])
        final, taps_stu = encoder_forward(
            tokens,
            pe_rows,
            student_enc,
            bundle.student_cfg,
            tap_layers=align.student_taps,
            tap_after_final_norm=align.tap_after_final_norm,
        )
        predicted = decoder_forward(final, mask.visible_student, grid, student_dec, bundle.decoder_cfg)
        recon_terms.append(recon_loss(item.targets, predicted, mask, grid))
        if want_dir:
            dir_terms.append(
                direct_align_loss(taps_stu, taps_tea, mask, _pair_projections(bundle, "dir"), align)
            )
        if want_gen:
            gen_terms.append(
                gen_align_loss(
                    taps_stu,
                    taps_tea,
                    mask,
                    _pair_projections(bundle, "gen"),
                    _pair_generators(bundle),
                    bundle.generator_cfg,
                    align,
                    grid.n,
                )
            )

    recon = _mean_of(recon_terms)
    dir_ = _mean_of(dir_terms) if dir_terms else nc.Tensor(0.0)
    gen = _mean_of(gen_terms) if gen_terms else nc.Tensor(0.0)
    total = nc.add(nc.add(recon, dir_), gen)
    breakdown = LossBreakdown(
        l_recon=recon.item(), l_dir=dir_.item(), l_gen=gen.item(), l_total=total.item()
    )
    return breakdown, {"recon": recon, "dir": dir_, "gen": gen, "total": total}


def mae_objective(
    items: list[BatchItem],
    enc_params: dict[str, nc.Tensor],
    dec_params: dict[str, nc.Tensor],
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    grid: TokenGrid,
) -> tuple[float, nc.Tensor]:
    """Plain masked-autoencoder reconstruction objective (teacher pre-training)."""
    pe = sinusoidal_pe(grid.n, enc_cfg.width)
    terms = []
    for item in items:
        mask = item.mask
        tokens = embed_visible(item.cubes, mask.visible_student, enc_params)
        pe_rows = nc.Tensor(pe[mask.visible_student])
        final, _ = encoder_forward(tokens, pe_rows, enc_params, enc_cfg)
        predicted = decoder_forward(final, mask.visible_student, grid, dec_params, dec_cfg)
        terms.append(recon_loss(item.targets, predicted, mask, grid))
    loss = _mean_of(terms)
    return loss.item(), loss


def build_bundle(
    cfg,
    seed: int,
    teacher_tensors: Mapping[str, np.ndarray] | None = None,
) -> ModelBundle:
    """Construct models for a run config; teacher weights come from a
    checkpoint when given, otherwise from a fresh seeded init."""
    from .rng import stream  # local import to keep module deps one-way

    clip: ClipSpec = cfg.clip
    grid = clip.grid()
    align = cfg.alignment_config()
    student = prefixed(init_encoder(cfg.student, clip.cube_dim, stream(seed, "init-student")), "enc.")
    student.update(
        prefixed(
            init_decoder(cfg.decoder, cfg.student.width, clip.cube_dim, stream(seed, "init-student-decoder")),
            "dec.",
        )
    )
    if teacher_tensors is None:
        teacher_enc = init_encoder(cfg.teacher, clip.cube_dim, stream(seed, "init-teacher"))
        teacher = {f"enc.{k}": nc.Tensor(v.data, requires_grad=False) for k, v in teacher_enc.items()}
    else:
        teacher = {k: nc.Tensor(np.array(v), requires_grad=False) for k, v in teacher_tensors.items()}
    aux = init_aux(align, cfg.student.width, cfg.teacher.width, cfg.generator, stream(seed, "init-aux"))
    return ModelBundle(
        clip=clip,
        grid=grid,
        student_cfg=cfg.student,
        teacher_cfg=cfg.teacher,
        decoder_cfg=cfg.decoder,
        generator_cfg=cfg.generator,
        align=align,
        student=student,
        teacher=teacher,
        aux=aux,
    )
