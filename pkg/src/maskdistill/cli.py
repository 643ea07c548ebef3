"""Command-line entry point.

Exit codes are a stable contract: 0 ok, 2 configuration problem, 3
runtime failure, 4 artifact (checkpoint) mismatch, 5 gradient check over
tolerance. Re-running any command with the same flags and seed writes
byte-identical outputs apart from wall-clock fields.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, CheckpointShapeError, load_checkpoint
from .config import ConfigError, config_from_dict, load_config
from .gradcheck import PARAM_CAP, REL_TOLERANCE, TERMS, run_gradcheck
from .masking import MaskPair, sample_asymmetric_pair
from .rng import stream
from .trainer import (
    TrainingAborted,
    distill,
    evaluate_alignment,
    load_teacher_tensors,
    pretrain_teacher,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ARTIFACT = 4
EXIT_GRADCHECK = 5


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskdistill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain-teacher", help="pre-train the teacher as a plain masked autoencoder")
    pt.add_argument("--config", required=True, type=Path)
    pt.add_argument("--out", required=True, type=Path)
    pt.add_argument("--seed", type=int, default=None)

    ds = sub.add_parser("distill", help="distill a student against a frozen teacher checkpoint")
    ds.add_argument("--config", required=True, type=Path)
    ds.add_argument("--teacher", required=True, type=Path)
    ds.add_argument("--out", required=True, type=Path)
    ds.add_argument("--seed", type=int, default=None)

    gc = sub.add_parser("gradcheck", help="verify tape gradients against finite differences")
    gc.add_argument("--config", required=True, type=Path)
    gc.add_argument("--term", required=True, choices=TERMS)

    em = sub.add_parser("export-masks", help="render sampled mask pairs as graymap images")
    em.add_argument("--config", required=True, type=Path)
    em.add_argument("--count", required=True, type=int)
    em.add_argument("--out", required=True, type=Path)

    ev = sub.add_parser("eval", help="mean per-layer direct-alignment error of a student checkpoint")
    ev.add_argument("--student", required=True, type=Path)
    ev.add_argument("--teacher", required=True, type=Path)
    ev.add_argument("--samples", required=True, type=int)
    ev.add_argument("--seed", type=int, default=0)
    return p


def _cmd_pretrain_teacher(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    pretrain_teacher(cfg, out_path=args.out)
    return EXIT_OK


def _cmd_distill(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    teacher = load_teacher_tensors(cfg, args.teacher)
    distill(cfg, teacher, out_path=args.out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    report = run_gradcheck(cfg, args.term, cap=PARAM_CAP)
    if report.empty_term:
        print(f"term {report.term!r}: empty term (no parameter dependence)")
        return EXIT_OK
    for group in report.groups:
        print(f"{group.name}\t{group.rel_error:.3e}")
    print(
        f"max relative error {report.max_rel_error:.3e} over {report.param_count} parameters "
        f"(worst: {report.worst})"
    )
    if not report.passed:
        print(f"FAIL: {report.worst} exceeds tolerance {REL_TOLERANCE:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _write_pgm(path: Path, bitmap) -> None:
    h, w = bitmap.shape
    rows = "\n".join(" ".join("255" if v else "0" for v in row) for row in bitmap)
    path.write_text(f"P2\n{w} {h}\n255\n{rows}\n")


def _mask_bitmaps(pair: MaskPair, which: str):
    import numpy as np

    grid = pair.grid
    visible = pair.visible_student if which == "student" else pair.visible_teacher
    flat = np.zeros(grid.n, dtype=bool)
    flat[visible] = True
    return flat.reshape(grid.t, grid.h, grid.w)


def _cmd_export_masks(args) -> int:
    cfg = load_config(args.config)
    if args.count < 1:
        raise ConfigError([f"--count must be >= 1, got {args.count}"])
    grid = cfg.clip.grid()
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise RuntimeError(f"output directory {out} is not writable: {e}") from e
    for i in range(args.count):
        pair = sample_asymmetric_pair(
            grid, cfg.train.r_student, cfg.train.r_teacher, stream(cfg.train.seed, "export-mask", i)
        )
        for which in ("student", "teacher"):
            cube = _mask_bitmaps(pair, which)
            for t in range(grid.t):
                _write_pgm(out / f"sample{i:03d}_{which}_slab{t}.pgm", cube[t])
        sidecar = {
            "grid": [grid.t, grid.h, grid.w],
            "r_student": pair.r_student,
            "r_teacher": pair.r_teacher,
            "visible_student": pair.visible_student.tolist(),
            "visible_teacher": pair.visible_teacher.tolist(),
            "diff": pair.diff.tolist(),
        }
        (out / f"sample{i:03d}_masks.json").write_text(json.dumps(sidecar, indent=1))
    print(f"wrote {args.count} mask pairs to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.samples < 1:
        raise ConfigError([f"--samples must be >= 1, got {args.samples}"])
    student_meta, student_tensors = load_checkpoint(args.student)
    if "config" not in student_meta:
        raise CheckpointShapeError(f"{args.student}: checkpoint carries no config echo")
    cfg = config_from_dict(student_meta["config"])
    teacher = load_teacher_tensors(cfg, args.teacher)
    result = evaluate_alignment(cfg, student_tensors, teacher, args.samples, seed=args.seed)
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "pretrain-teacher": _cmd_pretrain_teacher,
        "distill": _cmd_distill,
        "gradcheck": _cmd_gradcheck,
        "export-masks": _cmd_export_masks,
        "eval": _cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print("configuration rejected:", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
