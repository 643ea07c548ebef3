"""End-to-end gradient verification against central finite differences.

Sweeps every trainable parameter coordinate of a (small) configuration,
comparing tape gradients of the selected loss term with the finite-
difference oracle. A parameter-count cap keeps accidental launches on
big configs from burning hours.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import numcore as nc
from .config import ConfigError, RunConfig
from .distill import BatchItem, build_bundle, distill_objective, teacher_taps_for
from .trainer import make_batch

PARAM_CAP = 20_000
FD_STEP = 1e-5
REL_TOLERANCE = 1e-4
# groups whose gradient norm falls below this are compared absolutely,
# since finite-difference noise would otherwise dominate the ratio
NORM_FLOOR = 1e-3
TERMS = ("recon", "dir", "gen", "total")
GRADCHECK_BATCH = 2


@dataclass
class GroupResult:
    name: str
    rel_error: float


@dataclass
class GradcheckReport:
    term: str
    param_count: int
    groups: list[GroupResult]
    empty_term: bool = False

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.groups:
            return None
        return max(self.groups, key=lambda g: g.rel_error).name

    @property
    def passed(self) -> bool:
        return self.empty_term or self.max_rel_error <= REL_TOLERANCE


def run_gradcheck(cfg: RunConfig, term: str, cap: int = PARAM_CAP) -> GradcheckReport:
    if term not in TERMS:
        raise ConfigError([f"unknown gradcheck term {term!r}; options: {', '.join(TERMS)}"])
    cfg.validate()
    bundle = build_bundle(cfg, cfg.train.seed)
    params = bundle.trainable()
    n_params = sum(p.size for p in params.values())
    if n_params > cap:
        raise ConfigError(
            [f"gradcheck needs at most {cap} trainable parameters, config has {n_params}"]
        )

    items = make_batch(cfg, step=0)[:GRADCHECK_BATCH]
    # teacher features are constant in the swept parameters; cache them
    items = [
        BatchItem(it.cubes, it.targets, it.mask, teacher_taps=teacher_taps_for(bundle, it.cubes, it.mask))
        for it in items
    ]

    with nc.Graph() as graph:
        _, terms = distill_objective(items, bundle)
    root = terms[term]
    if not root.requires_grad:
        # the chosen term does not depend on any parameter (e.g. the
        # generation term when the mask pair has an empty diff set)
        return GradcheckReport(term=term, param_count=n_params, groups=[], empty_term=True)
    grad_map = nc.backward(graph, root, leaves=params.values())

    def term_value(_theta: nc.Tensor) -> float:
        _, fresh = distill_objective(items, bundle)
        return fresh[term].item()

    groups = []
    for name, p in params.items():
        fd = nc.finite_difference_gradient(term_value, p, h=FD_STEP)
        rel = nc.relative_error(grad_map[p.id].data, fd.data, floor=NORM_FLOOR)
        groups.append(GroupResult(name=name, rel_error=rel))
    return GradcheckReport(term=term, param_count=n_params, groups=groups)
