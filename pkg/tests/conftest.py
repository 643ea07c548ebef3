import copy

import numpy as np
import pytest

from maskdistill.config import PRESETS, RunConfig, config_from_dict


def make_cfg(**section_overrides) -> RunConfig:
    """Desk preset with per-section dict overrides applied."""
    doc = copy.deepcopy(PRESETS["desk"])
    for section, patch in section_overrides.items():
        doc[section].update(patch)
    return config_from_dict(doc)


def tiny_cfg(**train_overrides) -> RunConfig:
    """A micro configuration for fast trainer/CLI tests (grid 2x2x2)."""
    doc = copy.deepcopy(PRESETS["desk"])
    doc["clip"].update({"frames": 4, "height": 8, "width": 8, "patch": [2, 4, 4]})
    doc["student"].update({"depth": 2, "width": 8, "heads": 2})
    doc["teacher"].update({"depth": 2, "width": 12, "heads": 2})
    doc["decoder"].update({"depth": 1, "width": 8, "heads": 2})
    doc["generator"].update({"depth": 1, "heads": 2})
    doc["train"].update(
        {"epochs": 6, "batch_size": 2, "warmup_epochs": 2, "r_student": 0.75, "r_teacher": 0.5}
    )
    doc["train"].update(train_overrides)
    return config_from_dict(doc)


@pytest.fixture(scope="session")
def desk_cfg() -> RunConfig:
    return config_from_dict(copy.deepcopy(PRESETS["desk"]))


@pytest.fixture(scope="session")
def desk_teacher(desk_cfg):
    """One 400-step teacher MAE pre-training run, shared across the suite."""
    from maskdistill.trainer import pretrain_teacher

    state, records = pretrain_teacher(desk_cfg)
    return state, records


@pytest.fixture(scope="session")
def desk_teacher_tensors(desk_teacher):
    state, _ = desk_teacher
    return {k: v.data for k, v in state.params.items() if k.startswith("enc.")}


@pytest.fixture(scope="session")
def desk_distill(desk_cfg, desk_teacher_tensors):
    """One 400-step desk distillation run, shared across the suite."""
    from maskdistill.trainer import distill

    state, records = distill(desk_cfg, desk_teacher_tensors)
    return state, records


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
