from __future__ import annotations

import pytest

from codebook_forge.corpus import Variable
from codebook_forge.engine import RunConfig
from codebook_forge.synth import PlantedRule, SyntheticCorpusSpec, build_world

LEGAL_CLASSES = ("implicit_interaction", "explicit_interaction", "no_interaction")


def legal_spec(size: int = 500, seed: int = 7, mix=(0.12, 0.12, 0.76)) -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(
        size=size,
        classes=LEGAL_CLASSES,
        rules=(
            PlantedRule.make(["divorce", "custody"], "implicit_interaction", 1),
            PlantedRule.make(["attorney"], "explicit_interaction", 2),
        ),
        distractor_vocabulary=("money", "housing", "debts", "weather", "gardening", "travel"),
        class_mix=mix,
        seed=seed,
        default_label="no_interaction",
    )


def legal_variable() -> Variable:
    return Variable(
        name="synthetic_variable",
        kind="multiclass",
        response_options=LEGAL_CLASSES,
    )


def hitl_config(seed: int = 0, sampling: str = "random", **overrides) -> RunConfig:
    params = dict(
        variable=legal_variable(),
        b=150,
        n=5,
        k=30,
        m=0.9,
        j=20,
        sampling=sampling,
        seed=seed,
        max_iterations=100,
    )
    params.update(overrides)
    return RunConfig(**params)


@pytest.fixture
def legal_world():
    return build_world(legal_spec())


@pytest.fixture
def binary_variable():
    return Variable(name="DepressedMood", kind="binary", response_options=("0.0", "1.0"))
