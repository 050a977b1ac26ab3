from __future__ import annotations

import json
from typing import TYPE_CHECKING, Any

import numpy as np
import pytest

from mode_lab.adapters import adapter_from_parameters, parameter_shapes
from mode_lab.config import AdapterConfig, SynthSpec
from mode_lab.synthbench import gen_multitask


if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

    from mode_lab.adapters import Adapter
    from mode_lab.config import AdapterKind
    from mode_lab.synthbench import SyntheticTaskSet


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(
        num_tasks=3,
        input_dim=4,
        output_dim=4,
        true_rank=2,
        noise_std=0.01,
        samples_per_task=40,
        seed=7,
    )


@pytest.fixture
def tiny_taskset(tiny_spec: SynthSpec) -> SyntheticTaskSet:
    return gen_multitask(tiny_spec)


@pytest.fixture
def random_adapter(
    rng: np.random.Generator,
) -> Callable[[AdapterKind, AdapterConfig], Adapter]:
    """Factory for adapters with every matrix (routers and B included) nonzero."""

    def make(kind: AdapterKind, config: AdapterConfig, scale: float = 0.5) -> Adapter:
        params = {
            name: rng.normal(0.0, scale, size=shape)
            for name, shape in parameter_shapes(kind, config).items()
        }
        return adapter_from_parameters(kind, config, params)

    return make


@pytest.fixture
def small_config() -> AdapterConfig:
    return AdapterConfig(P=3, Q=2, r=2, m=2, p=1)


@pytest.fixture
def experiment_data() -> dict[str, Any]:
    """A seconds-scale experiment config as plain JSON data."""
    return {
        "synth": {
            "num_tasks": 3,
            "input_dim": 4,
            "output_dim": 4,
            "true_rank": 1,
            "noise_std": 0.01,
            "samples_per_task": 40,
            "seed": 3,
        },
        "adapter": {
            "kind": "lora",
            "config": {"input_dim": 4, "output_dim": 4, "lora_rank": 2},
        },
        "train": {"steps": 20, "batch_size": 8, "learning_rate": 0.01, "log_every": 5},
        "seed": 11,
    }


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[dict[str, Any]], Path]:
    def write(data: dict[str, Any], name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write
