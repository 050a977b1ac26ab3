"""Configuration models for adapters, training runs, task suites and experiments."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Self

from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveInt,
    ValidationError,
    model_validator,
)


AdapterKind = Literal["lora", "molora", "molora_sd", "mode"]
OptimizerName = Literal["adam", "sgd"]

ADAPTER_KINDS: tuple[AdapterKind, ...] = ("lora", "molora", "molora_sd", "mode")

# Display names used in reports and CSV tables
KIND_LABELS: dict[AdapterKind, str] = {
    "lora": "LoRA",
    "molora": "MoLORA",
    "molora_sd": "MoLORA-SD",
    "mode": "MoDE",
}


class AdapterConfig(BaseModel):
    """Shape hyperparameters governing every adapter family."""

    input_dim: PositiveInt = Field(
        validation_alias=AliasChoices("input_dim", "P"),
        serialization_alias="P",
    )
    """Width P of the adapted layer's input."""

    output_dim: PositiveInt = Field(
        validation_alias=AliasChoices("output_dim", "Q"),
        serialization_alias="Q",
    )
    """Width Q of the adapted layer's output."""

    lora_rank: PositiveInt = Field(
        validation_alias=AliasChoices("lora_rank", "r"),
        serialization_alias="r",
    )
    """Rank r of the (shared) down-projection."""

    num_experts: PositiveInt = Field(
        default=1,
        validation_alias=AliasChoices("num_experts", "m"),
        serialization_alias="m",
    )
    """Number of experts m (per rank group for MoDE)."""

    expert_rank: PositiveInt = Field(
        default=1,
        validation_alias=AliasChoices("expert_rank", "p"),
        serialization_alias="p",
    )
    """Rank p of each MoDE expert block; 1 gives dyadic experts."""

    model_config = ConfigDict(use_attribute_docstrings=True, extra="forbid", frozen=True)

    @model_validator(mode="after")
    def _check_groups(self) -> Self:
        if self.lora_rank % self.p:
            msg = f"lora_rank {self.lora_rank} is not divisible by expert_rank {self.p}"
            raise ValueError(msg)
        return self

    @property
    def P(self) -> int:  # noqa: N802
        return self.input_dim

    @property
    def Q(self) -> int:  # noqa: N802
        return self.output_dim

    @property
    def r(self) -> int:
        return self.lora_rank

    @property
    def m(self) -> int:
        return self.num_experts

    @property
    def p(self) -> int:
        return self.expert_rank

    @property
    def groups(self) -> int:
        """Number of rank groups g = r / p."""
        return self.lora_rank // self.p

    def short(self) -> dict[str, int]:
        """Checkpoint form of the config ({P, Q, r, m, p})."""
        return {"P": self.P, "Q": self.Q, "r": self.r, "m": self.m, "p": self.p}


class AdapterSpec(BaseModel):
    """One adapter variant of an experiment."""

    kind: AdapterKind
    """Adapter family."""

    config: AdapterConfig
    """Shape hyperparameters of the variant."""

    name: str | None = None
    """Label used in reports. Derived from kind and config when omitted."""

    model_config = ConfigDict(use_attribute_docstrings=True, extra="forbid", frozen=True)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        cfg = self.config
        base = KIND_LABELS[self.kind]
        match self.kind:
            case "lora":
                return f"{base} {cfg.r}"
            case "mode":
                return f"{base} {cfg.m}x{cfg.r}x{cfg.p}"
            case _:
                return f"{base} {cfg.m}x{cfg.r}"


class TrainConfig(BaseModel):
    """Optimizer and loop settings for a single training run."""

    steps: PositiveInt = 2000
    """Number of optimizer updates."""

    batch_size: PositiveInt = 32
    """Rows per minibatch."""

    learning_rate: float = Field(default=1e-3, gt=0)
    """Step size of the optimizer."""

    seed: NonNegativeInt = 0
    """Seed for shuffling and the train/eval split."""

    optimizer: OptimizerName = "adam"
    """Update rule."""

    betas: tuple[float, float] = (0.9, 0.999)
    """Adam decay rates of the first and second moment estimates."""

    epsilon: float = Field(default=1e-8, gt=0)
    """Adam denominator offset."""

    eval_fraction: float = Field(default=0.1, gt=0, lt=1)
    """Share of each task's examples held out for evaluation."""

    log_every: PositiveInt = 200
    """Emit a debug log line every this many steps."""

    model_config = ConfigDict(use_attribute_docstrings=True, extra="forbid", frozen=True)


class SynthSpec(BaseModel):
    """Synthetic multi-task regression suite."""

    num_tasks: PositiveInt = 15
    """Number of tasks T."""

    input_dim: PositiveInt = 32
    """Input width P."""

    output_dim: PositiveInt = 32
    """Output width Q."""

    true_rank: PositiveInt = 4
    """Rank r* of each task's ground-truth update."""

    shared_down: bool = True
    """Whether all tasks share one ground-truth down-projection."""

    noise_std: NonNegativeFloat = 0.05
    """Standard deviation of the additive target noise."""

    samples_per_task: int = Field(default=2000, ge=10)
    """Examples N generated per task."""

    seed: NonNegativeInt = 0
    """Generator seed."""

    task_shift: NonNegativeFloat = 0.0
    """Norm of a per-task constant offset added to that task's inputs."""

    model_config = ConfigDict(use_attribute_docstrings=True, extra="forbid", frozen=True)

    @model_validator(mode="after")
    def _check_rank(self) -> Self:
        if self.true_rank > min(self.input_dim, self.output_dim):
            msg = (
                f"true_rank {self.true_rank} exceeds min(input_dim, output_dim)"
                f" = {min(self.input_dim, self.output_dim)}"
            )
            raise ValueError(msg)
        return self


class ExperimentConfig(BaseModel):
    """Everything a CLI command needs to run reproducibly."""

    synth: SynthSpec = SynthSpec()
    """Task suite to generate."""

    adapter: AdapterSpec | None = None
    """Adapter trained by `train`."""

    variants: list[AdapterSpec] = Field(default_factory=list)
    """Adapters compared by `compare`."""

    train: TrainConfig = TrainConfig()
    """Training settings shared by all runs."""

    output_dir: Path = Path("runs")
    """Directory receiving all output files."""

    backbone_nonembedding: PositiveInt | None = None
    """Backbone size used for the additive-parameter percentage."""

    seed: NonNegativeInt = 0
    """Master seed. Sub-seeds for generation, init and shuffling derive from it."""

    task: NonNegativeInt | None = None
    """Restrict `train` to one task instead of the uniform mixture."""

    workers: PositiveInt = 1
    """Variants trained concurrently by `compare`."""

    model_config = ConfigDict(use_attribute_docstrings=True, extra="forbid", frozen=True)

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        specs = [self.adapter] if self.adapter is not None else []
        for spec in [*specs, *self.variants]:
            cfg = spec.config
            if (cfg.P, cfg.Q) != (self.synth.input_dim, self.synth.output_dim):
                msg = (
                    f"adapter {spec.label!r} is {cfg.P}x{cfg.Q} but the task suite is"
                    f" {self.synth.input_dim}x{self.synth.output_dim}"
                )
                raise ValueError(msg)
        if self.task is not None and self.task >= self.synth.num_tasks:
            msg = f"task {self.task} out of range for {self.synth.num_tasks} tasks"
            raise ValueError(msg)
        return self

    @property
    def all_variants(self) -> list[AdapterSpec]:
        return self.variants or ([self.adapter] if self.adapter else [])


def describe_validation_error(error: ValidationError) -> str:
    """Render a pydantic error as `field.path: message` lines."""
    lines = []
    for item in error.errors():
        loc = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{loc}: {item['msg']}")
    return "; ".join(lines)
