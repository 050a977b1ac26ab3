"""Low-rank adapter families: LoRA, MoLORA, MoLORA-SD and MoDE.

Every adapter adds an update to a frozen layer ``y = x @ W0``. The families
differ in how the update is split into experts and how tokens are routed:

- LoRA: ``x A Bᵀ``.
- MoLORA: m full LoRA experts mixed by one softmax router.
- MoLORA-SD: like MoLORA, but all experts share one down-projection A.
- MoDE m×r×p: a shared A whose r columns form g = r/p groups; each group has m
  rank-p up-projection experts and its own router. p = 1 gives dyadic
  (rank-one) experts.

Adapter parameters may be raw matrices or graph nodes, so the same forward
functions serve evaluation and training.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
import math
from typing import TYPE_CHECKING, ClassVar, Self

import numpy as np
from pydantic import BaseModel, ConfigDict

from mode_lab.config import AdapterConfig, AdapterKind
from mode_lab.exceptions import CompositionOverflowError, ConfigError, ShapeError
from mode_lab.tensor_core import (
    Matrix,
    Node,
    Operand,
    add,
    as_matrix,
    columns,
    lift,
    matmul,
    outer,
    scale_rows,
    softmax_row,
    softmax_rows,
    transpose,
)
from mode_lab.utils import load_model_json, write_model_json


if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence
    import os
    from pathlib import Path

    import numpy.typing as npt


logger = logging.getLogger(__name__)

INIT_STD = 0.01
"""Standard deviation of the down-projection initialization."""

MAX_COMPOSITIONS = 2**63 - 1


def _value(param: Operand) -> Matrix:
    return param.value if isinstance(param, Node) else param


@dataclass(frozen=True, eq=False)
class Adapter(ABC):
    """Common interface of all adapter families."""

    kind: ClassVar[AdapterKind]
    config: AdapterConfig

    @abstractmethod
    def parameters(self) -> dict[str, Operand]:
        """Trainable matrices keyed by their stable parameter name."""

    @classmethod
    @abstractmethod
    def from_parameters(
        cls, config: AdapterConfig, params: Mapping[str, Operand]
    ) -> Self:
        """Rebuild an adapter from a full parameter mapping."""

    def replace(self, params: Mapping[str, Operand]) -> Self:
        """Copy with some parameters swapped out."""
        unknown = set(params) - set(self.parameters())
        if unknown:
            msg = f"unknown parameters for {self.kind}: {sorted(unknown)}"
            raise ConfigError(msg)
        return self.from_parameters(self.config, {**self.parameters(), **params})

    def values(self) -> dict[str, Matrix]:
        """Parameter values as plain matrices."""
        return {name: _value(p) for name, p in self.parameters().items()}

    def as_leaves(self) -> Self:
        """Copy whose parameters are fresh trainable graph leaves."""
        return self.replace({
            name: Node.leaf(value, name=name) for name, value in self.values().items()
        })

    def scalar_count(self) -> int:
        """Number of trainable scalars held by this adapter."""
        return sum(v.size for v in self.values().values())

    def forward(self, x: Operand, w0: Operand) -> Node:
        return forward(x, w0, self)


@dataclass(frozen=True, eq=False)
class LoraAdapter(Adapter):
    """Plain LoRA: down-projection ``A`` (P x r) and up-projection ``B`` (Q x r)."""

    kind: ClassVar[AdapterKind] = "lora"
    down: Operand
    up: Operand

    def parameters(self) -> dict[str, Operand]:
        return {"A": self.down, "B": self.up}

    @classmethod
    def from_parameters(
        cls, config: AdapterConfig, params: Mapping[str, Operand]
    ) -> Self:
        return cls(config, params["A"], params["B"])


@dataclass(frozen=True, eq=False)
class LoraExpert:
    """One full LoRA expert of a MoLORA layer."""

    down: Operand
    up: Operand


@dataclass(frozen=True, eq=False)
class MoLoraAdapter(Adapter):
    """m independent LoRA experts mixed by a softmax router (P x m)."""

    kind: ClassVar[AdapterKind] = "molora"
    experts: tuple[LoraExpert, ...]
    router: Operand

    def parameters(self) -> dict[str, Operand]:
        params: dict[str, Operand] = {}
        for i, expert in enumerate(self.experts):
            params[f"experts.{i}.A"] = expert.down
            params[f"experts.{i}.B"] = expert.up
        params["router"] = self.router
        return params

    @classmethod
    def from_parameters(
        cls, config: AdapterConfig, params: Mapping[str, Operand]
    ) -> Self:
        experts = tuple(
            LoraExpert(params[f"experts.{i}.A"], params[f"experts.{i}.B"])
            for i in range(config.m)
        )
        return cls(config, experts, params["router"])


@dataclass(frozen=True, eq=False)
class MoLoraSDAdapter(Adapter):
    """MoLORA whose experts share a single down-projection."""

    kind: ClassVar[AdapterKind] = "molora_sd"
    down: Operand
    ups: tuple[Operand, ...]
    router: Operand

    def parameters(self) -> dict[str, Operand]:
        params: dict[str, Operand] = {"A": self.down}
        params.update({f"experts.{i}.B": up for i, up in enumerate(self.ups)})
        params["router"] = self.router
        return params

    @classmethod
    def from_parameters(
        cls, config: AdapterConfig, params: Mapping[str, Operand]
    ) -> Self:
        ups = tuple(params[f"experts.{i}.B"] for i in range(config.m))
        return cls(config, params["A"], ups, params["router"])


@dataclass(frozen=True, eq=False)
class ModeGroup:
    """One rank group of a MoDE layer: m up-projection blocks (Q x p) and a router."""

    ups: tuple[Operand, ...]
    router: Operand


@dataclass(frozen=True, eq=False)
class ModeAdapter(Adapter):
    """Mixture of dyadic experts over a shared down-projection (P x r).

    Group k (0-based) consumes columns ``k*p .. (k+1)*p - 1`` of the shared
    down-projection.
    """

    kind: ClassVar[AdapterKind] = "mode"
    down: Operand
    groups: tuple[ModeGroup, ...]

    def parameters(self) -> dict[str, Operand]:
        params: dict[str, Operand] = {"A": self.down}
        for k, group in enumerate(self.groups):
            for i, up in enumerate(group.ups):
                params[f"groups.{k}.experts.{i}.B"] = up
            params[f"groups.{k}.router"] = group.router
        return params

    @classmethod
    def from_parameters(
        cls, config: AdapterConfig, params: Mapping[str, Operand]
    ) -> Self:
        groups = tuple(
            ModeGroup(
                tuple(params[f"groups.{k}.experts.{i}.B"] for i in range(config.m)),
                params[f"groups.{k}.router"],
            )
            for k in range(config.groups)
        )
        return cls(config, params["A"], groups)

    def down_slice(self, k: int) -> Node:
        """Columns of the shared down-projection used by group `k` (0-based)."""
        p = self.config.p
        return columns(self.down, k * p, (k + 1) * p)


ADAPTER_CLASSES: dict[AdapterKind, type[Adapter]] = {
    "lora": LoraAdapter,
    "molora": MoLoraAdapter,
    "molora_sd": MoLoraSDAdapter,
    "mode": ModeAdapter,
}


def _check_config(config: AdapterConfig) -> None:
    # configs built with model_construct skip validation
    if config.r % config.p or min(config.P, config.Q, config.r, config.m, config.p) < 1:
        msg = (
            f"invalid adapter config {config.short()}: ranks and counts must be"
            " positive and lora_rank divisible by expert_rank"
        )
        raise ConfigError(msg)


def parameter_shapes(
    kind: AdapterKind, config: AdapterConfig
) -> dict[str, tuple[int, int]]:
    """Shape of every trainable matrix of an adapter, in initialization order."""
    _check_config(config)
    P, Q, r, m, p = config.P, config.Q, config.r, config.m, config.p  # noqa: N806
    match kind:
        case "lora":
            return {"A": (P, r), "B": (Q, r)}
        case "molora":
            shapes = {}
            for i in range(m):
                shapes[f"experts.{i}.A"] = (P, r)
                shapes[f"experts.{i}.B"] = (Q, r)
            return {**shapes, "router": (P, m)}
        case "molora_sd":
            ups = {f"experts.{i}.B": (Q, r) for i in range(m)}
            return {"A": (P, r), **ups, "router": (P, m)}
        case "mode":
            shapes = {"A": (P, r)}
            for k in range(config.groups):
                for i in range(m):
                    shapes[f"groups.{k}.experts.{i}.B"] = (Q, p)
                shapes[f"groups.{k}.router"] = (P, m)
            return shapes
    msg = f"unknown adapter kind {kind!r}"
    raise ConfigError(msg)


def _is_down(name: str) -> bool:
    return name == "A" or name.endswith(".A")


def init_adapter(kind: AdapterKind, config: AdapterConfig, seed: int) -> Adapter:
    """Create an adapter whose update is exactly zero.

    Down-projections are drawn i.i.d. from Normal(0, 0.01²) with a generator
    seeded by `seed`; up-projections and routers start at zero, so routing is
    uniform at step 0.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Operand] = {}
    for name, shape in parameter_shapes(kind, config).items():
        if _is_down(name):
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            params[name] = np.zeros(shape)
    return adapter_from_parameters(kind, config, params)


def adapter_from_parameters(
    kind: AdapterKind,
    config: AdapterConfig,
    params: Mapping[str, Operand | npt.ArrayLike],
) -> Adapter:
    """Build an adapter of `kind`, checking names and shapes of `params`."""
    shapes = parameter_shapes(kind, config)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        msg = f"{kind} parameters do not match config: missing={missing} extra={extra}"
        raise ConfigError(msg)
    checked: dict[str, Operand] = {}
    for name, shape in shapes.items():
        raw = params[name]
        value = raw if isinstance(raw, Node) else as_matrix(raw, name=name)
        actual = value.shape
        if actual != shape:
            msg = f"parameter {name!r} has shape {actual}, expected {shape}"
            raise ShapeError(msg)
        checked[name] = value
    return ADAPTER_CLASSES[kind].from_parameters(config, checked)


def _check_layer(x: Node, w0: Node, config: AdapterConfig) -> None:
    if x.shape[1] != config.P or w0.shape != (config.P, config.Q):
        msg = (
            f"input {x.shape} and base weight {w0.shape} do not fit an adapter with"
            f" P={config.P}, Q={config.Q}"
        )
        raise ShapeError(msg)


def _mixture(h: Node, ups: Sequence[Operand], probs: Node) -> Node:
    """Σ_i probs[:, i] · (h @ ups[i]ᵀ), computed per token."""
    total: Node | None = None
    for i, up in enumerate(ups):
        term = scale_rows(matmul(h, transpose(up)), columns(probs, i, i + 1))
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def lora_forward(x: Operand, w0: Operand, adapter: LoraAdapter) -> Node:
    """``y = x W0 + x A Bᵀ`` for every row of `x`."""
    nx, nw = lift(x), lift(w0)
    _check_layer(nx, nw, adapter.config)
    update = matmul(matmul(nx, adapter.down), transpose(adapter.up))
    return add(matmul(nx, nw), update)


def molora_forward(x: Operand, w0: Operand, adapter: MoLoraAdapter) -> Node:
    """``y = x W0 + Σ_i R_i(x) · x A_i B_iᵀ`` with ``R(x) = softmax(x W_R)``."""
    nx, nw = lift(x), lift(w0)
    _check_layer(nx, nw, adapter.config)
    probs = softmax_rows(matmul(nx, adapter.router))
    y = matmul(nx, nw)
    for i, expert in enumerate(adapter.experts):
        update = matmul(matmul(nx, expert.down), transpose(expert.up))
        y = add(y, scale_rows(update, columns(probs, i, i + 1)))
    return y


def molora_sd_forward(x: Operand, w0: Operand, adapter: MoLoraSDAdapter) -> Node:
    """MoLORA with every expert's down-projection replaced by the shared one."""
    nx, nw = lift(x), lift(w0)
    _check_layer(nx, nw, adapter.config)
    probs = softmax_rows(matmul(nx, adapter.router))
    h = matmul(nx, adapter.down)
    return add(matmul(nx, nw), _mixture(h, adapter.ups, probs))


def mode_forward(x: Operand, w0: Operand, adapter: ModeAdapter) -> Node:
    """``y = x W0 + Σ_k Σ_i R_k^i(x) · x A_k B_k^iᵀ`` over the g rank groups."""
    nx, nw = lift(x), lift(w0)
    _check_layer(nx, nw, adapter.config)
    y = matmul(nx, nw)
    for k, group in enumerate(adapter.groups):
        probs = softmax_rows(matmul(nx, group.router))
        h = matmul(nx, adapter.down_slice(k))
        y = add(y, _mixture(h, group.ups, probs))
    return y


def forward(x: Operand, w0: Operand, adapter: Adapter) -> Node:
    """Differentiable forward pass of any adapter family."""
    match adapter:
        case LoraAdapter():
            return lora_forward(x, w0, adapter)
        case MoLoraAdapter():
            return molora_forward(x, w0, adapter)
        case MoLoraSDAdapter():
            return molora_sd_forward(x, w0, adapter)
        case ModeAdapter():
            return mode_forward(x, w0, adapter)
    msg = f"unsupported adapter type {type(adapter).__name__}"
    raise ConfigError(msg)


def apply_adapter(x: npt.ArrayLike, w0: npt.ArrayLike, adapter: Adapter) -> Matrix:
    """Output of the adapted layer as a plain matrix."""
    return forward(as_matrix(x, name="x"), as_matrix(w0, name="W0"), adapter).value


def dyadic_reconstruct(down: npt.ArrayLike, up: npt.ArrayLike) -> Matrix:
    """``Σ_i a_i ⊗ b_i`` over the rank columns of `down` (P x r) and `up` (Q x r)."""
    a, b = as_matrix(down, name="A"), as_matrix(up, name="B")
    if a.shape[1] != b.shape[1]:
        msg = f"rank mismatch: A is {a.shape}, B is {b.shape}"
        raise ShapeError(msg)
    delta = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[1]):
        delta += outer(a[:, i], b[:, i]).value
    return delta


def route(
    x_token: npt.ArrayLike, adapter: ModeAdapter, group: int
) -> npt.NDArray[np.float64]:
    """Routing distribution of group `group` (1-based) for one token."""
    if not 1 <= group <= adapter.config.groups:
        msg = f"group {group} out of range 1..{adapter.config.groups}"
        raise IndexError(msg)
    token = as_matrix(x_token, name="x_token")
    if token.shape != (1, adapter.config.P):
        msg = f"expected a 1x{adapter.config.P} token, got {token.shape}"
        raise ShapeError(msg)
    router = _value(adapter.groups[group - 1].router)
    return softmax_row(token @ router)


def effective_delta(x_token: npt.ArrayLike, adapter: Adapter) -> Matrix:
    """The P x Q update a single token actually receives after routing."""
    token = as_matrix(x_token, name="x_token")
    params = adapter.values()
    match adapter:
        case LoraAdapter():
            return dyadic_reconstruct(params["A"], params["B"])
        case MoLoraAdapter():
            weights = softmax_row(token @ params["router"])
            delta = np.zeros((adapter.config.P, adapter.config.Q))
            for i, w in enumerate(weights):
                down, up = params[f"experts.{i}.A"], params[f"experts.{i}.B"]
                delta += w * dyadic_reconstruct(down, up)
            return delta
        case MoLoraSDAdapter():
            weights = softmax_row(token @ params["router"])
            mixed_up = sum(
                w * params[f"experts.{i}.B"] for i, w in enumerate(weights)
            )
            return dyadic_reconstruct(params["A"], mixed_up)
        case ModeAdapter():
            p = adapter.config.p
            delta = np.zeros((adapter.config.P, adapter.config.Q))
            for k in range(adapter.config.groups):
                weights = softmax_row(token @ params[f"groups.{k}.router"])
                down_k = params["A"][:, k * p : (k + 1) * p]
                for i, w in enumerate(weights):
                    up = params[f"groups.{k}.experts.{i}.B"]
                    delta += w * dyadic_reconstruct(down_k, up)
            return delta
    msg = f"unsupported adapter type {type(adapter).__name__}"
    raise ConfigError(msg)


def hard_route_delta(adapter: ModeAdapter, choice: Sequence[int]) -> Matrix:
    """Update obtained when group k routes all weight to expert ``choice[k]``."""
    cfg = adapter.config
    if len(choice) != cfg.groups or not all(0 <= c < cfg.m for c in choice):
        msg = (
            f"choice {list(choice)} must pick one of {cfg.m} experts"
            f" for each of {cfg.groups} groups"
        )
        raise IndexError(msg)
    params = adapter.values()
    delta = np.zeros((cfg.P, cfg.Q))
    for k, expert in enumerate(choice):
        down_k = params["A"][:, k * cfg.p : (k + 1) * cfg.p]
        delta += dyadic_reconstruct(down_k, params[f"groups.{k}.experts.{expert}.B"])
    return delta


class ParamCount(BaseModel):
    """Trainable parameters of an adapter, split by role."""

    down: int
    """Scalars in down-projections."""

    up: int
    """Scalars in up-projections."""

    router: int
    """Scalars in routers."""

    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True)

    @property
    def total(self) -> int:
        return self.down + self.up + self.router


def param_count(kind: AdapterKind, config: AdapterConfig) -> ParamCount:
    """Closed-form parameter accounting for one adapter family."""
    _check_config(config)
    P, Q, r, m, g = config.P, config.Q, config.r, config.m, config.groups  # noqa: N806
    match kind:
        case "lora":
            return ParamCount(down=P * r, up=Q * r, router=0)
        case "molora":
            return ParamCount(down=m * P * r, up=m * Q * r, router=P * m)
        case "molora_sd":
            return ParamCount(down=P * r, up=m * Q * r, router=P * m)
        case "mode":
            # g groups x m experts x (Q x p) blocks = m * r * Q
            return ParamCount(down=P * r, up=g * m * Q * config.p, router=g * P * m)
    msg = f"unknown adapter kind {kind!r}"
    raise ConfigError(msg)


def enumerate_compositions(config: AdapterConfig) -> int:
    """Number m^(r/p) of distinct one-hot routing assignments of a MoDE layer."""
    _check_config(config)
    if config.groups * math.log2(max(config.m, 1)) > 64:  # noqa: PLR2004
        msg = f"{config.m}^{config.groups} compositions exceed the 64-bit range"
        raise CompositionOverflowError(msg)
    count = config.m**config.groups
    if count > MAX_COMPOSITIONS:
        msg = f"{config.m}^{config.groups} compositions exceed {MAX_COMPOSITIONS}"
        raise CompositionOverflowError(msg)
    return count


def mode_from_lora(adapter: LoraAdapter) -> ModeAdapter:
    """The MoDE 1×r×r layer computing exactly the same function as `adapter`."""
    cfg = adapter.config
    mode_cfg = AdapterConfig(P=cfg.P, Q=cfg.Q, r=cfg.r, m=1, p=cfg.r)
    params = adapter.values()
    group = ModeGroup((params["B"],), np.zeros((cfg.P, 1)))
    return ModeAdapter(mode_cfg, params["A"], (group,))


def mode_from_molora_sd(adapter: MoLoraSDAdapter) -> ModeAdapter:
    """The MoDE m×r×r layer computing exactly the same function as `adapter`."""
    cfg = adapter.config
    mode_cfg = AdapterConfig(P=cfg.P, Q=cfg.Q, r=cfg.r, m=cfg.m, p=cfg.r)
    params = adapter.values()
    ups = tuple(params[f"experts.{i}.B"] for i in range(cfg.m))
    return ModeAdapter(mode_cfg, params["A"], (ModeGroup(ups, params["router"]),))


class AdapterCheckpoint(BaseModel):
    """JSON document holding a trained adapter and its provenance."""

    kind: AdapterKind
    """Adapter family."""

    config: AdapterConfig
    """Shape hyperparameters, stored as {P, Q, r, m, p}."""

    matrices: dict[str, list[list[float]]]
    """Row-major parameter values keyed by parameter name."""

    seed: int
    """Seed the adapter was initialized with."""

    step: int
    """Optimizer steps applied."""

    task: int | None = None
    """Task the adapter was trained on, if it was trained on a single task."""

    model_config = ConfigDict(use_attribute_docstrings=True)


def save_checkpoint(
    path: str | os.PathLike[str],
    adapter: Adapter,
    *,
    seed: int,
    step: int,
    task: int | None = None,
) -> Path:
    checkpoint = AdapterCheckpoint(
        kind=adapter.kind,
        config=adapter.config,
        matrices={name: value.tolist() for name, value in adapter.values().items()},
        seed=seed,
        step=step,
        task=task,
    )
    logger.debug("writing %s checkpoint to %s", adapter.kind, path)
    return write_model_json(path, checkpoint)


def load_checkpoint(path: str | os.PathLike[str]) -> tuple[Adapter, AdapterCheckpoint]:
    """Read a checkpoint back into an adapter (bit-exact for float64)."""
    checkpoint = load_model_json(AdapterCheckpoint, path)
    adapter = adapter_from_parameters(
        checkpoint.kind,
        checkpoint.config,
        {name: np.array(rows) for name, rows in checkpoint.matrices.items()},
    )
    return adapter, checkpoint
