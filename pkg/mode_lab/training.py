"""Optimizers and the training loop for adapters on a frozen base layer."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time
from typing import TYPE_CHECKING

import numpy as np
from pydantic import BaseModel, ConfigDict

from mode_lab.adapters import apply_adapter, forward
from mode_lab.config import AdapterConfig, AdapterKind, TrainConfig
from mode_lab.exceptions import ConfigError, NumericError, ShapeError
from mode_lab.synthbench import (
    BatchSampler,
    gather_tasks,
    oracle_best_loss,
    split_train_eval,
)
from mode_lab.tensor_core import Node, backward, lift, mean_all, square, sub
from mode_lab.utils import write_csv


if TYPE_CHECKING:
    import os
    from pathlib import Path

    from mode_lab.adapters import Adapter
    from mode_lab.synthbench import Batch, SyntheticTaskSet, TaskMix
    from mode_lab.tensor_core import Matrix, Operand


logger = logging.getLogger(__name__)

OPTIMIZER_NOTE = (
    "Adam/SGD stand in for Adafactor; only the learning rate is carried over."
)


@dataclass(eq=False)
class OptimizerState:
    """Per-parameter moment estimates (Adam only) and the update counter."""

    step: int = 0
    first: dict[str, Matrix] = field(default_factory=dict)
    second: dict[str, Matrix] = field(default_factory=dict)


def init_optimizer_state(adapter: Adapter, config: TrainConfig) -> OptimizerState:
    if config.optimizer == "sgd":
        return OptimizerState()
    values = adapter.values()
    return OptimizerState(
        first={name: np.zeros_like(v) for name, v in values.items()},
        second={name: np.zeros_like(v) for name, v in values.items()},
    )


def mse_loss(pred: Operand, target: Operand) -> Node:
    """Mean over all entries of the squared error."""
    p, t = lift(pred), lift(target)
    if p.shape != t.shape:
        msg = f"mse_loss: prediction {p.shape} and target {t.shape} differ"
        raise ShapeError(msg)
    return mean_all(square(sub(p, t)))


def loss_and_grads(
    adapter: Adapter, w0: Matrix, x: Matrix, y: Matrix
) -> tuple[float, dict[str, Matrix]]:
    """MSE of the adapted layer on (x, y) and its gradient for every parameter."""
    leaves = adapter.as_leaves()
    loss = mse_loss(forward(x, Node.constant(w0, name="W0"), leaves), y)
    backward(loss)
    grads = {}
    for name, param in leaves.parameters().items():
        assert isinstance(param, Node)
        grads[name] = param.grad
    return loss.item(), grads


def apply_update(
    params: dict[str, Matrix],
    grads: dict[str, Matrix],
    state: OptimizerState,
    config: TrainConfig,
) -> tuple[dict[str, Matrix], OptimizerState]:
    """One optimizer update; returns new parameters and a new state."""
    step = state.step + 1
    lr = config.learning_rate
    if config.optimizer == "sgd":
        new_params = {name: params[name] - lr * grads[name] for name in params}
        return new_params, OptimizerState(step=step)

    beta1, beta2 = config.betas
    first, second, new_params = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        first[name] = beta1 * state.first[name] + (1.0 - beta1) * g
        second[name] = beta2 * state.second[name] + (1.0 - beta2) * g * g
        m_hat = first[name] / (1.0 - beta1**step)
        v_hat = second[name] / (1.0 - beta2**step)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new_params, OptimizerState(step=step, first=first, second=second)


def train_step(
    adapter: Adapter,
    w0: Matrix,
    batch: Batch,
    config: TrainConfig,
    state: OptimizerState,
) -> tuple[Adapter, OptimizerState, float]:
    """Forward, backward and one update of every trainable matrix.

    Returns the loss measured before the update. `w0` is never modified.
    """
    try:
        loss, grads = loss_and_grads(adapter, w0, batch.x, batch.y)
    except NumericError as e:
        msg = f"numeric failure at step {state.step + 1}: {e}"
        raise NumericError(msg) from e
    if not np.isfinite(loss):
        msg = f"non-finite loss {loss!r} at step {state.step + 1}"
        raise NumericError(msg)
    params, new_state = apply_update(adapter.values(), grads, state, config)
    return adapter.replace(params), new_state, loss


def evaluate(adapter: Adapter, w0: Matrix, x: Matrix, y: Matrix) -> float:
    """MSE of the adapted layer without building a gradient graph."""
    pred = apply_adapter(x, w0, adapter)
    if pred.shape != y.shape:
        msg = f"evaluate: prediction {pred.shape} and target {y.shape} differ"
        raise ShapeError(msg)
    return float(np.mean((pred - y) ** 2))


class RunReport(BaseModel):
    """Outcome and provenance of one training run."""

    label: str
    """Variant label."""

    kind: AdapterKind
    """Adapter family."""

    adapter: AdapterConfig
    """Adapter shape echo."""

    train: TrainConfig
    """Training settings echo."""

    seed: int
    """Seed used for initialization."""

    task: int | None = None
    """Task trained on, or None for the uniform mixture."""

    losses: list[float]
    """Pre-update training loss of every step."""

    final_eval_loss: float
    """MSE over all held-out rows."""

    task_eval_losses: dict[int, float]
    """Held-out MSE per task."""

    oracle_floor: float
    """Irreducible MSE of the generating model."""

    train_examples: int
    """Rows available for training."""

    eval_examples: int
    """Rows held out for evaluation."""

    total_params: int
    """Trainable scalars of the adapter."""

    wall_clock_seconds: float = 0.0
    """Elapsed time; the only field that varies between identical reruns."""

    optimizer_note: str = OPTIMIZER_NOTE
    """Which optimizer substitution applies to this run."""

    model_config = ConfigDict(use_attribute_docstrings=True)


def train_loop(
    adapter: Adapter,
    w0: Matrix,
    taskset: SyntheticTaskSet,
    config: TrainConfig,
    *,
    task_mix: TaskMix = "mixture",
    label: str | None = None,
    seed: int = 0,
) -> tuple[Adapter, RunReport]:
    """Train `adapter` on `taskset` and evaluate it on the held-out rows.

    Each task's rows are split into train and eval parts first; minibatches are
    then drawn from the training rows by a sampler seeded with ``config.seed``.
    `seed` is only echoed in the report (it is the adapter's init seed).
    """
    rng = np.random.default_rng(config.seed)
    split = split_train_eval(taskset, config.eval_fraction, rng)
    sampler = BatchSampler(taskset, task_mix, rng, split.train)
    if len(sampler) < config.batch_size:
        msg = (
            f"batch_size {config.batch_size} exceeds the {len(sampler)} training"
            " examples available"
        )
        raise ConfigError(msg)

    start = time.perf_counter()
    state = init_optimizer_state(adapter, config)
    losses = []
    for step in range(1, config.steps + 1):
        batch = sampler.next_batch(config.batch_size)
        adapter, state, loss = train_step(adapter, w0, batch, config, state)
        losses.append(loss)
        if step % config.log_every == 0:
            logger.debug("step %d/%d loss %.6g", step, config.steps, loss)

    tasks = taskset.task_labels if task_mix == "mixture" else [int(task_mix)]
    held_out = gather_tasks(taskset, split.eval, tasks)
    task_losses = {t: evaluate(adapter, w0, *_rows(held_out, t)) for t in tasks}
    report = RunReport(
        label=label or adapter.kind,
        kind=adapter.kind,
        adapter=adapter.config,
        train=config,
        seed=seed,
        task=None if task_mix == "mixture" else int(task_mix),
        losses=losses,
        final_eval_loss=evaluate(adapter, w0, held_out.x, held_out.y),
        task_eval_losses=task_losses,
        oracle_floor=oracle_best_loss(taskset),
        train_examples=len(sampler),
        eval_examples=len(held_out),
        total_params=adapter.scalar_count(),
        wall_clock_seconds=time.perf_counter() - start,
    )
    logger.info(
        "%s: %d steps, final train loss %.6g, eval loss %.6g (floor %.3g)",
        report.label,
        config.steps,
        losses[-1],
        report.final_eval_loss,
        report.oracle_floor,
    )
    return adapter, report


def _rows(batch: Batch, task: int) -> tuple[Matrix, Matrix]:
    mask = batch.task_ids == task
    return batch.x[mask], batch.y[mask]


def write_losses_csv(report: RunReport, path: str | os.PathLike[str]) -> Path:
    rows = [
        {"step": step, "train_loss": repr(loss)}
        for step, loss in enumerate(report.losses, start=1)
    ]
    return write_csv(path, ["step", "train_loss"], rows)
