"""Synthetic multi-task regression suites.

Each task t is a linear regression ``Y_t = X_t (W0 + ΔW_t) + noise`` around a
shared base layer ``W0``. The true updates ``ΔW_t = A*_t B*_tᵀ`` either share
one orthonormal down-projection (``shared_down=True``) or draw their own, which
lets desk-scale runs probe whether down-projections are task-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
import io
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from mode_lab.config import SynthSpec
from mode_lab.exceptions import ConfigError
from mode_lab.utils import atomic_write_text, load_model_json, write_model_json


if TYPE_CHECKING:
    from collections.abc import Sequence
    import os

    import numpy.typing as npt

    from mode_lab.tensor_core import Matrix


logger = logging.getLogger(__name__)

TaskMix = int | Literal["mixture"]
IndexArray = np.ndarray

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True, eq=False)
class SyntheticTaskSet:
    """Generated tasks plus the ground truth they were generated from."""

    spec: SynthSpec
    base: Matrix
    downs: tuple[Matrix, ...]
    deltas: tuple[Matrix, ...]
    inputs: tuple[Matrix, ...]
    targets: tuple[Matrix, ...]

    @property
    def num_tasks(self) -> int:
        return len(self.inputs)

    @property
    def task_labels(self) -> list[int]:
        return list(range(self.num_tasks))

    def samples(self, task: int) -> int:
        return self.inputs[task].shape[0]


@dataclass(frozen=True, eq=False)
class Batch:
    """Stacked rows drawn from one or more tasks."""

    x: Matrix
    y: Matrix
    task_ids: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True, eq=False)
class TaskSplit:
    """Disjoint per-task train and eval row indices."""

    train: tuple[IndexArray, ...]
    eval: tuple[IndexArray, ...]

    @property
    def train_size(self) -> int:
        return sum(len(idx) for idx in self.train)

    @property
    def eval_size(self) -> int:
        return sum(len(idx) for idx in self.eval)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> Matrix:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def gen_multitask(spec: SynthSpec) -> SyntheticTaskSet:
    """Generate a task suite; a pure function of `spec`."""
    P, Q, k = spec.input_dim, spec.output_dim, spec.true_rank  # noqa: N806
    if k > min(P, Q):
        msg = f"true_rank {k} exceeds min(P, Q) = {min(P, Q)}"
        raise ConfigError(msg)
    rng = np.random.default_rng(spec.seed)
    base = rng.normal(0.0, 1.0 / np.sqrt(P), size=(P, Q))
    shared = _orthonormal(rng, P, k) if spec.shared_down else None

    downs, deltas = [], []
    for _ in range(spec.num_tasks):
        down = shared if shared is not None else _orthonormal(rng, P, k)
        delta = down @ rng.standard_normal((Q, k)).T
        downs.append(down)
        deltas.append(delta / np.linalg.norm(delta))

    shifts = [np.zeros(P)] * spec.num_tasks
    if spec.task_shift > 0:
        shifts = []
        for _ in range(spec.num_tasks):
            direction = rng.standard_normal(P)
            shifts.append(spec.task_shift * direction / np.linalg.norm(direction))

    inputs, targets = [], []
    for delta, shift in zip(deltas, shifts):
        x = rng.standard_normal((spec.samples_per_task, P)) + shift
        noise = rng.normal(0.0, spec.noise_std, size=(spec.samples_per_task, Q))
        inputs.append(x)
        targets.append(x @ (base + delta) + noise)

    logger.debug(
        "generated %d tasks (P=%d, Q=%d, r*=%d, shared_down=%s)",
        spec.num_tasks,
        P,
        Q,
        k,
        spec.shared_down,
    )
    return SyntheticTaskSet(
        spec, base, tuple(downs), tuple(deltas), tuple(inputs), tuple(targets)
    )


def subspace_rank(taskset: SyntheticTaskSet, tol: float = 1e-8) -> int:
    """Rank of the column space spanned by all true task updates."""
    return int(np.linalg.matrix_rank(np.hstack(taskset.deltas), tol=tol))


def oracle_best_loss(taskset: SyntheticTaskSet) -> float:
    """Irreducible MSE of the generative model (the noise variance)."""
    return taskset.spec.noise_std**2


def split_train_eval(
    taskset: SyntheticTaskSet,
    eval_fraction: float,
    rng: np.random.Generator,
) -> TaskSplit:
    """Hold out `eval_fraction` of each task's rows (at least one) for evaluation."""
    if not 0 < eval_fraction < 1:
        msg = f"eval_fraction must lie in (0, 1), got {eval_fraction}"
        raise ConfigError(msg)
    train, held_out = [], []
    for task in taskset.task_labels:
        n = taskset.samples(task)
        n_eval = min(n - 1, max(1, round(n * eval_fraction)))
        perm = rng.permutation(n)
        held_out.append(np.sort(perm[:n_eval]))
        train.append(np.sort(perm[n_eval:]))
    return TaskSplit(tuple(train), tuple(held_out))


def _pool(
    taskset: SyntheticTaskSet,
    task_mix: TaskMix,
    indices: Sequence[IndexArray] | None,
) -> npt.NDArray[np.int64]:
    """(task, row) pairs eligible for sampling."""
    if task_mix == "mixture":
        tasks = taskset.task_labels
    elif isinstance(task_mix, int) and 0 <= task_mix < taskset.num_tasks:
        tasks = [task_mix]
    else:
        msg = f"task_mix must be 'mixture' or a task in 0..{taskset.num_tasks - 1}"
        raise ConfigError(msg)
    rows = []
    for t in tasks:
        idx = indices[t] if indices is not None else np.arange(taskset.samples(t))
        rows.append(np.column_stack([np.full(len(idx), t), idx]))
    return np.vstack(rows).astype(np.int64)


def gather(taskset: SyntheticTaskSet, pairs: npt.NDArray[np.int64]) -> Batch:
    """Stack the rows named by (task, row) pairs into one batch."""
    x = np.vstack([taskset.inputs[t][i] for t, i in pairs])
    y = np.vstack([taskset.targets[t][i] for t, i in pairs])
    return Batch(x, y, pairs[:, 0].copy())


def gather_tasks(
    taskset: SyntheticTaskSet,
    indices: Sequence[IndexArray],
    tasks: Sequence[int] | None = None,
) -> Batch:
    """All rows of the selected tasks, in task order."""
    selected = taskset.task_labels if tasks is None else list(tasks)
    x = np.vstack([taskset.inputs[t][indices[t]] for t in selected])
    y = np.vstack([taskset.targets[t][indices[t]] for t in selected])
    ids = np.concatenate([np.full(len(indices[t]), t) for t in selected])
    return Batch(x, y, ids.astype(np.int64))


def sample_batch(
    taskset: SyntheticTaskSet,
    task_mix: TaskMix,
    batch_size: int,
    rng: np.random.Generator,
    indices: Sequence[IndexArray] | None = None,
) -> Batch:
    """Draw one batch without replacement from a single task or from all tasks."""
    pool = _pool(taskset, task_mix, indices)
    if batch_size > len(pool):
        msg = f"batch_size {batch_size} exceeds the {len(pool)} available examples"
        raise ConfigError(msg)
    picks = rng.choice(len(pool), size=batch_size, replace=False)
    return gather(taskset, pool[picks])


class BatchSampler:
    """Epoch-based minibatch sampler.

    Rows are drawn without replacement within an epoch. When an epoch runs out,
    the pool is reshuffled; a batch crossing the boundary takes the rest of the
    old epoch and continues in the new one.
    """

    def __init__(
        self,
        taskset: SyntheticTaskSet,
        task_mix: TaskMix,
        rng: np.random.Generator,
        indices: Sequence[IndexArray] | None = None,
    ):
        self.taskset = taskset
        self.rng = rng
        self.pool = _pool(taskset, task_mix, indices)
        self.epoch = 0
        self._order = rng.permutation(len(self.pool))
        self._cursor = 0

    def __len__(self) -> int:
        return len(self.pool)

    def next_batch(self, batch_size: int) -> Batch:
        if batch_size > len(self.pool):
            msg = f"batch_size {batch_size} exceeds the {len(self.pool)} pooled examples"
            raise ConfigError(msg)
        picks = []
        needed = batch_size
        while needed:
            if self._cursor == len(self._order):
                self._order = self.rng.permutation(len(self.pool))
                self._cursor = 0
                self.epoch += 1
            take = self._order[self._cursor : self._cursor + needed]
            self._cursor += len(take)
            needed -= len(take)
            picks.append(take)
        return gather(self.taskset, self.pool[np.concatenate(picks)])


class TasksetManifest(BaseModel):
    """Index of a task suite persisted as CSV matrices."""

    spec: SynthSpec
    """Generator settings the suite was built from."""

    seed: int
    """Generator seed (echo of spec.seed)."""

    files: dict[str, str]
    """Matrix name to CSV file name."""

    model_config = ConfigDict(use_attribute_docstrings=True)


def _matrix_csv(matrix: Matrix) -> str:
    buf = io.StringIO()
    np.savetxt(buf, matrix, fmt="%.17g", delimiter=",")
    return buf.getvalue()


def save_taskset(taskset: SyntheticTaskSet, directory: str | os.PathLike[str]) -> Path:
    """Write every matrix as CSV plus a JSON manifest; returns the manifest path."""
    root = Path(directory)
    matrices: dict[str, Matrix] = {"base": taskset.base}
    for t in taskset.task_labels:
        matrices[f"task_{t:02d}_down"] = taskset.downs[t]
        matrices[f"task_{t:02d}_delta"] = taskset.deltas[t]
        matrices[f"task_{t:02d}_x"] = taskset.inputs[t]
        matrices[f"task_{t:02d}_y"] = taskset.targets[t]
    files = {}
    for name, matrix in matrices.items():
        files[name] = f"{name}.csv"
        atomic_write_text(root / files[name], _matrix_csv(matrix))
    manifest = TasksetManifest(spec=taskset.spec, seed=taskset.spec.seed, files=files)
    return write_model_json(root / MANIFEST_NAME, manifest)


def load_taskset(directory: str | os.PathLike[str]) -> SyntheticTaskSet:
    root = Path(directory)
    manifest = load_model_json(TasksetManifest, root / MANIFEST_NAME)

    def read(name: str) -> Matrix:
        try:
            return np.loadtxt(root / manifest.files[name], delimiter=",", ndmin=2)
        except KeyError as e:
            msg = f"manifest in {root} has no entry for {name!r}"
            raise ConfigError(msg) from e

    tasks = range(manifest.spec.num_tasks)
    return SyntheticTaskSet(
        manifest.spec,
        read("base"),
        tuple(read(f"task_{t:02d}_down") for t in tasks),
        tuple(read(f"task_{t:02d}_delta") for t in tasks),
        tuple(read(f"task_{t:02d}_x") for t in tasks),
        tuple(read(f"task_{t:02d}_y") for t in tasks),
    )
