"""Analysis toolkit: rank-slice PCA, cluster separation, win rates, budgets."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
import logging
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import pdist
from scipy.stats import binom

from mode_lab.adapters import LoraAdapter, param_count
from mode_lab.config import AdapterConfig, AdapterKind
from mode_lab.exceptions import ConfigError, InfeasibleError, ShapeError
from mode_lab.tensor_core import as_matrix
from mode_lab.utils import write_csv


if TYPE_CHECKING:
    from collections.abc import Sequence
    import os
    from pathlib import Path

    import numpy.typing as npt

    from mode_lab.tensor_core import Matrix


logger = logging.getLogger(__name__)

SliceKind = Literal["down", "up"]
GroupKey = Literal["rank_index", "task"]


@dataclass(frozen=True, eq=False)
class RankSliceSet:
    """Columns of trained projection matrices with their provenance.

    Row ``i`` of `vectors` is column ``rank_index[i]`` (1-based) of the down- or
    up-projection of the adapter trained on task ``tasks[i]``.
    """

    vectors: Matrix
    tasks: npt.NDArray[np.int64]
    rank_index: npt.NDArray[np.int64]
    kind: SliceKind

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def labels(self, key: GroupKey = "rank_index") -> npt.NDArray[np.int64]:
        return self.rank_index if key == "rank_index" else self.tasks


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Mean, orthonormal component rows and explained-variance fractions."""

    mean: npt.NDArray[np.float64]
    components: Matrix
    explained_variance_ratio: npt.NDArray[np.float64]

    def project(self, vectors: npt.ArrayLike) -> Matrix:
        return (as_matrix(vectors, name="vectors") - self.mean) @ self.components.T


def collect_rank_slices(
    adapters: Mapping[int, LoraAdapter] | Sequence[tuple[int, LoraAdapter]],
    kind: SliceKind,
) -> RankSliceSet:
    """Slice every adapter's A (kind="down") or B (kind="up") into its r columns."""
    items = list(adapters.items()) if isinstance(adapters, Mapping) else list(adapters)
    if not items:
        msg = "collect_rank_slices needs at least one adapter"
        raise ConfigError(msg)
    shapes = set()
    vectors, tasks, ranks = [], [], []
    for task, adapter in items:
        if not isinstance(adapter, LoraAdapter):
            msg = f"rank slices need LoRA adapters, got {adapter.kind} for task {task}"
            raise ShapeError(msg)
        values = adapter.values()
        shapes.add((values["A"].shape, values["B"].shape))
        matrix = values["A"] if kind == "down" else values["B"]
        for j in range(matrix.shape[1]):
            vectors.append(matrix[:, j])
            tasks.append(task)
            ranks.append(j + 1)
    if len(shapes) > 1:
        msg = f"adapters have heterogeneous shapes: {sorted(shapes)}"
        raise ShapeError(msg)
    return RankSliceSet(
        np.vstack(vectors),
        np.array(tasks, dtype=np.int64),
        np.array(ranks, dtype=np.int64),
        kind,
    )


def pca(slices: RankSliceSet | npt.ArrayLike, k: int = 3) -> tuple[PcaModel, Matrix]:
    """Top-k principal components via the SVD of the centered data.

    Each component is oriented so that its largest-magnitude coordinate is
    positive, which makes the result deterministic.
    """
    data = as_matrix(
        slices.vectors if isinstance(slices, RankSliceSet) else slices, name="data"
    )
    n, d = data.shape
    if not 1 <= k <= d:
        msg = f"k must lie in 1..{d} (the vector dimension), got {k}"
        raise ConfigError(msg)
    if n < k + 1:
        msg = f"pca with k={k} needs at least {k + 1} vectors, got {n}"
        raise ConfigError(msg)
    mean = data.mean(axis=0)
    centered = data - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    energy = singular**2
    total = energy.sum()
    ratio = energy[:k] / total if total > 0 else np.zeros(k)
    model = PcaModel(mean, components, ratio)
    return model, centered @ components.T


def cluster_separation(points: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Mean within-label over mean between-label pairwise Euclidean distance.

    Lower means tighter clusters; labels assigned at random give about 1.
    """
    pts = as_matrix(points, name="points")
    lab = np.asarray(labels)
    if lab.shape != (pts.shape[0],):
        msg = f"{pts.shape[0]} points but labels have shape {lab.shape}"
        raise ShapeError(msg)
    unique, counts = np.unique(lab, return_counts=True)
    if len(unique) < 2 or counts.min() < 2:  # noqa: PLR2004
        msg = "cluster_separation needs at least 2 labels with at least 2 points each"
        raise ConfigError(msg)
    distances = pdist(pts)
    i, j = np.triu_indices(len(lab), k=1)
    same = lab[i] == lab[j]
    between = distances[~same].mean()
    if between == 0:
        msg = "all points with different labels coincide"
        raise ConfigError(msg)
    return float(distances[same].mean() / between)


def separation_by(
    slices: RankSliceSet, points: npt.ArrayLike, key: GroupKey = "rank_index"
) -> float:
    return cluster_separation(points, slices.labels(key))


def _scores(a: npt.ArrayLike, b: npt.ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    sa, sb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if sa.shape != sb.shape or sa.ndim != 1:
        msg = f"per-task scores must be aligned vectors, got {sa.shape} and {sb.shape}"
        raise ShapeError(msg)
    if sa.size == 0:
        msg = "win_rate needs at least one task"
        raise ShapeError(msg)
    return sa, sb


def tally(a: npt.ArrayLike, b: npt.ArrayLike) -> tuple[int, int, int]:
    """(wins, losses, ties) of `a` against `b`; higher scores win."""
    sa, sb = _scores(a, b)
    return int((sa > sb).sum()), int((sa < sb).sum()), int((sa == sb).sum())


def win_rate(scores_a: npt.ArrayLike, scores_b: npt.ArrayLike) -> float:
    """(wins + ties/2) / n over tasks; a win is ``scores_a[t] > scores_b[t]``."""
    wins, losses, ties = tally(scores_a, scores_b)
    return (wins + 0.5 * ties) / (wins + losses + ties)


class SignificanceResult(BaseModel):
    """Outcome of the one-sided exact binomial test."""

    significant: bool
    """Whether p_value falls below 1 - confidence."""

    p_value: float
    """P[X >= wins] for X ~ Binomial(n, p0)."""

    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True)


def binomial_significance(
    wins: int,
    n: int,
    threshold: float = 0.5,
    confidence: float = 0.99,
) -> SignificanceResult:
    """Test whether `wins` out of `n` (ties excluded) beats `threshold`."""
    if n <= 0:
        msg = "binomial_significance needs n > 0 (ties are excluded from n)"
        raise ConfigError(msg)
    if not 0 <= wins <= n:
        msg = f"wins={wins} must lie in 0..{n}"
        raise ConfigError(msg)
    p_value = float(binom.sf(wins - 1, n, threshold))
    return SignificanceResult(significant=p_value < 1.0 - confidence, p_value=p_value)


class WinRateEntry(BaseModel):
    """Pairwise comparison of two variants over tasks."""

    model: str
    """Row variant."""

    baseline: str
    """Column variant."""

    win_rate: float
    """(wins + ties/2) / tasks."""

    wins: int
    losses: int
    ties: int

    p_value: float
    """One-sided exact binomial p-value over the non-tied tasks."""

    significant: bool
    """Win rate significantly above 50% at the chosen confidence."""

    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True)


def win_rate_matrix(
    task_losses: Mapping[str, Sequence[float]],
    confidence: float = 0.99,
) -> list[WinRateEntry]:
    """All ordered pairs of variants; lower per-task loss wins."""
    entries = []
    for model, losses in task_losses.items():
        for baseline, other in task_losses.items():
            if model == baseline:
                continue
            scores_a, scores_b = -np.asarray(losses), -np.asarray(other)
            wins, defeats, ties = tally(scores_a, scores_b)
            decided = wins + defeats
            test = (
                binomial_significance(wins, decided, confidence=confidence)
                if decided
                else SignificanceResult(significant=False, p_value=1.0)
            )
            entries.append(
                WinRateEntry(
                    model=model,
                    baseline=baseline,
                    win_rate=win_rate(scores_a, scores_b),
                    wins=wins,
                    losses=defeats,
                    ties=ties,
                    p_value=test.p_value,
                    significant=test.significant,
                )
            )
    return entries


def param_percent(adapter_total: int, backbone_nonembedding: int) -> float:
    """Adapter size as a percentage of the backbone, rounded to two decimals."""
    if backbone_nonembedding <= 0:
        msg = "backbone_nonembedding must be positive"
        raise ConfigError(msg)
    return round(100.0 * adapter_total / backbone_nonembedding, 2)


class BudgetRow(BaseModel):
    """Largest expert count of one (family, r, p) that fits a parameter budget."""

    family: AdapterKind
    m: int
    r: int
    p: int
    total: int
    percent: float | None = None
    compositions: int

    model_config = ConfigDict(frozen=True)


def _count(
    family: AdapterKind,
    P: int,  # noqa: N803
    Q: int,  # noqa: N803
    r: int,
    m: int,
    p: int,
) -> int:
    return param_count(family, AdapterConfig(P=P, Q=Q, r=r, m=m, p=p)).total


def max_experts(
    family: AdapterKind,
    P: int,  # noqa: N803
    Q: int,  # noqa: N803
    r: int,
    p: int,
    budget: int,
) -> int:
    """Largest m whose total stays within `budget` (0 if even m=1 does not fit).

    Totals are affine in m, so the answer follows from two evaluations.
    """
    one = _count(family, P, Q, r, 1, p)
    per_expert = _count(family, P, Q, r, 2, p) - one
    if one > budget:
        return 0
    if per_expert == 0:
        return 1
    return 1 + (budget - one) // per_expert


def iso_parametric_grid(
    P: int,  # noqa: N803
    Q: int,  # noqa: N803
    budget: int,
    families: Sequence[AdapterKind],
    r_choices: Sequence[int],
    p_choices: Sequence[int] = (1,),
    backbone_nonembedding: int | None = None,
) -> list[BudgetRow]:
    """For every family and (r, p), the maximal-m configuration within `budget`.

    LoRA has no experts and is listed with m=1 for each rank that fits. MoLORA
    and MoLORA-SD route whole experts, so their p equals r.
    """
    if budget <= 0:
        msg = f"budget must be positive, got {budget}"
        raise ConfigError(msg)
    rows = []
    for family in families:
        for r in r_choices:
            ps = [p for p in p_choices if p <= r and r % p == 0]
            if family != "mode":
                ps = [r]
            for p in ps:
                m = max_experts(family, P, Q, r, p, budget)
                if family == "lora":
                    m = min(m, 1)
                if m < 1:
                    continue
                total = _count(family, P, Q, r, m, p)
                rows.append(
                    BudgetRow(
                        family=family,
                        m=m,
                        r=r,
                        p=p,
                        total=total,
                        percent=param_percent(total, backbone_nonembedding)
                        if backbone_nonembedding
                        else None,
                        # exact big integer; may exceed 64 bits for large grids
                        compositions=m ** (r // p),
                    )
                )
    if not rows:
        cheapest = min(
            _count(family, P, Q, r, 1, 1 if family == "mode" else r)
            for family in families
            for r in r_choices
        )
        msg = (
            f"no configuration fits a budget of {budget} parameters;"
            f" the cheapest candidate needs {cheapest}"
        )
        raise InfeasibleError(msg)
    logger.info("budget %d: %d feasible configurations", budget, len(rows))
    return rows


def lora_baseline_budget(num_tasks: int, r: int, P: int, Q: int) -> int:  # noqa: N803
    """Parameters of `num_tasks` individual rank-r LoRA adapters."""
    return num_tasks * _count("lora", P, Q, r, 1, r)


def export_points_csv(
    slices: RankSliceSet, points: npt.ArrayLike, path: str | os.PathLike[str]
) -> Path:
    pts = as_matrix(points, name="points")
    pcs = [f"pc{i + 1}" for i in range(pts.shape[1])]
    rows = [
        {
            **{pc: repr(float(v)) for pc, v in zip(pcs, row)},
            "task_label": int(task),
            "rank_index": int(rank),
            "kind": slices.kind,
        }
        for row, task, rank in zip(pts, slices.tasks, slices.rank_index)
    ]
    return write_csv(path, [*pcs, "task_label", "rank_index", "kind"], rows)


def export_win_rate_csv(
    entries: Sequence[WinRateEntry],
    names: Sequence[str],
    path: str | os.PathLike[str],
) -> Path:
    """Square win-rate table (row beats column); ``*`` marks significance."""
    cells = {(e.model, e.baseline): e for e in entries}
    rows = []
    for model in names:
        row = {"model": model}
        for baseline in names:
            entry = cells.get((model, baseline))
            if entry is None:
                row[baseline] = "\\"
            else:
                flag = "*" if entry.significant else ""
                row[baseline] = f"{entry.win_rate:.4f}{flag}"
        rows.append(row)
    return write_csv(path, ["model", *names], rows)


def export_win_rate_tests_csv(
    entries: Sequence[WinRateEntry], path: str | os.PathLike[str]
) -> Path:
    fields = list(WinRateEntry.model_fields)
    return write_csv(path, fields, [e.model_dump() for e in entries])
