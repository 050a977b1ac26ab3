"""Study runners shared by the command line and the statistical test suite."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from typing import TYPE_CHECKING

from mode_lab.adapters import LoraAdapter, init_adapter, param_count
from mode_lab.analysis import collect_rank_slices, pca, separation_by
from mode_lab.config import AdapterConfig
from mode_lab.exceptions import ConfigError
from mode_lab.synthbench import gen_multitask
from mode_lab.training import train_loop
from mode_lab.utils import derive_seed


if TYPE_CHECKING:
    from collections.abc import Sequence

    from mode_lab.adapters import Adapter
    from mode_lab.analysis import SliceKind
    from mode_lab.config import AdapterKind, AdapterSpec, ExperimentConfig, TrainConfig
    from mode_lab.synthbench import SyntheticTaskSet
    from mode_lab.training import RunReport


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class VariantResult:
    """A trained variant of a comparison."""

    spec: AdapterSpec
    label: str
    adapter: Adapter
    report: RunReport


def build_taskset(config: ExperimentConfig) -> SyntheticTaskSet:
    """Task suite of an experiment.

    The generator seed mixes the master seed with ``synth.seed``, so changing
    either one gives a new suite.
    """
    seed = derive_seed(config.seed, f"synth/{config.synth.seed}")
    return gen_multitask(config.synth.model_copy(update={"seed": seed}))


def shuffle_seed(master: int) -> int:
    """Seed of the train/eval split and batch order shared by all variants."""
    return derive_seed(master, "shuffle")


def init_seed(master: int, spec: AdapterSpec) -> int:
    """Initialization seed of a variant; identical variants share it."""
    config = spec.config.model_dump_json(by_alias=True)
    return derive_seed(master, f"init/{spec.kind}/{config}")


def run_single_task_study(
    taskset: SyntheticTaskSet,
    r: int,
    train_config: TrainConfig,
    seed: int,
) -> list[tuple[LoraAdapter, RunReport]]:
    """Train one rank-r LoRA per task, all starting from the same initialization."""
    config = AdapterConfig(P=taskset.spec.input_dim, Q=taskset.spec.output_dim, r=r)
    init_seed_value = derive_seed(seed, "init/single-task")
    shared_init = init_adapter("lora", config, init_seed_value)
    runs = []
    for task in taskset.task_labels:
        task_train = train_config.model_copy(
            update={"seed": derive_seed(seed, f"shuffle/task_{task:02d}")}
        )
        adapter, report = train_loop(
            shared_init,
            taskset.base,
            taskset,
            task_train,
            task_mix=task,
            label=f"LoRA {r} task {task}",
            seed=init_seed_value,
        )
        assert isinstance(adapter, LoraAdapter)
        runs.append((adapter, report))
    logger.info("trained %d single-task adapters (r=%d)", len(runs), r)
    return runs


def clustering_scores(
    adapters: Sequence[tuple[int, LoraAdapter]], k: int = 3
) -> dict[SliceKind, float]:
    """Separation of down- and up-projection slices grouped by rank index.

    Scores are computed on the top-k principal components, the same points
    that `pca` exports.
    """
    scores: dict[SliceKind, float] = {}
    for kind in ("down", "up"):
        slices = collect_rank_slices(adapters, kind)
        _, points = pca(slices, k=k)
        scores[kind] = separation_by(slices, points, "rank_index")
    return scores


def unique_labels(specs: Sequence[AdapterSpec]) -> list[str]:
    """Variant labels, suffixed with ``#n`` where they repeat."""
    seen: dict[str, int] = {}
    labels = []
    for spec in specs:
        count = seen.get(spec.label, 0) + 1
        seen[spec.label] = count
        labels.append(spec.label if count == 1 else f"{spec.label} #{count}")
    return labels


def run_comparison(
    taskset: SyntheticTaskSet,
    variants: Sequence[AdapterSpec],
    train_config: TrainConfig,
    seed: int,
    workers: int = 1,
) -> list[VariantResult]:
    """Train every variant on the same seeded mixture split.

    All variants see the same train/eval split and batch order. Variants run
    concurrently when `workers` > 1; results keep the order of `variants`.
    """
    if len(variants) < 2:  # noqa: PLR2004
        msg = f"a comparison needs at least 2 variants, got {len(variants)}"
        raise ConfigError(msg)
    shared_train = train_config.model_copy(update={"seed": shuffle_seed(seed)})
    labels = unique_labels(variants)

    def run(index: int) -> VariantResult:
        spec, label = variants[index], labels[index]
        seed_value = init_seed(seed, spec)
        adapter = init_adapter(spec.kind, spec.config, seed_value)
        trained, report = train_loop(
            adapter, taskset.base, taskset, shared_train, label=label, seed=seed_value
        )
        return VariantResult(spec, label, trained, report)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(len(variants))))


def match_budget(
    family: AdapterKind,
    budget: int,
    P: int,  # noqa: N803
    Q: int,  # noqa: N803
    r: int,
    p: int = 1,
) -> AdapterConfig:
    """Configuration whose total is closest to `budget`.

    LoRA has no experts, so its rank is searched instead of `r`. The other
    families keep `r` (and `p` for MoDE; MoLORA variants use p = r) and search
    the expert count. Ties go to the smaller configuration.
    """
    if budget <= 0:
        msg = f"budget must be positive, got {budget}"
        raise ConfigError(msg)
    if family == "lora":
        rank = max(1, budget // (P + Q))
        candidates = [AdapterConfig(P=P, Q=Q, r=k) for k in (rank, rank + 1)]
    else:
        expert_rank = p if family == "mode" else r
        one = param_count(family, AdapterConfig(P=P, Q=Q, r=r, m=1, p=expert_rank))
        two = param_count(family, AdapterConfig(P=P, Q=Q, r=r, m=2, p=expert_rank))
        per_expert = two.total - one.total
        top = max(1, (budget - one.total) // per_expert + 2)
        candidates = [
            AdapterConfig(P=P, Q=Q, r=r, m=m, p=expert_rank) for m in range(1, top + 1)
        ]
    best = min(candidates, key=lambda c: abs(param_count(family, c).total - budget))
    logger.debug(
        "%s closest to %d: %s (%d)",
        family,
        budget,
        best.short(),
        param_count(family, best).total,
    )
    return best
