"""Command line entry point: ``mode-lab <command> [options]``.

Every command is a pure function of its config file and seed. Outputs are JSON
and CSV files written atomically into the output directory.
"""

from __future__ import annotations

import argparse
import functools
import glob
import logging
from pathlib import Path
import re
import sys
from typing import TYPE_CHECKING

from pydantic import BaseModel, ConfigDict, ValidationError

from mode_lab.adapters import init_adapter, load_checkpoint, param_count, save_checkpoint
from mode_lab.analysis import (
    collect_rank_slices,
    export_points_csv,
    export_win_rate_csv,
    export_win_rate_tests_csv,
    iso_parametric_grid,
    lora_baseline_budget,
    param_percent,
    pca,
    separation_by,
    win_rate_matrix,
)
from mode_lab.config import ADAPTER_KINDS, AdapterConfig, AdapterKind, ExperimentConfig
from mode_lab.exceptions import (
    ConfigError,
    ContractError,
    InfeasibleError,
    NumericError,
    ShapeError,
)
from mode_lab.experiments import (
    build_taskset,
    init_seed,
    run_comparison,
    run_single_task_study,
    shuffle_seed,
)
from mode_lab.training import train_loop, write_losses_csv
from mode_lab.utils import load_model_json, write_csv, write_model_json


if TYPE_CHECKING:
    from collections.abc import Callable, Sequence
    import os

    from mode_lab.analysis import GroupKey, RankSliceSet, SliceKind
    from mode_lab.tensor_core import Matrix


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INFEASIBLE = 4

MAX_SEED = 2**64 - 1


def exit_codes[**Params](fn: Callable[Params, object]) -> Callable[Params, int]:
    """Turn a command into one returning a process exit code.

    Config, shape and file errors give 2, numeric failures 3 and infeasible
    searches 4. The error message is logged.
    """

    @functools.wraps(fn)
    def wrapper(*args: Params.args, **kwargs: Params.kwargs) -> int:
        try:
            fn(*args, **kwargs)
        except InfeasibleError as e:
            logger.error("infeasible: %s", e)  # noqa: TRY400
            return EXIT_INFEASIBLE
        except NumericError as e:
            logger.error("numeric failure: %s", e)  # noqa: TRY400
            return EXIT_NUMERIC
        except (ConfigError, ShapeError, ContractError, ValidationError, OSError) as e:
            logger.error("invalid input: %s", e)  # noqa: TRY400
            return EXIT_CONFIG
        return EXIT_OK

    return wrapper


def load_experiment(
    config_path: str | os.PathLike[str],
    out: str | os.PathLike[str] | None = None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Read a JSON experiment config and apply command line overrides."""
    config = load_model_json(ExperimentConfig, config_path)
    update: dict[str, object] = {}
    if out is not None:
        update["output_dir"] = Path(out)
    if seed is not None:
        update["seed"] = seed
    return config.model_copy(update=update) if update else config


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")


@exit_codes
def cmd_train(
    config_path: str | os.PathLike[str],
    out: str | os.PathLike[str] | None = None,
    seed: int | None = None,
) -> None:
    """Generate the task suite, train one adapter and evaluate it.

    Writes checkpoint.json, report.json and losses.csv (plus a config echo).
    """
    config = load_experiment(config_path, out, seed)
    if config.adapter is None:
        msg = "adapter: field required for the train command"
        raise ConfigError(msg)
    spec = config.adapter
    taskset = build_taskset(config)
    seed_value = init_seed(config.seed, spec)
    adapter = init_adapter(spec.kind, spec.config, seed_value)
    train = config.train.model_copy(update={"seed": shuffle_seed(config.seed)})
    task_mix = "mixture" if config.task is None else config.task
    trained, report = train_loop(
        adapter,
        taskset.base,
        taskset,
        train,
        task_mix=task_mix,
        label=spec.label,
        seed=seed_value,
    )
    root = config.output_dir
    write_model_json(root / "config.json", config)
    save_checkpoint(
        root / "checkpoint.json",
        trained,
        seed=seed_value,
        step=train.steps,
        task=config.task,
    )
    write_model_json(root / "report.json", report)
    write_losses_csv(report, root / "losses.csv")
    logger.info("wrote run outputs to %s", root)


@exit_codes
def cmd_compare(
    config_path: str | os.PathLike[str],
    out: str | os.PathLike[str] | None = None,
    seed: int | None = None,
) -> None:
    """Train every variant on one seeded mixture and compare them per task.

    Writes comparison.csv, win_rates.csv (``*`` marks significance at 0.99),
    win_rate_tests.csv and one report per variant.
    """
    config = load_experiment(config_path, out, seed)
    taskset = build_taskset(config)
    results = run_comparison(
        taskset, config.all_variants, config.train, config.seed, config.workers
    )
    root = config.output_dir
    write_model_json(root / "config.json", config)

    task_columns = [f"task_{t}" for t in taskset.task_labels]
    rows = []
    for result in results:
        total = param_count(result.spec.kind, result.spec.config).total
        percent = (
            f"{param_percent(total, config.backbone_nonembedding):.2f}"
            if config.backbone_nonembedding
            else ""
        )
        report = result.report
        rows.append({
            "variant": result.label,
            "kind": result.spec.kind,
            "total_params": total,
            "percent": percent,
            "final_eval_loss": repr(report.final_eval_loss),
            **{
                f"task_{t}": repr(loss)
                for t, loss in sorted(report.task_eval_losses.items())
            },
        })
        write_model_json(root / "reports" / f"{_slug(result.label)}.json", report)
    header = ["variant", "kind", "total_params", "percent", "final_eval_loss"]
    write_csv(root / "comparison.csv", [*header, *task_columns], rows)

    losses = {
        r.label: [r.report.task_eval_losses[t] for t in taskset.task_labels]
        for r in results
    }
    entries = win_rate_matrix(losses)
    export_win_rate_csv(entries, list(losses), root / "win_rates.csv")
    export_win_rate_tests_csv(entries, root / "win_rate_tests.csv")
    logger.info("compared %d variants in %s", len(results), root)


@exit_codes
def cmd_single_task(
    config_path: str | os.PathLike[str],
    out: str | os.PathLike[str] | None = None,
    seed: int | None = None,
    rank: int | None = None,
) -> None:
    """Train one LoRA per task from a shared initialization.

    Writes checkpoints/task_XX.json (the input of the pca command) and
    single_task.csv.
    """
    config = load_experiment(config_path, out, seed)
    if rank is None:
        rank = config.adapter.config.r if config.adapter else 4
    taskset = build_taskset(config)
    runs = run_single_task_study(taskset, rank, config.train, config.seed)
    root = config.output_dir
    write_model_json(root / "config.json", config)
    rows = []
    for task, (adapter, report) in enumerate(runs):
        save_checkpoint(
            root / "checkpoints" / f"task_{task:02d}.json",
            adapter,
            seed=report.seed,
            step=report.train.steps,
            task=task,
        )
        rows.append({
            "task": task,
            "final_train_loss": repr(report.losses[-1]),
            "final_eval_loss": repr(report.final_eval_loss),
        })
    write_csv(
        root / "single_task.csv", ["task", "final_train_loss", "final_eval_loss"], rows
    )
    logger.info("wrote %d checkpoints to %s", len(runs), root / "checkpoints")


class CheckpointSource(BaseModel):
    """Provenance of one checkpoint fed into a PCA."""

    path: str
    """Checkpoint file."""

    kind: AdapterKind
    """Adapter family."""

    config: AdapterConfig
    """Shape hyperparameters."""

    seed: int
    """Seed the adapter was initialized with."""

    step: int
    """Optimizer steps applied."""

    task: int | None
    """Task the adapter was trained on."""

    model_config = ConfigDict(use_attribute_docstrings=True)


class PcaSummary(BaseModel):
    """Summary of a rank-slice PCA."""

    kind: str
    """Which projection was sliced: down or up."""

    k: int
    """Number of principal components."""

    checkpoints: list[CheckpointSource]
    """Checkpoints, in the order their slices were stacked."""

    num_vectors: int
    """Rank slices analysed."""

    dimension: int
    """Length of each slice."""

    explained_variance_ratio: list[float]
    """Variance share of each component."""

    separation_by_rank_index: float | None
    """Cluster separation grouped by rank index; None when degenerate."""

    separation_by_task: float | None
    """Cluster separation grouped by task; None when degenerate."""

    model_config = ConfigDict(use_attribute_docstrings=True)


def _separation_or_none(
    slices: RankSliceSet, points: Matrix, key: GroupKey
) -> float | None:
    try:
        return separation_by(slices, points, key)
    except ConfigError as e:
        logger.warning("no separation by %s: %s", key, e)
        return None


@exit_codes
def cmd_pca(
    checkpoint_glob: str,
    kind: SliceKind = "down",
    k: int = 3,
    out: str | os.PathLike[str] = "runs",
) -> None:
    """Project the rank slices of single-task LoRA checkpoints onto k components.

    Writes pca_{kind}.csv and pca_{kind}_summary.json.
    """
    paths = sorted(glob.glob(checkpoint_glob))  # noqa: PTH207
    if len(paths) < 2:  # noqa: PLR2004
        msg = f"pca needs 2 or more checkpoints; {checkpoint_glob!r} matched {len(paths)}"
        raise ConfigError(msg)
    adapters, sources = [], []
    for index, path in enumerate(paths):
        adapter, checkpoint = load_checkpoint(path)
        adapters.append((index if checkpoint.task is None else checkpoint.task, adapter))
        sources.append(
            CheckpointSource(
                path=path,
                kind=checkpoint.kind,
                config=checkpoint.config,
                seed=checkpoint.seed,
                step=checkpoint.step,
                task=checkpoint.task,
            )
        )
    slices = collect_rank_slices(adapters, kind)
    model, points = pca(slices, k=k)
    root = Path(out)
    export_points_csv(slices, points, root / f"pca_{kind}.csv")
    summary = PcaSummary(
        kind=kind,
        k=k,
        checkpoints=sources,
        num_vectors=len(slices),
        dimension=slices.dimension,
        explained_variance_ratio=model.explained_variance_ratio.tolist(),
        separation_by_rank_index=_separation_or_none(slices, points, "rank_index"),
        separation_by_task=_separation_or_none(slices, points, "task"),
    )
    write_model_json(root / f"pca_{kind}_summary.json", summary)
    logger.info("projected %d %s slices onto %d components", len(slices), kind, k)


class BudgetRequest(BaseModel):
    """Inputs of a budget search, written next to budget.csv."""

    P: int
    """Layer input width."""

    Q: int
    """Layer output width."""

    budget: int
    """Parameter budget searched against."""

    baseline: tuple[int, int] | None
    """(tasks, rank) of the LoRA baseline the budget came from, if any."""

    families: list[AdapterKind]
    """Adapter families searched."""

    r_choices: list[int]
    """LoRA ranks tried."""

    p_choices: list[int]
    """Expert ranks tried."""

    backbone_nonembedding: int | None
    """Backbone size the percentages refer to."""

    model_config = ConfigDict(use_attribute_docstrings=True)


@exit_codes
def cmd_budget(
    P: int,  # noqa: N803
    Q: int,  # noqa: N803
    budget: int | None,
    families: Sequence[AdapterKind],
    r_choices: Sequence[int],
    p_choices: Sequence[int] = (1,),
    backbone_nonembedding: int | None = None,
    out: str | os.PathLike[str] = "runs",
    *,
    baseline: tuple[int, int] | None = None,
) -> None:
    """Largest expert count per (family, r, p) within a parameter budget.

    Without an explicit `budget`, `baseline` = (tasks, rank) sets it to the size
    of that many individual LoRA adapters. Writes budget.csv and budget.json.
    """
    if budget is None:
        if baseline is None:
            msg = "either a budget or a (tasks, rank) baseline is required"
            raise ConfigError(msg)
        budget = lora_baseline_budget(*baseline, P, Q)
        logger.info("budget of %d rank-%d LoRA adapters: %d", *baseline, budget)
    rows = iso_parametric_grid(
        P, Q, budget, families, r_choices, p_choices, backbone_nonembedding
    )
    fields = ["family", "m", "r", "p", "total", "percent", "compositions"]
    records = [
        {
            **row.model_dump(),
            "percent": "" if row.percent is None else f"{row.percent:.2f}",
        }
        for row in rows
    ]
    request = BudgetRequest(
        P=P,
        Q=Q,
        budget=budget,
        baseline=baseline,
        families=list(families),
        r_choices=list(r_choices),
        p_choices=list(p_choices),
        backbone_nonembedding=backbone_nonembedding,
    )
    root = Path(out)
    write_csv(root / "budget.csv", fields, records)
    write_model_json(root / "budget.json", request)


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed <= MAX_SEED:
        msg = f"seed must be an unsigned 64-bit integer, got {value}"
        raise argparse.ArgumentTypeError(msg)
    return seed


def _int_list(value: str) -> list[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        msg = f"expected comma-separated integers, got {value!r}"
        raise argparse.ArgumentTypeError(msg) from e
    if not items or min(items) < 1:
        msg = f"expected positive integers, got {value!r}"
        raise argparse.ArgumentTypeError(msg)
    return items


def _families(value: str) -> list[AdapterKind]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = [n for n in names if n not in ADAPTER_KINDS]
    if unknown or not names:
        msg = f"unknown adapter families {unknown}; choose from {list(ADAPTER_KINDS)}"
        raise argparse.ArgumentTypeError(msg)
    return [kind for kind in ADAPTER_KINDS if kind in names]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mode-lab",
        description="Train and analyse LoRA, MoLORA, MoLORA-SD and MoDE adapters.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log INFO (-v) or DEBUG (-vv) messages",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("train", "Train one adapter on the synthetic suite"),
        ("compare", "Train several variants and compute win rates"),
        ("single-task", "Train one LoRA per task from a shared init"),
    ]:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--config", required=True, help="Experiment JSON config")
        sub.add_argument("--out", help="Output directory (overrides the config)")
        sub.add_argument("--seed", type=_seed, help="Master seed (overrides the config)")
        if name == "single-task":
            sub.add_argument("--rank", type=int, help="LoRA rank (default: adapter or 4)")

    sub = commands.add_parser("pca", parents=[common], help="PCA of rank slices")
    sub.add_argument("checkpoints", help="Glob matching checkpoint JSON files")
    sub.add_argument("--kind", choices=["down", "up"], default="down")
    sub.add_argument("-k", type=int, default=3, help="Number of components")
    sub.add_argument("--out", default="runs", help="Output directory")

    sub = commands.add_parser(
        "budget", parents=[common], help="Iso-parametric configurations"
    )
    sub.add_argument("-P", "--input-dim", type=int, required=True, dest="P")
    sub.add_argument("-Q", "--output-dim", type=int, required=True, dest="Q")
    target = sub.add_mutually_exclusive_group(required=True)
    target.add_argument("--budget", type=int, help="Parameter budget")
    target.add_argument(
        "--baseline-tasks",
        type=int,
        help="Budget of this many individual LoRA adapters (needs --baseline-rank)",
    )
    sub.add_argument("--baseline-rank", type=int, default=None)
    sub.add_argument("--families", type=_families, default=list(ADAPTER_KINDS))
    sub.add_argument("--ranks", type=_int_list, default=[1, 2, 4, 8, 16])
    sub.add_argument("--expert-ranks", type=_int_list, default=[1])
    sub.add_argument("--backbone", type=int, help="Backbone non-embedding parameters")
    sub.add_argument("--out", default="runs", help="Output directory")
    return parser


def _configure_logging(verbosity: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    match args.command:
        case "train":
            return cmd_train(args.config, args.out, args.seed)
        case "compare":
            return cmd_compare(args.config, args.out, args.seed)
        case "single-task":
            return cmd_single_task(args.config, args.out, args.seed, args.rank)
        case "pca":
            return cmd_pca(args.checkpoints, args.kind, args.k, args.out)
        case "budget":
            baseline = None
            if args.budget is None:
                if args.baseline_rank is None:
                    parser.error("--baseline-tasks needs --baseline-rank")
                baseline = (args.baseline_tasks, args.baseline_rank)
            return cmd_budget(
                args.P,
                args.Q,
                args.budget,
                args.families,
                args.ranks,
                args.expert_ranks,
                args.backbone,
                args.out,
                baseline=baseline,
            )
    parser.error(f"unknown command {args.command!r}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
