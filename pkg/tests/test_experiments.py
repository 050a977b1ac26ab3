from __future__ import annotations

import numpy as np
import pytest

from mode_lab.adapters import param_count
from mode_lab.config import (
    AdapterConfig,
    AdapterSpec,
    ExperimentConfig,
    SynthSpec,
    TrainConfig,
)
from mode_lab.exceptions import ConfigError
from mode_lab.experiments import (
    build_taskset,
    clustering_scores,
    init_seed,
    match_budget,
    run_comparison,
    run_single_task_study,
    unique_labels,
)


def _spec(kind, **config):
    return AdapterSpec(kind=kind, config=AdapterConfig(**config))


class TestMatchBudget:
    def test_lora_searches_the_rank(self):
        assert match_budget("lora", 640, 32, 32, r=4).r == 10

    def test_ties_go_to_the_smaller_config(self):
        assert match_budget("lora", 96, 32, 32, r=1).r == 1

    def test_expert_families_search_m(self):
        mode = match_budget("mode", 640, 32, 32, r=4, p=1)
        assert (mode.m, mode.p) == (2, 1)
        sd = match_budget("molora_sd", 640, 32, 32, r=4)
        assert (sd.m, sd.p) == (3, 4)
        assert param_count("molora_sd", sd).total == 608

    def test_budget_below_one_expert(self):
        assert match_budget("molora", 10, 32, 32, r=4).m == 1

    def test_rejects_non_positive_budget(self):
        with pytest.raises(ConfigError):
            match_budget("mode", 0, 32, 32, r=4)


def test_unique_labels():
    lora = _spec("lora", P=4, Q=4, r=2)
    named = AdapterSpec(kind="mode", config=AdapterConfig(P=4, Q=4, r=2), name="mine")
    labels = unique_labels([lora, named, lora, lora])
    assert labels == ["LoRA 2", "mine", "LoRA 2 #2", "LoRA 2 #3"]


def test_init_seed_depends_on_kind_and_shape():
    lora = _spec("lora", P=4, Q=4, r=2)
    assert init_seed(1, lora) == init_seed(1, _spec("lora", P=4, Q=4, r=2))
    assert init_seed(1, lora) != init_seed(2, lora)
    assert init_seed(1, lora) != init_seed(1, _spec("lora", P=4, Q=4, r=1))
    assert init_seed(1, lora) != init_seed(1, _spec("molora", P=4, Q=4, r=2))


def test_build_taskset_mixes_master_and_suite_seeds():
    config = ExperimentConfig(synth=SynthSpec(num_tasks=2, samples_per_task=10), seed=4)
    first, again = build_taskset(config), build_taskset(config)
    np.testing.assert_array_equal(first.targets[1], again.targets[1])
    other = build_taskset(config.model_copy(update={"seed": 5}))
    assert not np.array_equal(first.base, other.base)
    synth = config.synth.model_copy(update={"seed": 1})
    resynth = config.model_copy(update={"synth": synth})
    assert not np.array_equal(first.base, build_taskset(resynth).base)


class TestRunComparison:
    @pytest.fixture
    def train(self):
        return TrainConfig(steps=10, batch_size=8, learning_rate=0.01)

    def test_identical_variants_tie(self, tiny_taskset, train):
        lora = _spec("lora", P=4, Q=4, r=2)
        mode = _spec("mode", P=4, Q=4, r=2, m=2, p=1)
        variants = [lora, mode, lora]
        results = run_comparison(tiny_taskset, variants, train, seed=3, workers=2)
        assert [r.label for r in results] == ["LoRA 2", "MoDE 2x2x1", "LoRA 2 #2"]
        assert results[0].report.losses == results[2].report.losses
        assert results[0].report.task_eval_losses == results[2].report.task_eval_losses
        assert results[1].adapter.kind == "mode"

    def test_worker_count_does_not_change_results(self, tiny_taskset, train):
        variants = [_spec("lora", P=4, Q=4, r=1), _spec("molora_sd", P=4, Q=4, r=2, m=2)]
        serial = run_comparison(tiny_taskset, variants, train, seed=1)
        parallel = run_comparison(tiny_taskset, variants, train, seed=1, workers=2)
        for a, b in zip(serial, parallel):
            assert a.report.losses == b.report.losses

    def test_needs_two_variants(self, tiny_taskset, train):
        with pytest.raises(ConfigError):
            run_comparison(tiny_taskset, [_spec("lora", P=4, Q=4, r=1)], train, seed=0)


def test_single_task_study_shares_one_init(tiny_taskset):
    train = TrainConfig(steps=5, batch_size=4)
    runs = run_single_task_study(tiny_taskset, 2, train, seed=8)
    assert [report.task for _, report in runs] == [0, 1, 2]
    assert len({report.seed for _, report in runs}) == 1
    assert runs[1][1].label == "LoRA 2 task 1"
    downs = [adapter.values()["A"] for adapter, _ in runs]
    assert not np.array_equal(downs[0], downs[1])
    scores = clustering_scores([(t, adapter) for t, (adapter, _) in enumerate(runs)])
    assert set(scores) == {"down", "up"}
    assert all(score > 0 for score in scores.values())


@pytest.mark.slow
def test_down_projections_cluster_by_rank_index():
    clustered = 0
    for seed in range(10):
        config = ExperimentConfig(seed=seed)
        taskset = build_taskset(config)
        runs = run_single_task_study(taskset, 4, config.train, seed)
        scores = clustering_scores([(t, adapter) for t, (adapter, _) in enumerate(runs)])
        clustered += scores["down"] < scores["up"]
    assert clustered >= 9


@pytest.mark.slow
def test_mode_beats_molora_sd_beats_lora_at_matched_budget():
    budget = 640
    variants = [
        AdapterSpec(kind=kind, config=match_budget(kind, budget, 32, 32, r=4))
        for kind in ("mode", "molora_sd", "lora")
    ]
    for spec in variants:
        total = param_count(spec.kind, spec.config).total
        assert abs(total - budget) <= 0.05 * budget

    train = TrainConfig(steps=1500, batch_size=64, learning_rate=1e-2)
    losses = {spec.kind: [] for spec in variants}
    for seed in range(5):
        synth = SynthSpec(samples_per_task=400, task_shift=3.0)
        taskset = build_taskset(ExperimentConfig(synth=synth, seed=seed))
        for result in run_comparison(taskset, variants, train, seed):
            losses[result.spec.kind].append(result.report.final_eval_loss)

    mean = {kind: np.mean(values) for kind, values in losses.items()}
    assert mean["mode"] <= mean["molora_sd"] <= mean["lora"]
    wins = sum(ours < base for ours, base in zip(losses["mode"], losses["lora"]))
    assert wins >= 4
