from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.linalg import subspace_angles

from mode_lab.config import SynthSpec
from mode_lab.exceptions import ConfigError
from mode_lab.synthbench import (
    BatchSampler,
    gather_tasks,
    gen_multitask,
    load_taskset,
    oracle_best_loss,
    sample_batch,
    save_taskset,
    split_train_eval,
    subspace_rank,
)


def test_noiseless_single_task_is_exact():
    taskset = gen_multitask(SynthSpec(num_tasks=1, noise_std=0.0, samples_per_task=50))
    x, y = taskset.inputs[0], taskset.targets[0]
    np.testing.assert_array_equal(y, x @ (taskset.base + taskset.deltas[0]))


def test_shapes_and_normalization():
    spec = SynthSpec(
        num_tasks=4, input_dim=6, output_dim=5, true_rank=2, samples_per_task=30
    )
    taskset = gen_multitask(spec)
    assert taskset.base.shape == (6, 5)
    assert taskset.num_tasks == 4
    for t in taskset.task_labels:
        assert taskset.inputs[t].shape == (30, 6)
        assert taskset.targets[t].shape == (30, 5)
        assert np.linalg.matrix_rank(taskset.deltas[t]) == 2
        assert abs(np.linalg.norm(taskset.deltas[t]) - 1.0) < 1e-12


def test_shared_down_projection_gives_identical_column_spaces():
    taskset = gen_multitask(SynthSpec(num_tasks=5, samples_per_task=20))
    reference = taskset.deltas[0]
    for delta in taskset.deltas[1:]:
        assert np.max(subspace_angles(reference, delta)) < 1e-8
    assert subspace_rank(taskset) == taskset.spec.true_rank


def test_independent_down_projections_differ():
    spec = SynthSpec(num_tasks=5, shared_down=False, samples_per_task=20)
    taskset = gen_multitask(spec)
    assert np.max(subspace_angles(taskset.deltas[0], taskset.deltas[1])) > 0.1
    assert subspace_rank(taskset) == 5 * taskset.spec.true_rank


def test_same_seed_same_dataset():
    first = gen_multitask(SynthSpec(num_tasks=2, samples_per_task=20, seed=5))
    second = gen_multitask(SynthSpec(num_tasks=2, samples_per_task=20, seed=5))
    other = gen_multitask(SynthSpec(num_tasks=2, samples_per_task=20, seed=6))
    for t in range(2):
        np.testing.assert_array_equal(first.inputs[t], second.inputs[t])
        np.testing.assert_array_equal(first.targets[t], second.targets[t])
    assert not np.array_equal(first.targets[0], other.targets[0])


def test_task_shift_moves_task_means():
    spec = SynthSpec(num_tasks=3, samples_per_task=4000, task_shift=3.0)
    taskset = gen_multitask(spec)
    for x in taskset.inputs:
        assert abs(np.linalg.norm(x.mean(axis=0)) - 3.0) < 0.2


def test_rank_above_dimensions_is_rejected():
    with pytest.raises(ValidationError):
        SynthSpec(input_dim=3, output_dim=8, true_rank=4)


@pytest.mark.parametrize(("sigma", "expected"), [(0.0, 0.0), (0.1, 0.01)])
def test_oracle_floor(sigma, expected):
    taskset = gen_multitask(SynthSpec(num_tasks=1, noise_std=sigma, samples_per_task=10))
    assert oracle_best_loss(taskset) == pytest.approx(expected, abs=1e-15)


def test_oracle_floor_matches_empirical_noise():
    spec = SynthSpec(num_tasks=1, noise_std=0.1, samples_per_task=10_000, seed=3)
    taskset = gen_multitask(spec)
    x, y = taskset.inputs[0], taskset.targets[0]
    mse = np.mean((x @ (taskset.base + taskset.deltas[0]) - y) ** 2)
    assert abs(mse - oracle_best_loss(taskset)) <= 0.05 * oracle_best_loss(taskset)


def test_single_task_batches(tiny_taskset, rng):
    batch = sample_batch(tiny_taskset, 1, 16, rng)
    assert len(batch) == 16
    assert set(batch.task_ids.tolist()) == {1}


def test_mixture_frequencies_are_uniform(rng):
    spec = SynthSpec(
        num_tasks=3, input_dim=4, output_dim=4, true_rank=1, samples_per_task=1000
    )
    taskset = gen_multitask(spec)
    batch = sample_batch(taskset, "mixture", 1500, rng)
    counts = np.bincount(batch.task_ids, minlength=3)
    sigma = np.sqrt(1500 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - 500) <= 3 * sigma)


def test_full_batch_is_one_permutation(tiny_taskset, rng):
    total = tiny_taskset.num_tasks * tiny_taskset.samples(0)
    batch = sample_batch(tiny_taskset, "mixture", total, rng)
    assert len(batch) == total
    assert len({row.tobytes() for row in batch.x}) == total
    assert np.bincount(batch.task_ids).tolist() == [tiny_taskset.samples(0)] * 3


def test_batch_larger_than_pool_is_rejected(tiny_taskset, rng):
    with pytest.raises(ConfigError):
        sample_batch(tiny_taskset, 0, tiny_taskset.samples(0) + 1, rng)


def test_unknown_task_is_rejected(tiny_taskset, rng):
    with pytest.raises(ConfigError):
        sample_batch(tiny_taskset, 7, 2, rng)


def test_split_is_disjoint_and_complete(tiny_taskset, rng):
    split = split_train_eval(tiny_taskset, 0.1, rng)
    for t in tiny_taskset.task_labels:
        train, held_out = set(split.train[t].tolist()), set(split.eval[t].tolist())
        assert not train & held_out
        assert train | held_out == set(range(tiny_taskset.samples(t)))
        assert len(held_out) == 4
    assert split.train_size + split.eval_size == 120


def test_split_fraction_bounds(tiny_taskset, rng):
    for fraction in (0.0, 1.0):
        with pytest.raises(ConfigError):
            split_train_eval(tiny_taskset, fraction, rng)


def test_sampler_crosses_epochs_without_repeats(tiny_taskset, rng):
    sampler = BatchSampler(tiny_taskset, 2, rng)
    assert len(sampler) == 40
    seen = [row.tobytes() for _ in range(4) for row in sampler.next_batch(10).x]
    assert len(set(seen)) == 40
    assert sampler.epoch == 0
    crossing = sampler.next_batch(15)
    assert sampler.epoch == 1
    assert len({row.tobytes() for row in crossing.x}) == 15


def test_sampler_respects_indices(tiny_taskset, rng):
    split = split_train_eval(tiny_taskset, 0.25, rng)
    sampler = BatchSampler(tiny_taskset, "mixture", rng, split.train)
    held_out = gather_tasks(tiny_taskset, split.eval)
    eval_rows = {row.tobytes() for row in held_out.x}
    for _ in range(10):
        batch = sampler.next_batch(9)
        assert not eval_rows & {row.tobytes() for row in batch.x}


def test_save_and_load_round_trip(tmp_path, tiny_taskset):
    manifest = save_taskset(tiny_taskset, tmp_path / "suite")
    assert manifest.name == "manifest.json"
    loaded = load_taskset(tmp_path / "suite")
    assert loaded.spec == tiny_taskset.spec
    np.testing.assert_array_equal(loaded.base, tiny_taskset.base)
    for t in tiny_taskset.task_labels:
        np.testing.assert_array_equal(loaded.inputs[t], tiny_taskset.inputs[t])
        np.testing.assert_array_equal(loaded.targets[t], tiny_taskset.targets[t])
        np.testing.assert_array_equal(loaded.downs[t], tiny_taskset.downs[t])


def test_load_missing_suite(tmp_path):
    with pytest.raises(ConfigError):
        load_taskset(tmp_path)
