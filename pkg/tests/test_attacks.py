import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from worker import attacks, data, flcore, models


@pytest.fixture
def decoder(dataset):
    train, _ = dataset
    return attacks.calibrate_decoder(train, 3, seed=0, num_classes=3)


@pytest.fixture
def shard(shards):
    return shards[0]


def two_round_history(spec, rng):
    w0 = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    w1 = w0 + 0.1 * torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    return flcore.History([w0, w1])


def test_flip_labels(shard):
    flipped = attacks.flip_labels(shard)
    assert torch.equal(flipped.data.labels, (shard.data.labels + 1) % 3)
    assert sum(flipped.class_counts) == shard.n
    assert flipped.class_counts == tuple(flipped.data.class_counts(3))


def test_free_rider(spec, rng):
    history = two_round_history(spec, rng)
    first = flcore.History([history[0]])
    assert torch.count_nonzero(attacks.behavior_free_rider(history[0], first)) == 0
    assert torch.equal(attacks.behavior_free_rider(history.current, history), history[1] - history[0])


def test_direct_ref_keeps_benign_norm(spec, shard, hp, rng):
    history = two_round_history(spec, rng)
    update = attacks.behavior_direct_ref(spec, history.current, history, shard, hp, np.random.default_rng(0))
    benign = flcore.benign_local_update(spec, history.current, shard, hp, np.random.default_rng(0))
    assert attacks.norm(update).item() == pytest.approx(attacks.norm(benign).item())
    reference = history[1] - history[0]
    assert torch.dot(update, reference) / (attacks.norm(update) * attacks.norm(reference)) == pytest.approx(1.0)


def test_random_noise(spec, shard, hp, params):
    benign = flcore.benign_local_update(spec, params, shard, hp, np.random.default_rng(4))
    quiet = attacks.behavior_random_noise(spec, params, shard, hp, np.random.default_rng(4), 0.0)
    assert torch.equal(quiet, benign)
    noisy = attacks.behavior_random_noise(spec, params, shard, hp, np.random.default_rng(4), 1.0)
    assert not torch.equal(noisy, benign)


def test_clip_to_norm():
    update = torch.tensor([3.0, 4.0], dtype=models.DTYPE)
    clipped, was_clipped = attacks.clip_to_norm(update, 2.5)
    assert was_clipped
    assert abs(attacks.norm(clipped).item() - 2.5) <= 1e-12
    same, was_clipped = attacks.clip_to_norm(update, 5.0)
    assert not was_clipped and torch.equal(same, update)


def test_effective_alpha():
    assert attacks.effective_alpha(300, 16) == pytest.approx(16 / 316)
    assert attacks.effective_alpha(10, 0) == 0.0
    with pytest.raises(ValueError):
        attacks.effective_alpha(0, 4)


def test_decoder(decoder, dataset):
    train, _ = dataset
    labels = torch.tensor([0, 2])
    decoded = attacks.decode(decoder, torch.zeros((2, 3), dtype=models.DTYPE), labels)
    assert torch.allclose(decoded.inputs, decoder.prototypes[labels])
    assert torch.equal(decoded.labels, labels)
    assert decoder.input_dim == train.input_dim
    with pytest.raises(ValueError):
        attacks.decode_inputs(decoder, torch.zeros((1, 3), dtype=models.DTYPE), torch.tensor([5]))


def test_select_targets_prefers_missing_classes(shard):
    missing, _ = data.coverage_stats(shard, 3)
    labels = attacks.select_targets(shard, 3, 20, np.random.default_rng(0))
    assert len(labels) == 20
    assert set(labels.tolist()) <= missing


def test_joint_loss_degenerate_reference(spec, decoder, params):
    z = torch.zeros((2, 3), dtype=models.DTYPE)
    losses = attacks.joint_loss(spec, params, decoder, z, torch.tensor([0, 1]), torch.zeros_like(params))
    assert losses.l1 == 1.0
    assert losses.total == pytest.approx(losses.l1 + losses.l2 + losses.l3)


def test_latent_gradient_modes_agree(spec, decoder, params, rng):
    z = torch.tensor(rng.standard_normal((4, 3)), dtype=models.DTYPE)
    labels = torch.tensor([0, 1, 2, 1])
    g_ref = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    fd = attacks.latent_gradient(spec, params, decoder, z, labels, g_ref, 'fd')
    exact = attacks.latent_gradient(spec, params, decoder, z, labels, g_ref, 'autograd')
    assert torch.linalg.vector_norm(fd - exact) <= 1e-4 * torch.linalg.vector_norm(exact)


def test_refine_latent_records_trace(spec, decoder, params, rng):
    hyper = attacks.LatentHyper(latent_dim=3, latent_steps=3, synthetic_batch=4)
    state = attacks.AttackState(attacks.Budgets(), hyper, z=torch.zeros((4, 3), dtype=models.DTYPE))
    g_ref = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    refined = attacks.refine_latent(state, spec, params, decoder, torch.tensor([0, 1, 2, 0]), g_ref)
    assert len(refined.trace) == 3
    assert refined.z.shape == (4, 3)
    assert not torch.equal(refined.z, state.z)


def test_zero_intensity_is_benign(spec, shard, hp, decoder, rng):
    history = two_round_history(spec, rng)
    hyper = attacks.LatentHyper(latent_dim=3, intensity=0.0)
    state = attacks.AttackState(attacks.Budgets(), hyper)
    update, _, diagnostics = attacks.behavior_latent_opt(state, spec, history.current, history, shard, hp, decoder,
        np.random.default_rng(9))
    benign = flcore.benign_local_update(spec, history.current, shard, hp, np.random.default_rng(9))
    assert torch.equal(update, benign)
    assert diagnostics['b_s'] == 0


def test_latent_opt_respects_budgets(spec, shard, hp, decoder, rng):
    history = two_round_history(spec, rng)
    hyper = attacks.LatentHyper(latent_dim=3, latent_steps=2, synthetic_batch=6)
    budgets = attacks.Budgets(kappa=0.01)
    state = attacks.AttackState(budgets, hyper)
    update, state, diagnostics = attacks.behavior_latent_opt(state, spec, history.current, history, shard, hp,
        decoder, np.random.default_rng(2))
    assert attacks.norm(update).item() <= 0.01 + 1e-12
    assert diagnostics['clipped']
    assert diagnostics['effective_alpha'] == pytest.approx(6 / (shard.n + 6))
    assert state.cached_round == 2
    assert state.z.shape == (6, 3)


def test_latent_opt_reverts_over_budget(spec, shard, hp, decoder, rng):
    history = two_round_history(spec, rng)
    state = attacks.AttackState(attacks.Budgets(c_max=spec.num_params - 1), attacks.LatentHyper(latent_dim=3))
    update, _, diagnostics = attacks.behavior_latent_opt(state, spec, history.current, history, shard, hp, decoder,
        np.random.default_rng(2))
    assert diagnostics['reverted']
    assert diagnostics['synthetic_residual_norm'] == 0.0


def test_latent_opt_behavior_resets_each_run(spec, shard, hp, decoder, rng):
    behavior = attacks.LatentOptBehavior(spec, hp, decoder, attacks.LatentHyper(latent_dim=3, latent_steps=1),
        attacks.Budgets())
    history = two_round_history(spec, rng)
    first = flcore.History([history[0]])
    behavior(history[0], first, shard, np.random.default_rng(0))
    behavior(history[1], history, shard, np.random.default_rng(1))
    assert [d['t'] for d in behavior.diagnostics] == [1, 2]
    behavior(history[0], first, shard, np.random.default_rng(0))
    assert [d['t'] for d in behavior.diagnostics] == [1]


@pytest.mark.parametrize('kwargs', [{'latent_dim': 0}, {'eta_z': -1.0}, {'grad_mode': 'spsa'}])
def test_latent_hyper_validation(kwargs):
    with pytest.raises(ValueError):
        attacks.LatentHyper(**kwargs)


def test_synthetic_batch_scales_with_intensity():
    assert attacks.LatentHyper(synthetic_batch=16, intensity=0.5).b_s == 8
    assert attacks.LatentHyper(synthetic_batch=16, intensity=4).b_s == 64
    assert math.isinf(attacks.Budgets().kappa)


def test_noise_energy_matches_scale(spec, shard, params):
    full_batch = flcore.LocalHyper(epochs=1, batch_size=shard.n, eta_w=0.1)
    benign = flcore.benign_local_update(spec, params, shard, full_batch, np.random.default_rng(0))
    energies = []
    for seed in range(1000):
        noisy = attacks.behavior_random_noise(spec, params, shard, full_batch, np.random.default_rng(seed), 0.5)
        energies.append(attacks.norm(noisy - benign).item() ** 2)
    assert np.mean(energies) == pytest.approx(0.25 * attacks.norm(benign).item() ** 2, rel=0.06)


def test_first_refinement_step_lowers_loss(spec, dataset, rng):
    train, _ = dataset
    decoder = attacks.calibrate_decoder(train, 8, seed=0, num_classes=3)
    hyper = attacks.LatentHyper(latent_dim=8, latent_steps=1, synthetic_batch=8, eta_z=1e-2)
    z = torch.tensor(rng.standard_normal((8, 8)), dtype=models.DTYPE)
    state = attacks.AttackState(attacks.Budgets(), hyper, z=z)
    w_t = models.init_params(spec, 0)
    labels = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
    g_ref = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    before = attacks.joint_loss(spec, w_t, decoder, z, labels, g_ref)
    refined = attacks.refine_latent(state, spec, w_t, decoder, labels, g_ref)
    assert refined.trace[0].total < before.total
    assert refined.stalled_at is None


def test_label_flip_costs_accuracy(training):
    clean = flcore.run_training(replace(training, rounds=8))
    clients = list(training.clients)
    for i in (0, 1):
        clients[i] = replace(clients[i], behavior=attacks.LabelFlipBehavior(training.spec, clients[i].behavior.hp))
    flipped = flcore.run_training(replace(training, clients=tuple(clients), rounds=8))
    assert flipped.final_utility < clean.final_utility
