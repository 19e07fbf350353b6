import numpy as np
import pytest

from worker import attribution, data, flcore, oracles


def test_two_player_game():
    game = attribution.TabularGame([0.0, 1.0, 2.0, 4.0])
    assert attribution.shapley_exact(game) == pytest.approx([1.5, 2.5])
    assert attribution.coalition_value(game, [0, 1]) == 4.0
    with pytest.raises(ValueError):
        attribution.coalition_value(game, [2])


@pytest.mark.parametrize('n', [2, 3, 4, 5, 6])
def test_exact_matches_permutation_oracle(n, rng):
    for _ in range(5):
        game = attribution.TabularGame(rng.uniform(-1, 1, 2 ** n))
        phi = attribution.shapley_exact(game)
        assert np.max(np.abs(phi - oracles.shapley_bruteforce(game.values, n))) <= 1e-12
        assert phi.sum() == pytest.approx(game.value(2 ** n - 1) - game.value(0), abs=1e-9)


def test_monte_carlo_is_exact_on_additive_games():
    weights = [0.5, -1.0, 2.0]
    game = attribution.TabularGame([sum(w for i, w in enumerate(weights) if m >> i & 1) for m in range(8)])
    assert attribution.shapley_mc(game, 3, seed=0) == pytest.approx(weights)


def test_monte_carlo_approaches_exact(rng):
    game = attribution.TabularGame(rng.uniform(0, 1, 16))
    estimate = attribution.shapley_mc(game, 2000, seed=1)
    assert estimate == pytest.approx(attribution.shapley_exact(game), abs=0.05)
    assert np.array_equal(estimate, attribution.shapley_mc(game, 2000, seed=1))


def test_normalization_and_ranks():
    report = attribution.AttributionReport.from_raw('loo_round', [1.0, 3.0, 2.0])
    assert report.shares == pytest.approx((0.0, 2 / 3, 1 / 3))
    assert report.ranks == (3, 1, 2)
    assert report.client_with_rank(3) == 0
    uniform = attribution.AttributionReport.from_raw('loo_round', [0.2, 0.2])
    assert uniform.shares == (0.5, 0.5)
    # ties rank by client id
    assert uniform.ranks == (1, 2)
    with pytest.raises(ValueError):
        attribution.AttributionReport.from_raw('banzhaf', [1.0])
    with pytest.raises(ValueError):
        report.client_with_rank(4)


def test_coalition_utility(training):
    log = flcore.run_training(training)
    record = log.rounds[0]
    game = attribution.CoalitionUtility.from_record(record, training.spec, training.test)
    assert game.value(0) == flcore.utility(training.spec, record.w_t, training.test)
    assert game.value(0b111) == record.test_utility_after
    single = flcore.utility(training.spec, record.w_t + record.updates[1], training.test)
    assert game.value(0b010) == single


def test_fedsv_efficiency(training):
    log = flcore.run_training(training)
    report = attribution.fedsv(log, training.spec, training.test)
    total = sum(g.value(0b111) - g.value(0) for g in attribution.round_games(log, training.spec, training.test))
    assert sum(report.raw) == pytest.approx(total, abs=1e-9)
    assert report.evaluator == 'fedsv_exact'
    mc = attribution.evaluate('fedsv_mc', log, training.spec, training.test, num_permutations=50, seed=3)
    assert mc.evaluator == 'fedsv_mc'
    assert len(mc.raw) == 3


def test_loo_round_matches_bruteforce(training):
    log = flcore.run_training(training)
    report = attribution.loo_round(log, training.spec, training.test)
    assert report.raw == pytest.approx(oracles.loo_bruteforce(log, training.spec, training.test), abs=1e-12)


def test_loo_retrain(training):
    full = flcore.run_training(training).final_utility
    report = attribution.evaluate('loo_retrain', None, training.spec, training.test, training)
    for i, raw in enumerate(report.raw):
        reduced = flcore.run_training(attribution.without_client(training, i)).final_utility
        assert raw == full - reduced
    with pytest.raises(ValueError):
        attribution.evaluate('loo_retrain', None, training.spec, training.test)


def test_marginal_utilities(training):
    log = flcore.run_training(training)
    values = attribution.marginal_utilities(log, training.spec, training.test)
    assert values.shape == (3, 3)


def test_monte_carlo_converges_on_five_players(rng):
    game = attribution.TabularGame(rng.uniform(-1, 1, 32))
    estimate = attribution.shapley_mc(game, 20000, seed=2)
    spread = max(game.values) - min(game.values)
    assert np.max(np.abs(estimate - attribution.shapley_exact(game))) <= 0.01 * spread


@pytest.fixture
def coverage_training(spec):
    train, test = data.synthesize(data.DatasetSpec('gaussian_blobs', 3, 4, 100, 6.0, 1.0, seed=5))
    labels = train.labels.numpy()
    by_class = [np.flatnonzero(labels == c) for c in range(3)]
    shared = train.take(np.concatenate([by_class[0][:20], by_class[1][:20]]))
    shards = [data.make_shard(0, shared, 3), data.make_shard(1, shared, 3),
        data.make_shard(2, train.take(by_class[2][:40]), 3)]
    hp = flcore.LocalHyper(epochs=2, batch_size=8, eta_w=0.1)
    clients = tuple(flcore.Client(s.client_id, s, flcore.BenignBehavior(spec, hp)) for s in shards)
    return flcore.TrainingConfig(spec, clients, 5, test, seed=0)


def test_loo_retrain_tracks_coverage(coverage_training):
    report = attribution.loo_retrain_report(coverage_training)
    # client 1 duplicates client 0, client 2 alone holds class 2
    assert abs(report.raw[1]) <= 0.02
    assert report.raw[2] > 0
