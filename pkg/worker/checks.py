"""
Acceptance suite.

Oracle checks compare the evaluators and models with the brute-force references in worker.oracles. Scenario
checks replay the default experiment across several paired seeds and assert the directional properties of the
attack: share gain, utility preservation, intensity response, target-rank asymmetry, stealth against trimming,
evaluator robustness and byte-level determinism.
"""
import time
import logging
import tempfile
import statistics
from pathlib import Path
from dataclasses import dataclass

import numpy as np
import torch

from common import config, history
from . import attacks, attribution, models, oracles, tasks


DEFAULT_SEEDS = (0, 1, 2, 3, 4)
RANDOM_TRIALS = 100
NORMALIZATION_TRIALS = 1000
SHARE_GAIN = 0.05
LOO_SHARE_GAIN = 0.03
MAJORITY = 0.8
INTENSITIES = (0.0, 0.5, 1.0, 2.0, 4.0)
MONOTONE_SLACK = 0.01
STEALTH_MARGIN = 0.05
DETECTOR_SIGMA = 2.0
DETECTOR_F1 = 0.5
BASELINE_ATTACKS = ('label_flip', 'random_noise', 'free_rider')


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: dict

    def to_dict(self):
        return {'name': self.name, 'passed': self.passed, 'detail': self.detail}


def random_game(rng, num_players):
    return attribution.TabularGame(rng.uniform(-1, 1, 2 ** num_players))


def check_shapley(seed=0):
    rng = np.random.default_rng(seed)
    worst = worst_axiom = 0.0
    for trial in range(RANDOM_TRIALS):
        n = 2 + trial % 5
        game = random_game(rng, n)
        phi = attribution.shapley_exact(game)
        oracle = oracles.shapley_bruteforce(game.values, n)
        worst = max(worst, float(np.max(np.abs(phi - oracle))))

        # efficiency
        worst_axiom = max(worst_axiom, abs(phi.sum() - (game.value((1 << n) - 1) - game.value(0))))
        # linearity
        other = random_game(rng, n)
        combined = attribution.TabularGame([a + 2 * b for a, b in zip(game.values, other.values)])
        linear = phi + 2 * attribution.shapley_exact(other)
        worst_axiom = max(worst_axiom, float(np.max(np.abs(attribution.shapley_exact(combined) - linear))))
        # dummy: player 0 adds a constant c to every coalition it joins
        values = list(game.values)
        for mask in range(1 << n):
            if mask & 1:
                values[mask] = values[mask & ~1] + 0.25
        worst_axiom = max(worst_axiom, abs(attribution.shapley_exact(attribution.TabularGame(values))[0] - 0.25))
        # symmetry: players 0 and 1 are interchangeable
        for mask in range(1 << n):
            if mask & 1 and not mask & 2:
                values[mask] = values[mask ^ 3]
        phi = attribution.shapley_exact(attribution.TabularGame(values))
        worst_axiom = max(worst_axiom, abs(phi[0] - phi[1]))
    return CheckOutcome('shapley', worst <= 1e-12 and worst_axiom <= 1e-9,
        {'max_oracle_error': worst, 'max_axiom_error': worst_axiom})


def random_fixture(rng):
    kind = 'logistic' if rng.random() < 0.5 else 'mlp1'
    spec = models.ModelSpec(kind, int(rng.integers(2, 6)), int(rng.integers(2, 5)),
        int(rng.integers(2, 5)) if kind == 'mlp1' else 0)
    n = int(rng.integers(1, 8))
    batch = models.LabeledBatch.from_arrays(rng.standard_normal((n, spec.input_dim)),
        rng.integers(0, spec.num_classes, n))
    params = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    return spec, batch, params


def relative_error(a, b):
    scale = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / scale


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(RANDOM_TRIALS):
        spec, batch, params = random_fixture(rng)
        _, grad = models.loss_and_grad(spec, params, batch)
        inputs, labels = batch.inputs.numpy(), batch.labels.numpy()
        reference = oracles.fd_gradient(lambda p: oracles.numpy_cross_entropy(spec, p, inputs, labels),
            params.numpy())
        worst = max(worst, relative_error(grad.numpy(), reference))

    # latent gradient cross-checked at two step sizes
    spec = models.ModelSpec('logistic', 4, 3)
    pool = models.LabeledBatch.from_arrays(rng.standard_normal((30, 4)) + np.repeat(np.eye(3, 4) * 3, 10, axis=0),
        np.repeat(np.arange(3), 10))
    decoder = attacks.calibrate_decoder(pool, 3, seed, 3)
    w_t = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    g_ref = torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
    z = torch.tensor(rng.standard_normal((4, 3)), dtype=models.DTYPE)
    labels = torch.tensor([0, 1, 2, 0])
    coarse = attacks.latent_gradient(spec, w_t, decoder, z, labels, g_ref, 'fd', attacks.FD_REL_STEP)
    fine = attacks.latent_gradient(spec, w_t, decoder, z, labels, g_ref, 'fd', attacks.FD_REL_STEP / 10)
    latent_error = relative_error(coarse.numpy(), fine.numpy())
    return CheckOutcome('gradients', worst <= 1e-4 and latent_error <= 1e-3,
        {'max_relative_error': worst, 'latent_step_error': latent_error})


def check_normalization(seed=0):
    rng = np.random.default_rng(seed)
    failures = 0
    for trial in range(NORMALIZATION_TRIALS):
        n = int(rng.integers(1, 12))
        raw = np.full(n, rng.normal()) if trial % 50 == 0 else rng.normal(size=n) * rng.uniform(0.1, 10)
        shares = np.asarray(attribution.normalize_shares(raw))
        ranks = attribution.rank_clients(tuple(shares))
        by_raw = sorted(range(n), key=lambda i: (-raw[i], i))
        ok = (shares >= 0).all() and abs(shares.sum() - 1) <= 1e-9
        if np.all(raw == raw[0]):
            ok = ok and np.allclose(shares, 1 / n)
        else:
            ok = ok and shares.min() == 0
        ok = ok and [ranks[i] for i in by_raw] == list(range(1, n + 1))
        failures += not ok
    return CheckOutcome('normalization', failures == 0, {'trials': NORMALIZATION_TRIALS, 'failures': failures})


def median(values):
    return statistics.median(values)


def majority(flags):
    return sum(flags) >= MAJORITY * len(flags)


def nondecreasing(values, slack=MONOTONE_SLACK):
    inversions = [a - b for a, b in zip(values, values[1:]) if b < a]
    return len(inversions) <= 1 and all(drop <= slack for drop in inversions)


@dataclass(eq=False)
class SeedRuns:
    seed: int
    reports: dict
    zero_identical: bool


def run_seed(cfg, seed):
    """All scenario runs for one paired seed, sharing one attack-free phase."""
    cfg = cfg.with_values(seed=seed, defense='off', evaluator=('fedsv_exact', 'loo_round'), target='lowest_rank',
        target_rank=0)
    baseline = tasks.run_baseline(cfg)
    reports = {}

    def attacked(key, point, malicious=None):
        result = tasks.run_attacked(baseline, point, malicious)
        reports[key] = tasks.build_report(baseline, result)
        return result

    for intensity in INTENSITIES:
        result = attacked(('latent_opt', intensity), cfg.with_values(attack='latent_opt', intensity=intensity))
        if intensity == 0:
            # headers carry the config fingerprint, which differs between the phases
            zero_identical = list(result.log.to_records())[1:] == list(baseline.log.to_records())[1:]
    for attack in BASELINE_ATTACKS:
        attacked(attack, cfg.with_values(attack=attack))
    top = baseline.reports['fedsv_exact'].client_with_rank(1)
    attacked('rank_1', cfg.with_values(attack='latent_opt'), top)
    attacked('stealth', cfg.with_values(attack='latent_opt', defense='enforce'))
    attacked('detector', cfg.with_values(attack='random_noise', sigma_rel=DETECTOR_SIGMA, defense='enforce'))
    return SeedRuns(seed, reports, zero_identical)


def scenario_checks(runs):
    latent = [r.reports[('latent_opt', 1.0)] for r in runs]
    gains = [r.share_gain() for r in latent]
    shares = {attack: median(r.reports[attack].share_after() for r in runs) for attack in BASELINE_ATTACKS}
    latent_share = median(r.share_after() for r in latent)
    yield CheckOutcome('attack_effect', median(gains) >= SHARE_GAIN and all(latent_share > s for s in shares.values()),
        {'median_gain': median(gains), 'median_share': latent_share, 'baseline_shares': shares})

    preserved = [r.verdict for r in latent]
    degraded = [r.reports['label_flip'].utility_gap < -r.reports['label_flip'].delta for r in runs]
    yield CheckOutcome('utility_preservation', majority(preserved) and majority(degraded),
        {'latent_within_delta': sum(preserved), 'label_flip_degraded': sum(degraded), 'seeds': len(runs)})

    curve = [median(r.reports[('latent_opt', k)].share_after() for r in runs) for k in INTENSITIES]
    gaps = [median(abs(r.reports[('latent_opt', k)].utility_gap) for r in runs) for k in INTENSITIES]
    delta = latent[0].delta
    zero = all(r.zero_identical for r in runs)
    yield CheckOutcome('intensity', nondecreasing(curve) and all(g <= delta for g in gaps) and zero,
        {'intensities': list(INTENSITIES), 'median_shares': curve, 'median_gaps': gaps, 'zero_identical': zero})

    top_gain = median(r.reports['rank_1'].share_gain() for r in runs)
    yield CheckOutcome('target_rank', median(gains) > top_gain,
        {'lowest_rank_gain': median(gains), 'top_rank_gain': top_gain})

    stealth = [r.reports['stealth'] for r in runs]
    guess = stealth[0].random_guess_f1
    stealth_f1 = median(r.detection.f1 for r in stealth)
    detector_f1 = median(r.reports['detector'].detection.f1 for r in runs)
    yield CheckOutcome('stealth', stealth_f1 <= guess + STEALTH_MARGIN and detector_f1 >= DETECTOR_F1,
        {'latent_f1': stealth_f1, 'random_guess_f1': guess, 'random_noise_f1': detector_f1})

    loo_gain = median(r.share_gain('loo_round') for r in latent)
    yield CheckOutcome('loo_robustness', loo_gain >= LOO_SHARE_GAIN, {'median_gain': loo_gain})


def tree_bytes(root):
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(Path(root).rglob('*')) if path.is_file()}


def check_determinism(cfg):
    with tempfile.TemporaryDirectory() as tmp:
        first, second = Path(tmp, 'first'), Path(tmp, 'second')
        tasks.run_experiment(cfg, first)
        tasks.run_experiment(cfg, second)
        a, b = tree_bytes(first), tree_bytes(second)
    differing = sorted(name for name in a.keys() | b.keys() if a.get(name) != b.get(name))
    return CheckOutcome('determinism', not differing, {'files': len(a), 'differing': differing})


def run_check(cfg, seeds=DEFAULT_SEEDS, out_dir=None):
    start_time = time.time()
    outcomes = [check_shapley(), check_gradients(), check_normalization()]
    runs = []
    for seed in seeds:
        logger.info('Check seed %d.', seed)
        runs.append(run_seed(cfg, seed))
    outcomes.extend(scenario_checks(runs))
    outcomes.append(check_determinism(cfg.with_values(seed=seeds[0])))
    for outcome in outcomes:
        log = logger.info if outcome.passed else logger.error
        log('Check %s %s.', outcome.name, 'passed' if outcome.passed else 'failed')
    if out_dir is not None:
        history.write_json({'seeds': list(seeds), 'passed': all(o.passed for o in outcomes),
            'checks': [o.to_dict() for o in outcomes]}, Path(out_dir) / config.CHECK_FILE)
    logger.info('Check suite finished in %.1f seconds.', time.time() - start_time)
    return outcomes
