import time
import logging
import statistics
from pathlib import Path
from dataclasses import dataclass, field, replace

import torch

from common import VERSION, config, history, settings, streams
from common.errors import ConfigError, RunError
from . import attacks, attribution, data, defense, flcore, models, plots


PHASES = ('attack_free', 'attacked')
SWEEP_AXES = ('num_clients', 'target_rank', 'intensity', 'method')
SWEEP_COLUMNS = ['run_id', 'axis', 'value', 'attack', 'evaluator', 'malicious', 'share_before', 'share_after',
    'rank_before', 'rank_after', 'utility_before', 'utility_after', 'verdict']


logger = logging.getLogger(__name__)


def dataset_spec(cfg):
    return data.DatasetSpec(cfg.generator, cfg.num_classes, cfg.input_dim, cfg.samples_per_class,
        cfg.class_separation, cfg.noise_scale, streams.int_seed(cfg.seed, 'data'))


def partition_spec(cfg):
    return data.PartitionSpec(cfg.num_clients, cfg.classes_per_client, cfg.samples_per_client,
        streams.int_seed(cfg.seed, 'partition'))


def model_spec(cfg):
    return models.ModelSpec(cfg.model, cfg.input_dim, cfg.num_classes, cfg.hidden_dim)


def local_hyper(cfg):
    return flcore.LocalHyper(cfg.local_epochs, cfg.batch_size, cfg.eta_w)


def latent_hyper(cfg):
    return attacks.LatentHyper(cfg.latent_dim, cfg.latent_steps, cfg.synthetic_batch, cfg.eta_z, cfg.intensity,
        cfg.latent_grad)


def defense_config(cfg):
    return defense.DefenseConfig(cfg.defense, cfg.tau, cfg.eps)


def run_id(cfg):
    return settings.config_hash(cfg)[:12]


@dataclass(frozen=True, eq=False)
class Scenario:
    spec: models.ModelSpec
    train: models.LabeledBatch
    test: models.LabeledBatch
    shards: tuple
    decoder: attacks.Decoder


def build_scenario(cfg):
    try:
        spec = model_spec(cfg)
        train, test = data.synthesize(dataset_spec(cfg))
        shards = tuple(data.partition_noniid(train, partition_spec(cfg), cfg.num_classes))
        # the decoder is calibrated on a public pool drawn independently of the client data
        pool, _ = data.synthesize(replace(dataset_spec(cfg), seed=streams.int_seed(cfg.seed, 'pool')))
        decoder = attacks.calibrate_decoder(pool, cfg.latent_dim, streams.int_seed(cfg.seed, 'decoder'),
            cfg.num_classes)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return Scenario(spec, train, test, shards, decoder)


def make_behavior(cfg, scenario, kappa=None):
    spec, hp = scenario.spec, local_hyper(cfg)
    if cfg.attack == 'attack_free':
        return flcore.BenignBehavior(spec, hp)
    if cfg.attack == 'label_flip':
        return attacks.LabelFlipBehavior(spec, hp)
    if cfg.attack == 'random_noise':
        return attacks.RandomNoiseBehavior(spec, hp, cfg.sigma_rel)
    if cfg.attack == 'free_rider':
        return attacks.FreeRiderBehavior()
    if cfg.attack == 'direct_ref':
        return attacks.DirectRefBehavior(spec, hp)
    if cfg.attack == 'latent_opt':
        kappa = cfg.kappa or kappa or float('inf')
        budgets = attacks.Budgets(cfg.delta, cfg.eps, kappa, cfg.c_max or spec.num_params)
        return attacks.LatentOptBehavior(spec, hp, scenario.decoder, latent_hyper(cfg), budgets)
    raise ConfigError(f'Unknown attack: {cfg.attack}.')


def training_config(cfg, scenario, overrides=None):
    overrides = overrides or {}
    benign = flcore.BenignBehavior(scenario.spec, local_hyper(cfg))
    clients = tuple(flcore.Client(shard.client_id, shard, overrides.get(shard.client_id, benign))
        for shard in scenario.shards)
    return flcore.TrainingConfig(scenario.spec, clients, cfg.rounds, scenario.test, cfg.seed, defense_config(cfg),
        settings.config_hash(cfg))


def run_phase(phase, func, *args, **kwargs):
    start_time = time.time()
    try:
        result = func(*args, **kwargs)
    except RunError as e:
        e.phase = phase
        raise
    except ConfigError:
        raise
    except Exception as e:
        raise RunError(f'{type(e).__name__}: {e}', phase=phase) from e
    logger.info('Phase %s finished in %.1f seconds.', phase, time.time() - start_time)
    return result


def evaluate_log(cfg, log, training):
    reports = {}
    for evaluator in cfg.evaluator:
        reports[evaluator] = attribution.evaluate(evaluator, log, training.spec, training.test, training,
            cfg.mc_permutations, streams.int_seed(cfg.seed, 'evaluator'))
    return reports


def select_malicious(report, rule, k=None):
    if rule == 'lowest_rank':
        return report.client_with_rank(len(report.ranks))
    if rule == 'rank_k':
        if k is None or not 1 <= k <= len(report.ranks):
            raise ConfigError(f'Target rank must lie in [1, {len(report.ranks)}].')
        return report.client_with_rank(k)
    raise ConfigError(f'Unknown target rule: {rule}.')


@dataclass(eq=False)
class PhaseResult:
    config: settings.ExperimentConfig
    training: flcore.TrainingConfig
    log: flcore.TrainingLog
    reports: dict
    malicious: int = None
    kappa: float = None
    diagnostics: list = field(default_factory=list)


@dataclass(eq=False)
class Baseline(PhaseResult):
    scenario: Scenario = None


def benign_norm_median(log):
    return statistics.median(torch.linalg.vector_norm(u).item() for r in log.rounds for u in r.updates)


def run_baseline(cfg, scenario=None):
    scenario = scenario or build_scenario(cfg)
    training = training_config(cfg, scenario)
    log = run_phase('attack_free', flcore.run_training, training)
    reports = run_phase('attack_free', evaluate_log, cfg, log, training)
    malicious = select_malicious(reports[cfg.primary_evaluator], cfg.target, cfg.target_rank)
    kappa = cfg.kappa or cfg.kappa_scale * benign_norm_median(log)
    logger.info('Attack-free utility %.4f; malicious client %d; kappa %.4g.', log.final_utility, malicious, kappa)
    return Baseline(cfg, training, log, reports, malicious, kappa, scenario=scenario)


def run_attacked(baseline, cfg=None, malicious=None):
    cfg = cfg or baseline.config
    if malicious is None:
        malicious = baseline.malicious
        if cfg.target == 'rank_k' and cfg.target_rank != baseline.config.target_rank:
            malicious = select_malicious(baseline.reports[cfg.primary_evaluator], cfg.target, cfg.target_rank)
    behavior = make_behavior(cfg, baseline.scenario, baseline.kappa)
    training = training_config(cfg, baseline.scenario, {malicious: behavior})
    log = run_phase('attacked', flcore.run_training, training)
    # retraining evaluators rerun the behavior and reset its diagnostics
    diagnostics = list(getattr(behavior, 'diagnostics', []))
    reports = run_phase('attacked', evaluate_log, cfg, log, training)
    return PhaseResult(cfg, training, log, reports, malicious, baseline.kappa, diagnostics)


@dataclass(eq=False)
class ExperimentReport:
    run_id: str
    config_hash: str
    attack: str
    evaluators: tuple
    malicious: int
    attack_free: dict
    attacked: dict
    utility_before: float
    utility_after: float
    delta: float
    kappa: float
    marginal_before: list
    marginal_after: list
    diagnostics: list
    detection: defense.DetectionScore = None
    random_guess_f1: float = None
    plausibility_flag_rate: float = None
    config: dict = None

    @property
    def evaluator(self):
        return self.evaluators[0]

    @property
    def utility_gap(self):
        return self.utility_after - self.utility_before

    @property
    def verdict(self):
        return abs(self.utility_gap) <= self.delta

    def share_before(self, evaluator=None):
        return self.attack_free[evaluator or self.evaluator].shares[self.malicious]

    def share_after(self, evaluator=None):
        return self.attacked[evaluator or self.evaluator].shares[self.malicious]

    def share_gain(self, evaluator=None):
        return self.share_after(evaluator) - self.share_before(evaluator)

    def rank_before(self, evaluator=None):
        return self.attack_free[evaluator or self.evaluator].ranks[self.malicious]

    def rank_after(self, evaluator=None):
        return self.attacked[evaluator or self.evaluator].ranks[self.malicious]

    def to_dict(self):
        alphas = [d['effective_alpha'] for d in self.diagnostics if 'effective_alpha' in d]
        return {
            'version': VERSION,
            'run_id': self.run_id,
            'config_hash': self.config_hash,
            'config': self.config,
            'attack': self.attack,
            'malicious': self.malicious,
            'evaluators': list(self.evaluators),
            'utility': {
                'before': self.utility_before,
                'after': self.utility_after,
                'gap': self.utility_gap,
                'delta': self.delta,
                'verdict': 'pass' if self.verdict else 'fail',
            },
            'attribution': {
                evaluator: {'attack_free': self.attack_free[evaluator].to_dict(),
                    'attacked': self.attacked[evaluator].to_dict()}
                for evaluator in self.evaluators
            },
            'attacker': {
                evaluator: {
                    'share_before': self.share_before(evaluator),
                    'share_after': self.share_after(evaluator),
                    'rank_before': self.rank_before(evaluator),
                    'rank_after': self.rank_after(evaluator),
                }
                for evaluator in self.evaluators
            },
            'marginal_utility': {'attack_free': self.marginal_before, 'attacked': self.marginal_after},
            'kappa': self.kappa,
            'effective_alpha': alphas[-1] if alphas else 0.0,
            'diagnostics': {
                'rounds': len(self.diagnostics),
                'clipped': sum(bool(d.get('clipped')) for d in self.diagnostics),
                'reverted': sum(bool(d.get('reverted')) for d in self.diagnostics),
                'stalled': sum(d.get('stalled_at') is not None for d in self.diagnostics),
            },
            'detection': None if self.detection is None else {
                'precision': self.detection.precision,
                'recall': self.detection.recall,
                'f1': self.detection.f1,
                'rounds': self.detection.rounds,
                'random_guess_f1': self.random_guess_f1,
            },
            'plausibility_flag_rate': self.plausibility_flag_rate,
        }


def attacker_marginals(phase, malicious):
    values = attribution.marginal_utilities(phase.log, phase.training.spec, phase.training.test)
    return [float(v) for v in values[:, malicious]]


def build_report(baseline, attacked):
    cfg = attacked.config
    malicious = attacked.malicious
    detection = guess = flag_rate = None
    trims = [r.trim for r in attacked.log.rounds if r.trim is not None]
    if trims:
        n_clients = attacked.log.num_clients
        detection = defense.detection_metrics(trims, {malicious})
        guess = defense.random_guess_f1(n_clients, defense.num_trimmed(cfg.tau, n_clients), 1)
        flags = [r.deviations[malicious] > cfg.eps for r in attacked.log.rounds]
        flag_rate = sum(flags) / len(flags)
    report = ExperimentReport(run_id(cfg), settings.config_hash(cfg), cfg.attack, cfg.evaluator, malicious,
        baseline.reports, attacked.reports, baseline.log.final_utility, attacked.log.final_utility, cfg.delta,
        attacked.kappa, attacker_marginals(baseline, malicious), attacker_marginals(attacked, malicious),
        attacked.diagnostics, detection, guess, flag_rate, settings.as_dict(cfg, include_out=False))
    if not report.verdict:
        logger.warning('Utility gap %.4f exceeds tolerance %.4f.', report.utility_gap, report.delta)
    return report


def write_outputs(report, baseline, attacked, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = attacked.config
    (out_dir / config.CONFIG_FILE).write_text(settings.render_config(cfg, include_out=False), encoding='utf-8')
    for phase, result in zip(PHASES, [baseline, attacked]):
        history.write_jsonl(result.log.to_records(), out_dir / config.TRAINING_LOG.format(phase=phase))
    history.write_jsonl(({'run_id': report.run_id, **d} for d in report.diagnostics),
        out_dir / config.DIAGNOSTICS_LOG)
    rows = []
    for phase, reports in zip(PHASES, [report.attack_free, report.attacked]):
        for evaluator in report.evaluators:
            rows.extend(history.attribution_rows(report.run_id, phase, reports[evaluator]))
    history.write_csv(rows, history.ATTRIBUTION_COLUMNS, out_dir / config.ATTRIBUTION_CSV)
    if report.detection is not None:
        score = report.detection
        row = {'run_id': report.run_id, 'phase': 'attacked', 'precision': score.precision, 'recall': score.recall,
            'f1': score.f1, 'random_guess_f1': report.random_guess_f1, 'rounds': score.rounds}
        history.write_csv([row], history.DETECTION_COLUMNS, out_dir / config.DETECTION_CSV)
    history.write_json(report.to_dict(), out_dir / config.REPORT_FILE)
    plots.emit_plots(report.to_dict(), out_dir)
    logger.info('Wrote run %s to %s.', report.run_id, out_dir)


def run_experiment(cfg, out_dir=None, baseline=None):
    start_time = time.time()
    baseline = baseline or run_baseline(cfg)
    attacked = run_attacked(baseline, cfg)
    report = build_report(baseline, attacked)
    if out_dir is not None:
        write_outputs(report, baseline, attacked, out_dir)
    logger.info('Experiment %s (%s) finished in %.1f seconds: attacker share %.4f -> %.4f.', report.run_id,
        cfg.attack, time.time() - start_time, report.share_before(), report.share_after())
    return report


def sweep_point(cfg, axis, value):
    if axis == 'num_clients':
        return cfg.with_values(num_clients=value)
    if axis == 'target_rank':
        return cfg.with_values(target='rank_k', target_rank=value)
    if axis == 'intensity':
        return cfg.with_values(intensity=value)
    if axis == 'method':
        return cfg.with_values(attack=value)
    raise ConfigError(f'Unknown sweep axis: {axis}.')


def sweep_rows(axis, values, reports):
    for value, report in zip(values, reports):
        yield {'run_id': report.run_id, 'axis': axis, 'value': value, 'attack': report.attack,
            'evaluator': report.evaluator, 'malicious': report.malicious, 'share_before': report.share_before(),
            'share_after': report.share_after(), 'rank_before': report.rank_before(),
            'rank_after': report.rank_after(), 'utility_before': report.utility_before,
            'utility_after': report.utility_after, 'verdict': 'pass' if report.verdict else 'fail'}


def sweep(cfg, axis, values, out_dir=None):
    if axis not in SWEEP_AXES:
        raise ConfigError(f'Unknown sweep axis: {axis}.')
    if not values:
        raise ConfigError('A sweep needs at least one value.')
    points = [sweep_point(cfg, axis, value) for value in values]
    # every axis except the client count shares one attack-free phase
    shared = None if axis == 'num_clients' else run_baseline(cfg)
    reports = []
    for value, point in zip(values, points):
        logger.info('Sweep %s = %s.', axis, value)
        baseline = shared or run_baseline(point)
        attacked = run_attacked(baseline, point)
        report = build_report(baseline, attacked)
        if out_dir is not None:
            write_outputs(report, baseline, attacked, Path(out_dir) / f'{axis}={value}')
        reports.append(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        summary = {'axis': axis, 'values': list(values), 'reports': [r.to_dict() for r in reports]}
        history.write_json(summary, out_dir / config.SWEEP_FILE)
        history.write_csv(sweep_rows(axis, values, reports), SWEEP_COLUMNS, out_dir / config.SWEEP_CSV)
        plots.emit_sweep_plots(summary, out_dir)
    return reports
