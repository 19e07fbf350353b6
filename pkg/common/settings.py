"""
Experiment configuration.

A configuration file is a flat KEY=VALUE text file (dotenv syntax, '#' comments). Every key below is optional;
unknown keys are rejected. Lists are comma-separated.

    # dataset
    generator            gaussian_blobs | concentric_rings
    num_classes          C >= 2
    input_dim            feature dimension
    samples_per_class    samples per class before the 80/20 train/test split
    class_separation     distance scale between class centres
    noise_scale          per-feature Gaussian noise std
    # partition
    num_clients          N >= 2
    classes_per_client   k, 1 <= k <= C
    samples_per_client   per-client target, reduced to what the pools allow
    # model
    model                logistic | mlp1
    hidden_dim           hidden units (mlp1 only)
    # federated training
    rounds               T
    local_epochs         epochs of local SGD per round
    batch_size           local mini-batch size
    eta_w                local learning rate
    # evaluation
    evaluator            comma-separated evaluators; the first selects the malicious client
    mc_permutations      permutations per round for fedsv_mc
    # attack
    attack               attack_free | label_flip | random_noise | free_rider | direct_ref | latent_opt
    target               lowest_rank | rank_k
    target_rank          k for rank_k
    intensity            multiplier on synthetic_batch
    sigma_rel            relative noise scale of random_noise
    delta                utility tolerance of the stealth verdict
    eps                  plausibility tolerance (cosine distance to the kept-update median)
    kappa                norm clip; 0 calibrates kappa_scale x median benign update norm
    kappa_scale          calibration multiplier for kappa
    c_max                communication budget in floats; 0 means the parameter count
    latent_dim           decoder latent dimension d
    latent_steps         latent refinement steps B_z per round
    synthetic_batch      base synthetic batch size B_s
    eta_z                latent stepsize
    latent_grad          fd | autograd
    # defense
    defense              off | monitor | enforce
    tau                  trimmed fraction per round
    # run
    seed                 master seed
    out                  output directory (default: $FEDATTRIB_OUTPUT_ROOT/<run id>)
"""
import hashlib
import builtins
import warnings
from dataclasses import dataclass, fields, replace, asdict

import click
from dotenv import dotenv_values

from common.errors import ConfigError


GENERATORS = ('gaussian_blobs', 'concentric_rings')
MODELS = ('logistic', 'mlp1')
EVALUATORS = ('fedsv_exact', 'fedsv_mc', 'loo_round', 'loo_retrain')
ATTACKS = ('attack_free', 'label_flip', 'random_noise', 'free_rider', 'direct_ref', 'latent_opt')
TARGETS = ('lowest_rank', 'rank_k')
LATENT_GRADS = ('fd', 'autograd')
DEFENSES = ('off', 'monitor', 'enforce')
# one test sample and at least one training sample per class
MIN_SAMPLES_PER_CLASS = 2

POSITIVE_INT = click.IntRange(min=1)
NON_NEGATIVE_INT = click.IntRange(min=0)
POSITIVE_FLOAT = click.FloatRange(min=0, min_open=True)
NON_NEGATIVE_FLOAT = click.FloatRange(min=0)
SEED = click.IntRange(0, 2 ** 64 - 1)


class EvaluatorList(click.ParamType):
    name = 'evaluators'

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        names = tuple(s.strip() for s in value.split(',') if s.strip())
        if not names:
            self.fail('at least one evaluator is required', param, ctx)
        unknown = [name for name in names if name not in EVALUATORS]
        if unknown:
            self.fail(f'unknown evaluators: {", ".join(unknown)}', param, ctx)
        return names


SCHEMA = {
    'generator': click.Choice(GENERATORS),
    'num_classes': click.IntRange(min=2),
    'input_dim': POSITIVE_INT,
    'samples_per_class': click.IntRange(min=MIN_SAMPLES_PER_CLASS),
    'class_separation': POSITIVE_FLOAT,
    'noise_scale': POSITIVE_FLOAT,
    'num_clients': click.IntRange(min=2),
    'classes_per_client': POSITIVE_INT,
    'samples_per_client': POSITIVE_INT,
    'model': click.Choice(MODELS),
    'hidden_dim': NON_NEGATIVE_INT,
    'rounds': POSITIVE_INT,
    'local_epochs': POSITIVE_INT,
    'batch_size': POSITIVE_INT,
    'eta_w': NON_NEGATIVE_FLOAT,
    'evaluator': EvaluatorList(),
    'mc_permutations': POSITIVE_INT,
    'attack': click.Choice(ATTACKS),
    'target': click.Choice(TARGETS),
    'target_rank': NON_NEGATIVE_INT,
    'intensity': NON_NEGATIVE_FLOAT,
    'sigma_rel': NON_NEGATIVE_FLOAT,
    'delta': NON_NEGATIVE_FLOAT,
    'eps': NON_NEGATIVE_FLOAT,
    'kappa': NON_NEGATIVE_FLOAT,
    'kappa_scale': POSITIVE_FLOAT,
    'c_max': NON_NEGATIVE_INT,
    'latent_dim': POSITIVE_INT,
    'latent_steps': NON_NEGATIVE_INT,
    'synthetic_batch': NON_NEGATIVE_INT,
    'eta_z': NON_NEGATIVE_FLOAT,
    'latent_grad': click.Choice(LATENT_GRADS),
    'defense': click.Choice(DEFENSES),
    'tau': click.FloatRange(0, 1, min_open=True, max_open=True),
    'seed': SEED,
    'out': click.STRING,
}


@dataclass(frozen=True)
class ExperimentConfig:
    generator: str = 'gaussian_blobs'
    num_classes: int = 6
    input_dim: int = 10
    samples_per_class: int = 400
    class_separation: float = 3.0
    noise_scale: float = 1.0
    num_clients: int = 6
    classes_per_client: int = 2
    samples_per_client: int = 300
    model: str = 'logistic'
    hidden_dim: int = 0
    rounds: int = 15
    local_epochs: int = 2
    batch_size: int = 32
    eta_w: float = 0.1
    evaluator: tuple = ('fedsv_exact',)
    mc_permutations: int = 200
    attack: str = 'latent_opt'
    target: str = 'lowest_rank'
    target_rank: int = 0
    intensity: float = 1.0
    sigma_rel: float = 1.0
    delta: float = 0.02
    eps: float = 0.5
    kappa: float = 0.0
    kappa_scale: float = 3.0
    c_max: int = 0
    latent_dim: int = 8
    latent_steps: int = 5
    synthetic_batch: int = 16
    eta_z: float = 0.01
    latent_grad: str = 'fd'
    defense: str = 'off'
    tau: float = 0.1
    seed: int = 0
    out: str = ''

    def __post_init__(self):
        if self.classes_per_client > self.num_classes:
            raise ConfigError('classes_per_client cannot exceed num_classes.')
        if self.model == 'mlp1' and self.hidden_dim < 1:
            raise ConfigError('mlp1 models need a positive hidden_dim.')
        if self.model == 'logistic' and self.hidden_dim:
            raise ConfigError('Logistic models take no hidden_dim.')
        if self.target == 'rank_k' and not 1 <= self.target_rank <= self.num_clients:
            raise ConfigError(f'target_rank must lie in [1, {self.num_clients}] for rank_k targeting.')
        if self.generator == 'concentric_rings' and self.input_dim < 2:
            raise ConfigError('concentric_rings needs input_dim >= 2.')

    @property
    def primary_evaluator(self):
        return self.evaluator[0]

    def with_values(self, **values):
        """Return a copy with raw (string or typed) values converted and validated."""
        converted = {}
        for key, value in values.items():
            if key not in SCHEMA:
                raise ConfigError(f'Unknown configuration key: {key}.')
            converted[key] = convert_value(key, value)
        return replace(self, **converted)


def convert_value(key, value):
    try:
        return SCHEMA[key].convert(value, None, None)
    except click.BadParameter as e:
        raise ConfigError(f'Invalid value for {key}: {e.message}.') from e


def render_value(value):
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def render_config(config, include_out=True):
    lines = [f'{f.name}={render_value(getattr(config, f.name))}' for f in fields(config)
        if include_out or f.name != 'out']
    return '\n'.join(lines) + '\n'


def config_hash(config):
    return hashlib.sha256(render_config(config, include_out=False).encode('utf-8')).hexdigest()


def load_config(path=None, **overrides):
    values = {}
    if path is not None:
        values = {k.strip().lower(): v for k, v in dotenv_values(path).items()}
        missing = [k for k, v in values.items() if v is None]
        if missing:
            raise ConfigError(f'Keys without values: {", ".join(missing)}.')
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig().with_values(**values)


def as_dict(config, include_out=True):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()
        if include_out or k != 'out'}


def filter_warnings(filters):
    for filter in filters.split(','):
        parts = [s.strip() for s in filter.split(':')]
        action, message, category, module, lineno = parts + [''] * (5 - len(parts))
        if not action:
            continue
        category = getattr(builtins, category) if category else Warning
        lineno = int(lineno) if lineno else 0
        warnings.filterwarnings(action, message, category, module, lineno)
