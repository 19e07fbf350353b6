import time
import logging
from typing import Protocol
from dataclasses import dataclass, field

import torch

from common import history as persistence
from common import streams
from common.errors import RunError
from . import models
from .defense import DefenseConfig, TrimDecision, trim_round, plausibility_check


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalHyper:
    epochs: int = 2
    batch_size: int = 32
    eta_w: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError('Epochs and batch size must be positive.')
        if not self.eta_w >= 0:
            raise ValueError('Learning rate must be non-negative.')


@dataclass(frozen=True, eq=False)
class RoundRecord:
    t: int
    w_t: torch.Tensor
    updates: tuple
    n: tuple
    w_next: torch.Tensor
    test_utility_after: float
    trim: TrimDecision = None
    deviations: tuple = None


@dataclass(eq=False)
class TrainingLog:
    rounds: list
    final_utility: float
    fingerprint: str = ''

    @property
    def num_clients(self):
        return len(self.rounds[0].updates) if self.rounds else 0

    def to_records(self):
        yield {'kind': 'header', 'fingerprint': self.fingerprint, 'rounds': len(self.rounds),
            'final_utility': self.final_utility}
        for r in self.rounds:
            yield {
                'kind': 'round',
                't': r.t,
                'w_t': persistence.encode_params(r.w_t),
                'updates': [persistence.encode_params(u) for u in r.updates],
                'n': list(r.n),
                'w_next': persistence.encode_params(r.w_next),
                'test_utility_after': r.test_utility_after,
                'trimmed': sorted(r.trim.trimmed) if r.trim else None,
                'distances': list(r.trim.distances) if r.trim else None,
                'deviations': list(r.deviations) if r.deviations else None,
            }

    @classmethod
    def from_records(cls, records):
        header, *rows = records
        if header.get('kind') != 'header':
            raise ValueError('Training log has no header.')
        rounds = []
        for row in rows:
            trim = None
            if row['trimmed'] is not None:
                trimmed = frozenset(row['trimmed'])
                trim = TrimDecision(row['t'], tuple(row['distances']), trimmed,
                    frozenset(range(len(row['n']))) - trimmed)
            rounds.append(RoundRecord(row['t'], persistence.decode_params(row['w_t']),
                tuple(persistence.decode_params(u) for u in row['updates']), tuple(row['n']),
                persistence.decode_params(row['w_next']), row['test_utility_after'], trim,
                tuple(row['deviations']) if row['deviations'] else None))
        return cls(rounds, header['final_utility'], header['fingerprint'])


class History:
    """Read-only view of the broadcast models w_1..w_t; the only global state a client may observe."""

    def __init__(self, weights):
        self._weights = tuple(weights)

    def __len__(self):
        return len(self._weights)

    def __getitem__(self, index):
        return self._weights[index]

    @property
    def t(self):
        return len(self._weights)

    @property
    def current(self):
        return self._weights[-1]

    @property
    def previous(self):
        return self._weights[-2] if len(self._weights) >= 2 else None


class Behavior(Protocol):
    def __call__(self, w_t, history, shard, rng): ...


@dataclass(frozen=True, eq=False)
class Client:
    client_id: int
    shard: object
    behavior: Behavior


@dataclass(frozen=True, eq=False)
class TrainingConfig:
    spec: models.ModelSpec
    clients: tuple
    rounds: int
    test: models.LabeledBatch
    seed: int
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    fingerprint: str = ''

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError('At least one round is required.')
        if not self.clients:
            raise ValueError('At least one client is required.')


def weighted_aggregate(updates, n):
    if not len(updates):
        raise ValueError('No updates to aggregate.')
    if len(updates) != len(n):
        raise ValueError('Updates and sample counts differ in length.')
    if any(count < 0 for count in n):
        raise ValueError('Sample counts must be non-negative.')
    total = sum(n)
    if total <= 0:
        raise ValueError('Sample counts sum to zero.')
    aggregate = torch.zeros_like(updates[0])
    for update, count in zip(updates, n):
        aggregate = aggregate + (count / total) * update
    return aggregate


def utility(spec, params, test):
    return models.accuracy(spec, params, test)


def benign_local_update(spec, w_t, shard, hp, rng):
    if not shard.n:
        raise ValueError('Shard is empty.')
    if hp.eta_w == 0:
        return torch.zeros_like(w_t)
    trained = models.sgd_train(spec, w_t, shard.data, hp.epochs, hp.batch_size, hp.eta_w, rng)
    return trained - w_t


class BenignBehavior:
    def __init__(self, spec, hp):
        self.spec = spec
        self.hp = hp

    def __call__(self, w_t, history, shard, rng):
        return benign_local_update(self.spec, w_t, shard, self.hp, rng)


def initial_params(config):
    return models.init_params(config.spec, streams.stream(config.seed, 'init'))


def _collect_update(config, client, w_t, history, t):
    rng = streams.stream(config.seed, 'client', client.client_id, t)
    try:
        update = client.behavior(w_t, history, client.shard, rng)
    except Exception as e:
        raise RunError(f'Client {client.client_id} failed: {e}', round=t) from e
    if update.shape != w_t.shape or not bool(torch.isfinite(update).all()):
        raise RunError(f'Client {client.client_id} returned an invalid update.', round=t)
    return update


def run_training(config):
    start_time = time.time()
    spec = config.spec
    w_t = initial_params(config)
    broadcast = [w_t]
    rounds = []
    n = tuple(client.shard.n for client in config.clients)

    for t in range(1, config.rounds + 1):
        view = History(broadcast)
        updates = tuple(_collect_update(config, client, w_t, view, t) for client in config.clients)

        trim = deviations = None
        if config.defense.enabled:
            trim = trim_round(updates, n, config.defense.tau, t)
            kept_updates = [updates[i] for i in sorted(trim.kept)]
            deviations = tuple(plausibility_check(u, kept_updates, config.defense.eps).distance for u in updates)

        if trim is not None and config.defense.enforced:
            kept = sorted(trim.kept)
            aggregate = weighted_aggregate([updates[i] for i in kept], [n[i] for i in kept])
        else:
            aggregate = weighted_aggregate(updates, n)

        w_next = w_t + aggregate
        test_utility = utility(spec, w_next, config.test)
        rounds.append(RoundRecord(t, w_t, updates, n, w_next, test_utility, trim, deviations))
        logger.debug('Round %d/%d: test utility %.4f.', t, config.rounds, test_utility)
        w_t = w_next
        broadcast.append(w_t)

    logger.info('Trained %d clients for %d rounds in %.1f seconds, final utility %.4f.', len(config.clients),
        config.rounds, time.time() - start_time, rounds[-1].test_utility_after)
    return TrainingLog(rounds, rounds[-1].test_utility_after, config.fingerprint)
