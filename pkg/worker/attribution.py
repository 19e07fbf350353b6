import math
import logging
import operator
from dataclasses import dataclass, replace

import numpy as np
from cachetools import LRUCache, cachedmethod

from common.settings import EVALUATORS
from . import flcore


MAX_EXACT_PLAYERS = 16
DEFAULT_PERMUTATIONS = 200


logger = logging.getLogger(__name__)


def to_mask(subset):
    mask = 0
    for i in subset:
        mask |= 1 << i
    return mask


def members(mask, num_players):
    return [i for i in range(num_players) if mask >> i & 1]


class TabularGame:
    """A coalition game given by an explicit value table indexed by player bitmask."""

    def __init__(self, values):
        self.values = [float(v) for v in values]
        self.num_players = len(self.values).bit_length() - 1
        if len(self.values) != 1 << self.num_players:
            raise ValueError('Value table length must be a power of two.')

    def value(self, mask):
        return self.values[mask]


class CoalitionUtility:
    """v_t(S) = U(w_t + data-size-weighted mean of the updates in S), with weights renormalized within S."""

    def __init__(self, t, base_w, updates, n, spec, test):
        if len(updates) != len(n):
            raise ValueError('Updates and sample counts differ in length.')
        self.t = t
        self.base_w = base_w
        self.updates = tuple(updates)
        self.n = tuple(n)
        self.spec = spec
        self.test = test
        self._cache = LRUCache(maxsize=1 << len(self.updates))

    @classmethod
    def from_record(cls, record, spec, test):
        return cls(record.t, record.w_t, record.updates, record.n, spec, test)

    @property
    def num_players(self):
        return len(self.updates)

    @cachedmethod(operator.attrgetter('_cache'))
    def value(self, mask):
        subset = members(mask, self.num_players)
        if not subset or sum(self.n[i] for i in subset) == 0:
            return flcore.utility(self.spec, self.base_w, self.test)
        aggregate = flcore.weighted_aggregate([self.updates[i] for i in subset], [self.n[i] for i in subset])
        return flcore.utility(self.spec, self.base_w + aggregate, self.test)


def coalition_value(game, subset):
    subset = list(subset)
    if any(not 0 <= i < game.num_players for i in subset):
        raise ValueError('Coalition contains unknown players.')
    return game.value(to_mask(subset))


def shapley_exact(game):
    n = game.num_players
    if n > MAX_EXACT_PLAYERS:
        raise ValueError(f'Exact Shapley values are limited to {MAX_EXACT_PLAYERS} players; use shapley_mc.')
    # weight of a coalition of size s when player i joins it: s! (n - s - 1)! / n!
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(n)
    for mask in range(1 << n):
        value = game.value(mask)
        size = bin(mask).count('1')
        for i in range(n):
            if mask >> i & 1:
                phi[i] += weights[size - 1] * value
            else:
                phi[i] -= weights[size] * value
    return phi


def shapley_mc(game, num_permutations, seed):
    if num_permutations < 1:
        raise ValueError('At least one permutation is required.')
    n = game.num_players
    rng = np.random.default_rng(seed)
    phi = np.zeros(n)
    for _ in range(num_permutations):
        mask = 0
        previous = game.value(mask)
        for i in rng.permutation(n):
            mask |= 1 << int(i)
            current = game.value(mask)
            phi[i] += current - previous
            previous = current
    return phi / num_permutations


def normalize_shares(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if not raw.size:
        raise ValueError('No attribution values to normalize.')
    shifted = raw - raw.min()
    total = shifted.sum()
    if total == 0:
        return tuple(np.full(raw.size, 1 / raw.size).tolist())
    return tuple((shifted / total).tolist())


def rank_clients(shares):
    order = sorted(range(len(shares)), key=lambda i: (-shares[i], i))
    ranks = [0] * len(shares)
    for position, i in enumerate(order):
        ranks[i] = position + 1
    return tuple(ranks)


@dataclass(frozen=True)
class AttributionReport:
    evaluator: str
    raw: tuple
    shares: tuple
    ranks: tuple

    @classmethod
    def from_raw(cls, evaluator, raw):
        if evaluator not in EVALUATORS:
            raise ValueError(f'Unknown evaluator: {evaluator}.')
        raw = tuple(float(v) for v in raw)
        shares = normalize_shares(raw)
        return cls(evaluator, raw, shares, rank_clients(shares))

    def client_with_rank(self, rank):
        if not 1 <= rank <= len(self.ranks):
            raise ValueError(f'Rank must lie in [1, {len(self.ranks)}].')
        return self.ranks.index(rank)

    def to_dict(self):
        return {'evaluator': self.evaluator, 'raw': list(self.raw), 'shares': list(self.shares),
            'ranks': list(self.ranks)}


def round_games(log, spec, test):
    for record in log.rounds:
        yield CoalitionUtility.from_record(record, spec, test)


def fedsv(log, spec, test, mode='exact', num_permutations=DEFAULT_PERMUTATIONS, seed=0):
    if mode not in ('exact', 'mc'):
        raise ValueError(f'Unknown FedSV mode: {mode}.')
    total = np.zeros(log.num_clients)
    for game in round_games(log, spec, test):
        if mode == 'exact':
            total += shapley_exact(game)
        else:
            # one independent permutation stream per round
            total += shapley_mc(game, num_permutations, np.random.SeedSequence(seed, spawn_key=(game.t,)))
    logger.debug('FedSV (%s) raw values: %s', mode, total)
    return AttributionReport.from_raw(f'fedsv_{mode}', total)


def loo_values(log, spec, test):
    total = np.zeros(log.num_clients)
    for game in round_games(log, spec, test):
        everyone = (1 << game.num_players) - 1
        full = game.value(everyone)
        for i in range(game.num_players):
            total[i] += full - game.value(everyone & ~(1 << i))
    return total


def loo_round(log, spec, test):
    return AttributionReport.from_raw('loo_round', loo_values(log, spec, test))


def without_client(config, i):
    if not 0 <= i < len(config.clients):
        raise ValueError(f'No client at position {i}.')
    return replace(config, clients=config.clients[:i] + config.clients[i + 1:])


def loo_retrain(config, i, full_utility=None):
    if full_utility is None:
        full_utility = flcore.run_training(config).final_utility
    return full_utility - flcore.run_training(without_client(config, i)).final_utility


def loo_retrain_report(config, full_utility=None):
    if full_utility is None:
        full_utility = flcore.run_training(config).final_utility
    raw = [loo_retrain(config, i, full_utility) for i in range(len(config.clients))]
    return AttributionReport.from_raw('loo_retrain', raw)


def marginal_utilities(log, spec, test):
    """Per-round, per-client marginal utility U(w_t + g) - U(w_t), shape (T, N)."""
    rows = []
    for game in round_games(log, spec, test):
        base = game.value(0)
        rows.append([game.value(1 << i) - base for i in range(game.num_players)])
    return np.asarray(rows)


def evaluate(evaluator, log, spec, test, training_config=None, num_permutations=DEFAULT_PERMUTATIONS, seed=0):
    if evaluator == 'fedsv_exact':
        return fedsv(log, spec, test, 'exact')
    if evaluator == 'fedsv_mc':
        return fedsv(log, spec, test, 'mc', num_permutations, seed)
    if evaluator == 'loo_round':
        return loo_round(log, spec, test)
    if evaluator == 'loo_retrain':
        if training_config is None:
            raise ValueError('Retraining LOO needs the training configuration.')
        return loo_retrain_report(training_config, None if log is None else log.final_utility)
    raise ValueError(f'Unknown evaluator: {evaluator}.')
