import math
import logging
from typing import NamedTuple
from dataclasses import dataclass

import torch

from common.settings import DEFENSES


MODES = DEFENSES


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DefenseConfig:
    mode: str = 'off'
    tau: float = 0.1
    eps: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f'Unknown defense mode: {self.mode}.')
        if not 0 < self.tau < 1:
            raise ValueError('Trim fraction must lie in (0, 1).')
        if not self.eps >= 0:
            raise ValueError('Plausibility tolerance must be non-negative.')

    @property
    def enabled(self):
        return self.mode != 'off'

    @property
    def enforced(self):
        return self.mode == 'enforce'


@dataclass(frozen=True)
class TrimDecision:
    t: int
    distances: tuple
    trimmed: frozenset
    kept: frozenset


@dataclass(frozen=True)
class DetectionScore:
    precision: float
    recall: float
    f1: float
    rounds: int


class Plausibility(NamedTuple):
    distance: float
    flagged: bool


def num_trimmed(tau, n):
    # rounding guards against products such as 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(round(tau * n, 9)))


def coordinate_median(updates):
    return torch.quantile(torch.stack(list(updates)), 0.5, dim=0)


def trim_round(updates, n, tau, t=0):
    if len(updates) < 2:
        raise ValueError('Trimming needs at least two clients.')
    if len(n) != len(updates):
        raise ValueError('Updates and sample counts differ in length.')
    if not 0 < tau < 1:
        raise ValueError('Trim fraction must lie in (0, 1).')
    median = coordinate_median(updates)
    distances = tuple(torch.linalg.vector_norm(u - median).item() for u in updates)
    order = sorted(range(len(updates)), key=lambda i: (-distances[i], -i))
    trimmed = frozenset(order[:num_trimmed(tau, len(updates))])
    kept = frozenset(range(len(updates))) - trimmed
    logger.debug('Round %d: trimmed %s.', t, sorted(trimmed))
    return TrimDecision(t, distances, trimmed, kept)


def cosine_distance(a, b):
    norm = torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b)
    if norm == 0:
        return 1.0
    return 1.0 - (torch.dot(a, b) / norm).item()


def plausibility_check(update, kept_updates, eps):
    if not len(kept_updates):
        raise ValueError('Plausibility needs at least one kept update.')
    distance = cosine_distance(update, coordinate_median(kept_updates))
    return Plausibility(distance, distance > eps)


def round_scores(decision, malicious):
    hits = len(decision.trimmed & malicious)
    precision = hits / len(decision.trimmed) if decision.trimmed else 0.0
    recall = hits / len(malicious)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def detection_metrics(decisions, malicious):
    malicious = frozenset(malicious)
    if not malicious:
        raise ValueError('Recall is undefined without malicious clients.')
    if not decisions:
        raise ValueError('At least one round is required.')
    scores = [round_scores(decision, malicious) for decision in decisions]
    precision, recall, f1 = (math.fsum(column) / len(scores) for column in zip(*scores))
    return DetectionScore(precision, recall, f1, len(scores))


def random_guess_f1(num_clients, num_trimmed, num_malicious):
    """Expected per-round F1 of trimming num_trimmed of num_clients uniformly at random."""
    if not 0 < num_malicious <= num_clients or not 0 < num_trimmed <= num_clients:
        raise ValueError('Invalid client counts.')
    # F1 = 2 * hits / (trimmed + malicious) and E[hits] = trimmed * malicious / clients
    return 2 * (num_trimmed * num_malicious / num_clients) / (num_trimmed + num_malicious)
