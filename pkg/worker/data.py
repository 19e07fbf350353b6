import csv
import math
import logging
from pathlib import Path
from dataclasses import dataclass

import numpy as np

from common.settings import GENERATORS, MIN_SAMPLES_PER_CLASS
from .models import LabeledBatch


TEST_PERCENT = 20


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSpec:
    generator: str
    num_classes: int
    input_dim: int
    samples_per_class: int
    class_separation: float
    noise_scale: float
    seed: int

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f'Unknown generator: {self.generator}.')
        if self.num_classes < 2:
            raise ValueError('At least two classes are required.')
        if self.samples_per_class < MIN_SAMPLES_PER_CLASS:
            raise ValueError(f'At least {MIN_SAMPLES_PER_CLASS} samples per class are required.')
        if self.input_dim < 1 or (self.generator == 'concentric_rings' and self.input_dim < 2):
            raise ValueError('Input dimension too small for the generator.')
        if not (self.class_separation > 0 and self.noise_scale > 0):
            raise ValueError('Class separation and noise scale must be positive.')


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    classes_per_client: int
    samples_per_client: int
    seed: int

    def __post_init__(self):
        if self.num_clients < 2:
            raise ValueError('At least two clients are required.')
        if self.classes_per_client < 1:
            raise ValueError('Each client needs at least one class.')
        if self.samples_per_client < 1:
            raise ValueError('Each client needs at least one sample.')


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    data: LabeledBatch
    class_counts: tuple

    def __post_init__(self):
        if sum(self.class_counts) != len(self.data):
            raise ValueError('Class counts do not match the shard size.')

    @property
    def n(self):
        return len(self.data)

    @property
    def num_classes(self):
        return len(self.class_counts)


def make_shard(client_id, data, num_classes):
    return ClientShard(client_id, data, tuple(data.class_counts(num_classes)))


def class_means(spec):
    """Blob centres: scaled basis vectors when there is room, else a circle with adjacent spacing = separation."""
    means = np.zeros((spec.num_classes, spec.input_dim))
    if spec.input_dim >= spec.num_classes:
        means[np.arange(spec.num_classes), np.arange(spec.num_classes)] = spec.class_separation
    elif spec.input_dim >= 2:
        radius = spec.class_separation / (2 * math.sin(math.pi / spec.num_classes))
        angles = 2 * math.pi * np.arange(spec.num_classes) / spec.num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    else:
        means[:, 0] = spec.class_separation * np.arange(spec.num_classes)
    return means


def _sample_class(spec, label, rng):
    n, dim = spec.samples_per_class, spec.input_dim
    noise = spec.noise_scale * rng.standard_normal((n, dim))
    if spec.generator == 'gaussian_blobs':
        return class_means(spec)[label] + noise
    angles = rng.uniform(0, 2 * math.pi, n)
    radius = (label + 1) * spec.class_separation
    points = noise
    points[:, 0] += radius * np.cos(angles)
    points[:, 1] += radius * np.sin(angles)
    return points


def synthesize(spec):
    rng = np.random.default_rng(spec.seed)
    n_test = max(1, spec.samples_per_class * TEST_PERCENT // 100)
    splits = {'train': ([], []), 'test': ([], [])}
    for label in range(spec.num_classes):
        points = _sample_class(spec, label, rng)
        for name, rows in [('test', points[:n_test]), ('train', points[n_test:])]:
            splits[name][0].append(rows)
            splits[name][1].append(np.full(len(rows), label))
    batches = []
    for name in ['train', 'test']:
        inputs, labels = (np.concatenate(parts) for parts in splits[name])
        order = rng.permutation(len(labels))
        batches.append(LabeledBatch.from_arrays(inputs[order], labels[order]))
    return tuple(batches)


def assign_classes(num_classes, spec, rng):
    """Seeded round-robin: client i takes k consecutive classes of a shuffled class order, starting at i*k."""
    k = spec.classes_per_client
    order = rng.permutation(num_classes)
    return [[int(order[(i * k + j) % num_classes]) for j in range(k)] for i in range(spec.num_clients)]


def partition_noniid(train, spec, num_classes=None):
    if num_classes is None:
        num_classes = int(train.labels.max()) + 1
    k = spec.classes_per_client
    if k > num_classes:
        raise ValueError('Clients cannot hold more classes than exist.')

    rng = np.random.default_rng(spec.seed)
    assignments = assign_classes(num_classes, spec, rng)
    labels = train.labels.numpy()
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    holders = np.bincount([c for classes in assignments for c in classes], minlength=num_classes)

    held = holders > 0
    max_target = k * int(min(len(pools[c]) // holders[c] for c in range(num_classes) if held[c]))
    target = min(spec.samples_per_client, max_target)
    if target < k:
        raise ValueError(f'Not enough samples to give {spec.num_clients} clients one sample of each of {k} classes.')
    if target < spec.samples_per_client:
        logger.info('Reduced per-client sample target from %d to %d.', spec.samples_per_client, target)

    cursors = [0] * num_classes
    shards = []
    for client_id, classes in enumerate(assignments):
        indices = []
        for j, c in enumerate(classes):
            quota = target // k + (1 if j < target % k else 0)
            indices.append(pools[c][cursors[c]:cursors[c] + quota])
            cursors[c] += quota
        indices = rng.permutation(np.concatenate(indices))
        shards.append(make_shard(client_id, train.take(indices), num_classes))
    return shards


def coverage_stats(shard, num_classes):
    counts = np.asarray(shard.class_counts[:num_classes])
    missing = {int(c) for c in np.flatnonzero(counts == 0)}
    nonzero = counts[counts > 0]
    if not len(nonzero):
        return missing, set()
    median = np.median(nonzero)
    underrepresented = {int(c) for c in np.flatnonzero((counts > 0) & (counts < median))}
    return missing, underrepresented


def export_shards(shards, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        dim = shards[0].data.input_dim if shards else 0
        writer.writerow(['client_id', 'label'] + [f'x{j}' for j in range(dim)])
        for shard in shards:
            for features, label in zip(shard.data.inputs.tolist(), shard.data.labels.tolist()):
                writer.writerow([shard.client_id, label] + features)
