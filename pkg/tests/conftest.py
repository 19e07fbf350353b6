import numpy as np
import pytest
import torch

from common.settings import ExperimentConfig
from worker import data, flcore, models


TINY = {
    'num_classes': 4,
    'input_dim': 4,
    'samples_per_class': 60,
    'num_clients': 4,
    'classes_per_client': 2,
    'samples_per_client': 40,
    'rounds': 3,
    'local_epochs': 1,
    'batch_size': 16,
    'latent_dim': 3,
    'latent_steps': 2,
    'synthetic_batch': 4,
}


@pytest.fixture
def tiny_config():
    return ExperimentConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec():
    return models.ModelSpec('logistic', 4, 3)


@pytest.fixture
def mlp_spec():
    return models.ModelSpec('mlp1', 4, 3, hidden_dim=5)


@pytest.fixture
def dataset():
    return data.synthesize(data.DatasetSpec('gaussian_blobs', 3, 4, 50, 3.0, 1.0, seed=7))


@pytest.fixture
def shards(dataset):
    train, _ = dataset
    return data.partition_noniid(train, data.PartitionSpec(3, 2, 30, seed=3), 3)


@pytest.fixture
def hp():
    return flcore.LocalHyper(epochs=1, batch_size=8, eta_w=0.1)


@pytest.fixture
def training(spec, dataset, shards, hp):
    _, test = dataset
    clients = tuple(flcore.Client(s.client_id, s, flcore.BenignBehavior(spec, hp)) for s in shards)
    return flcore.TrainingConfig(spec, clients, 3, test, seed=11)


@pytest.fixture
def params(spec, rng):
    return torch.tensor(rng.standard_normal(spec.num_params), dtype=models.DTYPE)
