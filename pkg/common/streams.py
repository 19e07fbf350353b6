"""
Seed-stream derivation.

Every random draw in a run comes from a stream keyed by (master seed, role, client id, round). Streams are
independent numpy SeedSequence children, so adding clients or rounds never perturbs the draws of existing ones,
and benign clients see identical streams in the attack-free and attacked phases.
"""
import numpy as np


ROLES = {
    'data': 0,
    'partition': 1,
    'init': 2,
    'client': 3,
    'attack': 4,
    'decoder': 5,
    'evaluator': 6,
    'pool': 7,
}
MAX_SEED = 2 ** 64 - 1


def seed_sequence(master, role, client_id=0, round=0):
    if role not in ROLES:
        raise ValueError(f'Unknown stream role: {role}.')
    if not 0 <= master <= MAX_SEED:
        raise ValueError('Master seed must be an unsigned 64-bit integer.')
    if client_id < 0 or round < 0:
        raise ValueError('Client id and round must be non-negative.')
    return np.random.SeedSequence(entropy=master, spawn_key=(ROLES[role], client_id, round))


def stream(master, role, client_id=0, round=0):
    return np.random.default_rng(seed_sequence(master, role, client_id, round))


def int_seed(master, role, client_id=0, round=0):
    return int(seed_sequence(master, role, client_id, round).generate_state(1, np.uint64)[0])
