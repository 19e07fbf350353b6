"""
Brute-force reference implementations.

These recompute Shapley values, gradients and leave-one-out scores along arithmetic paths that share nothing
with the evaluators and models they check: plain Python/numpy only, no torch, no caching.
"""
import math
import itertools

import numpy as np


MAX_BRUTEFORCE_PLAYERS = 8


def shapley_bruteforce(values, num_players):
    """Average marginal contribution over all orderings; values is indexed by coalition bitmask."""
    if num_players > MAX_BRUTEFORCE_PLAYERS:
        raise ValueError(f'Brute-force Shapley values are limited to {MAX_BRUTEFORCE_PLAYERS} players.')
    if len(values) != 2 ** num_players:
        raise ValueError('Value table does not match the number of players.')
    totals = [0.0] * num_players
    count = 0
    for ordering in itertools.permutations(range(num_players)):
        coalition = 0
        for player in ordering:
            joined = coalition | (1 << player)
            totals[player] += values[joined] - values[coalition]
            coalition = joined
        count += 1
    return [total / count for total in totals]


def fd_gradient(f, x, step=1e-6):
    if not step > 0:
        raise ValueError('Step must be positive.')
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        original = x[index]
        x[index] = original + step
        upper = f(x)
        x[index] = original - step
        lower = f(x)
        x[index] = original
        grad[index] = (upper - lower) / (2 * step)
    return grad


def _split(spec, params):
    sizes = []
    dims = [spec.input_dim] + ([spec.hidden_dim] if spec.kind == 'mlp1' else []) + [spec.num_classes]
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        sizes.append((fan_out, fan_in))
    layers = []
    offset = 0
    for fan_out, fan_in in sizes:
        weight = params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        bias = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    if offset != len(params):
        raise ValueError('Parameter vector does not match the model.')
    return layers


def numpy_logits(spec, params, inputs):
    activations = np.asarray(inputs, dtype=np.float64)
    layers = _split(spec, np.asarray(params, dtype=np.float64))
    for depth, (weight, bias) in enumerate(layers):
        activations = activations @ weight.T + bias
        if depth < len(layers) - 1:
            activations = np.tanh(activations)
    return activations


def numpy_cross_entropy(spec, params, inputs, labels):
    z = numpy_logits(spec, params, inputs)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -float(np.mean(log_probs[np.arange(len(labels)), labels]))


def numpy_accuracy(spec, params, inputs, labels):
    predictions = np.argmax(numpy_logits(spec, params, inputs), axis=1)
    return float(np.mean(predictions == np.asarray(labels)))


def loo_bruteforce(log, spec, test):
    """Round-aggregated LOO recomputed from the raw round records."""
    inputs = test.inputs.numpy()
    labels = test.labels.numpy()
    totals = None
    for record in log.rounds:
        base = record.w_t.numpy()
        updates = [u.numpy() for u in record.updates]
        counts = [float(c) for c in record.n]
        if totals is None:
            totals = [0.0] * len(updates)

        def value(players):
            weight = math.fsum(counts[i] for i in players)
            step = sum(updates[i] * (counts[i] / weight) for i in players)
            return numpy_accuracy(spec, base + step, inputs, labels)

        everyone = list(range(len(updates)))
        full = value(everyone)
        for i in everyone:
            rest = [j for j in everyone if j != i]
            totals[i] += full - (value(rest) if rest else numpy_accuracy(spec, base, inputs, labels))
    return totals
