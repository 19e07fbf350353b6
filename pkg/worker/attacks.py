import math
import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from common.settings import LATENT_GRADS
from . import models
from .data import ClientShard, coverage_stats
from .flcore import benign_local_update


GRAD_MODES = LATENT_GRADS
FD_REL_STEP = 1e-4
DECODER_SPREAD = 0.5


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Budgets:
    delta: float = 0.02
    eps: float = 0.5
    kappa: float = math.inf
    c_max: int = None

    def __post_init__(self):
        if not (self.delta >= 0 and self.eps >= 0 and self.kappa > 0):
            raise ValueError('Budgets must be non-negative and kappa positive.')


@dataclass(frozen=True)
class LatentHyper:
    latent_dim: int = 8
    latent_steps: int = 5
    synthetic_batch: int = 16
    eta_z: float = 1e-2
    intensity: float = 1.0
    grad_mode: str = 'fd'

    def __post_init__(self):
        if self.latent_dim < 1 or self.latent_steps < 0 or self.synthetic_batch < 0:
            raise ValueError('Latent dimension must be positive, step and batch counts non-negative.')
        if not (self.eta_z >= 0 and self.intensity >= 0):
            raise ValueError('Latent stepsize and intensity must be non-negative.')
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f'Unknown latent gradient mode: {self.grad_mode}.')

    @property
    def b_s(self):
        """Synthetic batch size after scaling by attack intensity."""
        return int(round(self.intensity * self.synthetic_batch))


@dataclass(frozen=True, eq=False)
class Decoder:
    weight: torch.Tensor
    prototypes: torch.Tensor
    scale: float

    @property
    def latent_dim(self):
        return self.weight.shape[1]

    @property
    def input_dim(self):
        return self.weight.shape[0]

    @property
    def num_classes(self):
        return self.prototypes.shape[0]


@dataclass(frozen=True, eq=False)
class AttackState:
    budgets: Budgets
    hyper: LatentHyper
    z: torch.Tensor = None
    labels: torch.Tensor = None
    cached_round: int = 0
    cached_w: torch.Tensor = None
    trace: tuple = ()
    stalled_at: int = None

    def __post_init__(self):
        if self.z is not None:
            if self.z.dim() != 2 or self.z.shape[0] != self.hyper.b_s:
                raise ValueError('Latent matrix must have one row per synthetic sample.')
            if not bool(torch.isfinite(self.z).all()):
                raise ValueError('Latent matrix contains non-finite values.')


@dataclass(frozen=True)
class JointLossBreakdown:
    l1: float
    l2: float
    l3: float

    @property
    def total(self):
        return self.l1 + self.l2 + self.l3


def norm(v):
    return torch.linalg.vector_norm(v)


def flip_labels(shard):
    num_classes = shard.num_classes
    data = models.LabeledBatch(shard.data.inputs, (shard.data.labels + 1) % num_classes)
    return ClientShard(shard.client_id, data, tuple(np.roll(shard.class_counts, 1).tolist()))


def behavior_label_flip(spec, w_t, shard, hp, rng):
    return benign_local_update(spec, w_t, flip_labels(shard), hp, rng)


def behavior_random_noise(spec, w_t, shard, hp, rng, sigma_rel):
    if sigma_rel < 0:
        raise ValueError('Noise scale must be non-negative.')
    update = benign_local_update(spec, w_t, shard, hp, rng)
    if sigma_rel == 0:
        return update
    std = sigma_rel * norm(update).item() / math.sqrt(update.numel())
    noise = torch.tensor(rng.standard_normal(update.numel()), dtype=update.dtype)
    return update + std * noise


def behavior_free_rider(w_t, history, rng=None):
    if history.previous is None:
        return torch.zeros_like(w_t)
    return w_t - history.previous


def behavior_direct_ref(spec, w_t, history, shard, hp, rng):
    update = benign_local_update(spec, w_t, shard, hp, rng)
    if history.previous is None:
        return update
    reference = w_t - history.previous
    reference_norm = norm(reference)
    if reference_norm == 0:
        return update
    return norm(update) * reference / reference_norm


def calibrate_decoder(pool, latent_dim, seed, num_classes=None):
    if num_classes is None:
        num_classes = int(pool.labels.max()) + 1
    counts = pool.class_counts(num_classes)
    if min(counts) == 0:
        missing = [c for c, count in enumerate(counts) if count == 0]
        raise ValueError(f'Calibration pool lacks classes {missing}.')
    prototypes = torch.stack([pool.inputs[pool.labels == c].mean(dim=0) for c in range(num_classes)])

    rng = np.random.default_rng(seed)
    weight = torch.tensor(rng.standard_normal((pool.input_dim, latent_dim)), dtype=models.DTYPE)
    # E||W z||^2 = ||W||_F^2 for z ~ N(0, I)
    spread = torch.pdist(prototypes).mean().item()
    scale = DECODER_SPREAD * spread / torch.linalg.matrix_norm(weight).item()
    return Decoder(weight * scale, prototypes, scale)


def decode_inputs(decoder, z, labels):
    if z.shape[0] != labels.shape[0]:
        raise ValueError('Latent rows and labels differ in count.')
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= decoder.num_classes):
        raise ValueError(f'Labels must lie in [0, {decoder.num_classes}).')
    return decoder.prototypes[labels] + z @ decoder.weight.T


def decode(decoder, z, labels):
    return models.LabeledBatch(decode_inputs(decoder, z, labels), labels)


def select_targets(shard, num_classes, b_s, rng):
    if b_s < 1:
        raise ValueError('At least one synthetic sample is required.')
    missing, underrepresented = coverage_stats(shard, num_classes)
    candidates = sorted(missing | underrepresented) or list(range(num_classes))
    return torch.as_tensor(rng.choice(candidates, size=b_s), dtype=torch.int64)


def _joint_terms(spec, w_t, decoder, z, labels, g_ref, create_graph=False):
    params = w_t.detach().clone().requires_grad_(True)
    inputs = decode_inputs(decoder, z, labels)
    l3 = models.task_loss(spec, params, inputs, labels)
    (g,) = torch.autograd.grad(l3, params, create_graph=create_graph)
    g_norm, ref_norm = norm(g), norm(g_ref)
    if g_norm == 0 or ref_norm == 0:
        # orthogonal convention for a degenerate direction
        return torch.ones((), dtype=g.dtype), g_norm, l3
    l1 = 1 - torch.dot(g, g_ref) / (g_norm * ref_norm)
    l2 = torch.abs(g_norm - ref_norm)
    return l1, l2, l3


def joint_loss(spec, w_t, decoder, z, labels, g_ref):
    l1, l2, l3 = _joint_terms(spec, w_t, decoder, z.detach(), labels, g_ref)
    return JointLossBreakdown(l1.item(), l2.item(), l3.item())


def latent_gradient(spec, w_t, decoder, z, labels, g_ref, mode='fd', rel_step=FD_REL_STEP):
    if mode == 'autograd':
        z = z.detach().clone().requires_grad_(True)
        total = sum(_joint_terms(spec, w_t, decoder, z, labels, g_ref, create_graph=True))
        (grad,) = torch.autograd.grad(total, z)
        return grad
    if mode != 'fd':
        raise ValueError(f'Unknown latent gradient mode: {mode}.')

    def total(point):
        return joint_loss(spec, w_t, decoder, point, labels, g_ref).total

    z = z.detach()
    grad = torch.zeros_like(z)
    for index in np.ndindex(*z.shape):
        step = rel_step * (1 + abs(z[index].item()))
        forward, backward = z.clone(), z.clone()
        forward[index] += step
        backward[index] -= step
        grad[index] = (total(forward) - total(backward)) / (2 * step)
    return grad


def refine_latent(state, spec, w_t, decoder, labels, g_ref, select=None):
    """
    Run latent_steps descent steps on the joint loss with respect to z.

    select, when given, draws fresh target labels before every step; otherwise labels stay fixed.
    The returned state carries the loss trace and the first step whose loss did not improve.
    """
    hyper = state.hyper
    z = state.z
    trace = []
    stalled_at = None
    for step in range(1, hyper.latent_steps + 1):
        if select is not None:
            labels = select()
        before = joint_loss(spec, w_t, decoder, z, labels, g_ref)
        if hyper.eta_z:
            z = z - hyper.eta_z * latent_gradient(spec, w_t, decoder, z, labels, g_ref, hyper.grad_mode)
        after = joint_loss(spec, w_t, decoder, z, labels, g_ref)
        trace.append(after)
        if stalled_at is None and not after.total < before.total:
            stalled_at = step
        if step == 1 or step == hyper.latent_steps:
            logger.debug('Latent step %d/%d: l1 %.3e, l2 %.3e, l3 %.3e.', step, hyper.latent_steps, after.l1,
                after.l2, after.l3)
    return replace(state, z=z, labels=labels, trace=tuple(trace), stalled_at=stalled_at)


def effective_alpha(shard_size, b_s):
    if shard_size < 1:
        raise ValueError('Shard must hold at least one sample.')
    return b_s / (shard_size + b_s)


def clip_to_norm(update, kappa):
    update_norm = norm(update).item()
    if update_norm > kappa:
        return update * (kappa / update_norm), True
    return update, False


def behavior_latent_opt(state, spec, w_t, history, shard, hp, decoder, rng):
    """One round of the latent-optimization client; returns (update, new state, diagnostics)."""
    hyper, budgets = state.hyper, state.budgets
    b_s = hyper.b_s
    t = history.t
    if b_s == 0:
        update = benign_local_update(spec, w_t, shard, hp, rng)
        return update, state, {'t': t, 'b_s': 0, 'effective_alpha': 0.0}

    latent_rng, label_rng = rng.spawn(2)
    train_seed = int(rng.integers(2 ** 63))

    # warm start
    z = state.z
    if t == 1 or state.cached_round == 0 or z is None:
        z = torch.tensor(latent_rng.standard_normal((b_s, decoder.latent_dim)), dtype=models.DTYPE)
    state = replace(state, z=z, trace=(), stalled_at=None)

    # a descent step moves the weights against the gradient, so the global step w_t - w_{t-1}
    # corresponds to the gradient direction w_{t-1} - w_t
    g_ref = history.previous - w_t if history.previous is not None else torch.zeros_like(w_t)

    def select():
        return select_targets(shard, decoder.num_classes, b_s, label_rng)

    labels = select()
    if norm(g_ref) > 0:
        state = refine_latent(state, spec, w_t, decoder, labels, g_ref, select)
        labels = state.labels
    else:
        state = replace(state, labels=labels)
    losses = joint_loss(spec, w_t, decoder, state.z, labels, g_ref)

    # hybrid local training
    synthetic = decode(decoder, state.z.detach(), labels)
    hybrid = shard.data.concat(synthetic)
    real_update = benign_local_update(spec, w_t, shard, hp, train_seed)
    if hp.eta_w == 0:
        update = torch.zeros_like(w_t)
    else:
        update = models.sgd_train(spec, w_t, hybrid, hp.epochs, hp.batch_size, hp.eta_w, train_seed) - w_t

    # feasibility
    c_max = budgets.c_max if budgets.c_max is not None else spec.num_params
    reverted = update.numel() > c_max or not bool(torch.isfinite(update).all())
    if reverted:
        logger.warning('Round %d: hybrid update infeasible, reverting to benign update.', t)
        update = real_update
    update, clipped = clip_to_norm(update, budgets.kappa)

    residual = update - real_update
    real_norm, update_norm = norm(real_update).item(), norm(update).item()
    cosine = torch.dot(update, real_update).item() / (update_norm * real_norm) if update_norm * real_norm else 0.0
    diagnostics = {
        't': t,
        'b_s': b_s,
        'l1': losses.l1,
        'l2': losses.l2,
        'l3': losses.l3,
        'total': losses.total,
        'stalled_at': state.stalled_at,
        'effective_alpha': effective_alpha(shard.n, b_s),
        'update_norm': update_norm,
        'real_norm': real_norm,
        'synthetic_residual_norm': norm(residual).item(),
        'cosine_to_real': cosine,
        'clipped': clipped,
        'reverted': reverted,
    }

    # report & cache
    state = replace(state, cached_round=t, cached_w=w_t)
    return update, state, diagnostics


class LabelFlipBehavior:
    def __init__(self, spec, hp):
        self.spec = spec
        self.hp = hp

    def __call__(self, w_t, history, shard, rng):
        return behavior_label_flip(self.spec, w_t, shard, self.hp, rng)


class RandomNoiseBehavior:
    def __init__(self, spec, hp, sigma_rel):
        self.spec = spec
        self.hp = hp
        self.sigma_rel = sigma_rel

    def __call__(self, w_t, history, shard, rng):
        return behavior_random_noise(self.spec, w_t, shard, self.hp, rng, self.sigma_rel)


class FreeRiderBehavior:
    def __call__(self, w_t, history, shard, rng):
        return behavior_free_rider(w_t, history, rng)


class DirectRefBehavior:
    def __init__(self, spec, hp):
        self.spec = spec
        self.hp = hp

    def __call__(self, w_t, history, shard, rng):
        return behavior_direct_ref(self.spec, w_t, history, shard, self.hp, rng)


class LatentOptBehavior:
    """Stateful client lifeline for the latent-optimization attack; state resets whenever a run starts over."""

    def __init__(self, spec, hp, decoder, hyper, budgets):
        self.spec = spec
        self.hp = hp
        self.decoder = decoder
        self.hyper = hyper
        self.budgets = budgets
        self.state = AttackState(budgets, hyper)
        self.diagnostics = []

    def __call__(self, w_t, history, shard, rng):
        if history.t == 1:
            self.state = AttackState(self.budgets, self.hyper)
            self.diagnostics = []
        update, self.state, diagnostics = behavior_latent_opt(self.state, self.spec, w_t, history, shard, self.hp,
            self.decoder, rng)
        self.diagnostics.append(diagnostics)
        return update
