import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


DTYPE = torch.float64
KINDS = ('logistic', 'mlp1')
ACTIVATIONS = {'tanh': torch.tanh}

# a ParamVector is a flat float64 tensor whose layout is fixed by the ModelSpec
ParamVector = torch.Tensor


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = 'tanh'

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f'Unknown model kind: {self.kind}.')
        if self.input_dim < 1:
            raise ValueError('Input dimension must be positive.')
        if self.num_classes < 2:
            raise ValueError('At least two classes are required.')
        if self.kind == 'logistic' and self.hidden_dim != 0:
            raise ValueError('Logistic models have no hidden layer.')
        if self.kind == 'mlp1' and self.hidden_dim < 1:
            raise ValueError('MLP models require a positive hidden dimension.')
        if self.activation not in ACTIVATIONS:
            raise ValueError(f'Unsupported activation: {self.activation}.')

    @property
    def layers(self):
        """(fan_in, fan_out) of each affine layer."""
        if self.kind == 'logistic':
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    @property
    def shapes(self):
        shapes = []
        for fan_in, fan_out in self.layers:
            shapes += [(fan_out, fan_in), (fan_out,)]
        return shapes

    @property
    def num_params(self):
        return sum(math.prod(shape) for shape in self.shapes)


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.inputs.dim() != 2:
            raise ValueError('Inputs must be a matrix.')
        if self.labels.dim() != 1 or self.labels.dtype != torch.int64:
            raise ValueError('Labels must be a vector of class indices.')
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError('Input rows and labels differ in count.')
        if not bool(torch.isfinite(self.inputs).all()):
            raise ValueError('Inputs contain non-finite values.')

    @classmethod
    def from_arrays(cls, inputs, labels):
        return cls(torch.as_tensor(np.asarray(inputs, dtype=np.float64)),
            torch.as_tensor(np.asarray(labels, dtype=np.int64)))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def take(self, index):
        index = torch.as_tensor(index, dtype=torch.int64)
        return LabeledBatch(self.inputs[index], self.labels[index])

    def concat(self, other):
        return LabeledBatch(torch.cat([self.inputs, other.inputs]), torch.cat([self.labels, other.labels]))

    def class_counts(self, num_classes):
        return torch.bincount(self.labels, minlength=num_classes).tolist()


def check_params(spec, params):
    if params.dim() != 1 or params.shape[0] != spec.num_params:
        raise ValueError(f'Expected {spec.num_params} parameters, got {tuple(params.shape)}.')


def unflatten(spec, params):
    check_params(spec, params)
    tensors = []
    offset = 0
    for shape in spec.shapes:
        size = math.prod(shape)
        tensors.append(params[offset:offset + size].view(shape))
        offset += size
    return tensors


def init_params(spec, seed):
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layers:
        chunks.append(rng.standard_normal((fan_out, fan_in)).ravel() / math.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    return torch.tensor(np.concatenate(chunks), dtype=DTYPE)


def logits(spec, params, inputs):
    if inputs.dim() != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(f'Expected inputs with {spec.input_dim} columns, got {tuple(inputs.shape)}.')
    tensors = unflatten(spec, params)
    if spec.kind == 'logistic':
        weight, bias = tensors
        return inputs @ weight.T + bias
    weight1, bias1, weight2, bias2 = tensors
    hidden = ACTIVATIONS[spec.activation](inputs @ weight1.T + bias1)
    return hidden @ weight2.T + bias2


def check_labels(spec, labels):
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= spec.num_classes):
        raise ValueError(f'Labels must lie in [0, {spec.num_classes}).')


def task_loss(spec, params, inputs, labels):
    """Differentiable mean cross-entropy; params and inputs may both carry autograd history."""
    check_labels(spec, labels)
    return F.cross_entropy(logits(spec, params, inputs), labels)


def forward(spec, params, batch):
    return torch.softmax(logits(spec, params, batch.inputs), dim=1)


def loss_and_grad(spec, params, batch):
    if not len(batch):
        raise ValueError('Batch is empty.')
    params = params.detach().clone().requires_grad_(True)
    loss = task_loss(spec, params, batch.inputs, batch.labels)
    (grad,) = torch.autograd.grad(loss, params)
    return loss.item(), grad


def accuracy(spec, params, batch):
    if not len(batch):
        raise ValueError('Batch is empty.')
    with torch.no_grad():
        # argmax returns the first maximal index, so ties go to the lowest class
        predictions = torch.argmax(logits(spec, params, batch.inputs), dim=1)
    return (predictions == batch.labels).sum().item() / len(batch)


def sgd_train(spec, params, data, epochs, batch_size, eta_w, seed):
    if epochs < 1:
        raise ValueError('At least one epoch is required.')
    if batch_size < 1:
        raise ValueError('Batch size must be positive.')
    if not eta_w > 0:
        raise ValueError('Learning rate must be positive.')
    if not len(data):
        raise ValueError('Training data is empty.')

    rng = np.random.default_rng(seed)
    n = len(data)
    params = params.detach().clone()
    for _ in range(epochs):
        if batch_size >= n:
            batches = [data]
        else:
            order = rng.permutation(n)
            batches = [data.take(order[start:start + batch_size]) for start in range(0, n, batch_size)]
        for batch in batches:
            _, grad = loss_and_grad(spec, params, batch)
            params = params - eta_w * grad
    return params
