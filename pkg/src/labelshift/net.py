"""A tiny per-pixel MLP with hand-written backpropagation.

The network ``G = C o F`` is a stack of affine layers with ``tanh`` between
consecutive layers. Layers ``0 .. split_index - 1`` form the feature
extractor ``F``; the rest form the classifier head ``C``. Inputs are maps of
shape ``(..., d)`` and every pixel is processed independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, check_logits, log_softmax, softmax


class PixelNet:
    """Affine layers ``x @ W + b`` with ``tanh`` between them."""

    def __init__(self, weights, biases, split_index: int):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input dim does not match layer {i - 1}")
        if not 0 <= split_index <= len(self.weights):
            raise ValueError(f"split_index {split_index} out of range")
        self.split_index = split_index

    @classmethod
    def init(cls, dims, split_index: int, rng: np.random.Generator) -> "PixelNet":
        """Uniform ``+-1/sqrt(fan_in)`` initialisation."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, split_index)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.dims[self.split_index]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def classifier_param_mask(self) -> list[bool]:
        """True for parameters of the head ``C`` (layers at/above the split)."""
        return [i >= self.split_index for i in range(self.num_layers) for _ in (0, 1)]

    def copy(self) -> "PixelNet":
        return type(self)([w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.split_index)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dims={self.dims}, split_index={self.split_index})"


@dataclass
class GradientSet:
    """Gradients aligned with :meth:`PixelNet.params` order.

    ``input`` holds the gradient with respect to the network input when it
    was requested.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def zeros_like(cls, net: PixelNet) -> "GradientSet":
        return cls([np.zeros_like(w) for w in net.weights],
                   [np.zeros_like(b) for b in net.biases])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])


@dataclass
class Trace:
    """Activations recorded by :func:`forward_trace`; reused by :func:`backward`."""

    inputs: list[np.ndarray]     # input to each layer, flattened to (N, fan_in)
    shape: tuple                 # leading (spatial) shape of the original input


def forward_trace(net: PixelNet, features: np.ndarray) -> tuple[Trace, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != net.dims[0]:
        raise ValueError(f"input dim {x.shape[-1]} != network input dim {net.dims[0]}")
    lead = x.shape[:-1]
    a = x.reshape(-1, x.shape[-1])
    inputs = []
    last = net.num_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        a = a @ w + b
        if i < last:
            a = np.tanh(a)
    return Trace(inputs, lead), a


def forward(net: PixelNet, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(F(x), C(F(x)))`` with the input's spatial shape preserved."""
    trace, out = forward_trace(net, features)
    hidden = (trace.inputs[net.split_index] if net.split_index < net.num_layers
              else out)
    return (hidden.reshape(trace.shape + (hidden.shape[-1],)),
            out.reshape(trace.shape + (out.shape[-1],)))


def backward(net: PixelNet, features: np.ndarray, d_logits: np.ndarray | None,
             d_hidden: np.ndarray | None = None, trace: Trace | None = None,
             input_grad: bool = False) -> GradientSet:
    """Reverse-mode gradients of a scalar loss.

    ``d_logits`` is the loss gradient at the network output and
    ``d_hidden`` an extra gradient injected at the F/C split (e.g. from a
    discriminator through a gradient reversal layer). Either may be None.
    """
    if trace is None:
        trace, _ = forward_trace(net, features)
    n = trace.inputs[0].shape[0]
    last = net.num_layers - 1
    if d_logits is None:
        g = np.zeros((n, net.dims[-1]))
    else:
        g = check_logits(d_logits).reshape(n, net.dims[-1])
    inject = None
    if d_hidden is not None:
        inject = np.asarray(d_hidden, dtype=np.float64).reshape(n, net.feature_dim)

    dws = [None] * net.num_layers
    dbs = [None] * net.num_layers
    # g: gradient w.r.t. the output of layer i, i.e. trace.inputs[i + 1]
    for i in range(last, -1, -1):
        if inject is not None and i + 1 == net.split_index:
            g = g + inject
        if i < last:
            g = g * (1.0 - trace.inputs[i + 1] ** 2)
        dws[i] = trace.inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    if inject is not None and net.split_index == 0:
        g = g + inject
    grads = GradientSet(dws, dbs)
    if input_grad:
        grads.input = g.reshape(trace.shape + (net.dims[0],))
    return grads


def ce_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pixel cross-entropy over non-IGNORE pixels and its logit gradient."""
    z = check_logits(logits)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} disagree")
    mask = y != IGNORE
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no scored pixels")
    k = z.shape[-1]
    idx = np.where(mask, y, 0).astype(np.intp)
    logp = log_softmax(z)
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    loss = -float(picked[mask].sum()) / n
    grad = softmax(z)
    grad[..., :] -= np.eye(k)[idx]
    grad[~mask] = 0.0
    return loss, grad / n


def grl_transform(grad_at_feature: np.ndarray, lambda_adv: float) -> np.ndarray:
    """Backward pass of a gradient reversal layer (its forward is identity)."""
    return -lambda_adv * np.asarray(grad_at_feature, dtype=np.float64)


@dataclass
class OptimizerState:
    """SGD with momentum, weight decay and polynomial learning-rate decay."""

    buffers: list[np.ndarray]
    max_iters: int
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    iter: int = 0
    trainable: list[bool] | None = field(default=None)

    @classmethod
    def for_net(cls, net: PixelNet, max_iters: int, **kw) -> "OptimizerState":
        if max_iters < 1:
            raise ValueError("max_iters must be positive")
        return cls([np.zeros_like(p) for p in net.params()], max_iters, **kw)

    def lr(self) -> float:
        return self.base_lr * (1.0 - self.iter / self.max_iters) ** self.poly_power


def sgd_step(net: PixelNet, grads: GradientSet, opt: OptimizerState) -> float:
    """Update ``net`` and ``opt`` in place; returns the learning rate used.

    Parameters whose ``opt.trainable`` flag is False are left bit-identical.
    """
    if opt.iter >= opt.max_iters:
        raise RuntimeError(f"optimizer exhausted after {opt.max_iters} iterations")
    params = net.params()
    gs = grads.params()
    if len(gs) != len(params):
        raise ValueError("gradient set does not match the network")
    lr = opt.lr()
    for j, (p, g, buf) in enumerate(zip(params, gs, opt.buffers)):
        if opt.trainable is not None and not opt.trainable[j]:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        buf *= opt.momentum
        buf += g
        if opt.weight_decay:
            buf += opt.weight_decay * p
        p -= lr * buf
    opt.iter += 1
    return lr


def predict_proba(net: PixelNet, features: np.ndarray) -> np.ndarray:
    return softmax(forward(net, features)[1])
