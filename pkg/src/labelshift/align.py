"""Class-conditional adversarial feature alignment.

A discriminator over ``2K`` joint (domain, class) outcomes sees the
feature map ``F(x)``. Output index ``d * K + y`` scores domain ``d``
(0 source, 1 target) and class ``y``. The discriminator learns to name
both; the feature extractor learns to make target pixels of class ``k``
look like source pixels of class ``k``.

Class knowledge is the ground-truth one-hot for source pixels and the
network's current (detached) softmax for target pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .core import IGNORE, log_softmax, softmax
from .net import (GradientSet, OptimizerState, PixelNet, backward, ce_loss_and_grad,
                  forward_trace, grl_transform, sgd_step)
from .synth import DomainDataset, spawn

SOURCE, TARGET = 0, 1


class Discriminator(PixelNet):
    """Affine/tanh stack from feature dim ``h`` to ``2K`` joint scores."""

    def __init__(self, weights, biases, split_index: int = 0):
        super().__init__(weights, biases, 0)
        if self.dims[-1] % 2:
            raise ValueError("discriminator output must have even size 2K")

    @classmethod
    def create(cls, feature_dim: int, num_classes: int, rng: np.random.Generator,
               hidden: int = 32) -> "Discriminator":
        return cls.init([feature_dim, hidden, 2 * num_classes], 0, rng)

    @property
    def num_classes(self) -> int:
        return self.dims[-1] // 2


@dataclass(frozen=True)
class AlignConfig:
    lambda_adv: float = 0.1
    iterations: int = 2000
    disc_lr: float = 1e-3
    net_lr: float = 2.5e-4
    # "direct": F descends lambda * L_adv; "grl": F ascends lambda * L_D via reversal
    mode: str = "direct"

    def __post_init__(self):
        for name in ("lambda_adv", "disc_lr", "net_lr"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.mode not in ("direct", "grl"):
            raise ValueError(f"unknown adversarial mode {self.mode!r}")


def class_knowledge_source(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot ground truth; IGNORE pixels get an all-zero row."""
    y = np.asarray(labels)
    a = np.zeros(y.shape + (num_classes,))
    mask = y != IGNORE
    a[mask, y[mask].astype(np.intp)] = 1.0
    return a


def class_knowledge_target(probs: np.ndarray) -> np.ndarray:
    return np.array(probs, dtype=np.float64)


def conditional_domain_nll(d_logits: np.ndarray, a: np.ndarray,
                           domain: int) -> tuple[float, np.ndarray]:
    """``-mean_i sum_k a_ik log D(d=domain, y=k | .)`` and its logit gradient.

    The mean runs over pixels whose class knowledge is non-zero.
    """
    z = np.asarray(d_logits, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    k = a.shape[-1]
    if z.shape[-1] != 2 * k or z.shape[:-1] != a.shape[:-1]:
        raise ValueError(f"discriminator output {z.shape} does not match knowledge {a.shape}")
    weight = a.sum(axis=-1)
    n = int(np.count_nonzero(weight))
    if n == 0:
        return 0.0, np.zeros_like(z)
    logp = log_softmax(z)[..., domain * k:(domain + 1) * k]
    loss = -float((a * logp).sum()) / n
    # d/dz of -sum_k a_k log softmax(z)_{domain,k} = (sum_k a_k) softmax(z) - a (on its block)
    grad = weight[..., None] * softmax(z)
    grad[..., domain * k:(domain + 1) * k] -= a
    return loss, grad / n


def loss_discriminator(disc: Discriminator, feat_src: np.ndarray, a_src: np.ndarray,
                       feat_tgt: np.ndarray, a_tgt: np.ndarray) -> tuple[float, GradientSet]:
    """Discriminator loss and its gradient w.r.t. discriminator parameters only.

    The source and target terms are each averaged over their own scored
    pixels and then summed. Features are treated as constants.
    """
    loss = 0.0
    total = GradientSet.zeros_like(disc)
    for feats, a, dom in ((feat_src, a_src, SOURCE), (feat_tgt, a_tgt, TARGET)):
        if feats is None:
            continue
        trace, out = forward_trace(disc, feats)
        z = out.reshape(np.shape(feats)[:-1] + (out.shape[-1],))
        value, dz = conditional_domain_nll(z, a, dom)
        loss += value
        total = total + backward(disc, feats, dz, trace=trace)
    return loss, total


def loss_adversarial(disc: Discriminator, feat_tgt: np.ndarray,
                     a_tgt: np.ndarray) -> tuple[float, np.ndarray]:
    """Target pixels scored as source of their class; gradient w.r.t. features."""
    trace, out = forward_trace(disc, feat_tgt)
    z = out.reshape(np.shape(feat_tgt)[:-1] + (out.shape[-1],))
    value, dz = conditional_domain_nll(z, a_tgt, SOURCE)
    g = backward(disc, feat_tgt, dz, trace=trace, input_grad=True)
    return value, g.input


def _scene_orders(rng: np.random.Generator, n: int, iterations: int) -> np.ndarray:
    reps = -(-iterations // n) if n else 0
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:iterations]


def train_conditional_alignment(src: DomainDataset, tgt: DomainDataset, net: PixelNet,
                                cfg: AlignConfig, rng: np.random.Generator,
                                disc: Discriminator | None = None):
    """Jointly train ``net`` (segmentation + adversarial) and a discriminator.

    One iteration = one source scene and one target scene. Returns
    ``(net, disc, history)`` where history rows are
    ``(iteration, L_seg, L_adv, L_D)``. ``net`` is updated in place.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("source and target datasets must be non-empty")
    if src.spec.num_classes != tgt.spec.num_classes or src.spec.feature_dim != tgt.spec.feature_dim:
        raise ValueError("source and target disagree on classes or feature dim")
    k = src.spec.num_classes
    src_rng, tgt_rng, disc_rng = spawn(rng, 3)
    if disc is None:
        disc = Discriminator.create(net.feature_dim, k, disc_rng)
    history: list[tuple[int, float, float, float]] = []
    if cfg.iterations == 0:
        return net, disc, history
    src_order = _scene_orders(src_rng, len(src), cfg.iterations)
    tgt_order = _scene_orders(tgt_rng, len(tgt), cfg.iterations)
    opt = OptimizerState.for_net(net, cfg.iterations, base_lr=cfg.net_lr)
    dopt = OptimizerState.for_net(disc, cfg.iterations, base_lr=cfg.disc_lr)
    lam = cfg.lambda_adv

    for it in range(cfg.iterations):
        s, t = src[src_order[it]], tgt[tgt_order[it]]
        # net step: L_seg + lambda * L_adv
        trace_s, out_s = forward_trace(net, s.features)
        logits_s = out_s.reshape(s.labels.shape + (k,))
        l_seg, d_logits = ce_loss_and_grad(logits_s, s.labels)
        grads = backward(net, s.features, d_logits, trace=trace_s)

        trace_t, out_t = forward_trace(net, t.features)
        hid_t = trace_t.inputs[net.split_index].reshape(t.labels.shape + (-1,))
        hid_s = trace_s.inputs[net.split_index].reshape(s.labels.shape + (-1,))
        a_t = class_knowledge_target(softmax(out_t.reshape(t.labels.shape + (k,))))
        a_s = class_knowledge_source(s.labels, k)

        l_adv, g_feat = loss_adversarial(disc, hid_t, a_t)
        if lam > 0:
            if cfg.mode == "direct":
                grads = grads + backward(net, t.features, None, d_hidden=lam * g_feat,
                                         trace=trace_t)
            else:
                for feats, a, dom, tr, x in ((hid_s, a_s, SOURCE, trace_s, s.features),
                                             (hid_t, a_t, TARGET, trace_t, t.features)):
                    dtr, dout = forward_trace(disc, feats)
                    _, dz = conditional_domain_nll(dout.reshape(feats.shape[:-1] + (-1,)), a, dom)
                    gin = backward(disc, feats, dz, trace=dtr, input_grad=True).input
                    grads = grads + backward(net, x, None, d_hidden=grl_transform(gin, lam),
                                             trace=tr)
        sgd_step(net, grads, opt)

        # discriminator step on the (pre-update) features
        l_d, dgrads = loss_discriminator(disc, hid_s, a_s, hid_t, a_t)
        sgd_step(disc, dgrads, dopt)
        history.append((it, l_seg, l_adv, l_d))
    return net, disc, history


def train_source_only(src: DomainDataset, net: PixelNet, iterations: int,
                      rng: np.random.Generator, base_lr: float = 2.5e-4):
    """Supervised training on source scenes with the same scene order as
    :func:`train_conditional_alignment` would use for the same ``rng``."""
    if len(src) == 0:
        raise ValueError("source dataset is empty")
    src_rng, _, _ = spawn(rng, 3)
    order = _scene_orders(src_rng, len(src), iterations)
    opt = OptimizerState.for_net(net, max(iterations, 1), base_lr=base_lr)
    history = []
    k = src.spec.num_classes
    for it in range(iterations):
        s = src[order[it]]
        trace, out = forward_trace(net, s.features)
        loss, d_logits = ce_loss_and_grad(out.reshape(s.labels.shape + (k,)), s.labels)
        sgd_step(net, backward(net, s.features, d_logits, trace=trace), opt)
        history.append((it, loss))
    return net, history


def _features_by_class(net: PixelNet, ds: DomainDataset, k: int) -> list[np.ndarray]:
    from .net import forward
    buckets = [[] for _ in range(k)]
    for scene in ds:
        hid = forward(net, scene.features)[0]
        for c in range(k):
            buckets[c].append(hid[scene.labels == c])
    return [np.concatenate(b) if b else np.zeros((0, net.feature_dim)) for b in buckets]


def probe_domain_accuracy(net: PixelNet, src: DomainDataset, tgt: DomainDataset,
                          rng: np.random.Generator, per_class: int = 2000) -> float:
    """Held-out accuracy of a fresh logistic-regression domain probe on ``F(x)``.

    For every class the probe sees equally many source and target pixels,
    so label shift alone cannot be exploited; only differences in the
    class-conditional feature distributions are measured. Half the sampled
    pixels train the probe, the other half score it.
    """
    k = src.spec.num_classes
    fs = _features_by_class(net, src, k)
    ft = _features_by_class(net, tgt, k)
    xs, ys = [], []
    for c in range(k):
        m = min(per_class, len(fs[c]), len(ft[c]))
        if m < 2:
            continue
        xs += [fs[c][rng.choice(len(fs[c]), m, replace=False)],
               ft[c][rng.choice(len(ft[c]), m, replace=False)]]
        ys += [np.zeros(m), np.ones(m)]
    if not xs:
        raise ValueError("no class has pixels in both domains")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(y))
    half = len(y) // 2
    tr, te = perm[:half], perm[half:]
    xa = np.hstack([x, np.ones((len(x), 1))])

    def nll(w):
        z = xa[tr] @ w
        # logistic loss with a small ridge to keep the optimum finite
        loss = np.logaddexp(0.0, z).sum() - y[tr] @ z + 1e-4 * w @ w
        grad = xa[tr].T @ (1.0 / (1.0 + np.exp(-z)) - y[tr]) + 2e-4 * w
        return loss, grad

    w = minimize(nll, np.zeros(xa.shape[1]), jac=True, method="L-BFGS-B").x
    pred = (xa[te] @ w) > 0
    return float(np.mean(pred == y[te].astype(bool)))
