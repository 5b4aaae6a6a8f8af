"""Label-shift rectification of a source-trained classifier.

Two interchangeable ways of turning source posteriors into target ones:

* inference adjustment: multiply predicted posteriors by ``P_t / P_s`` and
  take the argmax;
* classifier refinement: with the feature extractor frozen, retrain the
  head on source labels against predictions remolded by ``P_s / P_t``, so
  that the raw head output becomes the target posterior.

The reweighted cross-entropy used by CLS is included as a baseline.
"""

from __future__ import annotations

import numpy as np

from .core import IGNORE, LabelDistribution, check_logits, log_softmax, softmax
from .net import (GradientSet, OptimizerState, PixelNet, backward, ce_loss_and_grad,
                  forward, forward_trace, sgd_step)
from .synth import DomainDataset

DEFAULT_FLOOR = 1e-6


def ratio(numer: LabelDistribution, denom: LabelDistribution,
          floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Elementwise ``max(numer, floor) / max(denom, floor)``."""
    a = np.asarray(numer, dtype=np.float64)
    b = np.asarray(denom, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"class count mismatch: {a.size} vs {b.size}")
    return np.maximum(a, floor) / np.maximum(b, floor)


def adjust_posterior(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Reweight simplex points by ``r`` and renormalise (last axis)."""
    q = np.asarray(p, dtype=np.float64) * np.asarray(r, dtype=np.float64)
    return q / q.sum(axis=-1, keepdims=True)


def inference_adjust(probs: np.ndarray, p_t: LabelDistribution, p_s: LabelDistribution,
                     floor: float = DEFAULT_FLOOR) -> np.ndarray:
    # no renormalisation: argmax is scale invariant
    scores = np.asarray(probs, dtype=np.float64) * ratio(p_t, p_s, floor)
    return np.argmax(scores, axis=-1).astype(np.int64)


def cr_loss_and_grad(logits: np.ndarray, labels: np.ndarray, p_s: LabelDistribution,
                     p_t: LabelDistribution,
                     floor: float = DEFAULT_FLOOR) -> tuple[float, np.ndarray]:
    """Classifier-refinement loss and its gradient w.r.t. the raw logits.

    Remolding the softmax by ``P_s / P_t`` and renormalising is the same as
    adding ``log(P_s / P_t)`` to the logits, so the loss is plain
    cross-entropy on shifted logits and the gradient is unchanged by the
    constant shift.
    """
    z = check_logits(logits)
    return ce_loss_and_grad(z + np.log(ratio(p_s, p_t, floor)), labels)


def cr_loss_remolded(logits: np.ndarray, labels: np.ndarray, p_s: LabelDistribution,
                     p_t: LabelDistribution, floor: float = DEFAULT_FLOOR) -> float:
    """The same loss evaluated literally: softmax, reweight, renormalise, -log."""
    y = np.asarray(labels)
    mask = y != IGNORE
    p_hat = adjust_posterior(softmax(logits), ratio(p_s, p_t, floor))
    idx = np.where(mask, y, 0).astype(np.intp)
    picked = np.take_along_axis(p_hat, idx[..., None], axis=-1)[..., 0]
    return -float(np.log(picked[mask]).sum()) / int(mask.sum())


def cr_loss_logsum(logits: np.ndarray, labels: np.ndarray, p_s: LabelDistribution,
                   p_t: LabelDistribution, floor: float = DEFAULT_FLOOR) -> float:
    """The loss written as ``log(1 + sum_{j != k} w_j / w_k * p_j / p_k)``.

    ``w = P_s / P_t``; odds ``p_j / p_k`` are formed from logit differences.
    """
    z = check_logits(logits)
    y = np.asarray(labels)
    mask = y != IGNORE
    zs = z[mask]
    ks = y[mask].astype(np.intp)
    logw = np.log(ratio(p_s, p_t, floor))
    # log of w_j p_j / (w_k p_k) for every j
    terms = (zs + logw) - (np.take_along_axis(zs, ks[:, None], 1) + logw[ks][:, None])
    terms[np.arange(ks.size), ks] = -np.inf
    m = np.maximum(terms.max(axis=1), 0.0)
    # log(1 + sum exp(t)) = m + log(exp(-m) + sum exp(t - m))
    per_pixel = m + np.log(np.exp(-m) + np.exp(terms - m[:, None]).sum(axis=1))
    return float(per_pixel.sum()) / ks.size


def cls_weighted_loss_and_grad(logits: np.ndarray, labels: np.ndarray,
                               p_s: LabelDistribution, p_t: LabelDistribution,
                               floor: float = DEFAULT_FLOOR) -> tuple[float, np.ndarray]:
    """Cross-entropy weighted per pixel by ``P_t(k) / P_s(k)`` of its true class."""
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
    w = np.where(mask, ratio(p_t, p_s, floor)[idx], 0.0)
    logp = log_softmax(z)
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    loss = -float((w * picked).sum()) / n
    grad = softmax(z) - np.eye(k)[idx]
    grad *= (w / n)[..., None]
    return loss, grad


_LOSSES = {
    "ce": lambda z, y, ps, pt, fl: ce_loss_and_grad(z, y),
    "cr": cr_loss_and_grad,
    "cls": cls_weighted_loss_and_grad,
}


def head_of(net: PixelNet) -> PixelNet:
    """The classifier head ``C`` as a standalone network (copied parameters)."""
    s = net.split_index
    if s >= net.num_layers:
        raise ValueError("network has no classifier layers above its split")
    return PixelNet([w.copy() for w in net.weights[s:]],
                    [b.copy() for b in net.biases[s:]], split_index=0)


def head_gradients(net: PixelNet, hidden: np.ndarray, d_logits: np.ndarray) -> GradientSet:
    """Full-network gradient set in which every feature-extractor entry is zero."""
    head = PixelNet(net.weights[net.split_index:], net.biases[net.split_index:], 0)
    g = backward(head, hidden, d_logits)
    s = net.split_index
    zeros = GradientSet.zeros_like(net)
    return GradientSet(zeros.weights[:s] + g.weights, zeros.biases[:s] + g.biases)


def refine_classifier(net: PixelNet, src: DomainDataset, p_s: LabelDistribution,
                      p_t: LabelDistribution, epochs: int, rng: np.random.Generator,
                      loss: str = "cr", base_lr: float = 2.5e-4,
                      floor: float = DEFAULT_FLOOR, history: list | None = None,
                      **opt_kw) -> PixelNet:
    """Retrain the classifier head of ``net`` on source scenes, F frozen.

    ``loss`` selects ``"cr"`` (posterior remolding), ``"cls"`` (ratio-weighted
    cross-entropy) or ``"ce"`` (plain fine-tuning control). One optimizer
    step per scene; scene order is reshuffled every epoch from ``rng``.
    """
    if len(src) == 0:
        raise ValueError("source dataset is empty")
    if loss not in _LOSSES:
        raise ValueError(f"unknown refinement loss {loss!r}")
    loss_fn = _LOSSES[loss]
    refined = net.copy()
    if epochs == 0:
        return refined
    # F is frozen, so its output can be computed once per scene
    hidden = [forward(refined, s.features)[0] for s in src]
    opt = OptimizerState.for_net(refined, max_iters=epochs * len(src),
                                 base_lr=base_lr, **opt_kw)
    opt.trainable = refined.classifier_param_mask()
    s = refined.split_index
    for _ in range(epochs):
        for i in rng.permutation(len(src)):
            head = PixelNet(refined.weights[s:], refined.biases[s:], 0)
            trace, out = forward_trace(head, hidden[i])
            logits = out.reshape(hidden[i].shape[:-1] + (out.shape[-1],))
            value, d_logits = loss_fn(logits, src[i].labels, p_s, p_t, floor)
            g = backward(head, hidden[i], d_logits, trace=trace)
            zeros = GradientSet.zeros_like(refined)
            grads = GradientSet(zeros.weights[:s] + g.weights, zeros.biases[:s] + g.biases)
            sgd_step(refined, grads, opt)
            if history is not None:
                history.append(value)
    return refined
