"""Shared numeric types and segmentation metrics.

Maps are plain ``numpy`` arrays laid out as ``(H, W, K)`` for scores and
probabilities and ``(H, W)`` for integer labels. Pixels carrying the
:data:`IGNORE` label are skipped by every loss and metric.
"""

from __future__ import annotations

import numpy as np

IGNORE = 255

_SIMPLEX_ATOL = 1e-9


class LabelDistribution:
    """Class prior probabilities ``P(Y)`` over ``K >= 2`` classes."""

    __slots__ = ("_probs",)

    def __init__(self, probs, atol: float = _SIMPLEX_ATOL):
        p = np.array(probs, dtype=np.float64).reshape(-1)
        if p.size < 2:
            raise ValueError(f"need at least 2 classes, got {p.size}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"probabilities must be finite and non-negative: {p}")
        if abs(p.sum() - 1.0) > atol:
            raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
        p.setflags(write=False)
        self._probs = p

    @classmethod
    def from_counts(cls, counts) -> "LabelDistribution":
        c = np.asarray(counts, dtype=np.float64)
        total = c.sum()
        if total <= 0:
            raise ValueError("cannot normalize an all-zero count vector")
        return cls(c / total)

    @classmethod
    def uniform(cls, k: int) -> "LabelDistribution":
        return cls(np.full(k, 1.0 / k))

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def num_classes(self) -> int:
        return self._probs.size

    def __len__(self) -> int:
        return self._probs.size

    def __array__(self, dtype=None, copy=None):
        return self._probs if dtype is None else self._probs.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self._probs, other._probs)

    def __hash__(self) -> int:
        return hash(self._probs.tobytes())

    def __repr__(self) -> str:
        return f"LabelDistribution({np.array2string(self._probs, precision=4)})"

    def tolist(self) -> list[float]:
        return self._probs.tolist()


def check_logits(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 1 or z.size == 0:
        raise ValueError(f"logit map has invalid shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logit map contains non-finite values")
    return z


def check_prob_map(probs: np.ndarray, atol: float = 1e-7) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probability map has negative or non-finite entries")
    if np.max(np.abs(p.sum(axis=-1) - 1.0), initial=0.0) > atol:
        raise ValueError("probability map pixels do not sum to 1")
    return p


def check_label_map(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError(f"label map must be integer typed, got {y.dtype}")
    scored = y[y != IGNORE]
    if scored.size and (scored.min() < 0 or scored.max() >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1} (and not IGNORE)")
    return y


def softmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the last axis, max-shifted for stability."""
    z = check_logits(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = check_logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def argmax_map(probs: np.ndarray) -> np.ndarray:
    """Index of the largest entry per pixel; ties go to the lowest class."""
    # np.argmax returns the first maximal index
    return np.argmax(np.asarray(probs), axis=-1).astype(np.int64)


class ConfusionMatrix:
    """``counts[g, p]`` = number of scored pixels with truth ``g`` predicted ``p``."""

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            c = np.array(counts, dtype=np.int64)
            if c.shape != (num_classes, num_classes) or np.any(c < 0):
                raise ValueError("counts must be a non-negative KxK matrix")
            self.counts = c

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __repr__(self) -> str:
        return f"ConfusionMatrix(K={self.num_classes}, total={self.total})"


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray,
                         cm: ConfusionMatrix) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair into ``cm`` in place and return it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    k = cm.num_classes
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size == 0:
        return cm
    if g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k:
        raise ValueError(f"labels outside 0..{k - 1}")
    cm.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; classes absent from both truth and prediction are NaN."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    out = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    out[defined] = tp[defined] / denom[defined]
    return out


def mean_defined_iou(iou: np.ndarray) -> float:
    """Mean over classes whose IoU is defined (not NaN)."""
    iou = np.asarray(iou, dtype=np.float64)
    if np.all(np.isnan(iou)):
        raise ValueError("mIoU undefined: no class present in truth or prediction")
    return float(np.nanmean(iou))


def miou(cm: ConfusionMatrix) -> float:
    return mean_defined_iou(iou_per_class(cm))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("pixel accuracy undefined for an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def l1_distance(a: LabelDistribution, b: LabelDistribution) -> float:
    pa, pb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"class count mismatch: {pa.size} vs {pb.size}")
    return float(np.abs(pa - pb).sum())
