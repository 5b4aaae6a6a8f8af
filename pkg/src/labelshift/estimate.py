"""Image-level label distribution estimates for source and target domains."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .core import LabelDistribution, softmax
from .net import PixelNet, forward
from .synth import (DomainDataset, SceneSpec, bayes_log_posterior, empirical_pixel_marginal,
                    image_presence)

PROBABILITIES = "probabilities"
LOGITS = "logits"


@dataclass(frozen=True)
class EstimationConfig:
    """``min_pixels`` defaults to ``ceil(0.001 * H * W)`` when left as None."""

    min_pixels: int | None = None
    output_space: str = PROBABILITIES

    def __post_init__(self):
        if self.min_pixels is not None and self.min_pixels < 0:
            raise ValueError("min_pixels must be non-negative")
        if self.output_space not in (PROBABILITIES, LOGITS):
            raise ValueError(f"output_space must be {PROBABILITIES!r} or {LOGITS!r}")

    def threshold(self, height: int, width: int) -> int:
        if self.min_pixels is not None:
            return self.min_pixels
        return default_min_pixels(height, width)


def default_min_pixels(height: int, width: int) -> int:
    return math.ceil(0.001 * height * width)


class BayesOracle:
    """Exact posterior of a synthetic domain, exposed as a model.

    Calling it returns log-posteriors, which act as logits: their softmax is
    the posterior itself.
    """

    def __init__(self, spec: SceneSpec, prior: LabelDistribution | None = None):
        self.spec = spec
        self.prior = spec.label_marginal if prior is None else prior

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return bayes_log_posterior(features, self.spec, self.prior)


Model = Union[PixelNet, Callable[[np.ndarray], np.ndarray]]


def model_logits(model: Model, features: np.ndarray) -> np.ndarray:
    if isinstance(model, PixelNet):
        return forward(model, features)[1]
    return model(features)


def source_image_indicator(labels: np.ndarray, num_classes: int,
                           cfg: EstimationConfig = EstimationConfig()) -> np.ndarray:
    """1 for each class with strictly more than ``n_s`` pixels in the scene."""
    h, w = np.shape(labels)[:2]
    return image_presence(np.asarray(labels), num_classes, cfg.threshold(h, w))


def estimate_source_distribution(ds: DomainDataset,
                                 cfg: EstimationConfig = EstimationConfig()) -> LabelDistribution:
    k = ds.spec.num_classes
    counts = np.zeros(k, dtype=np.int64)
    for scene in ds:
        counts += source_image_indicator(scene.labels, k, cfg)
    if counts.sum() == 0:
        raise ValueError("no class clears the pixel threshold in any source scene")
    return LabelDistribution.from_counts(counts)


def source_pixel_ratio(ds: DomainDataset) -> LabelDistribution:
    return empirical_pixel_marginal(ds)


def lse_pool_all(output: np.ndarray) -> np.ndarray:
    """``log(mean_hw exp(output[h, w, k]))`` for every class ``k``."""
    v = np.asarray(output, dtype=np.float64)
    v = v.reshape(-1, v.shape[-1])
    m = v.max(axis=0)
    return m + np.log(np.mean(np.exp(v - m), axis=0))


def lse_pool(output: np.ndarray, k: int) -> float:
    """Smooth max pooling of one class channel over all pixels."""
    v = np.asarray(output, dtype=np.float64)[..., k].ravel()
    m = v.max()
    return float(m + np.log(np.mean(np.exp(v - m))))


def _pooling_input(logits: np.ndarray, cfg: EstimationConfig) -> np.ndarray:
    return softmax(logits) if cfg.output_space == PROBABILITIES else logits


def target_image_indicator(output: np.ndarray, p_pix: LabelDistribution,
                           cfg: EstimationConfig = EstimationConfig()) -> np.ndarray:
    """1 where the pooled class score strictly exceeds the source pixel ratio.

    ``output`` must already be in ``cfg.output_space``.
    """
    return (lse_pool_all(output) > np.asarray(p_pix)).astype(np.int64)


def estimate_target_distribution(tgt: DomainDataset, model: Model, p_pix: LabelDistribution,
                                 cfg: EstimationConfig = EstimationConfig(),
                                 return_counts: bool = False):
    """Normalised counts of classes detected per target scene by ``model``."""
    counts = np.zeros(p_pix.num_classes, dtype=np.int64)
    for scene in tgt:
        out = _pooling_input(model_logits(model, scene.features), cfg)
        counts += target_image_indicator(out, p_pix, cfg)
    if counts.sum() == 0:
        raise ValueError("no class detected in any target scene")
    dist = LabelDistribution.from_counts(counts)
    return (dist, counts) if return_counts else dist
