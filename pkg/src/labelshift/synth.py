"""Synthetic segmentation domains with a closed-form Bayes posterior.

Each scene is a Voronoi partition of an ``H x W`` grid. Every cell draws
its class i.i.d. from the label marginal, and every pixel's feature is an
isotropic Gaussian around its class mean (plus an optional domain-wide
translation). Because the class-conditionals share one covariance, the
exact posterior ``P(Y | x)`` is a softmax of a linear function of ``x``.

Randomness
----------
All draws use numpy's Philox4x64 counter-based bit generator. Scene ``i``
of a dataset with seed ``s`` is generated from ``Philox(key=mix(mix(s) ^ i))``,
where ``mix`` is the SplitMix64 finalizer (:func:`derive_seed`). Scenes are
therefore independent of generation order and can be produced in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import IGNORE, LabelDistribution

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer: a fixed bijective mixing of a 64-bit integer."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    return splitmix64(splitmix64(seed & _MASK64) ^ (index & _MASK64))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators keyed from draws of ``rng``."""
    keys = rng.integers(0, 2 ** 63, size=n, dtype=np.int64)
    return [make_rng(splitmix64(int(key))) for key in keys]


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Generative parameters for one domain."""

    height: int
    width: int
    class_means: np.ndarray          # (K, d)
    noise_sigma: float
    label_marginal: LabelDistribution
    conditional_shift: np.ndarray | None = None  # (d,), zero when None
    blob_count: int = 4
    seed: int = 0

    def __post_init__(self):
        means = np.array(self.class_means, dtype=np.float64)
        if means.ndim != 2:
            raise ValueError("class_means must be a K x d matrix")
        means.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        shift = (np.zeros(means.shape[1]) if self.conditional_shift is None
                 else np.array(self.conditional_shift, dtype=np.float64))
        if shift.shape != (means.shape[1],):
            raise ValueError(f"conditional_shift must have length {means.shape[1]}")
        shift.setflags(write=False)
        object.__setattr__(self, "conditional_shift", shift)
        if not isinstance(self.label_marginal, LabelDistribution):
            object.__setattr__(self, "label_marginal",
                               LabelDistribution(self.label_marginal))
        if self.label_marginal.num_classes != means.shape[0]:
            raise ValueError("label_marginal and class_means disagree on K")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if self.blob_count < 1:
            raise ValueError("blob_count must be at least 1")
        if self.height < 1 or self.width < 1:
            raise ValueError("scene must be at least 1x1")
        k = means.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(means[i], means[j]):
                    raise ValueError(f"class means {i} and {j} coincide")

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def shifted_means(self) -> np.ndarray:
        return self.class_means + self.conditional_shift

    def replace(self, **changes) -> "SceneSpec":
        fields = dict(height=self.height, width=self.width,
                      class_means=self.class_means, noise_sigma=self.noise_sigma,
                      label_marginal=self.label_marginal,
                      conditional_shift=self.conditional_shift,
                      blob_count=self.blob_count, seed=self.seed)
        fields.update(changes)
        return SceneSpec(**fields)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_means": self.class_means.tolist(),
            "noise_sigma": self.noise_sigma,
            "label_marginal": self.label_marginal.tolist(),
            "conditional_shift": self.conditional_shift.tolist(),
            "blob_count": self.blob_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        spec = cls(height=int(d["height"]), width=int(d["width"]),
                   class_means=np.array(d["class_means"], dtype=np.float64),
                   noise_sigma=float(d["noise_sigma"]),
                   label_marginal=LabelDistribution(d["label_marginal"]),
                   conditional_shift=np.array(d["conditional_shift"], dtype=np.float64),
                   blob_count=int(d["blob_count"]), seed=int(d["seed"]))
        for key, value in (("num_classes", spec.num_classes),
                           ("feature_dim", spec.feature_dim)):
            if key in d and int(d[key]) != value:
                raise ValueError(f"{key}={d[key]} disagrees with class_means ({value})")
        return spec

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class Scene:
    features: np.ndarray   # (H, W, d)
    labels: np.ndarray     # (H, W) uint8, IGNORE allowed


@dataclass
class DomainDataset:
    scenes: list[Scene]
    spec: SceneSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.spec.height, self.spec.width)
        for i, s in enumerate(self.scenes):
            if s.labels.shape != shape or s.features.shape != shape + (self.spec.feature_dim,):
                raise ValueError(f"scene {i} does not match its SceneSpec shape")

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]


def generate_label_map(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Voronoi label map: ``blob_count`` uniform seeds, i.i.d. classes per cell.

    Pixels equidistant from several seeds take the seed that comes first
    in row-major order.
    """
    h, w, b = spec.height, spec.width, spec.blob_count
    rows = rng.integers(0, h, size=b)
    cols = rng.integers(0, w, size=b)
    classes = rng.choice(spec.num_classes, size=b, p=spec.label_marginal.probs)
    order = np.lexsort((cols, rows))
    rows, cols, classes = rows[order], cols[order], classes[order]
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr[..., None] - rows) ** 2 + (cc[..., None] - cols) ** 2
    nearest = np.argmin(d2, axis=-1)
    return classes[nearest].astype(np.uint8)


def sample_features(labels: np.ndarray, spec: SceneSpec,
                    rng: np.random.Generator) -> Scene:
    labels = np.asarray(labels)
    noise = rng.standard_normal(labels.shape + (spec.feature_dim,))
    mask = labels != IGNORE
    idx = np.where(mask, labels, 0).astype(np.intp)
    feats = spec.shifted_means[idx] + spec.noise_sigma * noise
    feats[~mask] = 0.0
    return Scene(features=feats, labels=labels.astype(np.uint8))


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    rng = make_rng(derive_seed(spec.seed, index))
    labels = generate_label_map(spec, rng)
    return sample_features(labels, spec, rng)


def generate_dataset(spec: SceneSpec, n_scenes: int, start: int = 0) -> DomainDataset:
    """Scenes ``start .. start + n_scenes - 1`` of the domain described by ``spec``."""
    scenes = [generate_scene(spec, start + i) for i in range(n_scenes)]
    return DomainDataset(scenes, spec, meta={"start": start})


def bayes_log_posterior(features: np.ndarray, spec: SceneSpec,
                        prior: LabelDistribution | None = None) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    pi = spec.label_marginal if prior is None else prior
    mu = spec.shifted_means
    # -||x - mu||^2 / 2s^2 up to the class-independent ||x||^2 term
    scores = (x @ mu.T - 0.5 * np.sum(mu * mu, axis=1)) / spec.noise_sigma ** 2
    with np.errstate(divide="ignore"):
        scores = scores + np.log(pi.probs)
    m = scores.max(axis=-1, keepdims=True)
    return scores - m - np.log(np.exp(scores - m).sum(axis=-1, keepdims=True))


def bayes_posterior(features: np.ndarray, spec: SceneSpec,
                    prior: LabelDistribution | None = None) -> np.ndarray:
    """Exact ``P(Y | x)`` under ``spec`` for one feature or a whole map.

    ``prior`` replaces the SceneSpec label marginal while keeping its
    class-conditionals, which yields the posterior of the other domain
    under pure label shift.
    """
    return np.exp(bayes_log_posterior(features, spec, prior))


def _count_pixels(labels: np.ndarray, k: int) -> np.ndarray:
    y = labels[labels != IGNORE].astype(np.int64)
    return np.bincount(y, minlength=k)[:k]


def pixel_class_counts(ds: DomainDataset | Sequence[Scene], k: int) -> np.ndarray:
    return sum((_count_pixels(s.labels, k) for s in ds), np.zeros(k, dtype=np.int64))


def empirical_pixel_marginal(ds: DomainDataset) -> LabelDistribution:
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    counts = pixel_class_counts(ds, ds.spec.num_classes)
    if counts.sum() == 0:
        raise ValueError("dataset has no labeled pixels")
    return LabelDistribution.from_counts(counts)


def image_presence(labels: np.ndarray, k: int, min_pixels: int) -> np.ndarray:
    """1 where a class covers strictly more than ``min_pixels`` pixels."""
    return (_count_pixels(labels, k) > min_pixels).astype(np.int64)


def empirical_image_marginal(ds: DomainDataset, min_pixels: int) -> LabelDistribution:
    """Ground-truth image-level class frequencies with a pixel-count threshold."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    k = ds.spec.num_classes
    counts = sum((image_presence(s.labels, k, min_pixels) for s in ds),
                 np.zeros(k, dtype=np.int64))
    if counts.sum() == 0:
        raise ValueError("no class clears the pixel threshold in any scene")
    return LabelDistribution.from_counts(counts)


def simplex_means(num_classes: int, feature_dim: int, scale: float) -> np.ndarray:
    """Class means ``scale * e_k``: one axis per class, the rest left free.

    Coordinates ``num_classes .. feature_dim - 1`` carry no class signal,
    which leaves room for a conditional shift orthogonal to every class
    contrast.
    """
    if feature_dim < num_classes:
        raise ValueError("feature_dim must be at least num_classes")
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = scale
    return means
