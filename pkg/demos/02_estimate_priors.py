"""
Estimating image-level label distributions without target labels
=================================================================

Source side: count, for each class, the scenes in which it covers more
than n_s pixels. Target side: no labels, so pool the model's per-pixel
class probabilities with a log-sum-exp and call a class present when the
pooled score beats that class's source pixel ratio.
"""

import numpy as np

from labelshift.core import l1_distance
from labelshift.estimate import (BayesOracle, EstimationConfig, estimate_source_distribution,
                                 estimate_target_distribution, lse_pool, source_pixel_ratio)
from labelshift.experiment import ExperimentConfig
from labelshift.synth import empirical_image_marginal, generate_dataset

# lse pooling sits between the mean and the max of a channel
v = np.array([0.0, 0.0, 0.0, 1.0]).reshape(2, 2, 1)
print("mean %.3f  lse %.3f  max %.3f" % (v.mean(), lse_pool(v, 0), v.max()))

cfg = ExperimentConfig.load("E3")
src = generate_dataset(cfg.source, 400)
tgt = generate_dataset(cfg.target, 500)

p_pix = source_pixel_ratio(src)
oracle = BayesOracle(cfg.target, prior=cfg.source.label_marginal)   # exact, but source-prior biased

print("\n n_s   source exact   L1(target estimate, truth)")
for n_s in (1, 5, 20, 80):
    ecfg = EstimationConfig(min_pixels=n_s)
    exact = estimate_source_distribution(src, ecfg) == empirical_image_marginal(src, n_s)
    est = estimate_target_distribution(tgt, oracle, p_pix, ecfg)
    print("%4d   %-13s  %.4f" % (n_s, exact, l1_distance(est, empirical_image_marginal(tgt, n_s))))

# more blobs per scene means more classes per scene, and presence gets harder to call
print("\n blobs   L1 at the default n_s")
for b in (2, 3, 4, 6):
    t = generate_dataset(cfg.target.replace(blob_count=b), 300)
    s = generate_dataset(cfg.source.replace(blob_count=b), 300)
    o = BayesOracle(cfg.target.replace(blob_count=b), prior=cfg.source.label_marginal)
    est = estimate_target_distribution(t, o, source_pixel_ratio(s))
    print("%5d    %.4f" % (b, l1_distance(est, empirical_image_marginal(t, 5))))
