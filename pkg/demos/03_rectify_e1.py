"""
Rectifying a trained network on the pure label-shift preset
===========================================================

Train the per-pixel network with class-conditional alignment, then compare
four ways of using it on the target: as is, with inference adjustment,
after classifier refinement (head retrained against remolded posteriors),
and after ratio-weighted cross-entropy. The exact IA-corrected posterior is
the ceiling. Takes about half a minute.
"""

import sys

from labelshift.experiment import ExperimentConfig, run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig.load("E1").with_seed(seed)
report = run_experiment(cfg)

print("variant   mIoU    pixel acc")
for name, m in report.variants.items():
    print("%-8s  %5.2f   %5.2f" % (name, 100 * m["miou"], 100 * m["pixel_accuracy"]))

# the estimate that would replace the true target prior in an unlabeled setting
est = report.estimation
print("\nestimated P_t", [round(p, 3) for p in est["p_t_estimated"]])
print("true image-level P_t", [round(p, 3) for p in est["p_t_true_image"]])
print("L1 %.4f" % est["l1_p_t"])
