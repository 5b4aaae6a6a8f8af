"""Label-shift rectification for cross-domain segmentation on synthetic domains.

Modules: ``core`` (types, metrics), ``synth`` (Gaussian scene generator),
``net`` (per-pixel MLP), ``align`` (class-conditional adversarial alignment),
``estimate`` (image-level label distributions), ``rectify`` (prior
correction), ``experiment``/``cli`` (configured runs).
"""

__version__ = "0.1.0"
