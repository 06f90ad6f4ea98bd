"""Synthetic micro-CT segmentation twin.

Phantom generation, parallel-beam projection and FBP reconstruction,
fixed-window 16-bit normalization, tile-trained per-slice softmax
segmentation with tri-view fusion, rule-based ensembling, and a
frequency-weighted IoU evaluation harness.
"""

__version__ = "0.1.0"
