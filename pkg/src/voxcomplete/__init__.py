"""Weakly-supervised voxel shape completion for unseen categories.

A coarse completion network trained on seen categories (CoSL) feeds a
self-supervised per-category refinement stage (CaSR) that never touches
unseen ground truth. See the README for the pipeline walkthrough.
"""

from voxcomplete.backend import selected_backend

__version__ = "0.1.0"

__all__ = ["selected_backend", "__version__"]
