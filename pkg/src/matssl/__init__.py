"""Gated multi-stage contrastive pretraining for micrograph segmentation, on a numpy autodiff core."""

__version__ = "0.1.0"
