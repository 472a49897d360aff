"""Temporally informed non-contrastive pretraining for longitudinal imaging."""

__version__ = "0.1.0"
