"""Learned and heuristic masking policies for intermediate pre-training, at desk scale."""
__version__ = "0.1.0"
