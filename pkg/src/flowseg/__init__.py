"""Probabilistic segmentation with normalizing-flow posteriors."""

from flowseg import autodiff, distributions, flows, metrics, model, synthdata
from flowseg.estimator import ProbabilisticSegmenter

__version__ = "0.1.0"

__all__ = [
    "ProbabilisticSegmenter",
    "autodiff",
    "distributions",
    "flows",
    "metrics",
    "model",
    "synthdata",
]
