"""Video label ensembles: one-vs-all, MoE, and frame-level classifiers with
blending and weighted averaging over top-k prediction files."""

__version__ = "0.1.0"

from .datamodel import FrameExample, PredictionList, VideoExample, Vocabulary, top_k
from .metrics import gap_at_k

__all__ = ["FrameExample", "PredictionList", "VideoExample", "Vocabulary", "gap_at_k", "top_k", "__version__"]
