"""Multimodal short-form video retrieval with recency and two-tower baselines.

The hot loops (top-k scan, per-feed NDCG, AUC, decayed pooling) live in
:mod:`vidrec._kernels`, compiled when available with a numpy fallback.
"""

from vidrec._kernels import BACKEND
from vidrec.embedding import EmbeddingProvider, FrameSet, decay_weight, dot_score, mean_pool
from vidrec.errors import DataError, DimensionMismatch, ExternalServiceError, FormatError, TrainingError, UnknownEntity, VidrecError
from vidrec.index import VideoIndex, VideoRecord
from vidrec.profiler import InteractionEvent, InteractionKind, ProfileConfig, UserHistory, global_fallback, user_profile
from vidrec.rankers import Policy, RankedFeed, rank_conventional, rank_multimodal, rank_recency

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DataError", "DimensionMismatch", "EmbeddingProvider", "ExternalServiceError", "FormatError",
    "FrameSet", "InteractionEvent", "InteractionKind", "Policy", "ProfileConfig", "RankedFeed", "TrainingError",
    "UnknownEntity", "UserHistory", "VidrecError", "VideoIndex", "VideoRecord", "decay_weight", "dot_score",
    "global_fallback", "mean_pool", "rank_conventional", "rank_multimodal", "rank_recency", "user_profile",
]
