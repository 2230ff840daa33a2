"""Numerical kernels with a compiled backend and a numpy fallback.

The Cython extension is used when it imports; set ``VIDREC_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names the active one.
"""

import os

from . import _fallback

fallback = _fallback
compiled = None

if os.environ.get("VIDREC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _fallback
BACKEND = "cython" if compiled is not None else "python"

topk_dot = _impl.topk_dot
row_scores = _impl.row_scores
segment_ndcg = _impl.segment_ndcg
auc = _impl.auc
decay_pool = _impl.decay_pool

__all__ = ["BACKEND", "auc", "compiled", "decay_pool", "fallback", "row_scores", "segment_ndcg", "topk_dot"]
