"""Kernel backend selection: compiled extension when importable, numpy otherwise.

Set ``KEFS_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("KEFS_PURE_PYTHON", "") not in ("", "0"):
    from ._pykernels import average_precision_from_hits, greedy_match, iou_matrix, silhouette_samples

    BACKEND = "python"
else:
    try:
        from ._ckernels import average_precision_from_hits, greedy_match, iou_matrix, silhouette_samples

        BACKEND = "cython"
    except ImportError:
        from ._pykernels import average_precision_from_hits, greedy_match, iou_matrix, silhouette_samples

        BACKEND = "python"

__all__ = ["BACKEND", "average_precision_from_hits", "greedy_match", "iou_matrix", "silhouette_samples"]
