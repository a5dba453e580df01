"""CMC / AP over pre-sorted gallery orders.

The compiled kernel in ``_rank_cy`` is used when it was built; otherwise the
numpy implementation below runs. Set ``CLIPREID_NO_CYTHON=1`` to force the
fallback.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from ._rank_cy import evaluate_ranked as _evaluate_ranked_cy
except ImportError:  # extension not built
    _evaluate_ranked_cy = None

CYTHON_AVAILABLE = _evaluate_ranked_cy is not None


def evaluate_ranked_py(order, q_pids, g_pids, q_camids, g_camids, max_rank):
    n_q = order.shape[0]
    cmc = np.zeros((n_q, max_rank))
    ap = np.zeros(n_q)
    valid = np.zeros(n_q, dtype=bool)
    for q in range(n_q):
        o = order[q]
        keep = ~((g_pids[o] == q_pids[q]) & (g_camids[o] == q_camids[q]))
        matches = g_pids[o][keep] == q_pids[q]
        if not matches.any():
            continue
        valid[q] = True
        hits = np.cumsum(matches)
        precisions = hits[matches] / (np.flatnonzero(matches) + 1)
        # sequential sum, same order as the compiled kernel
        ap[q] = float(np.cumsum(precisions)[-1]) / matches.sum()
        cmc[q, int(np.argmax(matches)):] = 1.0
    return cmc, ap, valid


def use_cython_default() -> bool:
    return CYTHON_AVAILABLE and os.environ.get("CLIPREID_NO_CYTHON", "") in ("", "0")


def evaluate_ranked(order, q_pids, g_pids, q_camids, g_camids, max_rank, use_cython=None):
    """Per-query CMC rows (``Q x max_rank``), APs and a validity mask.

    ``order[q]`` lists gallery indices by increasing distance. Gallery entries with
    the query's pid *and* camid are skipped; a query without any remaining match
    is marked invalid.
    """
    if use_cython is None:
        use_cython = use_cython_default()
    args = [np.ascontiguousarray(a, dtype=np.int64)
            for a in (order, q_pids, g_pids, q_camids, g_camids)]
    if use_cython:
        if not CYTHON_AVAILABLE:
            raise ImportError("compiled rank kernel is not built")
        return _evaluate_ranked_cy(*args, int(max_rank))
    return evaluate_ranked_py(*args, int(max_rank))
