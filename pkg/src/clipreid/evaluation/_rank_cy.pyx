# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-query CMC / AP kernel over pre-sorted gallery orders."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def evaluate_ranked(cnp.int64_t[:, :] order, cnp.int64_t[:] q_pids, cnp.int64_t[:] g_pids,
                    cnp.int64_t[:] q_camids, cnp.int64_t[:] g_camids, long max_rank):
    """Return ``(cmc, ap, valid)``; rows of ``cmc``/``ap`` for invalid queries are zero."""
    cdef Py_ssize_t n_q = order.shape[0]
    cdef Py_ssize_t n_g = order.shape[1]
    cdef double[:, :] cmc = np.zeros((n_q, max_rank), dtype=np.float64)
    cdef double[:] ap = np.zeros(n_q, dtype=np.float64)
    cdef cnp.uint8_t[:] valid = np.zeros(n_q, dtype=np.uint8)
    cdef Py_ssize_t q, j, g, kept, first_hit, k
    cdef long hits
    cdef double prec_sum
    cdef cnp.int64_t qp, qc
    for q in range(n_q):
        qp = q_pids[q]
        qc = q_camids[q]
        kept = 0
        hits = 0
        prec_sum = 0.0
        first_hit = -1
        for j in range(n_g):
            g = order[q, j]
            if g_pids[g] == qp and g_camids[g] == qc:
                continue
            kept += 1
            if g_pids[g] == qp:
                hits += 1
                prec_sum += <double>hits / kept
                if first_hit < 0:
                    first_hit = kept - 1
        if hits == 0:
            continue
        valid[q] = 1
        ap[q] = prec_sum / hits
        for k in range(first_hit, max_rank):
            cmc[q, k] = 1.0
    return np.asarray(cmc), np.asarray(ap), np.asarray(valid).astype(bool)
