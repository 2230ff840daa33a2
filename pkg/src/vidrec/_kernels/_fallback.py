"""Pure numpy versions of the compiled kernels, same signatures and semantics."""

import numpy as np


def row_scores(matrix, query):
    """Row dot products summed in four sequential lanes (j % 4), matching the compiled kernel bit for bit."""
    matrix = np.asarray(matrix, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    n, d = matrix.shape
    prod = matrix * query
    lanes = np.zeros((n, 4))
    for j in range(0, d, 4):
        block = prod[:, j:j + 4]
        lanes[:, :block.shape[1]] += block
    return (lanes[:, 0] + lanes[:, 1]) + (lanes[:, 2] + lanes[:, 3])


def topk_dot(matrix, ids, query, k, mask):
    cand = np.flatnonzero(np.asarray(mask, dtype=bool))
    if k <= 0 or cand.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    scores = row_scores(np.asarray(matrix)[cand], query)
    cand_ids = np.asarray(ids)[cand]
    if k < cand.size:
        kth = np.partition(scores, cand.size - k)[cand.size - k]
        keep = scores >= kth
        cand, scores, cand_ids = cand[keep], scores[keep], cand_ids[keep]
    order = np.lexsort((cand_ids, -scores))[:k]
    return cand[order].astype(np.int64), scores[order]


def segment_ndcg(gains, offsets):
    gains = np.asarray(gains, dtype=np.float64)
    out = np.empty(len(offsets) - 1, dtype=np.float64)
    for f in range(len(offsets) - 1):
        g = gains[offsets[f]:offsets[f + 1]]
        if g.size == 0 or g.max() <= 0:
            out[f] = np.nan
            continue
        g = g / g.max()  # scale-free; lets a constant weight cancel exactly
        disc = 1.0 / np.log2(np.arange(2, g.size + 2))
        idcg = float(np.sort(g)[::-1] @ disc)
        out[f] = float(g @ disc) / idcg if idcg > 0 else np.nan
    return out


def auc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0
    rank_sum = float(avg_rank[inverse][labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def decay_pool(embs, ages, lam):
    ages = np.asarray(ages, dtype=np.float64)
    w = np.exp(-lam * (ages - ages.min()))
    return (w @ np.asarray(embs)) / w.sum()
