import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidrec import _kernels


def topk_oracle(matrix, ids, query, k, mask):
    scored = [(-float(np.dot(matrix[i], query)), int(ids[i]), i) for i in range(len(ids)) if mask[i]]
    scored.sort()
    return [p for _, _, p in scored[:k]]


def test_backend_flag_matches_module():
    assert _kernels.BACKEND in ("cython", "python")
    if _kernels.BACKEND == "cython":
        assert _kernels.topk_dot is _kernels.compiled.topk_dot


def test_topk_matches_full_sort(kernels, rng):
    m = rng.standard_normal((300, 8))
    ids = rng.permutation(1000)[:300].astype(np.int64)
    mask = (rng.random(300) > 0.2).astype(np.uint8)
    q = rng.standard_normal(8)
    pos, scores = kernels.topk_dot(m, ids, q, 25, mask)
    assert pos.tolist() == topk_oracle(m, ids, q, 25, mask)
    assert np.allclose(scores, m[pos] @ q)


def test_topk_ties_resolve_by_smaller_id(kernels):
    m = np.ones((6, 2))
    ids = np.array([9, 3, 7, 1, 5, 2], dtype=np.int64)
    pos, _ = kernels.topk_dot(m, ids, np.array([1.0, 0.0]), 4, np.ones(6, np.uint8))
    assert ids[pos].tolist() == [1, 2, 3, 5]


def test_topk_k_larger_than_candidates(kernels):
    m = np.eye(3)
    pos, _ = kernels.topk_dot(m, np.arange(3, dtype=np.int64), np.array([0.0, 1.0, 0.5]), 10,
                              np.array([1, 0, 1], np.uint8))
    assert pos.tolist() == [2, 0]


def test_topk_zero_k(kernels):
    pos, scores = kernels.topk_dot(np.eye(2), np.arange(2, dtype=np.int64), np.ones(2), 0, np.ones(2, np.uint8))
    assert pos.size == 0 and scores.size == 0


def test_segment_ndcg_hand_values(kernels):
    gains = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    out = kernels.segment_ndcg(gains, np.array([0, 2, 4, 6], dtype=np.int64))
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(1.0 / np.log2(3))
    assert np.isnan(out[2])


def test_auc_hand_values(kernels):
    f = lambda s, y: kernels.auc(np.array(s, dtype=np.float64), np.array(y, dtype=np.uint8))
    assert f([0.9, 0.1], [1, 0]) == 1.0
    assert f([0.1, 0.9], [1, 0]) == 0.0
    assert f([0.8, 0.8], [1, 0]) == 0.5
    assert np.isnan(f([0.1, 0.2], [1, 1]))


def test_decay_pool_survives_large_ages(kernels):
    embs = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = kernels.decay_pool(embs, np.array([1e12, 1e12 + 10.0]), 0.1)
    assert np.allclose(out, [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 5), st.integers(0, 70), st.integers(0, 2 ** 31))
def test_backends_agree(n, d, k, seed):
    if _kernels.compiled is None:
        pytest.skip("compiled backend not built")
    r = np.random.default_rng(seed)
    m = np.round(r.standard_normal((n, d)), 1)  # rounding creates score ties
    ids = r.permutation(n).astype(np.int64)
    q = np.round(r.standard_normal(d), 1)
    mask = (r.random(n) > 0.3).astype(np.uint8)
    a = _kernels.compiled.topk_dot(m, ids, q, k, mask)
    b = _kernels.fallback.topk_dot(m, ids, q, k, mask)
    assert a[0].tolist() == b[0].tolist()
    labels = (r.random(n) > 0.5).astype(np.uint8)
    s = np.round(r.standard_normal(n), 1)
    ca, fa = _kernels.compiled.auc(s, labels), _kernels.fallback.auc(s, labels)
    assert (np.isnan(ca) and np.isnan(fa)) or ca == pytest.approx(fa, abs=1e-12)
    offsets = np.array(sorted({0, n} | set(r.integers(0, n, 3).tolist())), dtype=np.int64)
    g = np.round(r.random(n) * (r.random(n) > 0.5), 2)
    np.testing.assert_allclose(_kernels.compiled.segment_ndcg(g, offsets), _kernels.fallback.segment_ndcg(g, offsets),
                               rtol=1e-12, atol=1e-12)
