import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidrec import index as vix
from vidrec.errors import DataError, DimensionMismatch, FormatError, UnknownEntity
from vidrec.index import VideoIndex, VideoRecord


def rec(vid, emb, upload_ts=0, **kw):
    return VideoRecord(vid, np.asarray(emb, dtype=np.float64), kw.pop("duration_ms", 15_000), upload_ts,
                       kw.pop("creator_id", 1), **kw)


def random_index(rng, n, d, id_space=None):
    ids = rng.choice(id_space or 10 * n, size=n, replace=False)
    return VideoIndex([rec(int(i), rng.standard_normal(d), upload_ts=int(rng.integers(0, 10 ** 6))) for i in ids],
                      build_ts=123)


def full_scan(index, q, exclude=()):
    """Score every record independently and sort by (-score, id)."""
    rows = [(-float(sum(a * b for a, b in zip(r.embedding, q))), r.video_id) for r in index.records
            if r.video_id not in exclude]
    return [vid for _, vid in sorted(rows)]


def test_single_record_lookup():
    r = rec(42, [0.5, 0.25])
    idx = vix.build([r])
    assert len(idx) == 1 and idx[42] == r and 42 in idx
    with pytest.raises(UnknownEntity):
        idx[7]


def test_build_errors():
    with pytest.raises(DataError):
        vix.build([rec(1, [1, 0]), rec(1, [0, 1])])
    with pytest.raises(DimensionMismatch):
        vix.build([rec(1, [1, 0]), rec(2, [0, 1, 0])])
    with pytest.raises(DataError):
        vix.build([])
    with pytest.raises(DataError):
        rec(1, [1, 0], duration_ms=0)


def test_build_10k_fast(rng):
    records = [rec(i, row) for i, row in enumerate(rng.standard_normal((10_000, 64)))]
    t0 = time.perf_counter()
    idx = vix.build(records)
    assert time.perf_counter() - t0 < 1.0
    assert len(idx) == 10_000


def test_topk_examples():
    idx = vix.build([rec(1, [1.0, 0.0]), rec(2, [0.0, 1.0])])
    assert vix.top_k(idx, [1.0, 0.0], 1) == [(1, 1.0)]
    every = idx.top_k([0.3, 0.7], 5)
    assert [v for v, _ in every] == [2, 1]


def test_topk_matches_oracle(rng):
    idx = random_index(rng, 1000, 16)
    for _ in range(10):
        q = rng.standard_normal(16)
        got = idx.top_k(q, 10)
        assert [v for v, _ in got] == full_scan(idx, q)[:10]
        for vid, score in got:
            assert score == pytest.approx(float(idx[vid].embedding @ q), rel=1e-12, abs=1e-12)


def test_topk_exclude_and_as_of(rng):
    idx = random_index(rng, 200, 4)
    q = rng.standard_normal(4)
    top = [v for v, _ in idx.top_k(q, 5)]
    after = [v for v, _ in idx.top_k(q, 5, exclude=top[:2])]
    assert after == full_scan(idx, q, exclude=set(top[:2]))[:5]
    cutoff = int(np.median(idx.upload_ts))
    for vid, _ in idx.top_k(q, 50, max_upload_ts=cutoff):
        assert idx[vid].upload_ts <= cutoff


def test_topk_ties_by_id_and_errors():
    idx = vix.build([rec(v, [1.0, 1.0]) for v in (30, 10, 20)])
    assert [v for v, _ in idx.top_k([1.0, 0.0], 3)] == [10, 20, 30]
    with pytest.raises(DimensionMismatch):
        idx.top_k([1.0], 1)
    with pytest.raises(DataError):
        idx.top_k([1.0, 0.0], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_topk_prefix_and_full_sort(n, d, seed):
    r = np.random.default_rng(seed)
    idx = VideoIndex([rec(i, np.round(r.standard_normal(d), 1)) for i in range(n)])
    q = np.round(r.standard_normal(d), 1)
    full = [v for v, _ in idx.top_k(q, n)]
    assert sorted(full) == sorted(idx.ids.tolist())
    for k in range(1, n):
        assert [v for v, _ in idx.top_k(q, k)] == full[:k]


def test_adding_a_worse_video_keeps_topk(rng):
    records = [rec(i, rng.standard_normal(8)) for i in range(100)]
    q = rng.standard_normal(8)
    idx = VideoIndex(records)
    top = idx.top_k(q, 5)
    worst = -10 * q / np.linalg.norm(q)  # score far below the 5th
    assert VideoIndex(records + [rec(1000, worst)]).top_k(q, 5) == top


def test_snapshot_roundtrip_and_layout():
    r = rec(7, [0.5, -2.0, 1.25], upload_ts=99, creator_id=3, product_ids=(4, 5), hashtags=("tag1", "été"))
    idx = VideoIndex([r], build_ts=1234)
    data = vix.save(idx)
    assert data[:4] == b"VIX1"
    assert struct.unpack_from("<IIQQ", data, 4) == (1, 3, 1, 1234)
    back = vix.load(data)
    assert back.records == idx.records and back.build_ts == 1234


def test_snapshot_corruption():
    data = vix.save(VideoIndex([rec(1, [1.0, 0.0])]))
    with pytest.raises(FormatError):
        vix.load(b"VIX2" + data[4:])
    with pytest.raises(FormatError):
        vix.load(data[:-2])
    with pytest.raises(FormatError):
        vix.load(data + b"\x00")
    bad_version = data[:4] + struct.pack("<I", 9) + data[8:]
    with pytest.raises(FormatError):
        vix.load(bad_version)


def test_snapshot_10k_results_identical(rng, tmp_path):
    idx = random_index(rng, 10_000, 64)
    path = tmp_path / "i.vix"
    idx.save(path)
    back = VideoIndex.load(path)
    for _ in range(5):
        q = rng.standard_normal(64)
        assert back.top_k(q, 20) == idx.top_k(q, 20)


def test_index_arrays_are_read_only(rng):
    idx = random_index(rng, 10, 4)
    with pytest.raises(ValueError):
        idx.matrix[0, 0] = 1.0


def test_recency_order():
    idx = VideoIndex([rec(1, [1.0], upload_ts=5), rec(2, [1.0], upload_ts=9), rec(3, [1.0], upload_ts=5)])
    assert idx.ids[idx.recency_order()].tolist() == [2, 1, 3]
    assert idx.ids[idx.recency_order(max_upload_ts=6)].tolist() == [1, 3]
