"""Immutable store of precomputed video embeddings with exact top-k retrieval."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vidrec import _kernels
from vidrec.embedding import as_embedding
from vidrec.errors import DataError, DimensionMismatch, FormatError, UnknownEntity

VIX_MAGIC = b"VIX1"
VIX_VERSION = 1
# magic, version, dimension, count, build_ts
_HEADER = struct.Struct("<4sIIQQ")
_REC_HEAD = struct.Struct("<QIQQ")


@dataclass(frozen=True)
class VideoRecord:
    video_id: int
    embedding: np.ndarray = field(repr=False)
    duration_ms: int
    upload_ts: int
    creator_id: int
    product_ids: tuple = ()
    hashtags: tuple = ()

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise DataError(f"video {self.video_id}: duration_ms must be positive")
        object.__setattr__(self, "embedding", as_embedding(self.embedding))
        object.__setattr__(self, "product_ids", tuple(int(p) for p in self.product_ids))
        object.__setattr__(self, "hashtags", tuple(str(h) for h in self.hashtags))

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.duration_ms == other.duration_ms
            and self.upload_ts == other.upload_ts
            and self.creator_id == other.creator_id
            and self.product_ids == other.product_ids
            and self.hashtags == other.hashtags
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


class VideoIndex:
    """Exact dot-product retrieval over a fixed catalog.

    Embeddings are held at float32 precision (stored as float64) so a saved
    snapshot reloads to identical records and identical scores.
    """

    def __init__(self, records: Sequence[VideoRecord], build_ts: int | None = None):
        records = list(records)
        if not records:
            raise DataError("cannot build an index from no records")
        dim = records[0].embedding.shape[0]
        quantized = []
        seen = set()
        for rec in records:
            if rec.video_id in seen:
                raise DataError(f"duplicate video id {rec.video_id}")
            seen.add(rec.video_id)
            if rec.embedding.shape[0] != dim:
                raise DimensionMismatch(f"video {rec.video_id}: dimension {rec.embedding.shape[0]}, index has {dim}")
            emb = rec.embedding.astype(np.float32).astype(np.float64)
            emb.setflags(write=False)
            quantized.append(
                VideoRecord(rec.video_id, emb, rec.duration_ms, rec.upload_ts, rec.creator_id,
                            rec.product_ids, rec.hashtags)
            )
        self.dimension = dim
        self.build_ts = int(time.time() * 1000) if build_ts is None else int(build_ts)
        self._records = tuple(quantized)
        self._pos = {r.video_id: i for i, r in enumerate(self._records)}
        self.matrix = np.ascontiguousarray(np.stack([r.embedding for r in self._records]))
        self.ids = np.array([r.video_id for r in self._records], dtype=np.int64)
        self.durations = np.array([r.duration_ms for r in self._records], dtype=np.int64)
        self.upload_ts = np.array([r.upload_ts for r in self._records], dtype=np.int64)
        for arr in (self.matrix, self.ids, self.durations, self.upload_ts):
            arr.setflags(write=False)
        self._by_recency = np.lexsort((self.ids, -self.upload_ts))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __contains__(self, video_id) -> bool:
        return int(video_id) in self._pos

    def __getitem__(self, video_id: int) -> VideoRecord:
        try:
            return self._records[self._pos[int(video_id)]]
        except KeyError:
            raise UnknownEntity(f"unknown video id {video_id}") from None

    @property
    def records(self) -> tuple:
        return self._records

    def position(self, video_id: int) -> int:
        return self._pos[int(video_id)]

    def candidate_mask(self, exclude: Iterable[int] = (), max_upload_ts: int | None = None) -> np.ndarray:
        if max_upload_ts is None:
            mask = np.ones(len(self._records), dtype=np.uint8)
        else:
            mask = (self.upload_ts <= max_upload_ts).astype(np.uint8)
        for vid in exclude:
            pos = self._pos.get(int(vid))
            if pos is not None:
                mask[pos] = 0
        return mask

    def top_k(self, query, k: int, exclude: Iterable[int] = (), max_upload_ts: int | None = None) -> list:
        """The ``k`` best ``(video_id, score)`` pairs by dot score.

        Sorted by score descending, ties by ascending id. ``max_upload_ts``
        restricts candidates to videos uploaded by that time.
        """
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dimension:
            raise DimensionMismatch(f"query dimension {q.shape[-1]} != index dimension {self.dimension}")
        if k < 1:
            raise DataError("k must be at least 1")
        mask = self.candidate_mask(exclude, max_upload_ts)
        positions, scores = _kernels.topk_dot(self.matrix, self.ids, np.ascontiguousarray(q), int(k), mask)
        # reported scores are the ones the selection used, so order and scores always agree
        return [(int(self.ids[p]), float(s)) for p, s in zip(positions, scores)]

    def recency_order(self, max_upload_ts: int | None = None) -> np.ndarray:
        """Row positions newest first (ties by ascending id)."""
        order = self._by_recency
        if max_upload_ts is not None:
            order = order[self.upload_ts[order] <= max_upload_ts]
        return order

    # -- snapshots ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(VIX_MAGIC, VIX_VERSION, self.dimension, len(self._records), self.build_ts)]
        for rec in self._records:
            parts.append(_REC_HEAD.pack(rec.video_id, rec.duration_ms, rec.upload_ts, rec.creator_id))
            parts.append(struct.pack(f"<H{len(rec.product_ids)}Q", len(rec.product_ids), *rec.product_ids))
            parts.append(struct.pack("<H", len(rec.hashtags)))
            for tag in rec.hashtags:
                raw = tag.encode("utf-8")
                parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(rec.embedding.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VideoIndex":
        view = memoryview(data)

        def take(fmt: struct.Struct | str, offset: int):
            s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
            if offset + s.size > len(view):
                raise FormatError(f"index snapshot truncated at byte {offset}")
            return s.unpack_from(view, offset), offset + s.size

        (magic, version, dim, count, build_ts), off = take(_HEADER, 0)
        if magic != VIX_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {VIX_MAGIC!r}")
        if version != VIX_VERSION:
            raise FormatError(f"unsupported index snapshot version {version}")
        records = []
        for _ in range(count):
            (vid, dur, up, creator), off = take(_REC_HEAD, off)
            (n_prod,), off = take("<H", off)
            prods, off = take(f"<{n_prod}Q", off)
            (n_tags,), off = take("<H", off)
            tags = []
            for _ in range(n_tags):
                (length,), off = take("<H", off)
                if off + length > len(view):
                    raise FormatError("index snapshot truncated inside a hashtag")
                tags.append(bytes(view[off:off + length]).decode("utf-8"))
                off += length
            if off + 4 * dim > len(view):
                raise FormatError("index snapshot truncated inside an embedding")
            emb = np.frombuffer(view, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            records.append(VideoRecord(vid, emb, dur, up, creator, prods, tuple(tags)))
        if off != len(view):
            raise FormatError(f"{len(view) - off} trailing bytes after index snapshot")
        if not records:
            raise FormatError("index snapshot holds no records")
        return cls(records, build_ts=build_ts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VideoIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build(records: Sequence[VideoRecord], build_ts: int | None = None) -> VideoIndex:
    return VideoIndex(records, build_ts=build_ts)


def top_k(index: VideoIndex, query, k: int, exclude: Iterable[int] = ()) -> list:
    return index.top_k(query, k, exclude)


def save(index: VideoIndex) -> bytes:
    return index.to_bytes()


def load(data: bytes) -> VideoIndex:
    return VideoIndex.from_bytes(data)
