"""Shared embedding space: providers, frame pooling, scoring and recency decay.

Embeddings are plain 1-d ``float64`` numpy arrays. Persisted files use
``float32``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from vidrec import _kernels
from vidrec.errors import DataError, DimensionMismatch, FormatError, UnknownEntity

MS_PER_DAY = 86_400_000

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIQ")


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-d vector (of length ``dim`` if given)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"embedding must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError("embedding contains non-finite values")
    return arr


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


@dataclass(frozen=True)
class FrameSet:
    """Embeddings of the uniformly sampled frames of one video."""

    video_id: int
    frame_embeddings: tuple

    def __post_init__(self):
        frames = tuple(as_embedding(f) for f in self.frame_embeddings)
        if not frames:
            raise DataError(f"video {self.video_id}: empty frame set")
        dim = frames[0].shape[0]
        for f in frames[1:]:
            if f.shape[0] != dim:
                raise DimensionMismatch(f"video {self.video_id}: frames of dimension {dim} and {f.shape[0]}")
        object.__setattr__(self, "frame_embeddings", frames)

    @property
    def dimension(self) -> int:
        return self.frame_embeddings[0].shape[0]


def mean_pool(frames: FrameSet | Sequence, normalize: bool = False) -> np.ndarray:
    """Component-wise mean of frame embeddings, optionally scaled to unit L2 norm."""
    if not isinstance(frames, FrameSet):
        frames = FrameSet(-1, tuple(frames))
    stacked = np.stack(frames.frame_embeddings)
    out = stacked.sum(axis=0) / stacked.shape[0]
    if normalize:
        norm = np.linalg.norm(out)
        if norm == 0.0:
            raise DataError(f"video {frames.video_id}: cannot normalize a zero mean embedding")
        out = out / norm
    return out


def dot_score(e_u, e_v) -> float:
    """Relevance score of a video for a user: the plain dot product."""
    a = np.asarray(e_u, dtype=np.float64)
    b = np.asarray(e_v, dtype=np.float64)
    _check_same_dim(a, b)
    return float(np.dot(a, b))


def decay_weight(t_now: int, t_k: int, lam: float) -> float:
    """exp(-lam * (t_now - t_k)); timestamps in ms, ``lam`` per ms."""
    if t_k > t_now:
        raise DataError(f"event at {t_k} is later than t_now={t_now}")
    if lam < 0:
        raise DataError(f"decay rate must be non-negative, got {lam}")
    return math.exp(-lam * (t_now - t_k))


def rate_per_day(lam_per_day: float) -> float:
    """Convert a per-day decay rate into the per-millisecond rate used internally."""
    return lam_per_day / MS_PER_DAY


def rate_from_half_life(half_life_ms: float) -> float:
    return math.log(2.0) / half_life_ms


def decayed_mean(embs: np.ndarray, ages, lam: float) -> np.ndarray:
    """Decay-weighted mean of rows; ages in ms (non-negative)."""
    embs = np.ascontiguousarray(embs, dtype=np.float64)
    return _kernels.decay_pool(embs, np.ascontiguousarray(ages, dtype=np.float64), float(lam))


class EmbeddingProvider:
    """Deterministic id -> embedding lookup of fixed dimension."""

    def __init__(self, name: str, dimension: int, table: Mapping[int, Iterable[float]] | None = None):
        if dimension <= 0:
            raise DataError("dimension must be positive")
        self.name = name
        self.dimension = int(dimension)
        self._table: dict[int, np.ndarray] = {}
        for key, vec in (table or {}).items():
            self.add(key, vec)

    def add(self, entity_id: int, values) -> None:
        vec = as_embedding(values, self.dimension)
        vec.setflags(write=False)
        self._table[int(entity_id)] = vec

    def __getitem__(self, entity_id: int) -> np.ndarray:
        try:
            return self._table[int(entity_id)]
        except KeyError:
            raise UnknownEntity(f"{self.name}: unknown id {entity_id}") from None

    def __contains__(self, entity_id) -> bool:
        return int(entity_id) in self._table

    def __len__(self) -> int:
        return len(self._table)

    def ids(self) -> list[int]:
        return list(self._table)

    def matrix(self, ids: Iterable[int]) -> np.ndarray:
        ids = list(ids)
        if not ids:
            return np.zeros((0, self.dimension))
        return np.stack([self[i] for i in ids])

    @classmethod
    def from_arrays(cls, name: str, ids, matrix) -> "EmbeddingProvider":
        matrix = np.asarray(matrix, dtype=np.float64)
        prov = cls(name, matrix.shape[1])
        for i, row in zip(ids, matrix):
            prov.add(int(i), row)
        return prov

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        ids = sorted(self._table)
        rec = np.dtype([("id", "<u8"), ("values", "<f4", (self.dimension,))])
        body = np.empty(len(ids), dtype=rec)
        body["id"] = ids
        if ids:
            body["values"] = np.stack([self._table[i] for i in ids])
        return _EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, self.dimension, len(ids)) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, name: str = "file") -> "EmbeddingProvider":
        if len(data) < _EMB_HEADER.size:
            raise FormatError("embedding file truncated in header")
        magic, version, dim, count = _EMB_HEADER.unpack_from(data)
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
        if version != EMB_VERSION:
            raise FormatError(f"unsupported embedding file version {version}")
        rec = np.dtype([("id", "<u8"), ("values", "<f4", (dim,))])
        if len(data) != _EMB_HEADER.size + count * rec.itemsize:
            raise FormatError(f"embedding file truncated: expected {count} records of {rec.itemsize} bytes")
        body = np.frombuffer(data, dtype=rec, count=count, offset=_EMB_HEADER.size)
        return cls.from_arrays(name, body["id"].astype(np.int64), body["values"].astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, name: str | None = None) -> "EmbeddingProvider":
        """Read a packed ``EMB1`` file, or line-delimited JSON for ``.jsonl`` paths."""
        path = Path(path)
        if path.suffix in (".jsonl", ".ndjson"):
            return cls.from_jsonl(path.read_text().splitlines(), name or path.stem)
        return cls.from_bytes(path.read_bytes(), name or path.stem)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str], name: str = "jsonl") -> "EmbeddingProvider":
        prov = None
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                values = rec["values"]
                entity_id = int(rec["id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"line {lineno}: bad embedding record ({exc})") from None
            if prov is None:
                prov = cls(name, len(values))
            prov.add(entity_id, values)
        if prov is None:
            raise FormatError("no embedding records found")
        return prov

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"id": i, "values": [float(x) for x in v]}) + "\n" for i, v in sorted(self._table.items())
        )
