"""The three feed policies: recency, multimodal retrieval, and a trained two-tower baseline."""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from vidrec import _kernels
from vidrec.embedding import EmbeddingProvider
from vidrec.errors import DataError, DimensionMismatch, FormatError, TrainingError
from vidrec.index import VideoIndex, VideoRecord
from vidrec.profiler import ProfileConfig, UserHistory, user_profile

WATCH_THRESHOLD = 0.5

VCG_MAGIC = b"VCG1"
VCG_VERSION = 1


class Policy(str, enum.Enum):
    RECENCY = "recency"
    MULTIMODAL = "multimodal"
    CONVENTIONAL = "conventional"


@dataclass(frozen=True)
class RankedFeed:
    user_id: int
    items: tuple  # (video_id, score, position)
    policy: Policy

    @property
    def video_ids(self) -> list:
        return [vid for vid, _, _ in self.items]

    @property
    def scores(self) -> list:
        return [s for _, s, _ in self.items]

    def __len__(self):
        return len(self.items)

    def head(self, k: int) -> "RankedFeed":
        return RankedFeed(self.user_id, self.items[:k], self.policy)


def _feed(user_id: int, scored: Iterable[tuple], policy: Policy) -> RankedFeed:
    return RankedFeed(int(user_id), tuple((int(v), float(s), p) for p, (v, s) in enumerate(scored, 1)), Policy(policy))


def rank_recency(index: VideoIndex, k: int, as_of: int | None = None, user_id: int = -1) -> RankedFeed:
    """Newest uploads first; ``as_of`` hides videos uploaded later."""
    if k < 1:
        raise DataError("k must be at least 1")
    order = index.recency_order(as_of)[:k]
    return _feed(user_id, ((index.ids[p], float(index.upload_ts[p])) for p in order), Policy.RECENCY)


def rank_multimodal(index: VideoIndex, history: UserHistory, provider: EmbeddingProvider, t_now: int,
                    cfg: ProfileConfig, k: int, exclude: Iterable[int] = (),
                    as_of: int | None = None) -> RankedFeed:
    profile = user_profile(history, provider, t_now, cfg)
    return _feed(history.user_id, index.top_k(profile, k, exclude, as_of), Policy.MULTIMODAL)


# -- conventional two-tower ------------------------------------------------

def hashtag_key(tag: str) -> int:
    """Stable integer key for a hashtag string (used to key hashtag embeddings)."""
    return zlib.crc32(tag.encode("utf-8"))


def creator_bucket(creator_id: int, buckets: int) -> int:
    # Knuth multiplicative hash on the low 32 bits
    return ((int(creator_id) * 2654435761) & 0xFFFFFFFF) % buckets


@dataclass(frozen=True)
class FeatureSpec:
    duration_edges: tuple  # inner quantile edges, len = duration_buckets - 1
    creator_buckets: int = 64
    product_dim: int = 64
    hashtag_dim: int = 64

    @property
    def duration_buckets(self) -> int:
        return len(self.duration_edges) + 1

    @property
    def width(self) -> int:
        return self.duration_buckets + self.creator_buckets + self.product_dim + self.hashtag_dim

    @classmethod
    def fit(cls, durations_ms: Sequence[int], buckets: int = 8, creator_buckets: int = 64,
            product_dim: int = 64, hashtag_dim: int = 64) -> "FeatureSpec":
        """Equal-count duration buckets from the catalog's durations."""
        if buckets < 1:
            raise DataError("need at least one duration bucket")
        qs = np.quantile(np.asarray(durations_ms, dtype=np.float64), np.arange(1, buckets) / buckets)
        return cls(tuple(float(q) for q in qs), creator_buckets, product_dim, hashtag_dim)

    def duration_bucket(self, duration_ms: int) -> int:
        return int(np.searchsorted(self.duration_edges, duration_ms, side="right"))


def featurize_video(record: VideoRecord, provider_products: EmbeddingProvider,
                    provider_hashtags: EmbeddingProvider | None, spec: FeatureSpec) -> np.ndarray:
    """[duration one-hot | creator-hash one-hot | mean product emb | mean hashtag emb]."""
    if provider_products.dimension != spec.product_dim:
        raise DimensionMismatch("product provider dimension differs from feature spec")
    if provider_hashtags is not None and provider_hashtags.dimension != spec.hashtag_dim:
        raise DimensionMismatch("hashtag provider dimension differs from feature spec")
    x = np.zeros(spec.width)
    x[spec.duration_bucket(record.duration_ms)] = 1.0
    off = spec.duration_buckets
    x[off + creator_bucket(record.creator_id, spec.creator_buckets)] = 1.0
    off += spec.creator_buckets
    if record.product_ids:
        x[off:off + spec.product_dim] = provider_products.matrix(record.product_ids).mean(axis=0)
    off += spec.product_dim
    if record.hashtags and provider_hashtags is not None:
        x[off:off + spec.hashtag_dim] = provider_hashtags.matrix(hashtag_key(t) for t in record.hashtags).mean(axis=0)
    return x


def featurize_index(index: VideoIndex, provider_products, provider_hashtags, spec: FeatureSpec) -> np.ndarray:
    """Feature matrix aligned with the index's row order."""
    return np.stack([featurize_video(r, provider_products, provider_hashtags, spec) for r in index.records])


@dataclass(frozen=True)
class TrainingExample:
    user_embedding: np.ndarray
    video_id: int
    label: int


def watch_label(watch_ms: int, duration_ms: int) -> int:
    return int(watch_ms >= WATCH_THRESHOLD * duration_ms)


@dataclass
class TrainHyper:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0
    negatives_policy: str = "logged"
    hidden: bool = False
    loss: str = "bce"  # or "in_batch_softmax"
    init_scale: float = 0.1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


@dataclass
class ConventionalModel:
    """Video tower mapping features to the user-embedding space.

    ``params`` holds ``W`` (d x F) and ``b`` (d) for the linear tower, or
    ``W1``/``b1`` (hidden) and ``W2``/``b2`` when ``hidden`` is set.
    """

    spec: FeatureSpec
    dim: int
    params: dict
    hidden: bool = False
    training_meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec: FeatureSpec, dim: int, seed: int = 0, hidden: bool = False,
             init_scale: float = 0.1) -> "ConventionalModel":
        rng = np.random.default_rng(seed)
        width = spec.width
        if hidden:
            params = {
                "W1": rng.normal(0.0, init_scale, (dim, width)), "b1": np.zeros(dim),
                "W2": rng.normal(0.0, init_scale, (dim, dim)), "b2": np.zeros(dim),
            }
        else:
            params = {"W": rng.normal(0.0, init_scale, (dim, width)), "b": np.zeros(dim)}
        return cls(spec, dim, params, hidden, {"seed": seed, "epochs": 0, "loss_curve": []})

    def tower(self, features: np.ndarray) -> np.ndarray:
        p = self.params
        if self.hidden:
            h = np.tanh(features @ p["W1"].T + p["b1"])
            return h @ p["W2"].T + p["b2"]
        return features @ p["W"].T + p["b"]

    def logits(self, user_embs: np.ndarray, features: np.ndarray) -> np.ndarray:
        if user_embs.shape[-1] != self.dim:
            raise DimensionMismatch(f"user embedding dimension {user_embs.shape[-1]} != model dimension {self.dim}")
        return np.einsum("ij,ij->i", user_embs, self.tower(features))

    def loss_and_grad(self, user_embs: np.ndarray, features: np.ndarray, labels: np.ndarray):
        """Mean BCE of sigmoid(e_u . tower(x)) and its gradient w.r.t. every parameter."""
        p = self.params
        n = labels.shape[0]
        if self.hidden:
            h = np.tanh(features @ p["W1"].T + p["b1"])
            out = h @ p["W2"].T + p["b2"]
        else:
            out = features @ p["W"].T + p["b"]
        s = np.einsum("ij,ij->i", user_embs, out)
        loss = _bce(s, labels)
        dout = ((_sigmoid(s) - labels) / n)[:, None] * user_embs
        if self.hidden:
            dpre = (dout @ p["W2"]) * (1.0 - h * h)
            grads = {"W2": dout.T @ h, "b2": dout.sum(axis=0), "W1": dpre.T @ features, "b1": dpre.sum(axis=0)}
        else:
            grads = {"W": dout.T @ features, "b": dout.sum(axis=0)}
        return loss, grads

    def in_batch_loss_and_grad(self, user_embs, features, labels):
        """Sampled-softmax loss: each positive pair against the batch's other videos."""
        p = self.params
        pos = np.flatnonzero(labels > 0.5)
        if pos.size == 0:
            return 0.0, {k: np.zeros_like(v) for k, v in p.items()}
        if self.hidden:
            h = np.tanh(features @ p["W1"].T + p["b1"])
            out = h @ p["W2"].T + p["b2"]
        else:
            out = features @ p["W"].T + p["b"]
        logits = user_embs[pos] @ out.T
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(probs[np.arange(pos.size), pos])))
        dlog = probs
        dlog[np.arange(pos.size), pos] -= 1.0
        dlog /= pos.size
        dout = dlog.T @ user_embs[pos]
        if self.hidden:
            dpre = (dout @ p["W2"]) * (1.0 - h * h)
            grads = {"W2": dout.T @ h, "b2": dout.sum(axis=0), "W1": dpre.T @ features, "b1": dpre.sum(axis=0)}
        else:
            grads = {"W": dout.T @ features, "b": dout.sum(axis=0)}
        return loss, grads

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "spec": asdict(self.spec),
            "dim": self.dim,
            "hidden": self.hidden,
            "params": {k: list(v.shape) for k, v in self.params.items()},
            "training_meta": self.training_meta,
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        blobs = b"".join(self.params[k].astype("<f4").tobytes() for k in sorted(self.params))
        return VCG_MAGIC + struct.pack("<II", VCG_VERSION, len(raw)) + raw + blobs

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConventionalModel":
        if len(data) < 12 or data[:4] != VCG_MAGIC:
            raise FormatError("not a VCG1 model file")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VCG_VERSION:
            raise FormatError(f"unsupported model version {version}")
        try:
            header = json.loads(data[12:12 + hlen])
        except ValueError as exc:
            raise FormatError(f"bad model header: {exc}") from None
        off = 12 + hlen
        params = {}
        for k in sorted(header["params"]):
            shape = tuple(header["params"][k])
            count = int(np.prod(shape))
            if off + 4 * count > len(data):
                raise FormatError("model file truncated")
            params[k] = np.frombuffer(data, "<f4", count, off).astype(np.float64).reshape(shape)
            off += 4 * count
        spec = header["spec"]
        spec["duration_edges"] = tuple(spec["duration_edges"])
        return cls(FeatureSpec(**spec), header["dim"], params, header["hidden"], header["training_meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ConventionalModel":
        return cls.from_bytes(Path(path).read_bytes())


def train_conventional_arrays(user_embs: np.ndarray, features: np.ndarray, labels: np.ndarray,
                              spec: FeatureSpec, hyper: TrainHyper | None = None,
                              rows: np.ndarray | None = None) -> ConventionalModel:
    """Mini-batch SGD of the video tower against fixed user embeddings.

    With ``rows`` given, ``features`` is a per-video table and example ``i``
    uses ``features[rows[i]]``; otherwise features are per example. The loss
    curve records the full-training-set loss after every epoch.
    """
    hyper = hyper or TrainHyper()
    user_embs = np.asarray(user_embs, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if hyper.negatives_policy != "logged":
        raise DataError(f"unsupported negatives policy {hyper.negatives_policy!r}")
    if hyper.loss not in ("bce", "in_batch_softmax"):
        raise DataError(f"unknown loss {hyper.loss!r}")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise TrainingError("training labels must contain both positives and negatives")
    if features.shape[1] != spec.width:
        raise DimensionMismatch(f"feature width {features.shape[1]} != spec width {spec.width}")
    if rows is None:
        rows = np.arange(labels.size)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape != labels.shape or user_embs.shape[0] != labels.size:
        raise DataError("user embeddings, rows and labels must have one entry per example")
    model = ConventionalModel.init(spec, user_embs.shape[1], hyper.seed, hyper.hidden, hyper.init_scale)
    rng = np.random.default_rng([hyper.seed, 1])
    step = model.loss_and_grad if hyper.loss == "bce" else model.in_batch_loss_and_grad
    curve = []
    n = labels.size
    # overflow shows up as a non-finite loss, reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, hyper.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, hyper.batch_size):
                idx = order[start:start + hyper.batch_size]
                _, grads = step(user_embs[idx], features[rows[idx]], labels[idx])
                for k, g in grads.items():
                    model.params[k] -= hyper.lr * g
            if hyper.loss == "bce":
                towers = model.tower(features)
                loss = _bce(np.einsum("ij,ij->i", user_embs, towers[rows]), labels)
            else:
                loss, _ = model.in_batch_loss_and_grad(user_embs, features[rows], labels)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})")
            curve.append(loss)
    model.training_meta = {
        "epochs": hyper.epochs, "lr": hyper.lr, "batch_size": hyper.batch_size, "seed": hyper.seed,
        "loss": hyper.loss, "loss_curve": curve, "n_examples": n, "n_positive": n_pos,
    }
    return model


def train_conventional(examples: Sequence[TrainingExample], video_features: Mapping[int, np.ndarray],
                       spec: FeatureSpec, hyper: TrainHyper | None = None) -> ConventionalModel:
    if not examples:
        raise TrainingError("no training examples")
    user_embs = np.stack([ex.user_embedding for ex in examples])
    feats = np.stack([video_features[ex.video_id] for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    return train_conventional_arrays(user_embs, feats, labels, spec, hyper)


class TowerTable:
    """Tower outputs for every video of an index, ready for retrieval."""

    def __init__(self, model: ConventionalModel, index: VideoIndex, features: np.ndarray):
        if features.shape[0] != len(index):
            raise DataError("feature matrix rows must align with the index")
        self.model = model
        self.index = index
        # one tower pass per distinct feature row: identical videos get bit-identical vectors
        uniq, inverse = np.unique(np.asarray(features, dtype=np.float64), axis=0, return_inverse=True)
        self.matrix = np.ascontiguousarray(model.tower(uniq)[inverse.reshape(-1)])

    def top_k(self, user_embedding, k: int, exclude: Iterable[int] = (), as_of: int | None = None) -> list:
        """``(video_id, logit)`` pairs, best first."""
        q = np.ascontiguousarray(user_embedding, dtype=np.float64)
        if q.shape != (self.model.dim,):
            raise DimensionMismatch(f"user embedding dimension {q.shape[-1]} != model dimension {self.model.dim}")
        mask = self.index.candidate_mask(exclude, as_of)
        pos, scores = _kernels.topk_dot(self.matrix, self.index.ids, q, int(k), mask)
        return [(int(self.index.ids[p]), float(s)) for p, s in zip(pos, scores)]


def rank_conventional(model: ConventionalModel, index: VideoIndex, user_embedding, k: int,
                      features: np.ndarray | TowerTable | None = None, user_id: int = -1,
                      exclude: Iterable[int] = (), as_of: int | None = None,
                      use_logit: bool = False) -> RankedFeed:
    """Top-k by the tower's logit; scores reported as sigmoid probabilities unless ``use_logit``.

    ``features`` is the index-aligned feature matrix or a prebuilt :class:`TowerTable`.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    if isinstance(features, TowerTable):
        table = features
    elif features is None:
        raise DataError("rank_conventional needs video features or a TowerTable")
    else:
        table = TowerTable(model, index, np.asarray(features))
    scored = table.top_k(user_embedding, k, exclude, as_of)
    if not use_logit:
        scored = [(v, float(_sigmoid(s))) for v, s in scored]
    return _feed(user_id, scored, Policy.CONVENTIONAL)
