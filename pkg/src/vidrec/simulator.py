"""Synthetic catalog/user world and a biased immersive-feed user model.

Users examine position ``p`` with probability ``p ** -gamma`` and watch a
video for ``attention_budget * relevance * (1 + noise)`` ms, capped at its
duration. Short videos therefore clear the 50% watch threshold more often:
duration bias comes from the cap, not from a labelling rule.
"""

from __future__ import annotations

import dataclasses
import gzip
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from vidrec.embedding import MS_PER_DAY, EmbeddingProvider, mean_pool
from vidrec.errors import DataError, TrainingError, UnknownEntity
from vidrec.index import VideoIndex, VideoRecord
from vidrec.profiler import InteractionEvent, InteractionKind, ProfileConfig, UserHistory, global_fallback, popular_products
from vidrec.rankers import (
    FeatureSpec,
    Policy,
    RankedFeed,
    TowerTable,
    TrainHyper,
    featurize_index,
    hashtag_key,
    rank_multimodal,
    rank_recency,
    train_conventional_arrays,
)

# named random streams split from the master seed
STREAM_WORLD = 0
STREAM_EXAMINE = 1
STREAM_WATCH = 2
STREAM_SESSIONS = 3


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    n_users: int = 2000
    n_videos: int = 10000
    n_products: int = 5000
    d: int = 64
    taste_clusters: int = 6
    duration_min_ms: int = 10_000
    duration_max_ms: int = 120_000
    attention_mean_ms: float = 45_000.0
    attention_spread_ms: float = 15_000.0
    gamma: float = 0.8
    noise_sigma: float = 0.1
    latent_spread: float = 1.0
    user_spread: float = 1.0
    shared_taste: float = 0.6
    frames_per_video: int = 8
    frame_noise: float = 0.3
    catalog_noise: float = 0.3
    n_creators: int = 300
    n_hashtags: int = 240
    n_colors: int = 8
    content_noise: float = 0.3
    content_scale: float = 4.0
    history_min: int = 5
    history_max: int = 40
    history_off_cluster: float = 0.15
    history_focus: float = 10.0
    history_days: int = 60
    upload_days: int = 90
    log_days: int = 14
    sessions_per_user: int = 3
    feed_len: int = 10
    t_end: int = 1_700_000_000_000

    def __post_init__(self):
        for name in ("n_users", "n_videos", "n_products", "d", "taste_clusters", "frames_per_video",
                     "n_creators", "n_hashtags", "n_colors", "sessions_per_user", "feed_len", "log_days",
                     "upload_days", "history_days"):
            if getattr(self, name) <= 0:
                raise DataError(f"world config: {name} must be positive")
        if self.gamma < 0 or self.noise_sigma < 0:
            raise DataError("world config: gamma and noise_sigma must be non-negative")
        if not 0 < self.duration_min_ms <= self.duration_max_ms:
            raise DataError("world config: bad duration range")
        if not 0 < self.history_min <= self.history_max:
            raise DataError("world config: bad history length range")

    @classmethod
    def from_dict(cls, world: dict, seed: int | None = None) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in world.items() if k in known}
        if seed is not None:
            kwargs["seed"] = seed
        return cls(**kwargs)


# -- impressions -----------------------------------------------------------

@dataclass(frozen=True)
class Impression:
    feed_id: int
    user_id: int
    video_id: int
    position: int
    examined: bool
    watch_ms: int
    duration_ms: int
    ts: int

    def __post_init__(self):
        if not 0 <= self.watch_ms <= self.duration_ms:
            raise DataError(f"impression watch_ms {self.watch_ms} outside [0, {self.duration_ms}]")
        if not self.examined and self.watch_ms != 0:
            raise DataError("unexamined impression with non-zero watch time")

    @property
    def watch_fraction(self) -> float:
        return self.watch_ms / self.duration_ms

    @property
    def label(self) -> int:
        return int(self.watch_ms >= 0.5 * self.duration_ms)


_COLUMNS = ("feed_id", "user_id", "video_id", "position", "examined", "watch_ms", "duration_ms", "ts")


class ImpressionLog:
    """Append-only, column-oriented impression log."""

    def __init__(self, columns: dict | None = None):
        cols = columns or {}
        self._cols = {}
        for name in _COLUMNS:
            dtype = bool if name == "examined" else np.int64
            self._cols[name] = np.asarray(cols.get(name, ()), dtype=dtype)
        n = {len(v) for v in self._cols.values()}
        if len(n) > 1:
            raise DataError("impression log columns differ in length")

    def __len__(self) -> int:
        return len(self._cols["feed_id"])

    def __getattr__(self, name):
        if name in _COLUMNS:
            return self._cols[name]
        raise AttributeError(name)

    def __iter__(self) -> Iterator[Impression]:
        c = self._cols
        for i in range(len(self)):
            yield Impression(int(c["feed_id"][i]), int(c["user_id"][i]), int(c["video_id"][i]),
                             int(c["position"][i]), bool(c["examined"][i]), int(c["watch_ms"][i]),
                             int(c["duration_ms"][i]), int(c["ts"][i]))

    @property
    def labels(self) -> np.ndarray:
        return (self._cols["watch_ms"] >= 0.5 * self._cols["duration_ms"]).astype(np.int64)

    @classmethod
    def from_impressions(cls, impressions: Iterable[Impression]) -> "ImpressionLog":
        rows = list(impressions)
        return cls({name: [getattr(r, name) for r in rows] for name in _COLUMNS})

    @classmethod
    def concat(cls, logs: Sequence["ImpressionLog"]) -> "ImpressionLog":
        if not logs:
            return cls()
        return cls({name: np.concatenate([lg._cols[name] for lg in logs]) for name in _COLUMNS})

    def select(self, mask) -> "ImpressionLog":
        return ImpressionLog({name: col[mask] for name, col in self._cols.items()})

    def columns(self) -> dict:
        return dict(self._cols)

    def equals(self, other: "ImpressionLog") -> bool:
        return all(np.array_equal(self._cols[n], other._cols[n]) for n in _COLUMNS)

    # -- persistence -------------------------------------------------------

    def write(self, path) -> None:
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wt") as fh:
            for imp in self:
                fh.write(json.dumps(dataclasses.asdict(imp)) + "\n")

    @classmethod
    def read(cls, path) -> "ImpressionLog":
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        rows = []
        with opener(path, "rt") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(Impression(**json.loads(line)))
                    except (TypeError, ValueError) as exc:
                        raise DataError(f"{path}:{lineno}: bad impression record ({exc})") from None
        return cls.from_impressions(rows)


# -- world -----------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class SimWorld:
    cfg: WorldConfig
    centers: np.ndarray
    user_cluster: np.ndarray
    user_latent: np.ndarray
    attention_ms: np.ndarray
    product_cluster: np.ndarray
    product_latent: np.ndarray
    video_cluster: np.ndarray
    video_latent: np.ndarray
    index: VideoIndex
    histories: list
    products: EmbeddingProvider  # product "CLIP" embeddings
    hashtags: EmbeddingProvider
    catalog_users: EmbeddingProvider  # noisy user embeddings reused by the two-tower baseline
    content: EmbeddingProvider  # content/attribute embeddings for visual coherence
    request_ts: np.ndarray  # per-user serving time used by the loop
    _video_row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._video_row = {int(v): i for i, v in enumerate(self.index.ids)}

    @property
    def n_users(self) -> int:
        return self.cfg.n_users

    def video_row(self, video_id: int) -> int:
        try:
            return self._video_row[int(video_id)]
        except KeyError:
            raise UnknownEntity(f"unknown video id {video_id}") from None

    def relevance(self, user_id: int, video_ids) -> np.ndarray:
        rows = [self.video_row(v) for v in video_ids]
        return np.maximum(0.0, self.video_latent[rows] @ self.user_latent[user_id])

    def popular_products(self, n: int) -> list:
        return popular_products(self.histories, n)

    def profile_config(self, half_life_days: float = 7.0, max_history: int = 50,
                       popular_products: int = 100) -> ProfileConfig:
        fallback = global_fallback(self.popular_products(popular_products), self.products)
        lam = math.log(2.0) / (half_life_days * MS_PER_DAY)
        return ProfileConfig(fallback=fallback, lam=lam, max_history=max_history)

    def feature_spec(self, buckets: int = 8, creator_buckets: int = 64) -> FeatureSpec:
        return FeatureSpec.fit(self.index.durations, buckets, creator_buckets, self.cfg.d, self.cfg.d)

    def content_mean_users(self) -> np.ndarray:
        return np.stack([self.content.matrix(e.product_id for e in h.events).mean(axis=0) for h in self.histories])

    def content_mean_videos(self) -> np.ndarray:
        return np.stack([self.content.matrix(r.product_ids).mean(axis=0) for r in self.index.records])


def generate_world(cfg: WorldConfig) -> SimWorld:
    """Cluster-structured users, products and videos, fully determined by ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, STREAM_WORLD])
    d, C = cfg.d, cfg.taste_clusters
    shared = _unit_rows(rng.standard_normal(d))
    own = _unit_rows(rng.standard_normal((C, d)))
    centers = _unit_rows(cfg.shared_taste * shared + own)

    def latents(clusters: np.ndarray, spread: float = cfg.latent_spread) -> np.ndarray:
        noise = rng.standard_normal((clusters.size, d)) * (spread / math.sqrt(d))
        return _unit_rows(centers[clusters] + noise)

    user_cluster = rng.integers(0, C, cfg.n_users)
    user_latent = latents(user_cluster, cfg.user_spread)
    attention = np.maximum(
        5_000.0, rng.normal(cfg.attention_mean_ms, cfg.attention_spread_ms, cfg.n_users))
    product_cluster = np.arange(cfg.n_products) % C
    rng.shuffle(product_cluster)
    product_latent = latents(product_cluster)
    products_of = [np.flatnonzero(product_cluster == c) for c in range(C)]
    if any(p.size == 0 for p in products_of):
        raise DataError("world config: every taste cluster needs at least one product")

    creator_cluster = np.arange(cfg.n_creators) % C
    creators_of = [np.flatnonzero(creator_cluster == c) for c in range(C)]
    tag_cluster = np.arange(cfg.n_hashtags) % C
    tags_of = [np.flatnonzero(tag_cluster == c) for c in range(C)]
    tag_latent = latents(tag_cluster)
    hashtags = EmbeddingProvider("hashtags", d)
    for t in range(cfg.n_hashtags):
        hashtags.add(hashtag_key(f"tag{t}"), tag_latent[t])

    video_cluster = rng.integers(0, C, cfg.n_videos)
    video_latent = latents(video_cluster)
    durations = rng.integers(cfg.duration_min_ms, cfg.duration_max_ms + 1, cfg.n_videos)
    upload_ts = cfg.t_end - rng.integers(0, cfg.upload_days * MS_PER_DAY, cfg.n_videos)
    frame_noise = cfg.frame_noise / math.sqrt(d)
    records = []
    for v in range(cfg.n_videos):
        c = video_cluster[v]
        n_prod = int(rng.integers(1, 6))
        prods = rng.choice(products_of[c], size=min(n_prod, products_of[c].size), replace=False)
        creator = int(rng.choice(creators_of[c])) if creators_of[c].size else int(rng.integers(cfg.n_creators))
        n_tags = int(rng.integers(0, 4))
        tags = rng.choice(tags_of[c], size=min(n_tags, tags_of[c].size), replace=False) if tags_of[c].size else []
        frames = video_latent[v] + frame_noise * rng.standard_normal((cfg.frames_per_video, d))
        records.append(VideoRecord(
            video_id=v, embedding=mean_pool(list(frames)), duration_ms=int(durations[v]),
            upload_ts=int(upload_ts[v]), creator_id=creator,
            product_ids=tuple(int(p) for p in sorted(prods)), hashtags=tuple(f"tag{t}" for t in sorted(tags)),
        ))
    index = VideoIndex(records, build_ts=cfg.t_end)

    log_start = cfg.t_end - cfg.log_days * MS_PER_DAY
    histories = []
    kinds = list(InteractionKind)
    for u in range(cfg.n_users):
        n = int(rng.integers(cfg.history_min, cfg.history_max + 1))
        off = rng.random(n) < cfg.history_off_cluster
        own = products_of[user_cluster[u]]
        # in-cluster picks lean towards products close to the user's own taste
        affinity = cfg.history_focus * (product_latent[own] @ user_latent[u])
        p_own = np.exp(affinity - affinity.max())
        p_own /= p_own.sum()
        picks = own[rng.choice(own.size, size=n, p=p_own)]
        other = rng.integers(0, cfg.n_products, n)
        prods = np.where(off, other, picks).tolist()
        ts = np.sort(log_start - rng.integers(0, cfg.history_days * MS_PER_DAY, n))
        kind_idx = rng.integers(0, len(kinds), n)
        histories.append(UserHistory(u, tuple(
            InteractionEvent(p, int(t), kinds[k]) for p, t, k in zip(prods, ts, kind_idx))))

    product_provider = EmbeddingProvider.from_arrays("products", np.arange(cfg.n_products), product_latent)
    catalog = user_latent + rng.standard_normal(user_latent.shape) * (cfg.catalog_noise / math.sqrt(d))
    catalog_users = EmbeddingProvider.from_arrays("catalog_users", np.arange(cfg.n_users), catalog)

    color = rng.integers(0, cfg.n_colors, cfg.n_products)
    content = np.zeros((cfg.n_products, C + cfg.n_colors))
    content[np.arange(cfg.n_products), product_cluster] = 1.0
    content[np.arange(cfg.n_products), C + color] = 0.5
    content += cfg.content_noise * rng.standard_normal(content.shape)
    content_provider = EmbeddingProvider.from_arrays(
        "content", np.arange(cfg.n_products), cfg.content_scale * content)

    # one serving time per user inside the final day
    request_ts = cfg.t_end - rng.integers(0, MS_PER_DAY, cfg.n_users)
    return SimWorld(
        cfg=cfg, centers=centers, user_cluster=user_cluster, user_latent=user_latent, attention_ms=attention,
        product_cluster=product_cluster, product_latent=product_latent, video_cluster=video_cluster,
        video_latent=video_latent, index=index, histories=histories, products=product_provider,
        hashtags=hashtags, catalog_users=catalog_users, content=content_provider, request_ts=request_ts,
    )


# -- feed simulation -------------------------------------------------------

def examination_probability(position, gamma: float):
    return np.power(np.asarray(position, dtype=np.float64), -gamma)


def simulate_feed(world: SimWorld, feed: RankedFeed, feed_id: int, ts: int,
                  gamma: float | None = None, noise_sigma: float | None = None) -> list:
    """Impressions for one served feed; deterministic in (world seed, feed_id)."""
    cols = simulate_feed_columns(world, feed.user_id, feed.video_ids, feed_id, ts, gamma, noise_sigma)
    return list(ImpressionLog(cols))


def simulate_feed_columns(world: SimWorld, user_id: int, video_ids: Sequence[int], feed_id: int, ts: int,
                          gamma: float | None = None, noise_sigma: float | None = None) -> dict:
    cfg = world.cfg
    gamma = cfg.gamma if gamma is None else gamma
    noise_sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    n = len(video_ids)
    rows = np.array([world.video_row(v) for v in video_ids], dtype=np.int64)
    positions = np.arange(1, n + 1)
    u_exam = np.random.default_rng([cfg.seed, STREAM_EXAMINE, feed_id]).random(n)
    examined = u_exam < examination_probability(positions, gamma)
    examined[:1] = True
    eps = np.random.default_rng([cfg.seed, STREAM_WATCH, feed_id]).standard_normal(n) * noise_sigma
    relevance = np.maximum(0.0, world.video_latent[rows] @ world.user_latent[user_id])
    durations = world.index.durations[rows]
    raw = np.round(world.attention_ms[user_id] * relevance * (1.0 + eps))
    watch = np.clip(raw, 0, durations).astype(np.int64)
    watch[~examined] = 0
    return {
        "feed_id": np.full(n, feed_id), "user_id": np.full(n, user_id), "video_id": np.asarray(video_ids),
        "position": positions, "examined": examined, "watch_ms": watch, "duration_ms": durations,
        "ts": np.full(n, ts),
    }


def simulate_feeds(world: SimWorld, feeds: Sequence[tuple]) -> ImpressionLog:
    """Simulate many ``(feed_id, user_id, video_ids, ts)`` feeds into one log."""
    parts = [simulate_feed_columns(world, u, vids, fid, ts) for fid, u, vids, ts in feeds if len(vids)]
    if not parts:
        return ImpressionLog()
    return ImpressionLog({name: np.concatenate([p[name] for p in parts]) for name in _COLUMNS})


def logging_log(world: SimWorld) -> ImpressionLog:
    """Impressions from the recency feed served at random session times over the log window."""
    cfg = world.cfg
    rng = np.random.default_rng([cfg.seed, STREAM_SESSIONS])
    start = cfg.t_end - cfg.log_days * MS_PER_DAY
    up_sorted = world.index.recency_order()
    up_ts = world.index.upload_ts[up_sorted]
    feeds = []
    for u in range(cfg.n_users):
        times = np.sort(start + rng.integers(0, cfg.log_days * MS_PER_DAY, cfg.sessions_per_user))
        for s, t in enumerate(times):
            # up_ts is descending; skip videos uploaded after t
            first = int(np.searchsorted(-up_ts, -t, side="left"))
            vids = world.index.ids[up_sorted[first:first + cfg.feed_len]]
            feeds.append((u * cfg.sessions_per_user + s, u, vids.tolist(), int(t)))
    return simulate_feeds(world, feeds)


# -- training data ---------------------------------------------------------

def train_on_log(world: SimWorld, log: ImpressionLog, spec: FeatureSpec, features: np.ndarray,
                 hyper: TrainHyper):
    users = world.catalog_users.matrix(log.user_id.tolist())
    rows = np.array([world.video_row(v) for v in log.video_id], dtype=np.int64)
    return train_conventional_arrays(users, features, log.labels.astype(np.float64), spec, hyper, rows=rows)


# -- feedback loop ---------------------------------------------------------

def _skew_or_zero(values) -> float:
    from vidrec.metrics import skewness

    try:
        return skewness(values)
    except DataError:
        return 0.0  # constant exposure (e.g. one shared feed) has no skew


def gini(counts: np.ndarray) -> float:
    x = np.sort(np.asarray(counts, dtype=np.float64))
    if x.sum() == 0:
        return 0.0
    n = x.size
    return float((2.0 * np.arange(1, n + 1) - n - 1) @ x / (n * x.sum()))


@dataclass
class LoopReport:
    policy: str
    rounds: int
    k: int
    retrain_every: int
    mean_duration_ms: list = field(default_factory=list)
    popularity_skew: list = field(default_factory=list)
    exposure_gini: list = field(default_factory=list)
    positive_rate: list = field(default_factory=list)
    log_size: list = field(default_factory=list)
    log: ImpressionLog | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("policy", "rounds", "k", "retrain_every", "mean_duration_ms",
                                              "popularity_skew", "exposure_gini", "positive_rate", "log_size")}


def serve_round(world: SimWorld, policy: Policy, k: int, *, profile_cfg: ProfileConfig | None = None,
                table: TowerTable | None = None) -> list:
    """One feed per user at the user's fixed request time: ``(user_id, video_ids, ts)``."""
    out = []
    for u in range(world.cfg.n_users):
        t = int(world.request_ts[u])
        if policy is Policy.RECENCY:
            feed = rank_recency(world.index, k, as_of=t, user_id=u)
        elif policy is Policy.MULTIMODAL:
            feed = rank_multimodal(world.index, world.histories[u], world.products, t, profile_cfg, k, as_of=t)
        else:
            ids = [v for v, _ in table.top_k(world.catalog_users[u], k, as_of=t)]
            out.append((u, ids, t))
            continue
        out.append((u, feed.video_ids, t))
    return out


def run_feedback_loop(world: SimWorld, policy: Policy | str, rounds: int, k: int, retrain_every: int = 1,
                      hyper: TrainHyper | None = None, profile_cfg: ProfileConfig | None = None,
                      bootstrap: ImpressionLog | None = None, keep_log: bool = True,
                      progress: Callable[[int], None] | None = None,
                      bootstrap_days: float | None = None) -> LoopReport:
    """Serve, simulate and (for the trained policy) retrain for ``rounds`` rounds.

    Round metrics describe the served recommendations. The conventional
    policy starts from a model trained on the recency-served bootstrap log;
    ``bootstrap_days`` keeps only its first days.
    """
    policy = Policy(policy)
    if rounds < 1:
        raise DataError("rounds must be at least 1")
    if retrain_every < 1:
        raise DataError("retrain_every must be at least 1")
    hyper = hyper or TrainHyper()
    profile_cfg = profile_cfg or world.profile_config()
    log = bootstrap if bootstrap is not None else logging_log(world)
    if bootstrap_days is not None:
        if bootstrap_days <= 0:
            raise DataError("bootstrap_days must be positive")
        if len(log):
            log = log.select(log.ts < log.ts.min() + bootstrap_days * MS_PER_DAY)
    spec = features = table = None
    if policy is Policy.CONVENTIONAL:
        spec = world.feature_spec()
        features = featurize_index(world.index, world.products, world.hashtags, spec)
        try:
            table = TowerTable(train_on_log(world, log, spec, features, hyper), world.index, features)
        except TrainingError as exc:
            raise TrainingError(f"round 0 (bootstrap): {exc}") from exc
    report = LoopReport(policy.value, rounds, k, retrain_every)
    n_videos = len(world.index)
    for r in range(1, rounds + 1):
        served = serve_round(world, policy, k, profile_cfg=profile_cfg, table=table)
        base = r * 10 ** 8
        feeds = [(base + u, u, vids, t) for u, vids, t in served]
        round_log = simulate_feeds(world, feeds)
        log = ImpressionLog.concat([log, round_log])
        rows = np.array([world.video_row(v) for _, vids, _ in served for v in vids], dtype=np.int64)
        exposure = np.bincount(rows, minlength=n_videos)
        report.mean_duration_ms.append(float(world.index.durations[rows].mean()))
        report.popularity_skew.append(_skew_or_zero(exposure))
        report.exposure_gini.append(gini(exposure))
        report.positive_rate.append(float(round_log.labels.mean()))
        report.log_size.append(len(log))
        if policy is Policy.CONVENTIONAL and r < rounds and r % retrain_every == 0:
            try:
                table = TowerTable(train_on_log(world, log, spec, features, hyper), world.index, features)
            except TrainingError as exc:
                raise TrainingError(f"round {r}: {exc}") from exc
        if progress:
            progress(r)
    if keep_log:
        report.log = log
    return report
