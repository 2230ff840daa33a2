"""Offline evaluation: time split, IPS-weighted NDCG, point-wise metrics, skewness, coherence."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from vidrec import _kernels
from vidrec.embedding import MS_PER_DAY, as_embedding, dot_score
from vidrec.errors import DataError, DimensionMismatch
from vidrec.rankers import RankedFeed
from vidrec.simulator import ImpressionLog


def time_split(log: ImpressionLog, holdout_days: float):
    """Train/test split: test holds impressions from the last ``holdout_days`` before the newest one."""
    if len(log) == 0:
        raise DataError("cannot split an empty log")
    boundary = int(log.ts.max() - holdout_days * MS_PER_DAY)
    test_mask = log.ts >= boundary
    if test_mask.all():
        raise DataError(f"holdout of {holdout_days} days leaves no training impressions")
    return log.select(~test_mask), log.select(test_mask), boundary


@dataclass(frozen=True)
class LabeledFeed:
    feed_id: int
    items: tuple  # (video_id, label, position, propensity)

    def __post_init__(self):
        for i, (_, label, pos, prop) in enumerate(self.items, 1):
            if pos != i:
                raise DataError(f"feed {self.feed_id}: positions must run 1..n")
            if not prop > 0:
                raise DataError(f"feed {self.feed_id}: propensities must be positive")
            if label not in (0, 1):
                raise DataError(f"feed {self.feed_id}: labels must be binary")

    @property
    def eligible(self) -> bool:
        labels = {it[1] for it in self.items}
        return labels == {0, 1}


def ips_gains(labels, propensities, use_ips: bool, cap: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not use_ips:
        return labels
    return labels * np.minimum(1.0 / np.asarray(propensities, dtype=np.float64), cap)


def ndcg(feed: LabeledFeed, use_ips: bool = False, propensity_cap: float = 10.0) -> float:
    """NDCG of the served order; gains optionally weighted by capped inverse propensity."""
    if not feed.eligible:
        raise DataError(f"feed {feed.feed_id} needs at least one positive and one negative item")
    gains = ips_gains([it[1] for it in feed.items], [it[3] for it in feed.items], use_ips, propensity_cap)
    return float(_kernels.segment_ndcg(gains, np.array([0, gains.size], dtype=np.int64))[0])


def ndcg_many(gains: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return _kernels.segment_ndcg(np.ascontiguousarray(gains, dtype=np.float64),
                                 np.ascontiguousarray(offsets, dtype=np.int64))


def auc(scores, labels) -> float:
    labels = np.asarray(labels)
    if labels.size and (labels.all() or not labels.any()):
        raise DataError("AUC needs both classes")
    if labels.size == 0:
        raise DataError("AUC of an empty sample")
    return float(_kernels.auc(np.ascontiguousarray(scores, dtype=np.float64),
                              np.ascontiguousarray(labels, dtype=np.uint8)))


def binary_metrics(scores, labels, threshold: float = 0.5):
    """(accuracy, precision, recall, auc); ``auc`` is None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    if scores.size == 0:
        raise DataError("no scores to evaluate")
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    accuracy = float(np.mean(pred == labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    both = labels.any() and not labels.all()
    return accuracy, precision, recall, (auc(scores, labels) if both else None)


def skewness(samples) -> float:
    """Fisher-Pearson g1 with population moments."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 3:
        raise DataError("skewness needs at least 3 samples")
    c = x - x.mean()
    m2 = np.mean(c * c)
    if m2 == 0.0:
        raise DataError("skewness of a constant sample is undefined")
    return float(np.mean(c ** 3) / m2 ** 1.5)


def popularity_counts(log: ImpressionLog, window: tuple | None = None, cooccurrence: bool = False) -> dict:
    """Examined-impression count per video, or with ``cooccurrence`` the count per in-feed video pair."""
    mask = log.examined.copy()
    if window is not None:
        lo, hi = window
        mask &= (log.ts >= lo) & (log.ts < hi)
    if not cooccurrence:
        return dict(Counter(int(v) for v in log.video_id[mask]))
    by_feed: dict = {}
    for fid, vid in zip(log.feed_id[mask], log.video_id[mask]):
        by_feed.setdefault(int(fid), []).append(int(vid))
    pairs: Counter = Counter()
    for vids in by_feed.values():
        uniq = sorted(set(vids))
        for i, a in enumerate(uniq):
            for b in uniq[i + 1:]:
                pairs[(a, b)] += 1
    return dict(pairs)


def cooccurrence_popularity(pair_counts: dict) -> dict:
    out: Counter = Counter()
    for (a, b), n in pair_counts.items():
        out[a] += n
        out[b] += n
    return dict(out)


def visual_coherence(user_content_embs: Sequence, video_product_embs: Sequence) -> float:
    """Dot product of the mean content embedding of a user's history and of a video's products."""
    if len(user_content_embs) == 0 or len(video_product_embs) == 0:
        raise DataError("visual coherence needs non-empty user and video sides")
    u = np.stack([as_embedding(e) for e in user_content_embs]).mean(axis=0)
    v = np.stack([as_embedding(e) for e in video_product_embs]).mean(axis=0)
    if u.shape != v.shape:
        raise DimensionMismatch("user and video content embeddings differ in dimension")
    return dot_score(u, v)


# -- policy report ---------------------------------------------------------

@dataclass
class EvalReport:
    policy: str
    ndcg: float | None
    ndcg_ips: float | None
    accuracy: float
    auc: float | None
    precision: float
    recall: float
    skew_popularity: float
    skew_watch_time: float
    skew_duration: float
    mean_rec_duration_ms: float
    catalog_mean_duration_ms: float
    coherence_mean: float | None
    coherence_std: float | None
    n_impressions: int
    n_feeds: int
    n_eligible_feeds: int
    n_users: int
    split_ts: int | None = None
    k_rec: int = 10
    k_coherence: int = 100
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class EvalContext:
    """What the evaluator needs to know about the catalog and users."""

    durations: Callable  # video ids -> duration ms array
    catalog_mean_duration_ms: float
    gamma: float
    propensity_cap: float = 10.0
    threshold: float = 0.5
    k_rec: int = 10
    k_coherence: int = 100
    user_content: Callable | None = None  # user id -> mean content embedding
    video_content: Callable | None = None  # video ids -> mean content embeddings (rows)
    simulate_watch: Callable | None = None  # list of RankedFeed -> watch_ms of examined impressions
    catalog_size: int | None = None  # when set, never-recommended videos count as zero exposure


def exposure_counts(exposure: Counter, catalog_size: int | None = None) -> np.ndarray:
    """Recommendation counts per video, zero-padded to the catalog size if given."""
    counts = np.array(sorted(exposure.values()), dtype=np.float64)
    if catalog_size is not None:
        if catalog_size < counts.size:
            raise DataError("catalog smaller than the set of recommended videos")
        counts = np.concatenate([np.zeros(catalog_size - counts.size), counts])
    return counts


def _safe_skew(values) -> float:
    try:
        return skewness(values)
    except DataError:
        return 0.0


def feedwise_ndcg(test_log: ImpressionLog, scores: np.ndarray, gamma: float, cap: float):
    """Mean NDCG / IPS-NDCG after re-ranking every eligible logged feed by ``scores``.

    Gains carry the propensity of each item's logged position. Ties keep the
    logged order. Returns (ndcg, ndcg_ips, n_eligible); means are None when
    no feed is eligible.
    """
    labels = test_log.labels
    order = np.lexsort((test_log.position, test_log.feed_id))
    fids = test_log.feed_id[order]
    bounds = np.flatnonzero(np.diff(fids)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [fids.size]])
    plain, ips, offsets = [], [], [0]
    for s, e in zip(starts, ends):
        rows = order[s:e]
        lab = labels[rows]
        if lab.all() or not lab.any():
            continue
        # stable sort by descending score keeps logged order on ties
        rows = rows[np.argsort(-scores[rows], kind="stable")]
        props = np.power(test_log.position[rows].astype(np.float64), -gamma)
        plain.append(ips_gains(labels[rows], props, False, cap))
        ips.append(ips_gains(labels[rows], props, True, cap))
        offsets.append(offsets[-1] + rows.size)
    if not plain:
        return None, None, 0
    offsets = np.array(offsets, dtype=np.int64)
    n_plain = ndcg_many(np.concatenate(plain), offsets)
    n_ips = ndcg_many(np.concatenate(ips), offsets)
    return float(n_plain.mean()), float(n_ips.mean()), len(plain)


def evaluate_policy(policy: str, feeds: Sequence[RankedFeed], test_log: ImpressionLog,
                    pointwise_scores: np.ndarray, ctx: EvalContext, split_ts: int | None = None,
                    probabilities: np.ndarray | None = None) -> EvalReport:
    """Aggregate every metric for one policy.

    ``feeds`` are the policy's recommendations (at least ``ctx.k_coherence``
    long where possible); ``pointwise_scores`` align with ``test_log`` rows.
    ``probabilities`` (default: the scores) are thresholded for accuracy,
    precision and recall.
    """
    if not feeds or all(len(f) == 0 for f in feeds):
        raise DataError(f"policy {policy}: no recommendations to evaluate")
    if len(test_log) == 0:
        raise DataError("empty test log")
    scores = np.asarray(pointwise_scores, dtype=np.float64)
    if scores.shape != (len(test_log),):
        raise DataError("point-wise scores must align with the test log")
    probs = scores if probabilities is None else np.asarray(probabilities, dtype=np.float64)
    labels = test_log.labels
    acc, prec, rec, auc_value = binary_metrics(probs, labels, ctx.threshold)
    if auc_value is not None:
        auc_value = auc(scores, labels)
    nd, nd_ips, n_eligible = feedwise_ndcg(test_log, scores, ctx.gamma, ctx.propensity_cap)

    top = [f.head(ctx.k_rec) for f in feeds]
    rec_ids = [v for f in top for v in f.video_ids]
    exposure = Counter(rec_ids)
    rec_durations = np.asarray(ctx.durations(rec_ids), dtype=np.float64)
    watch = np.asarray(ctx.simulate_watch(top), dtype=np.float64) if ctx.simulate_watch else np.zeros(0)

    coh_mean = coh_std = None
    if ctx.user_content is not None and ctx.video_content is not None:
        per_user = []
        for f in feeds:
            ids = f.video_ids[:ctx.k_coherence]
            if ids:
                per_user.append(float(np.mean(ctx.video_content(ids) @ ctx.user_content(f.user_id))))
        coh_mean, coh_std = float(np.mean(per_user)), float(np.std(per_user))

    return EvalReport(
        policy=policy,
        ndcg=nd,
        ndcg_ips=nd_ips,
        accuracy=acc,
        auc=auc_value,
        precision=prec,
        recall=rec,
        skew_popularity=_safe_skew(exposure_counts(exposure, ctx.catalog_size)),
        skew_watch_time=_safe_skew(watch) if watch.size >= 3 else 0.0,
        skew_duration=_safe_skew(rec_durations),
        mean_rec_duration_ms=float(rec_durations.mean()),
        catalog_mean_duration_ms=float(ctx.catalog_mean_duration_ms),
        coherence_mean=coh_mean,
        coherence_std=coh_std,
        n_impressions=len(test_log),
        n_feeds=int(np.unique(test_log.feed_id).size),
        n_eligible_feeds=n_eligible,
        n_users=len(feeds),
        split_ts=split_ts,
        k_rec=ctx.k_rec,
        k_coherence=ctx.k_coherence,
    )


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned side-by-side table of the headline metrics."""
    cols = [
        ("ndcg", "NDCG"), ("ndcg_ips", "NDCG-IPS"), ("auc", "AUC"), ("accuracy", "Acc"),
        ("precision", "Prec"), ("recall", "Rec"), ("skew_popularity", "SkewPop"),
        ("skew_watch_time", "SkewWatch"), ("skew_duration", "SkewDur"),
        ("mean_rec_duration_ms", "MeanDur(s)"), ("coherence_mean", "Coherence"),
    ]
    header = ["policy"] + [label for _, label in cols]
    rows = []
    for r in reports:
        row = [r.policy]
        for key, _ in cols:
            v = getattr(r, key)
            if v is None:
                row.append("-")
            elif key == "mean_rec_duration_ms":
                row.append(f"{v / 1000:.1f}")
            else:
                row.append(f"{v:.4f}")
        rows.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def platt_fit(scores, labels, iters: int = 50):
    """Fit p = sigmoid(a * z + b) on standardised scores by Newton's method.

    Returns a callable mapping raw scores to probabilities.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    mu, sd = float(s.mean()), float(s.std()) or 1.0
    z = (s - mu) / sd
    X = np.stack([z, np.ones_like(z)], axis=1)
    w = np.zeros(2)
    for _ in range(iters):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ w)))
        grad = X.T @ (p - y)
        hess = X.T @ (X * (p * (1 - p))[:, None]) + 1e-9 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    a, b = w

    def predict(raw):
        zz = (np.asarray(raw, dtype=np.float64) - mu) / sd
        return 0.5 * (1.0 + np.tanh(0.5 * (a * zz + b)))

    return predict
