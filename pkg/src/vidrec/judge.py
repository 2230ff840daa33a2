"""Vision-language-model judge harness: prompt rendering, verdict parsing, mock and HTTP clients."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Protocol, Sequence

import numpy as np

from vidrec.errors import DataError, ExternalServiceError, UnknownEntity
from vidrec.index import VideoRecord
from vidrec.profiler import UserHistory
from vidrec.rankers import RankedFeed

log = logging.getLogger(__name__)

MAX_USER_ITEMS = 12
NO_HISTORY = "(no recent items: new shopper)"
_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")


class Category(str, enum.Enum):
    EXCELLENT = "excellent_match"
    GOOD = "good_match"
    PARTIAL = "partial_match"
    POOR = "poor_match"
    NONE = "no_match"


SCORES = {Category.EXCELLENT: 5, Category.GOOD: 4, Category.PARTIAL: 3, Category.POOR: 2, Category.NONE: 1}
_CATEGORY_RE = re.compile(r"\b(" + "|".join(c.value for c in Category) + r")\b")


class UnparseableVerdict(DataError):
    def __init__(self, raw: str):
        super().__init__(f"no relevance category in judge response: {raw[:200]!r}")
        self.raw = raw


class TransportError(ExternalServiceError):
    pass


def default_template() -> str:
    return resources.files("vidrec").joinpath("data/judge_prompt.txt").read_text()


@dataclass(frozen=True)
class ItemDescriptor:
    product_id: int
    title: str
    attributes: tuple = ()
    image_ref: str = ""

    def render(self) -> str:
        attrs = ", ".join(self.attributes) if self.attributes else "none"
        return f"{self.title} [product {self.product_id}; attributes: {attrs}; image: {self.image_ref}]"


@dataclass(frozen=True)
class VideoDescriptor:
    video_id: int
    duration_ms: int
    product_ids: tuple = ()
    hashtags: tuple = ()
    creator_id: int = 0
    frame_refs: tuple = ()  # attachment slot, empty at desk scale

    def render(self) -> str:
        prods = ", ".join(str(p) for p in self.product_ids) or "none"
        tags = " ".join(f"#{t}" for t in self.hashtags) or "none"
        return (f"video {self.video_id} by creator {self.creator_id}, {self.duration_ms / 1000:.1f}s; "
                f"featured products: {prods}; hashtags: {tags}")

    @classmethod
    def from_record(cls, rec: VideoRecord) -> "VideoDescriptor":
        return cls(rec.video_id, rec.duration_ms, rec.product_ids, rec.hashtags, rec.creator_id)


def describe_product_default(product_id: int) -> ItemDescriptor:
    return ItemDescriptor(product_id, f"Product {product_id}", (), f"img://product/{product_id}")


_STYLES = ("streetwear", "tailoring", "athleisure", "boho", "minimalist", "evening wear")
_COLOURS = ("black", "white", "navy", "red", "beige", "green", "pastel pink", "grey")


def world_describer(world) -> Callable[[int], ItemDescriptor]:
    """Descriptors read off a simulated world's content embeddings (style block, then colour block)."""
    C = world.cfg.taste_clusters

    def describe(product_id: int) -> ItemDescriptor:
        vec = world.content[product_id]
        style = int(np.argmax(vec[:C]))
        colour = int(np.argmax(vec[C:]))
        style_name = _STYLES[style] if style < len(_STYLES) else f"style {style}"
        colour_name = _COLOURS[colour] if colour < len(_COLOURS) else f"colour {colour}"
        return ItemDescriptor(product_id, f"{colour_name} {style_name} item",
                              (f"style: {style_name}", f"colour: {colour_name}"), f"img://product/{product_id}")

    return describe


@dataclass(frozen=True)
class JudgePrompt:
    system_text: str
    user_items: tuple
    candidate: VideoDescriptor
    attachments: tuple = ()

    def __post_init__(self):
        if len(self.user_items) > MAX_USER_ITEMS:
            raise DataError(f"at most {MAX_USER_ITEMS} user items per prompt")
        leftover = _PLACEHOLDER.search(self.system_text)
        if leftover:
            raise DataError(f"unresolved placeholder {leftover.group(0)} in prompt")

    @property
    def text(self) -> str:
        return self.system_text


def render_prompt(history: UserHistory, candidate: VideoRecord, template: str | None = None,
                  describe: Callable[[int], ItemDescriptor] = describe_product_default) -> JudgePrompt:
    """Fill the template with the 12 most recent items (newest first) and the candidate video."""
    template = default_template() if template is None else template
    items = tuple(describe(e.product_id) for e in reversed(history.events[-MAX_USER_ITEMS:]))
    video = VideoDescriptor.from_record(candidate)
    listing = "\n".join(f"{i}. {it.render()}" for i, it in enumerate(items, 1)) if items else NO_HISTORY
    values = {"n_items": str(len(items)), "user_items": listing, "candidate": video.render()}

    def fill(m):
        key = m.group(1)
        if key not in values:
            raise DataError(f"unresolved placeholder {m.group(0)} in template")
        return values[key]

    return JudgePrompt(_PLACEHOLDER.sub(fill, template), items, video)


@dataclass(frozen=True)
class JudgeVerdict:
    category: Category
    score: int
    raw_response: str = ""


def parse_verdict(raw: str) -> JudgeVerdict:
    m = _CATEGORY_RE.search(raw)
    if not m:
        raise UnparseableVerdict(raw)
    cat = Category(m.group(1))
    return JudgeVerdict(cat, SCORES[cat], raw)


def category_for_cosine(cos: float) -> Category:
    if cos >= 0.8:
        return Category.EXCELLENT
    if cos >= 0.6:
        return Category.GOOD
    if cos >= 0.4:
        return Category.PARTIAL
    if cos >= 0.2:
        return Category.POOR
    return Category.NONE


def mock_judge(prompt: JudgePrompt, world) -> JudgeVerdict:
    """Offline judge: cosine between the mean latent of the user's items and the video latent."""
    cfg = world.cfg
    vid = prompt.candidate.video_id
    if not 0 <= vid < cfg.n_videos:
        raise UnknownEntity(f"unknown video id {vid}")
    if not prompt.user_items:
        cat = Category.NONE
    else:
        pids = [it.product_id for it in prompt.user_items]
        if any(not 0 <= p < cfg.n_products for p in pids):
            raise UnknownEntity(f"unknown product among {pids}")
        u = world.product_latent[pids].mean(axis=0)
        v = world.video_latent[world.video_row(vid)]
        denom = np.linalg.norm(u) * np.linalg.norm(v)
        cat = category_for_cosine(float(u @ v / denom) if denom > 0 else 0.0)
    return JudgeVerdict(cat, SCORES[cat], f"category: {cat.value}")


class JudgeClient(Protocol):
    def __call__(self, prompt: JudgePrompt) -> str: ...


class MockJudgeClient:
    def __init__(self, world):
        self.world = world

    def __call__(self, prompt: JudgePrompt) -> str:
        return mock_judge(prompt, self.world).raw_response


class HttpJudgeClient:
    """Minimal chat-completion style client; endpoint and token from JUDGE_URL / JUDGE_TOKEN."""

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 30.0,
                 model: str = "judge"):
        self.url = url or os.environ.get("JUDGE_URL")
        self.token = token if token is not None else os.environ.get("JUDGE_TOKEN", "")
        if not self.url:
            raise ExternalServiceError("JUDGE_URL is not set")
        self.timeout = timeout
        self.model = model

    def __call__(self, prompt: JudgePrompt) -> str:
        body = json.dumps({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt.text}],
        }).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError, ValueError) as exc:
            raise TransportError(f"judge request failed: {exc}") from exc
        return extract_text(payload)


def extract_text(payload) -> str:
    """Text of a judge response: chat-completion ``choices`` or a bare ``content``/``text`` field."""
    if isinstance(payload, dict):
        if payload.get("choices"):
            choice = payload["choices"][0]
            msg = choice.get("message") or {}
            if "content" in msg:
                return str(msg["content"])
            if "text" in choice:
                return str(choice["text"])
        for key in ("content", "text", "response"):
            if key in payload:
                return str(payload[key])
    raise TransportError(f"unrecognised judge response shape: {str(payload)[:200]}")


@dataclass
class JudgeResult:
    user_id: int
    k: int
    mean_score: float
    verdicts: list = field(default_factory=list)


def _call_with_retry(client: JudgeClient, prompt: JudgePrompt, retries: int, backoff_s: float,
                     sleep=time.sleep) -> str:
    for attempt in range(retries + 1):
        try:
            return client(prompt)
        except TransportError:
            if attempt == retries:
                raise
            log.warning("judge transport error, retry %d/%d", attempt + 1, retries)
            sleep(backoff_s * 2 ** attempt)
    raise AssertionError("unreachable")


def judge_topk(client: JudgeClient, history: UserHistory, feed: RankedFeed, k: int,
               records: Callable[[int], VideoRecord], template: str | None = None,
               describe: Callable[[int], ItemDescriptor] = describe_product_default,
               max_in_flight: int = 4, retries: int = 3, backoff_s: float = 0.5,
               sleep=time.sleep) -> JudgeResult:
    """Mean judge score over the first ``min(k, len(feed))`` videos; verdicts keep feed order."""
    if len(feed) == 0:
        raise DataError("cannot judge an empty feed")
    if k < 1:
        raise DataError("k must be at least 1")
    template = default_template() if template is None else template
    prompts = [render_prompt(history, records(vid), template, describe) for vid in feed.video_ids[:k]]

    def one(i):
        try:
            raw = _call_with_retry(client, prompts[i], retries, backoff_s, sleep)
        except TransportError as exc:
            raise ExternalServiceError(f"user {feed.user_id}: judge failed at candidate {i}: {exc}") from exc
        return parse_verdict(raw)

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        verdicts = list(pool.map(one, range(len(prompts))))
    return JudgeResult(feed.user_id, k, float(np.mean([v.score for v in verdicts])), verdicts)


def score_histogram(scores: Sequence[int]) -> dict:
    counts = {s: 0 for s in range(1, 6)}
    for s in scores:
        counts[int(s)] += 1
    return counts


def judge_report(client: JudgeClient, feeds: Sequence[RankedFeed], histories: Callable[[int], UserHistory],
                 ks: Sequence[int], records: Callable[[int], VideoRecord], template: str | None = None,
                 describe: Callable[[int], ItemDescriptor] = describe_product_default,
                 max_in_flight: int = 4, retries: int = 3, backoff_s: float = 0.5, sleep=time.sleep) -> dict:
    """Judge every feed once at the largest k and summarise each k from the verdict prefixes.

    A user whose judging fails is listed under ``failures`` and left out of the summaries.
    """
    if not ks or min(ks) < 1:
        raise DataError("judge needs at least one k >= 1")
    k_max = max(ks)
    per_user, failures = [], []
    for feed in feeds:
        try:
            res = judge_topk(client, histories(feed.user_id), feed, k_max, records, template, describe,
                             max_in_flight, retries, backoff_s, sleep)
        except ExternalServiceError as exc:
            failures.append({"user_id": feed.user_id, "error": str(exc)})
            continue
        per_user.append({"user_id": feed.user_id, "video_ids": feed.video_ids[:k_max],
                         "scores": [v.score for v in res.verdicts]})
    summary = {}
    for k in sorted(set(ks)):
        means = [float(np.mean(u["scores"][:k])) for u in per_user]
        flat = [s for u in per_user for s in u["scores"][:k]]
        summary[str(k)] = {
            "mean": float(np.mean(means)) if means else None,
            "std": float(np.std(means)) if means else None,
            "n_users": len(means),
            "histogram": {str(s): c for s, c in score_histogram(flat).items()},
        }
    return {"summary": summary, "users": per_user, "failures": failures}
