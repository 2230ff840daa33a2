"""Online user profile: recency-decayed mean of product embeddings from history."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vidrec.embedding import EmbeddingProvider, as_embedding, decayed_mean
from vidrec.errors import DataError, DimensionMismatch, FormatError

# half-life of 7 days, per ms
DEFAULT_LAMBDA = math.log(2.0) / (7 * 86_400_000)
DEFAULT_MAX_HISTORY = 50


class InteractionKind(str, enum.Enum):
    CLICK = "click"
    ADD_TO_CART = "add_to_cart"
    WISHLIST = "wishlist"
    PURCHASE = "purchase"


@dataclass(frozen=True)
class InteractionEvent:
    product_id: int
    ts: int
    kind: InteractionKind = InteractionKind.CLICK

    def __post_init__(self):
        object.__setattr__(self, "kind", InteractionKind(self.kind))
        object.__setattr__(self, "ts", int(self.ts))


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    events: tuple = ()

    def __post_init__(self):
        events = tuple(e if isinstance(e, InteractionEvent) else InteractionEvent(**e) for e in self.events)
        for a, b in zip(events, events[1:]):
            if b.ts < a.ts:
                raise DataError(f"user {self.user_id}: events not sorted by timestamp")
        object.__setattr__(self, "events", events)

    def recent(self, n: int) -> tuple:
        return self.events[-n:] if n > 0 else ()

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "events": [{"product_id": e.product_id, "ts": e.ts, "kind": e.kind.value} for e in self.events],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "UserHistory":
        try:
            events = [InteractionEvent(int(e["product_id"]), int(e["ts"]), e.get("kind", "click")) for e in rec["events"]]
            return cls(int(rec["user_id"]), tuple(events))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad history record: {exc}") from None


@dataclass(frozen=True)
class ProfileConfig:
    fallback: np.ndarray = field(repr=False)
    lam: float = DEFAULT_LAMBDA
    max_history: int = DEFAULT_MAX_HISTORY

    def __post_init__(self):
        if self.lam < 0:
            raise DataError("decay rate must be non-negative")
        if self.max_history < 1:
            raise DataError("max_history must be positive")
        object.__setattr__(self, "fallback", as_embedding(self.fallback))


def user_profile(history: UserHistory, provider: EmbeddingProvider, t_now: int, cfg: ProfileConfig) -> np.ndarray:
    """Decay-weighted mean embedding of the most recent ``cfg.max_history`` products.

    Users without history get ``cfg.fallback``.
    """
    if cfg.fallback.shape[0] != provider.dimension:
        raise DimensionMismatch("fallback dimension differs from provider dimension")
    # reject future events anywhere in the history, not only in the kept window
    if history.events and history.events[-1].ts > t_now:
        raise DataError(f"user {history.user_id}: event at {history.events[-1].ts} after t_now={t_now}")
    events = history.recent(cfg.max_history)
    if not events:
        return cfg.fallback.copy()
    embs = provider.matrix(e.product_id for e in events)
    ages = np.array([t_now - e.ts for e in events], dtype=np.float64)
    return decayed_mean(embs, ages, cfg.lam)


def popular_products(histories: Iterable[UserHistory], n: int) -> list:
    """The ``n`` most-interacted products as ``(product_id, count)``, ties by ascending id."""
    counts: dict = {}
    for h in histories:
        for e in h.events:
            counts[e.product_id] = counts.get(e.product_id, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


def global_fallback(popular_products: Sequence[tuple], provider: EmbeddingProvider) -> np.ndarray:
    """Weight-normalised mean embedding of popular products (cold-start profile)."""
    if not popular_products:
        raise DataError("popular product list is empty")
    ids = [int(p) for p, _ in popular_products]
    weights = np.array([w for _, w in popular_products], dtype=np.float64)
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise DataError("popular product weights must be positive")
    return (weights @ provider.matrix(ids)) / weights.sum()


def read_histories(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(UserHistory.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_histories(path, histories: Iterable[UserHistory]) -> None:
    with open(path, "w") as fh:
        for h in histories:
            fh.write(json.dumps(h.to_json()) + "\n")
