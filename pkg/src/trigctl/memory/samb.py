"""State-Action Memory Bank: flat store of local state-action hints.

Items are ranked by

    rho * (alpha_C * C + alpha_L * L + alpha_R * R + alpha_P * P)

with C the token-frequency cosine, L the token Jaccard overlap, R the clipped
reward EMA rescaled to [0, 1], P the empirical success rate and rho an
exponential recency decay measured from the item's last write.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .text import jaccard, normalize_text, token_cosine

QUICK_PATH_THRESHOLD = 0.85
DIRECT_ADOPTION_THRESHOLD = 0.92


@dataclass(frozen=True)
class SambWeights:
    alpha_C: float = 0.55
    alpha_L: float = 0.45
    alpha_R: float = 0.15
    alpha_P: float = 0.10
    eta: float = 0.3
    recency_hours: float = 24.0

    def __post_init__(self) -> None:
        if min(self.alpha_C, self.alpha_L, self.alpha_R, self.alpha_P) < 0:
            raise ValueError("retrieval weights must be non-negative")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.recency_hours <= 0:
            raise ValueError("recency decay constant must be positive")


@dataclass
class MemoryItem:
    key: str
    state_summary: str
    action_trace: list[str]
    reward_ema: float = 0.0
    successes: int = 0
    attempts: int = 0
    created_at: float = 0.0
    last_write_at: float = 0.0
    source_tag: str = ""

    def __post_init__(self) -> None:
        if not self.attempts >= self.successes >= 0:
            raise ValueError(f"item {self.key!r}: need attempts >= successes >= 0")
        if self.last_write_at < self.created_at:
            raise ValueError(f"item {self.key!r}: last_write_at precedes created_at")


@dataclass(frozen=True)
class ScoreParts:
    C: float
    L: float
    R: float
    P: float
    rho: float
    score: float

    def semantic(self, w: SambWeights) -> float:
        denom = w.alpha_C + w.alpha_L
        return (w.alpha_C * self.C + w.alpha_L * self.L) / denom if denom > 0 else 0.0


@dataclass(frozen=True)
class Hint:
    key: str
    state_summary: str
    action_trace: tuple[str, ...]
    score: float
    semantic: float
    quick_path: bool
    direct_adoption: bool

    @property
    def text(self) -> str:
        return f"{self.state_summary} -> {' '.join(self.action_trace)}"


def score_parts(item: MemoryItem, query: str, now: float, w: SambWeights) -> ScoreParts:
    q = normalize_text(query)
    s = normalize_text(item.state_summary)
    C = token_cosine(q, s)
    L = jaccard(q, s)
    R = (min(1.0, max(-1.0, item.reward_ema)) + 1.0) / 2.0
    P = item.successes / max(1, item.attempts)
    age_hours = max(0.0, now - item.last_write_at) / 3600.0
    rho = math.exp(-age_hours / w.recency_hours)
    score = rho * (w.alpha_C * C + w.alpha_L * L + w.alpha_R * R + w.alpha_P * P)
    return ScoreParts(C, L, R, P, rho, score)


def score_item(item: MemoryItem, query: str, now: float, w: SambWeights = SambWeights()) -> float:
    return score_parts(item, query, now, w).score


def ema_update(ema: float, reward: float, eta: float) -> float:
    return (1.0 - eta) * ema + eta * reward


class MemoryBank:
    def __init__(self, weights: SambWeights | None = None):
        self.weights = weights or SambWeights()
        self._items: dict[str, MemoryItem] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, key: str) -> bool:
        return key in self._items

    def get(self, key: str) -> MemoryItem:
        try:
            return self._items[key]
        except KeyError:
            raise KeyError(f"unknown memory item {key!r}") from None

    def items(self) -> list[MemoryItem]:
        return list(self._items.values())

    def insert(self, item: MemoryItem, now: float | None = None) -> str:
        with self._lock:
            if item.key in self._items and now is not None:
                item = replace(item, last_write_at=max(now, item.last_write_at))
            self._items[item.key] = item
            return item.key

    def record_outcome(self, key: str, reward: float, success: bool, now: float) -> MemoryItem:
        with self._lock:
            item = self.get(key)
            updated = replace(
                item,
                reward_ema=ema_update(item.reward_ema, reward, self.weights.eta),
                attempts=item.attempts + 1,
                successes=item.successes + int(bool(success)),
                last_write_at=max(now, item.last_write_at),
            )
            self._items[key] = updated
            return updated

    def write(self, state_summary: str, action_trace: list[str], reward: float, success: bool,
              now: float, source_tag: str = "") -> MemoryItem:
        """Insert-or-update keyed by (state, actions), then fold in one outcome."""
        key = make_key(state_summary, action_trace)
        with self._lock:
            if key not in self._items:
                self.insert(MemoryItem(key, state_summary, list(action_trace), created_at=now,
                                       last_write_at=now, source_tag=source_tag))
            return self.record_outcome(key, reward, success, now)

    def snapshot(self) -> list[MemoryItem]:
        with self._lock:
            return list(self._items.values())

    def rank(self, query: str, now: float) -> list[tuple[MemoryItem, ScoreParts]]:
        scored = [(it, score_parts(it, query, now, self.weights)) for it in self.snapshot()]
        scored.sort(key=lambda p: (-p[1].score, -p[0].last_write_at, p[0].key))
        return scored

    def retrieve_hints(self, query: str, k: int = 1, now: float = 0.0) -> list[Hint]:
        if k < 1:
            raise ValueError("k must be >= 1")
        hints = []
        for item, parts in self.rank(query, now)[:k]:
            sem = parts.semantic(self.weights)
            hints.append(Hint(
                key=item.key,
                state_summary=item.state_summary,
                action_trace=tuple(item.action_trace),
                score=parts.score,
                semantic=sem,
                quick_path=sem >= QUICK_PATH_THRESHOLD,
                direct_adoption=sem >= DIRECT_ADOPTION_THRESHOLD,
            ))
        return hints

    def action_scores(self, query: str, now: float, k: int = 8) -> dict[str, float]:
        """Best item score per first action among the top-k items."""
        out: dict[str, float] = {}
        for item, parts in self.rank(query, now)[:k]:
            if not item.action_trace:
                continue
            a = item.action_trace[0]
            out[a] = max(out.get(a, float("-inf")), parts.score)
        return out

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for item in sorted(self.snapshot(), key=lambda it: it.key):
                fh.write(json.dumps(asdict(item), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, weights: SambWeights | None = None) -> MemoryBank:
        bank = cls(weights)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    bank.insert(MemoryItem(**json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad memory item ({exc})") from exc
        return bank


def make_key(state_summary: str, action_trace: list[str]) -> str:
    return " ".join(normalize_text(state_summary).elements()) + " | " + " ".join(action_trace)
