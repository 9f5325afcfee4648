"""Per-call min-max normalization and weighted fusion of memory-bank and graph scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class FusionConfig:
    lambda_mb: float = 0.75
    lambda_kg: float = 0.25
    epsilon: float = 1e-9

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class FusedAction:
    action: str
    score: float
    mb_raw: float
    mb_norm: float
    kg_norm: float

    def to_dict(self) -> dict:
        return {"action": self.action, "score": self.score, "mb_raw": self.mb_raw,
                "mb_norm": self.mb_norm, "kg_norm": self.kg_norm}


def minmax_normalize(scores: Sequence[float], epsilon: float = 1e-9) -> list[float]:
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    return [(x - lo) / (hi - lo + epsilon) for x in scores]


def fuse(mb: Mapping[str, float], kg: Mapping[str, float] | None,
         cfg: FusionConfig = FusionConfig()) -> list[FusedAction]:
    """Rank the memory-bank candidates, boosting those with graph evidence.

    Graph-only actions are not added to the candidate list; memory-bank actions
    without a graph match get a normalized graph score of 0.
    """
    if not mb:
        raise ValueError("memory-bank candidate set must be non-empty")
    actions = list(mb)
    mb_norm = dict(zip(actions, minmax_normalize([mb[a] for a in actions], cfg.epsilon)))
    kg_norm: dict[str, float] = {}
    if kg:
        kg_actions = list(kg)
        kg_norm = dict(zip(kg_actions, minmax_normalize([kg[a] for a in kg_actions], cfg.epsilon)))
    fused = [
        FusedAction(a, cfg.lambda_mb * mb_norm[a] + cfg.lambda_kg * kg_norm.get(a, 0.0),
                    mb[a], mb_norm[a], kg_norm.get(a, 0.0))
        for a in actions
    ]
    fused.sort(key=lambda f: (-f.score, -f.mb_raw, f.action))
    return fused
