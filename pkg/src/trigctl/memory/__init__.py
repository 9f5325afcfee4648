from .fusion import FusedAction, FusionConfig, fuse, minmax_normalize
from .sakg import (
    ActionEdge,
    GraphFragment,
    HashingEmbedder,
    KgConfig,
    KnowledgeGraph,
    PrecomputedEmbedder,
    StateNode,
    best_action,
    fragment_action_scores,
    score_fragment,
)
from .samb import Hint, MemoryBank, MemoryItem, SambWeights, score_item
from .text import jaccard, normalize_text, token_cosine

__all__ = [
    "ActionEdge", "FusedAction", "FusionConfig", "GraphFragment", "HashingEmbedder", "Hint",
    "KgConfig", "KnowledgeGraph", "MemoryBank", "MemoryItem", "PrecomputedEmbedder",
    "SambWeights", "StateNode", "best_action", "fragment_action_scores", "fuse", "jaccard",
    "minmax_normalize", "normalize_text", "score_fragment", "score_item", "token_cosine",
]
