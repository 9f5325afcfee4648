"""Token-level text similarity used by the state-action memory bank."""

from __future__ import annotations

import math
import re
import string
from collections import Counter

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str) -> Counter:
    """Lowercase, strip punctuation, collapse whitespace; returns a token multiset."""
    cleaned = _PUNCT.sub(" ", text.lower())
    return Counter(cleaned.split())


def join_tokens(tokens: Counter) -> str:
    return " ".join(tokens.elements())


def jaccard(a, b) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def token_cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    dot = sum(n * b[t] for t, n in a.items() if t in b)
    na = math.sqrt(sum(n * n for n in a.values()))
    nb = math.sqrt(sum(n * n for n in b.values()))
    return min(1.0, dot / (na * nb))
