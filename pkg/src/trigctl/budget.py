"""Large-model call accounting against difficulty-dependent budgets.

Only completion requests are charged.  Descriptor encoding, vector/index
lookups, trigger rules and environment steps never go through the ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

CALL_KINDS = (
    "reflection",
    "task-reasoning",
    "action-proposal",
    "reactive-selection",
    "memory-query",
    "summarization",
    "retry",
    "replanning",
    "transport-retry",
    "format-retry",
)
SOURCES = ("strategic", "reactive", "runner")

STEP_CAPS = {"easy": 30, "medium": 50, "hard": 150}
CALLS_PER_STEP_REFERENCE = 4
BUDGETS = {k: CALLS_PER_STEP_REFERENCE * v for k, v in STEP_CAPS.items()}


class BudgetExhausted(RuntimeError):
    pass


def step_cap(difficulty: str) -> int:
    try:
        return STEP_CAPS[difficulty]
    except KeyError:
        raise ValueError(f"unknown difficulty {difficulty!r}") from None


def call_budget(difficulty: str) -> int:
    return CALLS_PER_STEP_REFERENCE * step_cap(difficulty)


@dataclass
class BudgetLedger:
    difficulty: str = "easy"
    budget: int | None = None
    enforce: bool = False
    calls_by_kind: dict[str, int] = field(default_factory=lambda: {k: 0 for k in CALL_KINDS})
    calls_by_source: dict[str, int] = field(default_factory=lambda: {s: 0 for s in SOURCES})
    tokens_in: int = 0
    tokens_out: int = 0

    def __post_init__(self) -> None:
        if self.budget is None:
            self.budget = call_budget(self.difficulty)

    @property
    def total_calls(self) -> int:
        return sum(self.calls_by_kind.values())

    @property
    def exhausted(self) -> bool:
        return self.total_calls >= self.budget

    def account_call(self, kind: str, tokens_in: int = 0, tokens_out: int = 0,
                     source: str = "runner") -> BudgetLedger:
        if kind not in self.calls_by_kind:
            raise ValueError(f"unknown call kind {kind!r}")
        if source not in self.calls_by_source:
            raise ValueError(f"unknown call source {source!r}")
        # The call that reaches the limit completes; the next one is refused.
        if self.enforce and self.exhausted:
            raise BudgetExhausted(f"call budget of {self.budget} exhausted")
        self.calls_by_kind[kind] += 1
        self.calls_by_source[source] += 1
        self.tokens_in += int(tokens_in)
        self.tokens_out += int(tokens_out)
        return self

    def snapshot(self) -> dict:
        return {
            "calls": self.total_calls,
            "by_kind": {k: v for k, v in self.calls_by_kind.items() if v},
            "by_source": {k: v for k, v in self.calls_by_source.items() if v},
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }

    def delta_since(self, before: dict) -> dict:
        now = self.snapshot()
        kinds = {k: v - before["by_kind"].get(k, 0) for k, v in now["by_kind"].items()}
        sources = {k: v - before["by_source"].get(k, 0) for k, v in now["by_source"].items()}
        return {
            "calls": now["calls"] - before["calls"],
            "by_kind": {k: v for k, v in kinds.items() if v},
            "by_source": {k: v for k, v in sources.items() if v},
            "tokens_in": now["tokens_in"] - before["tokens_in"],
            "tokens_out": now["tokens_out"] - before["tokens_out"],
        }


def account_call(ledger: BudgetLedger, kind: str, tokens_in: int = 0, tokens_out: int = 0,
                 source: str = "runner") -> BudgetLedger:
    return ledger.account_call(kind, tokens_in, tokens_out, source)


def estimate_tokens(text: str) -> int:
    # Rough chars-per-token heuristic; only used by the scripted controllers.
    return max(1, (len(text) + 3) // 4)
