"""Event Trigger bookkeeping: progress, stall/repetition signals, failure grading
and the escalation predicate."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

# Failure levels.
F0, F1, F2, F3 = 0, 1, 2, 3

PROGRESS_FLAGS = (
    "task_or_subgoal_completed",
    "position_or_facing_changed",
    "selected_item_changed",
    "inventory_delta",
    "menu_or_dialogue_transition",
    "productive_execution_confirmed",
)

CLAUSES = ("periodic", "visual", "stall", "repetition", "failure")


@dataclass(frozen=True)
class ThresholdConfig:
    """Fixed trigger thresholds.  ``T=None`` disables the periodic refresh."""

    T: int | None = 4
    W: int = 5
    tau_v: float = 0.35
    tau_z: int = 4
    tau_r: int = 5
    tau_rz: int = 2
    tau_ell: int = 2

    def __post_init__(self) -> None:
        if self.T is not None and self.T < 1:
            raise ValueError("T must be >= 1 or None")
        if self.W < 1:
            raise ValueError("W must be >= 1")
        for name in ("tau_v", "tau_z", "tau_r", "tau_rz", "tau_ell"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RunnerFeedback:
    task_or_subgoal_completed: bool = False
    position_or_facing_changed: bool = False
    selected_item_changed: bool = False
    inventory_delta: bool = False
    menu_or_dialogue_transition: bool = False
    productive_execution_confirmed: bool = False
    invalid_action: bool = False
    execution_error: bool = False
    structured_message: str = ""

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> RunnerFeedback:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    @property
    def failed(self) -> bool:
        return self.invalid_action or self.execution_error


@dataclass(frozen=True)
class TriggerSignals:
    c: int = 0
    d: float = 0.0
    z: int = 0
    r: int = 0
    ell: int = F0
    q: int = 0
    delta: int = 0

    def to_dict(self) -> dict:
        return {"c": self.c, "d": self.d, "z": self.z, "r": self.r, "ell": self.ell, "q": self.q, "delta": self.delta}


@dataclass(frozen=True)
class FailureEvent:
    step: int
    level: int
    message: str = ""


def derive_progress_increment(fb: RunnerFeedback) -> int:
    # Invalid actions and execution errors never count as progress.
    if fb.failed:
        return 0
    return 1 if any(getattr(fb, f) for f in PROGRESS_FLAGS) else 0


def same_action_tail(actions: Sequence[str]) -> int:
    if not actions:
        return 0
    last = actions[-1]
    n = 0
    for a in reversed(actions):
        if a != last:
            break
        n += 1
    return n


def update_signals(
    prev: TriggerSignals,
    d: float,
    fb: RunnerFeedback,
    action: str | None,
    recent_actions: Sequence[str],
    W: int = 5,
    ell: int | None = None,
) -> TriggerSignals:
    """Advance the per-step signals after observing feedback for ``action``.

    ``recent_actions`` are the actions executed before ``action`` (at most W).
    ``ell`` is the freshly graded failure level; the previous level is kept when
    omitted.
    """
    if len(recent_actions) > W:
        raise ValueError(f"recent_actions longer than W={W}")
    inc = derive_progress_increment(fb)
    q = prev.q + inc
    delta = q - prev.q
    z = 0 if delta > 0 else prev.z + 1
    tail = list(recent_actions) + ([action] if action is not None else [])
    r = min(same_action_tail(tail), W)
    return TriggerSignals(
        c=prev.c + 1,
        d=float(d),
        z=z,
        r=r,
        ell=prev.ell if ell is None else ell,
        q=q,
        delta=delta,
    )


def classify_failure(
    fb: RunnerFeedback,
    signals: TriggerSignals,
    recent_failures: Iterable[FailureEvent] = (),
    step: int | None = None,
    W: int = 5,
    tau_z: int = 4,
) -> int:
    """Grade the latest outcome into F0..F3.

    ``recent_failures`` may hold the whole history; only events within the last
    W steps before ``step`` are considered (all of them when ``step`` is None).
    ``signals`` must already include this outcome (z and r updated).
    """
    window = [
        ev for ev in recent_failures
        if step is None or step - W <= ev.step < step
    ]
    prior_any = any(ev.level >= F1 for ev in window)
    prior_hard = any(ev.level >= F2 for ev in window)

    low_progress_loop = signals.z >= tau_z and signals.r >= 2
    hard = fb.execution_error or (fb.invalid_action and prior_any) or low_progress_loop
    if hard:
        return F3 if prior_hard else F2
    if fb.invalid_action:
        return F1
    return F0


def clause_outcomes(s: TriggerSignals, th: ThresholdConfig) -> dict[str, bool]:
    return {
        "periodic": th.T is not None and s.c >= th.T,
        "visual": s.d > th.tau_v,
        "stall": s.z >= th.tau_z,
        "repetition": s.r >= th.tau_r and s.z >= th.tau_rz,
        "failure": s.ell >= th.tau_ell,
    }


def should_escalate(s: TriggerSignals, th: ThresholdConfig) -> int:
    return int(any(clause_outcomes(s, th).values()))


def reset_after_strategic(s: TriggerSignals) -> TriggerSignals:
    return replace(s, c=0)


@dataclass
class TriggerState:
    """Per-episode mutable wrapper around the pure transition functions."""

    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    signals: TriggerSignals = field(default_factory=TriggerSignals)
    recent_actions: list[str] = field(default_factory=list)
    failures: list[FailureEvent] = field(default_factory=list)

    def observe(self, step: int, d: float, fb: RunnerFeedback, action: str | None) -> TriggerSignals:
        W = self.thresholds.W
        history = self.recent_actions[-(W - 1):] if W > 1 else []
        provisional = update_signals(self.signals, d, fb, action, history, W=W)
        level = classify_failure(fb, provisional, self.failures, step=step, W=W, tau_z=self.thresholds.tau_z)
        self.signals = replace(provisional, ell=level)
        if level >= F1:
            self.failures.append(FailureEvent(step, level, fb.structured_message))
        if action is not None:
            self.recent_actions.append(action)
            del self.recent_actions[:-W]
        return self.signals

    def evaluate(self) -> tuple[int, dict[str, bool]]:
        clauses = clause_outcomes(self.signals, self.thresholds)
        return int(any(clauses.values())), clauses

    def strategic_done(self) -> None:
        self.signals = reset_after_strategic(self.signals)

    def failure_trace(self, step: int) -> list[FailureEvent]:
        W = self.thresholds.W
        return [ev for ev in self.failures if step - W <= ev.step <= step]
