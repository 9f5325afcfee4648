"""Strategic and Reactive controller contracts, the bounded-override validator,
and deterministic scripted controllers for the gridworld."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .budget import BudgetLedger, estimate_tokens
from .memory.fusion import FusedAction
from .memory.samb import Hint
from .sim import DIRECTIONS, Observation, bfs_distances
from .trigger import FailureEvent

OVERRIDE_CATEGORIES = ("facing_adjustment", "obstacle_avoidance", "tool_reselection", "one_step_repositioning")
REFLECT_REASONS = ("failure", "repetition", "stall")
HINT_CHAR_CAP = 4096
UNBOUNDED_HORIZON = 64


class InvalidContextError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    subgoal: str
    planned_actions: tuple[str, ...]
    stop_condition: str = "subgoal reached or plan exhausted"
    issued_at_step: int = 0
    rationale: str = ""
    phases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.subgoal:
            raise ValueError("proposal subgoal must be non-empty")
        if not self.planned_actions:
            raise ValueError("proposal must plan at least one action")

    def check_horizon(self, T: int | None) -> None:
        if T is not None and len(self.planned_actions) > T:
            raise ValueError(f"proposal of {len(self.planned_actions)} actions exceeds T={T}")


@dataclass
class ActivePlan:
    proposal: Proposal
    cursor: int = 0

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.proposal.planned_actions)

    @property
    def next_action(self) -> str | None:
        return None if self.exhausted else self.proposal.planned_actions[self.cursor]

    def advance(self) -> None:
        self.cursor += 1


@dataclass(frozen=True)
class ReactiveDecision:
    kind: str  # follow | override | escalate
    action: str | None = None
    override_category: str | None = None
    new_subgoal: str | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("follow", "override", "escalate"):
            raise ValueError(f"unknown decision kind {self.kind!r}")
        if self.kind in ("follow", "override") and self.action is None:
            raise ValueError(f"{self.kind} decision needs an action")
        if self.kind == "override" and self.override_category is None:
            raise ValueError("override decision needs a category")
        if self.kind == "escalate" and self.action is not None:
            raise ValueError("escalate decision must not carry an action")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "action": self.action, "category": self.override_category,
                "reason": self.reason}


@dataclass(frozen=True)
class GlobalEntry:
    step: int
    digest: str
    action: str | None
    feedback: str


@dataclass
class StrategicContext:
    observation: Observation
    task: str
    subtask: str
    trigger_reason: str
    valid_actions: Sequence[str]
    failure_trace: list[FailureEvent] = field(default_factory=list)
    global_window: list[GlobalEntry] = field(default_factory=list)
    fused_evidence: list[FusedAction] = field(default_factory=list)
    recent_actions: list[str] = field(default_factory=list)
    horizon: int | None = 4
    step: int = 0


class StrategicController(Protocol):
    def plan(self, ctx: StrategicContext, ledger: BudgetLedger) -> Proposal: ...


class ReactiveController(Protocol):
    def act(self, plan: ActivePlan, obs: Observation, hints: Sequence[Hint], ledger: BudgetLedger,
            *, last_override_failed: bool = False, retry: bool = False) -> ReactiveDecision: ...


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


def validate_override(d: ReactiveDecision, p: Proposal) -> Violation | None:
    """None when the override is a bounded local correction, else the broken rule."""
    if d.kind != "override":
        return Violation("not_override", f"decision kind is {d.kind!r}")
    if d.override_category not in OVERRIDE_CATEGORIES:
        return Violation("category", f"{d.override_category!r} is not an allowed correction")
    if d.new_subgoal is not None and d.new_subgoal != p.subgoal:
        return Violation("subgoal", "reactive corrections may not change the active subgoal")
    return None


# scripted controllers --------------------------------------------------------


def _charge(ledger: BudgetLedger, kind: str, prompt: str, reply: str, source: str) -> None:
    ledger.account_call(kind, estimate_tokens(prompt), estimate_tokens(reply), source=source)


def _neighbor(cell, direction):
    dr, dc = DIRECTIONS[direction]
    return (cell[0] + dr, cell[1] + dc)


def greedy_route(obs: Observation, horizon: int, first_preference: Sequence[str] = (),
                 avoid_first: Sequence[str] = ()) -> list[str]:
    """Shortest-path moves over the walls known so far.

    The first move is chosen among equally short options by ``first_preference``
    and away from ``avoid_first`` when an alternative exists.  Falls back to
    Manhattan-greedy probing when the known map has no route.
    """
    blocked = set(obs.known_walls)
    dist = bfs_distances(obs.size, blocked, obs.target)
    pos = obs.position
    moves: list[str] = []
    if pos not in dist:
        while len(moves) < horizon and pos != obs.target:
            dr = obs.target[0] - pos[0]
            dc = obs.target[1] - pos[1]
            d = ("down" if dr > 0 else "up") if abs(dr) >= abs(dc) else ("right" if dc > 0 else "left")
            moves.append(f"move:{d}")
            pos = _neighbor(pos, d)
        return moves
    while len(moves) < horizon and dist[pos] > 0:
        options = [d for d in DIRECTIONS if dist.get(_neighbor(pos, d), 1 << 30) == dist[pos] - 1]
        if not moves:
            pref = {a: i for i, a in enumerate(first_preference)}
            options.sort(key=lambda d: (f"move:{d}" in avoid_first, pref.get(f"move:{d}", len(pref))))
        d = options[0]
        moves.append(f"move:{d}")
        pos = _neighbor(pos, d)
    return moves


def route_length(obs: Observation) -> int | None:
    dist = bfs_distances(obs.size, set(obs.known_walls), obs.target)
    return dist.get(obs.position)


@dataclass
class ScriptedStrategicController:
    """Deterministic collect -> (reflect) -> reason -> propose planner.

    Each stage is charged as one completion.  ``reflect`` is "auto" (only for
    failure/repetition/stall escalations), "always" or "never".
    """

    reflect: str = "auto"
    last_phases: tuple[str, ...] = ()

    def plan(self, ctx: StrategicContext, ledger: BudgetLedger) -> Proposal:
        if not ctx.valid_actions:
            raise InvalidContextError("valid action set is empty")
        obs = ctx.observation
        phases = []

        collected = (f"task {ctx.task}; {obs.ui_text}; window "
                     + "; ".join(f"{e.step}:{e.action}:{e.feedback}" for e in ctx.global_window))
        _charge(ledger, "summarization", collected, obs.state_text(), "strategic")
        phases.append("collect")

        avoid: list[str] = []
        if self.reflect == "always" or (self.reflect == "auto" and ctx.trigger_reason in REFLECT_REASONS):
            trace = "; ".join(f"{ev.step}:F{ev.level}:{ev.message}" for ev in ctx.failure_trace)
            _charge(ledger, "reflection", collected + trace, "negative evidence", "strategic")
            phases.append("reflect")
            # A repeated or failing move is negative evidence for the next first step.
            if ctx.recent_actions and (ctx.failure_trace or ctx.trigger_reason == "repetition"):
                avoid.append(ctx.recent_actions[-1])

        if obs.required_tool and obs.selected_tool != obs.required_tool:
            subgoal = f"select {obs.required_tool} and reach target r{obs.target[0]} c{obs.target[1]}"
        else:
            subgoal = f"reach target r{obs.target[0]} c{obs.target[1]}"
        _charge(ledger, "task-reasoning", collected + subgoal, subgoal, "strategic")
        phases.append("reason")

        horizon = ctx.horizon if ctx.horizon is not None else UNBOUNDED_HORIZON
        actions: list[str] = []
        if obs.required_tool and obs.selected_tool != obs.required_tool:
            actions.append(f"select:{obs.required_tool}")
        preference = [f.action for f in ctx.fused_evidence]
        actions += greedy_route(obs, horizon - len(actions), preference, avoid)
        actions = [a for a in actions if a in ctx.valid_actions][:horizon]
        if not actions:
            actions = [f"face:{obs.facing}"]
        _charge(ledger, "action-proposal", collected + subgoal, " ".join(actions), "strategic")
        phases.append("propose")

        self.last_phases = tuple(phases)
        return Proposal(
            subgoal=subgoal,
            planned_actions=tuple(actions),
            issued_at_step=ctx.step,
            rationale=f"trigger={ctx.trigger_reason}; avoid={','.join(avoid) or '-'}",
            phases=tuple(phases),
        )


@dataclass
class ScriptedReactiveController:
    """Follows grounded planned actions, applies bounded local corrections, or escalates."""

    calls_per_step: int = 1

    def _grounded(self, action: str, obs: Observation) -> bool:
        name, _, arg = action.partition(":")
        if name == "move":
            return arg in DIRECTIONS and obs.free(_neighbor(obs.position, arg))
        if name == "select":
            return arg in obs.tools
        return True

    def _charge(self, ledger: BudgetLedger, plan: ActivePlan, obs: Observation, hints: Sequence[Hint],
                reply: str, retry: bool) -> None:
        hint_text = " ".join(h.text for h in hints)[:HINT_CHAR_CAP]
        prompt = f"{plan.proposal.subgoal} {plan.next_action} {obs.ui_text} {hint_text}"
        for _ in range(self.calls_per_step):
            _charge(ledger, "format-retry" if retry else "reactive-selection", prompt, reply, "reactive")

    def act(self, plan: ActivePlan, obs: Observation, hints: Sequence[Hint], ledger: BudgetLedger,
            *, last_override_failed: bool = False, retry: bool = False) -> ReactiveDecision:
        decision = self._decide(plan, obs, hints, last_override_failed)
        self._charge(ledger, plan, obs, hints, decision.action or "escalate", retry)
        return decision

    def _decide(self, plan: ActivePlan, obs: Observation, hints: Sequence[Hint],
                last_override_failed: bool) -> ReactiveDecision:
        planned = plan.next_action
        if planned is None:
            return ReactiveDecision("escalate", reason="proposal exhausted")
        if self._grounded(planned, obs):
            return ReactiveDecision("follow", planned)
        if last_override_failed:
            return ReactiveDecision("escalate", reason="local correction failed")

        name, _, arg = planned.partition(":")
        if name == "select" and obs.required_tool in obs.tools and obs.selected_tool != obs.required_tool:
            return ReactiveDecision("override", f"select:{obs.required_tool}", "tool_reselection")
        if name != "move" or arg not in DIRECTIONS:
            return ReactiveDecision("escalate", reason="planned action not grounded")

        dist = bfs_distances(obs.size, set(obs.known_walls), obs.target)
        far = 1 << 30
        lateral = [d for d in DIRECTIONS if DIRECTIONS[d][0] == 0] if DIRECTIONS[arg][0] else \
                  [d for d in DIRECTIONS if DIRECTIONS[d][1] == 0]
        free_lateral = [d for d in lateral if obs.free(_neighbor(obs.position, d))]
        hinted = {h.action_trace[0] for h in hints if h.quick_path and h.action_trace}
        if free_lateral:
            free_lateral.sort(key=lambda d: (f"move:{d}" not in hinted,
                                             dist.get(_neighbor(obs.position, d), far)))
            return ReactiveDecision("override", f"move:{free_lateral[0]}", "obstacle_avoidance",
                                    reason=f"{planned} blocked")
        back = {"up": "down", "down": "up", "left": "right", "right": "left"}[arg]
        if obs.free(_neighbor(obs.position, back)):
            return ReactiveDecision("override", f"move:{back}", "one_step_repositioning",
                                    reason=f"{planned} blocked")
        return ReactiveDecision("escalate", reason="no grounded local action")


# external model adapter ------------------------------------------------------

_PLACEHOLDER = re.compile(r"<\$([A-Za-z_][A-Za-z0-9_]*)\$>")


@dataclass(frozen=True)
class Completion:
    text: str
    tokens_in: int
    tokens_out: int


class ModelAdapter(Protocol):
    def complete(self, template_id: str, prompt: str, fields: dict[str, str]) -> Completion: ...


class TemplateLibrary:
    """Plain-text prompt templates with ``<$field$>`` placeholders, one file per template."""

    def __init__(self, templates: dict[str, str]):
        self.templates = dict(templates)

    @classmethod
    def from_dir(cls, directory: str | Path) -> TemplateLibrary:
        return cls({p.stem: p.read_text(encoding="utf-8") for p in sorted(Path(directory).glob("*.txt"))})

    def fields(self, template_id: str) -> list[str]:
        return sorted(set(_PLACEHOLDER.findall(self.templates[template_id])))

    def render(self, template_id: str, values: dict[str, str]) -> str:
        missing = [f for f in self.fields(template_id) if f not in values]
        if missing:
            raise KeyError(f"template {template_id!r} missing fields {missing}")
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.templates[template_id])


@dataclass
class PromptedReactiveController:
    """Reactive controller backed by an external model through a template.

    The completion's first non-empty line is either ``ESCALATE`` or
    ``<action> [| <override category>]``.
    """

    adapter: ModelAdapter
    templates: TemplateLibrary
    template_id: str = "reactive"

    def act(self, plan: ActivePlan, obs: Observation, hints: Sequence[Hint], ledger: BudgetLedger,
            *, last_override_failed: bool = False, retry: bool = False) -> ReactiveDecision:
        values = {
            "subtask_description": plan.proposal.subgoal,
            "suggested_action": plan.next_action or "",
            "suggested_reason": plan.proposal.rationale,
            "history_summary": " ".join(h.text for h in hints)[:HINT_CHAR_CAP],
            "current_observation": obs.ui_text,
        }
        prompt = self.templates.render(self.template_id, {f: values.get(f, "") for f in self.templates.fields(self.template_id)})
        out = self.adapter.complete(self.template_id, prompt, values)
        ledger.account_call("format-retry" if retry else "reactive-selection", out.tokens_in, out.tokens_out,
                            source="reactive")
        line = next((ln.strip() for ln in out.text.splitlines() if ln.strip()), "ESCALATE")
        if line.upper() == "ESCALATE":
            return ReactiveDecision("escalate", reason="model requested escalation")
        action, _, category = (part.strip() for part in line.partition("|"))
        if category:
            return ReactiveDecision("override", action, category)
        if action == plan.next_action:
            return ReactiveDecision("follow", action)
        return ReactiveDecision("override", action, "unspecified")
