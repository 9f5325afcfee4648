"""The trigger -> act -> update cycle.

Each environment step: use the current signals to decide whether to escalate,
refresh the proposal through the Strategic Controller (graph + global evidence)
or fetch memory-bank hints, let the Reactive Controller follow/override/escalate,
dispatch the action, grade the outcome and gate long-term memory writes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .budget import BudgetExhausted, BudgetLedger, call_budget, step_cap
from .controllers import (
    ActivePlan,
    GlobalEntry,
    ReactiveController,
    ReactiveDecision,
    ScriptedReactiveController,
    ScriptedStrategicController,
    StrategicContext,
    StrategicController,
    validate_override,
)
from .memory.fusion import FusionConfig, fuse
from .memory.sakg import KnowledgeGraph, fragment_action_scores
from .memory.samb import MemoryBank
from .sim import EnvFailure, GridEnv
from .trigger import F1, F2, F3, RunnerFeedback, ThresholdConfig, TriggerState, derive_progress_increment
from .visual import encode, visual_distance

MODES = ("step_capped", "call_budgeted")
STATUSES = ("success", "step_cap", "budget_exhausted", "env_failure")
STUCK_MESSAGES = ("move_blocked", "empty_action")
GLOBAL_WINDOW = 5
RECOVERY_WINDOW = 3
KG_CONFIDENCE = 0.7
# Clause precedence when naming the escalation reason.
REASON_ORDER = (("failure", "failure"), ("repetition", "repetition"), ("stall", "stall"),
                ("visual", "scene_change"), ("periodic", "periodic"))
STEP_SECONDS = 60.0


@dataclass(frozen=True)
class Verdict:
    success: bool
    confidence: float


@dataclass(frozen=True)
class StepOutcome:
    executed_ok: bool
    task_completed: bool = False
    recovered: bool = False
    planner_validated: bool = False


@dataclass(frozen=True)
class GateDecision:
    samb: bool
    sakg: bool
    reason: str

    def to_dict(self) -> dict:
        return {"samb": self.samb, "sakg": self.sakg, "reason": self.reason}


def memory_write_gate(outcome: StepOutcome, verdict: Verdict | None) -> GateDecision:
    """Admit only successful, interpretably recovered or planner-validated transitions."""
    samb = outcome.executed_ok
    basis = ("completion" if outcome.task_completed else
             "recovery" if outcome.recovered else
             "planner" if outcome.planner_validated else None)
    if basis is None:
        return GateDecision(samb, False, "success" if samb else "failed")
    confident = verdict is not None and verdict.success and verdict.confidence >= KG_CONFIDENCE
    if not (outcome.executed_ok or outcome.task_completed) or not confident:
        return GateDecision(samb, False, f"{basis}:low_confidence")
    return GateDecision(samb, True, basis)


def assess_step(fb: RunnerFeedback, decision: ReactiveDecision) -> Verdict:
    """Deterministic stand-in for the reflection verdict on one executed step."""
    if fb.failed or derive_progress_increment(fb) == 0:
        return Verdict(False, 0.9)
    if fb.task_or_subgoal_completed:
        return Verdict(True, 1.0)
    observable = (fb.position_or_facing_changed or fb.selected_item_changed or fb.inventory_delta
                  or fb.menu_or_dialogue_transition)
    if not observable:
        return Verdict(True, 0.6)
    return Verdict(True, 0.9 if decision.kind == "follow" else 0.75)


@dataclass(frozen=True)
class RecoveryDirective:
    level: int
    kind: str  # none | retry | escalate | flush
    retries: int = 0
    escalate: bool = False
    attach_trace: bool = False
    flush: bool = False

    def to_dict(self) -> dict:
        return {"level": self.level, "kind": self.kind}


def apply_recovery_policy(level: int) -> RecoveryDirective:
    if level >= F3:
        return RecoveryDirective(level, "flush", escalate=True, attach_trace=True, flush=True)
    if level == F2:
        return RecoveryDirective(level, "escalate", escalate=True, attach_trace=True)
    if level == F1:
        return RecoveryDirective(level, "retry", retries=1)
    return RecoveryDirective(level, "none")


class GlobalMemory:
    def __init__(self, size: int = GLOBAL_WINDOW):
        self.window: deque[GlobalEntry] = deque(maxlen=size)
        self.subgoal: str = ""
        self.failure_summaries: deque[str] = deque(maxlen=size)

    def record(self, entry: GlobalEntry) -> None:
        self.window.append(entry)

    def flush(self) -> None:
        self.window.clear()
        self.failure_summaries.clear()

    def __len__(self) -> int:
        return len(self.window)


@dataclass
class Controllers:
    strategic: StrategicController = field(default_factory=ScriptedStrategicController)
    reactive: ReactiveController = field(default_factory=ScriptedReactiveController)


@dataclass
class Memories:
    samb: MemoryBank = field(default_factory=MemoryBank)
    sakg: KnowledgeGraph = field(default_factory=KnowledgeGraph)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    hint_k: int = 1
    fusion_candidates: int = 8


@dataclass
class EpisodeLog:
    header: dict
    records: list[dict] = field(default_factory=list)
    status: str | None = None
    ledger: dict = field(default_factory=dict)

    def finish(self, status: str, ledger: BudgetLedger) -> None:
        if self.status is not None:
            raise RuntimeError("terminal status already set")
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        self.status = status
        self.ledger = ledger.snapshot()

    @property
    def steps(self) -> int:
        return len(self.records)

    def lines(self) -> Iterator[str]:
        yield json.dumps({"type": "header", **self.header}, sort_keys=True)
        for rec in self.records:
            yield json.dumps({"type": "step", **rec}, sort_keys=True)
        yield json.dumps({"type": "end", "status": self.status, "steps": self.steps, "ledger": self.ledger},
                         sort_keys=True)

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> EpisodeLog:
        header, records, end = None, [], None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    kind = rec.pop("type")
                except (json.JSONDecodeError, KeyError, AttributeError) as exc:
                    raise LogFormatError(f"{path}:{lineno}: malformed log line ({exc})") from None
                if kind == "header":
                    header = rec
                elif kind == "step":
                    records.append(rec)
                elif kind == "end":
                    end = rec
                else:
                    raise LogFormatError(f"{path}:{lineno}: unknown record type {kind!r}")
        if header is None or end is None:
            raise LogFormatError(f"{path}: missing header or end record")
        log = cls(header, records)
        log.status = end["status"]
        log.ledger = end.get("ledger", {})
        return log


class LogFormatError(ValueError):
    pass


def _reason(clauses: dict[str, bool]) -> str | None:
    for clause, name in REASON_ORDER:
        if clauses.get(clause):
            return name
    return None


def run_episode(
    env: GridEnv,
    th: ThresholdConfig | None = None,
    controllers: Controllers | None = None,
    memories: Memories | None = None,
    ledger: BudgetLedger | None = None,
    mode: str = "step_capped",
    *,
    seed: int = 42,
    header: dict | None = None,
    max_steps: int | None = None,
    task: str = "reach the target tile holding the required tool",
) -> EpisodeLog:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    th = th or ThresholdConfig()
    controllers = controllers or Controllers()
    memories = memories or Memories()
    difficulty = env.world.difficulty
    if ledger is None:
        ledger = BudgetLedger(difficulty=difficulty)
    ledger.enforce = mode == "call_budgeted"
    cap = step_cap(difficulty)
    horizon = max_steps if max_steps is not None else (cap if mode == "step_capped" else 10 * cap)

    log = EpisodeLog({
        "scenario": env.world.name, "difficulty": difficulty, "mode": mode, "seed": seed,
        "budget": ledger.budget, "step_cap": cap, **(header or {}),
    })

    first = env.reset()
    obs, frame = first.observation, first.frame
    desc = encode(frame)
    trig = TriggerState(thresholds=th)
    gmem = GlobalMemory()
    plan: ActivePlan | None = None
    last_override_failed = False
    open_failures: list[int] = []
    valid = env.valid_actions()
    status = None

    for t in range(1, horizon + 1):
        now = t * STEP_SECONDS
        pre = trig.signals
        directive = apply_recovery_policy(pre.ell)
        g_pred, clauses = trig.evaluate()
        forced = None
        flushed = False
        if directive.flush:
            gmem.flush()
            plan = None
            flushed = True
        if plan is None:
            forced = "flush" if flushed else "initial"
        reason = _reason(clauses) or forced
        g = int(bool(g_pred) or forced is not None)
        before = ledger.snapshot()
        state_text = obs.state_text()
        fused_log: list[dict] = []
        strategic_calls = 0
        window_at_plan = None

        def strategic(why: str) -> None:
            nonlocal plan, strategic_calls, window_at_plan, fused_log
            trace = trig.failure_trace(t) if (directive.attach_trace or why in ("failure", "repetition", "stall")) else []
            frags = memories.sakg.query_fragments(state_text)
            mb_scores = memories.samb.action_scores(state_text, now, memories.fusion_candidates)
            fused = fuse(mb_scores, fragment_action_scores(frags, memories.sakg.cfg), memories.fusion) if mb_scores else []
            fused_log = [f.to_dict() for f in fused]
            window_at_plan = len(gmem)
            ctx = StrategicContext(
                observation=obs, task=task, subtask=gmem.subgoal or task, trigger_reason=why,
                valid_actions=valid, failure_trace=trace, global_window=list(gmem.window),
                fused_evidence=fused, recent_actions=list(trig.recent_actions), horizon=th.T, step=t,
            )
            proposal = controllers.strategic.plan(ctx, ledger)
            proposal.check_horizon(th.T)
            plan = ActivePlan(proposal)
            gmem.subgoal = proposal.subgoal
            trig.strategic_done()
            strategic_calls += 1

        try:
            hints = []
            if g:
                strategic(reason)
            else:
                hints = memories.samb.retrieve_hints(state_text, memories.hint_k, now)
            decision = controllers.reactive.act(plan, obs, hints, ledger, last_override_failed=last_override_failed)
            violation = validate_override(decision, plan.proposal) if decision.kind == "override" else None
            if violation is None and decision.action is not None and decision.action not in valid:
                decision = controllers.reactive.act(plan, obs, hints, ledger, retry=True,
                                                    last_override_failed=last_override_failed)
                if decision.action is not None and decision.action not in valid:
                    violation = "invalid_action"
                elif decision.kind == "override":
                    violation = validate_override(decision, plan.proposal)
            if violation is not None:
                decision = ReactiveDecision("escalate", reason=f"rejected: {violation}")
            if decision.kind == "escalate" and strategic_calls == 0:
                g, reason = 1, reason or "reactive_escalation"
                strategic("reactive_escalation")
                decision = controllers.reactive.act(plan, obs, [], ledger)
                if decision.kind == "override" and validate_override(decision, plan.proposal) is not None:
                    decision = ReactiveDecision("escalate", reason="rejected override")
        except BudgetExhausted:
            status = "budget_exhausted"
            break

        action = decision.action if decision.kind != "escalate" else ""
        try:
            step = env.step(action)
        except EnvFailure:
            status = "env_failure"
            break
        fb = step.feedback

        if decision.kind == "follow" and not fb.failed:
            plan.advance()
        last_override_failed = decision.kind == "override" and fb.failed

        new_desc = encode(step.frame)
        d_next = visual_distance(desc, new_desc)
        post = trig.observe(t, d_next, fb, action)
        level = post.ell

        ok = derive_progress_increment(fb) > 0 and not fb.failed
        recovered = False
        if ok and level == 0:
            recent = [f for f in open_failures if t - f <= RECOVERY_WINDOW]
            recovered = bool(recent)
            open_failures = [] if recovered else recent
        if level >= F1:
            open_failures.append(t)
        outcome = StepOutcome(
            executed_ok=ok,
            task_completed=step.done,
            recovered=recovered,
            planner_validated=ok and decision.kind == "follow",
        )
        verdict = assess_step(fb, decision)
        gate = memory_write_gate(outcome, verdict)
        next_text = step.observation.state_text()
        writes = {"samb": None, "sakg": None}
        reward = 1.0 if step.done else 0.5
        if gate.samb and action:
            item = memories.samb.write(state_text, [action], reward, True, now, source_tag=f"step{t}")
            writes["samb"] = item.key
        if gate.sakg and action:
            memories.sakg.upsert_transition(state_text, action, next_text, True, reward, now)
            writes["sakg"] = [state_text, action, next_text]
        if level >= F1:
            gmem.failure_summaries.append(f"F{level} {fb.structured_message}")
        gmem.record(GlobalEntry(t, state_text, action, fb.structured_message))

        log.records.append({
            "t": t,
            "obs": state_text,
            "signals": pre.to_dict(),
            "g": g,
            "clauses": clauses,
            "reason": reason if g else None,
            "controller": "strategic+reactive" if strategic_calls else "reactive",
            "strategic_invocations": strategic_calls,
            "directive": directive.to_dict(),
            "flushed": flushed,
            "window_at_plan": window_at_plan,
            "subgoal": plan.proposal.subgoal,
            "decision": decision.to_dict(),
            "hints": [h.key for h in hints],
            "fused": fused_log,
            "action": action,
            "feedback": fb.to_dict(),
            "progress": post.delta,
            "failure_level": level,
            "stuck": fb.structured_message in STUCK_MESSAGES,
            "verdict": {"success": verdict.success, "confidence": verdict.confidence},
            "gate": gate.to_dict(),
            "writes": writes,
            "ledger": ledger.delta_since(before),
        })
        obs, desc = step.observation, new_desc
        if step.done:
            status = "success"
            break

    log.finish(status or "step_cap", ledger)
    return log


def default_ledger(difficulty: str, mode: str) -> BudgetLedger:
    return BudgetLedger(difficulty=difficulty, budget=call_budget(difficulty), enforce=mode == "call_budgeted")
