from __future__ import annotations

from dataclasses import dataclass

import pytest

from trigctl.budget import BUDGETS, STEP_CAPS, BudgetLedger, account_call, call_budget, step_cap
from trigctl.cli import builtin_scenarios
from trigctl.controllers import (
    GlobalEntry,
    Proposal,
    ReactiveDecision,
    ScriptedReactiveController,
    ScriptedStrategicController,
)
from trigctl.loop import (
    Controllers,
    EpisodeLog,
    GlobalMemory,
    LogFormatError,
    StepOutcome,
    Verdict,
    apply_recovery_policy,
    memory_write_gate,
    run_episode,
)
from trigctl.sim import GridEnv, GridWorld, load_scenario
from trigctl.trigger import ThresholdConfig

ENCLOSED = ["########", "#S.....#", "#......#", "#...###.", "#...#G#.", "#...###.", "#......#", "########"]


def pack(name: str) -> GridWorld:
    return load_scenario(next(p for p in builtin_scenarios() if p.endswith(f"{name}.json")))


def enclosed_world() -> GridWorld:
    return GridWorld.from_dict({"name": "enclosed", "grid": ENCLOSED, "tools": ["axe"]})


@dataclass
class FreePlanner:
    """Plans a fixed action without charging the ledger."""

    action: str = "face:up"

    def plan(self, ctx, ledger):
        return Proposal("wait", (self.action,) * 4)


@dataclass
class OneCallReactive:
    def act(self, plan, obs, hints, ledger, *, last_override_failed=False, retry=False):
        ledger.account_call("reactive-selection", 1, 1, source="reactive")
        return ReactiveDecision("follow", plan.next_action or "face:up")


@dataclass
class ScriptedReplies:
    """Reactive stub replaying decisions, charging one call each."""

    replies: list

    def act(self, plan, obs, hints, ledger, *, last_override_failed=False, retry=False):
        ledger.account_call("format-retry" if retry else "reactive-selection", source="reactive")
        return self.replies.pop(0) if self.replies else ReactiveDecision("follow", plan.next_action)


def test_success_at_first_step():
    w = GridWorld.from_dict({"name": "one", "grid": ["####", "#SG#", "####"]})
    log = run_episode(GridEnv(w))
    assert log.steps == 1 and log.status == "success"


def test_one_call_per_step_stays_within_budget():
    ctl = Controllers(FreePlanner(), OneCallReactive())
    log = run_episode(GridEnv(enclosed_world()), controllers=ctl, mode="call_budgeted")
    assert log.status == "budget_exhausted"
    assert log.steps <= 120
    assert log.ledger["calls"] == 120


def test_stall_escalates_once_when_z_reaches_four():
    log = run_episode(GridEnv(pack("stall")), ThresholdConfig(T=None))
    escalations = [(r["t"], r["reason"]) for r in log.records if r["g"] and r["reason"] != "initial"]
    z_four = [r["t"] for r in log.records if r["signals"]["z"] == 4]
    assert escalations == [(z_four[0], "stall")]
    assert log.status == "success"


def test_budget_arithmetic():
    assert BUDGETS == {"easy": 120, "medium": 200, "hard": 600}
    assert [step_cap(d) * 4 for d in STEP_CAPS] == [call_budget(d) for d in STEP_CAPS]
    with pytest.raises(ValueError):
        step_cap("nightmare")
    ledger = BudgetLedger()
    for _ in range(3):
        account_call(ledger, "action-proposal")
    account_call(ledger, "retry")
    assert ledger.total_calls == 4
    assert BudgetLedger().total_calls == 0
    with pytest.raises(ValueError):
        ledger.account_call("coffee")


def test_enforced_budget_refuses_call_after_limit():
    from trigctl.budget import BudgetExhausted

    ledger = BudgetLedger(budget=2, enforce=True)
    ledger.account_call("retry")
    ledger.account_call("retry")
    with pytest.raises(BudgetExhausted):
        ledger.account_call("retry")
    assert ledger.total_calls == 2


def four_call_controllers() -> Controllers:
    return Controllers(ScriptedStrategicController(reflect="always"), ScriptedReactiveController(calls_per_step=0))


def test_four_call_emulation_spends_120_calls_in_30_steps():
    log = run_episode(GridEnv(enclosed_world()), ThresholdConfig(T=1), four_call_controllers(),
                      mode="call_budgeted")
    assert log.steps == 30
    assert log.ledger["calls"] == 120
    assert all(r["ledger"]["calls"] == 4 for r in log.records)


def test_write_gate_examples():
    failed = memory_write_gate(StepOutcome(executed_ok=False), Verdict(False, 0.9))
    assert (failed.samb, failed.sakg) == (False, False)
    ok = memory_write_gate(StepOutcome(executed_ok=True), Verdict(True, 0.9))
    assert ok.samb and not ok.sakg
    low = memory_write_gate(StepOutcome(executed_ok=True, recovered=True), Verdict(True, 0.69))
    assert low.samb and not low.sakg
    good = memory_write_gate(StepOutcome(executed_ok=True, recovered=True), Verdict(True, 0.7))
    assert good.sakg and good.reason == "recovery"
    assert not memory_write_gate(StepOutcome(executed_ok=True, planner_validated=True), None).sakg


def test_recovery_policy_examples():
    assert apply_recovery_policy(0).kind == "none"
    one = apply_recovery_policy(1)
    assert one.kind == "retry" and not one.escalate
    assert apply_recovery_policy(2).attach_trace
    three = apply_recovery_policy(3)
    assert three.flush and three.escalate
    gm = GlobalMemory()
    for t in range(8):
        gm.record(GlobalEntry(t, "s", "a", "moved"))
    assert len(gm) == 5
    gm.flush()
    assert len(gm) == 0


def test_double_failure_flushes_and_forces_replan():
    log = run_episode(GridEnv(pack("double_failure")))
    flushed = [r for r in log.records if r["flushed"]]
    assert len(flushed) == 1
    rec = flushed[0]
    assert rec["signals"]["ell"] == 3 and rec["g"] == 1
    assert rec["window_at_plan"] == 0
    assert rec["directive"]["kind"] == "flush"


def test_invalid_action_gets_one_charged_retry():
    replies = [ReactiveDecision("follow", "warp:home"), ReactiveDecision("follow", "move:right")]
    ctl = Controllers(ScriptedStrategicController(), ScriptedReplies(replies))
    w = GridWorld.from_dict({"name": "two", "grid": ["#####", "#S.G#", "#####"]})
    log = run_episode(GridEnv(w), controllers=ctl)
    first = log.records[0]
    assert first["action"] == "move:right"
    assert first["ledger"]["by_kind"]["format-retry"] == 1


def test_rejected_override_becomes_escalation():
    replies = [ReactiveDecision("override", "move:right", "teleport")]
    ctl = Controllers(ScriptedStrategicController(), ScriptedReplies(replies))
    w = GridWorld.from_dict({"name": "two", "grid": ["#####", "#S.G#", "#####"]})
    log = run_episode(GridEnv(w), controllers=ctl)
    first = log.records[0]
    assert first["decision"]["kind"] == "escalate"
    assert first["action"] == ""
    assert first["stuck"]


def test_reactive_escalation_triggers_replan():
    replies = [ReactiveDecision("follow", "move:right"), ReactiveDecision("escalate", reason="unsure")]
    ctl = Controllers(ScriptedStrategicController(), ScriptedReplies(replies))
    w = GridWorld.from_dict({"name": "three", "grid": ["######", "#S..G#", "######"]})
    log = run_episode(GridEnv(w), controllers=ctl)
    second = log.records[1]
    assert second["g"] == 1 and second["reason"] == "reactive_escalation"
    assert second["strategic_invocations"] == 1
    assert log.status == "success"


def test_step_cap_terminates():
    log = run_episode(GridEnv(enclosed_world()))
    assert log.status == "step_cap" and log.steps == 30


def test_every_strategic_call_is_ledgered():
    log = run_episode(GridEnv(pack("hidden_walls")))
    for r in log.records:
        assert (r["strategic_invocations"] > 0) == ("strategic" in r["ledger"].get("by_source", {}))
        assert r["g"] == int(r["strategic_invocations"] > 0)


def test_log_roundtrip_and_errors(tmp_path):
    log = run_episode(GridEnv(pack("scene_change")), header={"run_index": 0})
    p = tmp_path / "ep.jsonl"
    log.write(p)
    back = EpisodeLog.read(p)
    assert back.dumps() == log.dumps()
    with pytest.raises(RuntimeError):
        log.finish("success", BudgetLedger())
    lines = p.read_text().splitlines()
    lines[3] = lines[3][:20]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match=r"ep\.jsonl:4"):
        EpisodeLog.read(p)


def test_episode_is_deterministic():
    a = run_episode(GridEnv(pack("maze_hard")))
    b = run_episode(GridEnv(pack("maze_hard")))
    assert a.dumps() == b.dumps()


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        run_episode(GridEnv(pack("stall")), mode="forever")
