from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from trigctl.budget import BudgetLedger
from trigctl.controllers import Proposal, ScriptedReactiveController, ScriptedStrategicController
from trigctl.loop import Controllers, EpisodeLog, LogFormatError, run_episode
from trigctl.metrics import (
    NO_STUCK,
    RecoveryStats,
    aggregate_runs,
    budgeted_sr,
    count_recoveries,
    step_capped_sr,
    strategic_calls_per_step,
    stuck_recovery,
    summarize,
    summary_csv,
    tokens_per_task,
    write_report,
)
from trigctl.sim import GridEnv, GridWorld
from trigctl.trigger import ThresholdConfig


def rec(stuck=False, level=0):
    return {"stuck": stuck, "failure_level": level}


def episode(records, status="success", mode="step_capped", strategic=0, run_index=0, tokens=(0, 0)):
    log = EpisodeLog({"mode": mode, "run_index": run_index}, list(records))
    log.status = status
    log.ledger = {"by_source": {"strategic": strategic} if strategic else {},
                  "tokens_in": tokens[0], "tokens_out": tokens[1]}
    return log


def test_reference_row_arithmetic():
    s = RecoveryStats(5875, 2115, 1227)
    assert s.stuck_rate == pytest.approx(0.360, abs=0.001)
    assert s.recovery_rate == pytest.approx(0.580, abs=0.001)
    assert s.ratio == pytest.approx(1.61, abs=0.01)


def test_no_stuck_events_marker():
    s = RecoveryStats(10, 0, 0)
    assert s.ratio is None
    assert s.ratio_display() == NO_STUCK
    assert s.to_dict()["ratio"] == NO_STUCK


def test_all_stuck_all_recovered():
    s = RecoveryStats(7, 7, 7)
    assert (s.stuck_rate, s.recovery_rate, s.ratio) == (1.0, 1.0, 1.0)


def test_recovery_stats_invariants():
    with pytest.raises(ValueError):
        RecoveryStats(5, 6, 0)
    with pytest.raises(ValueError):
        RecoveryStats(5, 2, 3)


def test_recovery_needs_normal_step_within_three():
    recs = [rec(True, 1), rec(True, 1), rec(True, 1), rec(True, 1), rec(), rec(True, 1)]
    stuck, recovered = count_recoveries(recs)
    assert stuck == 5
    # Indices 1, 2 and 3 see the normal step at index 4; index 0 is four steps away.
    assert recovered == 3


def test_stuck_recovery_over_logs():
    logs = [episode([rec(True, 1), rec()]), episode([rec(), rec(), rec()])]
    s = stuck_recovery(logs)
    assert (s.n_step, s.n_stuck, s.n_recovered) == (5, 1, 1)
    with pytest.raises(ValueError):
        stuck_recovery([])


def test_success_rates():
    logs = [episode([rec()], "success" if i < 18 else "step_cap") for i in range(100)]
    assert step_capped_sr(logs) == pytest.approx(0.18)
    exhausted = [episode([rec()], "budget_exhausted", mode="call_budgeted") for _ in range(4)]
    assert budgeted_sr(exhausted) == 0.0
    with pytest.raises(ValueError):
        budgeted_sr(logs)
    with pytest.raises(ValueError):
        step_capped_sr(logs + exhausted)


def test_strategic_calls_per_step():
    assert strategic_calls_per_step([episode([rec()] * 5, strategic=5)]) == 1.0
    assert strategic_calls_per_step([episode([rec()] * 5)]) == 0.0
    with pytest.raises(ValueError):
        strategic_calls_per_step([episode([])])


def test_periodic_only_ratio_is_a_quarter():
    # The planner shuttles left and right, so every step makes progress and only
    # the periodic clause can fire.
    w = GridWorld.from_dict({"name": "shuttle", "grid": ["######", "#S..G#", "######"]})
    ctl = Controllers(Shuttle(), ScriptedReactiveController(calls_per_step=0))
    log = run_episode(GridEnv(w), ThresholdConfig(T=4), ctl, max_steps=100)
    assert log.steps == 100
    assert {r["reason"] for r in log.records if r["g"]} == {"initial", "periodic"}
    assert strategic_calls_per_step([log]) == pytest.approx(0.25, abs=1 / 100)


class Shuttle:
    def plan(self, ctx, ledger):
        ledger.account_call("action-proposal", source="strategic")
        return Proposal("shuttle", ("move:right", "move:left") * 2)


def test_tokens_per_task():
    logs = [episode([rec()], tokens=(10, 2)), episode([rec()], tokens=(30, 6))]
    assert tokens_per_task(logs) == 24.0


def test_aggregate_examples():
    s = aggregate_runs([{"x": 10.0}, {"x": 12.0}, {"x": 14.0}])
    assert s.mean["x"] == 12.0 and s.std["x"] == pytest.approx(2.0)
    one = aggregate_runs([{"x": 3.0}])
    assert one.std["x"] is None
    same = aggregate_runs([{"x": 5.0}, {"x": 5.0}])
    assert same.std["x"] == 0.0
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_summary_groups_runs_and_csv_marks_no_stuck():
    logs = [episode([rec()], run_index=i, strategic=1) for i in range(3)]
    summary = summarize(logs)
    assert summary["runs"] == 3
    assert summary["metrics"]["SR"] == {"mean": 1.0, "std": 0.0}
    assert NO_STUCK in summary_csv(summary)


def test_report_is_idempotent_and_names_bad_lines(tmp_path):
    for i in range(3):
        d = tmp_path / f"run{i}"
        d.mkdir()
        episode([rec(True, 1), rec()], run_index=i, strategic=1).write(d / "a.jsonl")
    first = write_report(tmp_path)
    snap = (tmp_path / "summary.json").read_bytes(), (tmp_path / "results.csv").read_bytes()
    second = write_report(tmp_path)
    assert first == second
    assert snap == ((tmp_path / "summary.json").read_bytes(), (tmp_path / "results.csv").read_bytes())
    assert json.loads(snap[0])["metrics"]["Recovery Rate"]["mean"] == 1.0
    bad = tmp_path / "run1" / "a.jsonl"
    bad.write_text(bad.read_text().splitlines()[0] + "\n{\"type\": \"st\n")
    with pytest.raises(LogFormatError, match=r"a\.jsonl:2"):
        write_report(tmp_path)


@settings(max_examples=200, derandomize=True, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 3)), max_size=40))
def test_recovery_counts_bounded(flags):
    recs = [rec(s, lvl) for s, lvl in flags]
    stuck, recovered = count_recoveries(recs)
    assert 0 <= recovered <= stuck <= len(recs)
    if recs:
        s = RecoveryStats(len(recs), stuck, recovered)
        assert 0.0 <= s.stuck_rate <= 1.0 and 0.0 <= s.recovery_rate <= 1.0


SNAKE = ["##########", "#S.......#", "########.#", "#........#", "#.########", "#........#",
         "########.#", "#........#", "#G########", "##########"]


class FreeRoutePlanner:
    """Full-route planner whose deliberation is not charged (one call per step overall)."""

    def plan(self, ctx, ledger):
        return ScriptedStrategicController().plan(ctx, BudgetLedger(budget=10**9))


def test_budgeted_sr_separates_agents_on_same_task():
    world = GridWorld.from_dict({"name": "snake", "grid": SNAKE, "tools": ["axe"], "required_tool": "axe",
                                 "difficulty": "easy"})
    cheap = run_episode(GridEnv(world), ThresholdConfig(T=None),
                        Controllers(FreeRoutePlanner(), ScriptedReactiveController()), mode="call_budgeted")
    costly = run_episode(GridEnv(world), ThresholdConfig(T=1),
                         Controllers(ScriptedStrategicController(reflect="always"),
                                     ScriptedReactiveController(calls_per_step=0)), mode="call_budgeted")
    assert cheap.status == "success" and 30 < cheap.steps <= 40 and cheap.ledger["calls"] <= 120
    assert costly.status == "budget_exhausted" and costly.steps == 30
    assert budgeted_sr([cheap]) == 1.0 and budgeted_sr([costly]) == 0.0
