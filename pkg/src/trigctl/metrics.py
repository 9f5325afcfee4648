"""Evaluation quantities computed from episode logs."""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .loop import EpisodeLog, LogFormatError

RATIO_EPS = 1e-9
RECOVERY_WINDOW = 3
NO_STUCK = "No stuck events"

METRIC_COLUMNS = (
    "SR",
    "Budgeted SR",
    "Tokens / Task",
    "Strategic calls / step",
    "Stuck Rate",
    "Recovery Rate",
    "Recovery/Stuck Ratio",
)


@dataclass(frozen=True)
class RecoveryStats:
    n_step: int
    n_stuck: int
    n_recovered: int

    def __post_init__(self) -> None:
        if not 0 <= self.n_recovered <= self.n_stuck <= self.n_step:
            raise ValueError("need 0 <= recovered <= stuck <= steps")

    @property
    def stuck_rate(self) -> float:
        return self.n_stuck / self.n_step if self.n_step else 0.0

    @property
    def recovery_rate(self) -> float:
        return self.n_recovered / max(1, self.n_stuck)

    @property
    def ratio(self) -> float | None:
        """Recovery/Stuck ratio, or None when there was no stuck event to recover from."""
        if self.n_stuck == 0:
            return None
        return self.recovery_rate / max(self.stuck_rate, RATIO_EPS)

    def ratio_display(self) -> str:
        r = self.ratio
        return NO_STUCK if r is None else f"{r:.2f}"

    def to_dict(self) -> dict:
        return {
            "n_step": self.n_step, "n_stuck": self.n_stuck, "n_recovered": self.n_recovered,
            "stuck_rate": self.stuck_rate, "recovery_rate": self.recovery_rate,
            "ratio": self.ratio if self.ratio is not None else NO_STUCK,
        }


def _is_normal(rec: dict) -> bool:
    return rec["failure_level"] == 0 and not rec["stuck"]


def count_recoveries(records: Sequence[dict]) -> tuple[int, int]:
    stuck = recovered = 0
    for i, rec in enumerate(records):
        if not rec["stuck"]:
            continue
        stuck += 1
        if any(_is_normal(r) for r in records[i + 1:i + 1 + RECOVERY_WINDOW]):
            recovered += 1
    return stuck, recovered


def stuck_recovery(logs: Sequence[EpisodeLog]) -> RecoveryStats:
    if not logs:
        raise ValueError("no episode logs given")
    n_step = n_stuck = n_rec = 0
    for log in logs:
        s, r = count_recoveries(log.records)
        n_step += log.steps
        n_stuck += s
        n_rec += r
    return RecoveryStats(n_step, n_stuck, n_rec)


def _modes(logs: Iterable[EpisodeLog]) -> set[str]:
    return {log.header["mode"] for log in logs}


def success_rate(logs: Sequence[EpisodeLog], mode: str) -> float:
    if not logs:
        raise ValueError("no episode logs given")
    modes = _modes(logs)
    if modes != {mode}:
        raise ValueError(f"expected only {mode} logs, got {sorted(modes)}")
    return sum(log.status == "success" for log in logs) / len(logs)


def budgeted_sr(logs: Sequence[EpisodeLog]) -> float:
    return success_rate(logs, "call_budgeted")


def step_capped_sr(logs: Sequence[EpisodeLog]) -> float:
    return success_rate(logs, "step_capped")


def strategic_calls_per_step(logs: Sequence[EpisodeLog]) -> float:
    steps = sum(log.steps for log in logs)
    if steps == 0:
        raise ValueError("logs contain no environment steps")
    calls = sum(log.ledger.get("by_source", {}).get("strategic", 0) for log in logs)
    return calls / steps


def tokens_per_task(logs: Sequence[EpisodeLog]) -> float:
    if not logs:
        raise ValueError("no episode logs given")
    return statistics.fmean(log.ledger.get("tokens_in", 0) + log.ledger.get("tokens_out", 0) for log in logs)


@dataclass(frozen=True)
class RunSummary:
    n_runs: int
    mean: dict[str, float]
    std: dict[str, float | None]


def aggregate_runs(per_run: Sequence[dict[str, float | None]]) -> RunSummary:
    """Mean and n-1 sample standard deviation of each metric across runs."""
    if not per_run:
        raise ValueError("need at least one run")
    names = sorted({k for run in per_run for k in run})
    mean: dict[str, float] = {}
    std: dict[str, float | None] = {}
    for name in names:
        vals = [run[name] for run in per_run if run.get(name) is not None]
        if not vals:
            continue
        mean[name] = statistics.fmean(vals)
        std[name] = statistics.stdev(vals) if len(vals) >= 2 else None
    return RunSummary(len(per_run), mean, std)


def run_metrics(logs: Sequence[EpisodeLog]) -> dict[str, float | None]:
    """All reported metrics for the episodes of one run."""
    by_mode: dict[str, list[EpisodeLog]] = defaultdict(list)
    for log in logs:
        by_mode[log.header["mode"]].append(log)
    rec = stuck_recovery(logs)
    return {
        "SR": step_capped_sr(by_mode["step_capped"]) if by_mode["step_capped"] else None,
        "Budgeted SR": budgeted_sr(by_mode["call_budgeted"]) if by_mode["call_budgeted"] else None,
        "Tokens / Task": tokens_per_task(logs),
        "Strategic calls / step": strategic_calls_per_step(logs),
        "Stuck Rate": rec.stuck_rate,
        "Recovery Rate": rec.recovery_rate,
        "Recovery/Stuck Ratio": rec.ratio,
    }


def load_logs(directory: str | Path) -> list[tuple[Path, EpisodeLog]]:
    paths = sorted(Path(directory).rglob("*.jsonl"))
    paths = [p for p in paths if p.parent.name not in ("samb", "sakg")]
    out = []
    for p in paths:
        out.append((p, EpisodeLog.read(p)))
    if not out:
        raise LogFormatError(f"no episode logs found under {directory}")
    return out


def summarize(logs: Sequence[EpisodeLog]) -> dict:
    runs: dict[int, list[EpisodeLog]] = defaultdict(list)
    for log in logs:
        runs[int(log.header.get("run_index", 0))].append(log)
    per_run = [run_metrics(runs[i]) for i in sorted(runs)]
    summary = aggregate_runs(per_run)
    rec = stuck_recovery(logs)
    return {
        "runs": summary.n_runs,
        "episodes": len(logs),
        "metrics": {
            name: {"mean": summary.mean.get(name), "std": summary.std.get(name)}
            for name in METRIC_COLUMNS
        },
        "recovery_counts": rec.to_dict(),
        "per_run": per_run,
    }


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean", "std", "runs"])
    for name in METRIC_COLUMNS:
        m = summary["metrics"][name]
        mean = m["mean"]
        if name == "Recovery/Stuck Ratio" and mean is None:
            mean = NO_STUCK
        w.writerow([name, "" if mean is None else mean, "" if m["std"] is None else m["std"], summary["runs"]])
    return buf.getvalue()


def write_report(directory: str | Path, out_dir: str | Path | None = None) -> dict:
    logs = [log for _, log in load_logs(directory)]
    summary = summarize(logs)
    out = Path(out_dir or directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "results.csv").write_text(summary_csv(summary), encoding="utf-8")
    return summary
