"""Command line entry point: ``trigctl run | sweep | report | kg-import``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .loop import EpisodeLog, LogFormatError, Memories, run_episode
from .memory import HashingEmbedder, KnowledgeGraph, MemoryBank
from .metrics import METRIC_COLUMNS, NO_STUCK, run_metrics, write_report
from .sim import GridEnv, load_scenario
from .trigger import ThresholdConfig

log = logging.getLogger("trigctl")

EXIT_OK, EXIT_TASK_FAILED, EXIT_CONFIG = 0, 1, 2


def builtin_scenarios() -> list[str]:
    pack = resources.files("trigctl") / "scenarios"
    return sorted(str(p) for p in pack.iterdir() if p.name.endswith(".json"))


@dataclass(frozen=True)
class Job:
    scenario: str
    run_index: int
    seed: int
    thresholds: ThresholdConfig
    out_path: str
    setting: str = "default"


def _memories(cfg: RunConfig, seed: int) -> Memories:
    emb = HashingEmbedder(dim=cfg.embed_dim, seed=seed)
    samb = MemoryBank(cfg.samb)
    if cfg.samb_path and Path(cfg.samb_path).exists():
        samb = MemoryBank.load(cfg.samb_path, cfg.samb)
    if cfg.sakg_dir and (Path(cfg.sakg_dir) / "nodes.jsonl").exists():
        sakg = KnowledgeGraph.load(cfg.sakg_dir, cfg.kg, emb)
    else:
        sakg = KnowledgeGraph(cfg.kg, emb)
    return Memories(samb=samb, sakg=sakg, fusion=cfg.fusion)


def run_job(job: Job, cfg: RunConfig, memories: Memories | None = None) -> tuple[str, str]:
    world = load_scenario(job.scenario)
    mem = memories or _memories(cfg, job.seed)
    header = {
        "scenario_path": Path(job.scenario).name,
        "run_index": job.run_index,
        "setting": job.setting,
        "thresholds": dataclasses.asdict(job.thresholds),
        "config_hash": cfg.behavior_hash(),
    }
    episode = run_episode(GridEnv(world), job.thresholds, memories=mem, mode=cfg.mode,
                          seed=job.seed, header=header)
    path = Path(job.out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    episode.write(path)
    return str(path), episode.status


def _run_job_star(args: tuple[Job, RunConfig]) -> tuple[str, str]:
    return run_job(*args)


def execute(jobs: list[Job], cfg: RunConfig) -> list[tuple[str, str]]:
    """Run jobs in order.  Shared memory stores force sequential execution."""
    shared = bool(cfg.samb_path or cfg.sakg_dir)
    if shared:
        mem = _memories(cfg, cfg.seed)
        results = [run_job(job, cfg, mem) for job in jobs]
        if cfg.samb_path:
            Path(cfg.samb_path).parent.mkdir(parents=True, exist_ok=True)
            mem.samb.save(cfg.samb_path)
        if cfg.sakg_dir:
            mem.sakg.save(cfg.sakg_dir)
        return results
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            return list(pool.map(_run_job_star, [(j, cfg) for j in jobs]))
    return [run_job(job, cfg) for job in jobs]


def plan_jobs(cfg: RunConfig, out: Path, thresholds: ThresholdConfig, setting: str = "default") -> list[Job]:
    jobs = []
    for run_index in range(cfg.repeat):
        for scenario in cfg.scenarios:
            name = Path(scenario).stem
            jobs.append(Job(scenario, run_index, cfg.seed + run_index, thresholds,
                            str(out / f"run{run_index}" / f"{name}.jsonl"), setting))
    return jobs


def _check_scenarios(cfg: RunConfig) -> None:
    if not cfg.scenarios:
        cfg.scenarios = builtin_scenarios()
    for s in cfg.scenarios:
        if not Path(s).is_file():
            raise ConfigError(f"scenario file not found: {s}")
        try:
            load_scenario(s)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid scenario {s}: {exc}") from exc


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in ("seed", "workers", "mode", "repeat"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "scenarios", None):
        cfg.scenarios = list(args.scenarios)
    if getattr(args, "samb", None):
        cfg.samb_path = args.samb
    if getattr(args, "sakg", None):
        cfg.sakg_dir = args.sakg
    cfgmod.validate(cfg)
    return cfg


def _exit_for(statuses: list[str]) -> int:
    return EXIT_OK if all(s == "success" for s in statuses) else EXIT_TASK_FAILED


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(cfgmod.load(args.config), args)
    _check_scenarios(cfg)
    if args.print_config:
        print(cfg.dumps(), end="")
        return EXIT_OK
    out = Path(cfg.out_dir)
    results = execute(plan_jobs(cfg, out, cfg.trigger), cfg)
    summary = write_report(out)
    for path, status in results:
        print(f"{status:16s} {path}")
    _print_summary(summary)
    return _exit_for([s for _, s in results])


def _print_summary(summary: dict) -> None:
    for name in METRIC_COLUMNS:
        m = summary["metrics"][name]
        mean = m["mean"]
        if mean is None:
            text = NO_STUCK if name == "Recovery/Stuck Ratio" else "n/a"
        else:
            text = f"{mean:.4f}" + (f" +/- {m['std']:.4f}" if m["std"] is not None else "")
        print(f"{name:24s} {text}")


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(cfgmod.load(args.config), args)
    _check_scenarios(cfg)
    specs = args.setting or list(cfgmod.SWEEP_SETTINGS)
    settings = [cfgmod.parse_setting(s) for s in specs]
    if args.print_config:
        print(cfg.dumps(), end="")
        for name, th in settings:
            print(f"# setting {name}: {dataclasses.asdict(th)}")
        return EXIT_OK
    out = Path(cfg.out_dir)
    rows, statuses = [], []
    for name, th in settings:
        jobs = plan_jobs(cfg, out / name, th, name)
        results = execute(jobs, cfg)
        statuses += [s for _, s in results]
        logs = [EpisodeLog.read(p) for p, _ in results]
        metrics = run_metrics(logs)
        rows.append({"setting": name, "T": th.T, "tau_v": th.tau_v, "tau_z": th.tau_z, "tau_r": th.tau_r,
                     "tau_rz": th.tau_rz, **metrics})
    fields = list(rows[0])
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    for row in rows:
        print(f"{row['setting']:22s} SR={_fmt(row['SR'])} strategic/step={row['Strategic calls / step']:.3f} "
              f"tokens/task={row['Tokens / Task']:.1f}")
    return _exit_for(statuses)


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def cmd_report(args: argparse.Namespace) -> int:
    summary = write_report(args.logdir, args.out)
    _print_summary(summary)
    return EXIT_OK


def cmd_kg_import(args: argparse.Namespace) -> int:
    cfg = cfgmod.load(args.config)
    records = []
    with open(args.embeddings, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["state_text"], rec["embedding"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{args.embeddings}:{lineno}: bad embedding record ({exc})") from None
            records.append(rec)
    dim = len(records[0]["embedding"]) if records else cfg.embed_dim
    emb = HashingEmbedder(dim=dim, seed=cfg.seed)
    graph_dir = Path(args.graph)
    if (graph_dir / "nodes.jsonl").exists():
        graph = KnowledgeGraph.load(graph_dir, cfg.kg, emb)
    else:
        graph = KnowledgeGraph(cfg.kg, emb)
    n = graph.import_embeddings(records)
    graph.save(graph_dir)
    print(f"imported {n} embeddings into {graph_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trigctl", description="Event-triggered two-level agent runner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("scenarios", nargs="*", help="scenario JSON files (default: built-in pack)")
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--seed", type=int, help="base seed; run i uses seed + i")
        sp.add_argument("--workers", type=int, help="parallel episode workers")
        sp.add_argument("--mode", choices=("step_capped", "call_budgeted"))
        sp.add_argument("--out", help="output directory for logs and reports")
        sp.add_argument("--repeat", type=int, help="independent runs per scenario")
        sp.add_argument("--samb", help="persistent SA-MB store (JSONL); forces sequential runs")
        sp.add_argument("--sakg", help="persistent SA-KG directory; forces sequential runs")
        sp.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    run = sub.add_parser("run", help="run episodes and write logs plus a report")
    common(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="threshold sensitivity sweep")
    common(sweep)
    sweep.add_argument("--setting", action="append",
                       help="named setting or name:T=3,tau_v=0.3 (repeatable; default: all named)")
    sweep.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report", help="aggregate metrics from existing logs")
    report.add_argument("logdir")
    report.add_argument("--out", help="where to write summary.json and results.csv")
    report.set_defaults(func=cmd_report)

    kg = sub.add_parser("kg-import", help="import precomputed state embeddings into a graph store")
    kg.add_argument("graph", help="graph directory")
    kg.add_argument("embeddings", help="JSONL records with state_text and embedding")
    kg.add_argument("--config")
    kg.set_defaults(func=cmd_kg_import)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LogFormatError, FileNotFoundError) as exc:
        print(f"trigctl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
