"""Command-line entry point: ``teamgoals <command> ...``.

Commands
    infer     goal posteriors for one stimulus or a directory of stimuli
    rollout   zero-temperature joint plan and salient steps for each goal
    sweep     rerun inference over a temperature grid
    eval      accuracy table, correlations and bootstrap intervals against human data
    synth     write a synthetic human-response CSV from the model
    validate  check map, stimulus and human-response files

Failures exit nonzero and print a JSON error object on stderr. Batch
commands write whatever finished plus a ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import __version__
from . import analysis as A
from .config import ConfigError, RunConfig
from .formats import (
    FormatError,
    MapParseError,
    ReplayError,
    load_environment,
    load_stimuli,
    load_stimulus,
    read_human_csv,
    write_human_csv,
)
from .gridworld import Goal
from .inference import MODES, TRACE_CSV_HEADER, GoalPosteriorTrace, QSourcePool, normalize_mode, run_stimulus
from .lm_client import LMError
from .planner import GoalUnreachableError, QSource, plan_cost, rollout_optimal
from .utterance import extract_salient, serialize_salient

log = logging.getLogger("teamgoals")

EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_LM = 3

# synthetic participants answer from a noisier model than the one being evaluated
SYNTH_TEMPERATURE = 2.0


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE, **details):
        super().__init__(message)
        self.code = code
        self.details = details


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _error_payload(exc: BaseException) -> dict:
    err = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("line", "column", "timestep", "problems", "status"):
        value = getattr(exc, attr, None)
        if value is not None:
            err[attr] = value
    err.update(getattr(exc, "details", {}))
    return err


# ---------------------------------------------------------------- trace computation


def _stimulus_files(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise CLIError(f"no stimulus files in {path}", EXIT_INPUT)
        return files
    if not path.exists():
        raise CLIError(f"no such file: {path}", EXIT_INPUT)
    return [path]


def _run_chunk(files: list[str], modes: list[str], temperatures: list[float], cfg_dict: dict) -> list[dict]:
    """Worker body: every (file, temperature, mode) for one chunk, sharing Q caches."""
    cfg = RunConfig.from_dict(cfg_dict)
    scorer = cfg.make_scorer()
    pool = QSourcePool()
    maps: dict = {}
    out = []
    for f in files:
        try:
            stim = load_stimulus(f, maps)
        except Exception as exc:  # reported per file in the manifest
            out.append({"file": f, "error": _error_payload(exc)})
            continue
        for T in temperatures:
            for mode in modes:
                try:
                    trace = run_stimulus(stim, mode, cfg.inference_config(T), pool, scorer)
                    out.append({"file": f, "stimulus": stim.id, "temperature": T, "mode": mode,
                                "trace": trace.to_dict()})
                except Exception as exc:
                    out.append({"file": f, "stimulus": stim.id, "temperature": T, "mode": mode,
                                "error": _error_payload(exc)})
    return out


def _group_by_map(files: Sequence[str]) -> list[list[str]]:
    """Stimulus files grouped by the map they reference, so a worker shares Q caches per map."""
    groups: dict[str, list[str]] = {}
    for f in files:
        try:
            key = str((Path(f).parent / json.loads(Path(f).read_text(encoding="utf-8"))["map"]).resolve())
        except (OSError, ValueError, KeyError, TypeError):
            key = f  # broken files get their own group; the worker reports the error
        groups.setdefault(key, []).append(f)
    return list(groups.values())


def compute_traces(files: Sequence[Path], modes: Sequence[str], temperatures: Sequence[float], cfg: RunConfig) -> list[dict]:
    """Run inference for every file, mode and temperature, fanning out over ``cfg.jobs`` processes.

    Stimuli on the same map go to the same worker, which reuses its Q
    caches across stimuli and temperatures. Results come back in input order.
    """
    files = [str(f) for f in files]
    args = (list(modes), list(temperatures), cfg.to_dict())
    if cfg.jobs == 1 or len(files) == 1:
        return _run_chunk(files, *args)
    groups = _group_by_map(files)
    n = min(cfg.jobs, len(groups), os.cpu_count() or 1)
    if n == 1:
        return _run_chunk(files, *args)
    chunks: list[list[str]] = [[] for _ in range(n)]
    for group in sorted(groups, key=len, reverse=True):
        min(chunks, key=len).extend(group)
    with ProcessPoolExecutor(max_workers=n) as ex:
        results = list(ex.map(_run_chunk, chunks, *[[a] * n for a in args]))
    order = {f: i for i, f in enumerate(files)}
    merged = [r for chunk in results for r in chunk]
    return sorted(merged, key=lambda r: (order[r["file"]], r.get("temperature", 0), r.get("mode", "")))


def _write_manifest(out: Path, command: str, cfg: RunConfig, entries: list[dict]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "entries": entries,
        "failed": sum(1 for e in entries if e.get("status") != "ok"),
    }
    (out / "manifest.json").write_text(_dumps(manifest) + "\n", encoding="utf-8")


def _trace_csv(path: Path, trace: GoalPosteriorTrace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_HEADER)
        writer.writerows(trace.csv_rows())


def _summary_lines(trace: GoalPosteriorTrace) -> list[str]:
    lines = [f"{trace.stimulus_id} [{trace.mode}] true goal {trace.true_goal}",
             "  judgment  t    " + "  ".join(f"{g:>7}" for g in trace.goals)]
    for idx, t, probs in trace.judgments():
        lines.append(f"  {idx:>8}  {t:<3}  " + "  ".join(f"{p:7.4f}" for p in probs))
    return lines


# ---------------------------------------------------------------- commands


def cmd_infer(args, cfg: RunConfig) -> int:
    mode = normalize_mode(args.mode)
    files = _stimulus_files(args.stimuli)
    results = compute_traces(files, [mode], [cfg.temperature], cfg)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    entries, traces, errors = [], [], []
    for r in results:
        entry = {"file": r["file"], "stimulus": r.get("stimulus"), "mode": mode}
        if "error" in r:
            entry.update(status="error", error=r["error"])
            errors.append(entry)
        else:
            trace = GoalPosteriorTrace.from_dict(r["trace"])
            traces.append(trace)
            entry["status"] = "ok"
            if out:
                stem = f"{trace.stimulus_id}.{mode}"
                (out / f"{stem}.json").write_text(_dumps(r["trace"]) + "\n", encoding="utf-8")
                _trace_csv(out / f"{stem}.csv", trace)
                entry["outputs"] = [f"{stem}.json", f"{stem}.csv"]
        entries.append(entry)
    if out:
        _write_manifest(out, "infer", cfg, entries)
    if args.json:
        if len(files) == 1 and traces:
            print(_dumps(traces[0].to_dict()))
        else:
            print(_dumps({"traces": [t.to_dict() for t in traces], "errors": errors}))
    else:
        for trace in traces:
            print("\n".join(_summary_lines(trace)))
    for e in errors:
        print(json.dumps({"error": e["error"], "file": e["file"]}, sort_keys=True), file=sys.stderr)
    return EXIT_FAILURE if errors else 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    gridmap = load_environment(args.map)
    goals = [Goal(g) for g in (args.goal or gridmap.gems)]
    report = []
    for goal in goals:
        if goal.gem not in gridmap.gems:
            raise CLIError(f"{goal.gem} is not a gem on {args.map}", EXIT_INPUT)
        q = QSource(gridmap, goal, heuristic=cfg.heuristic)
        try:
            plan = rollout_optimal(q, gridmap.initial_state())
        except GoalUnreachableError:
            report.append({"goal": goal.gem, "color": gridmap.color(goal.gem), "reachable": False})
            continue
        report.append({
            "goal": goal.gem,
            "color": gridmap.color(goal.gem),
            "reachable": True,
            "cost": plan_cost(plan),
            "plan": [f"{agent.value} {action}" for agent, action in plan],
            "salient": serialize_salient(extract_salient(plan, gridmap)),
        })
    if args.json:
        print(_dumps(report))
    else:
        for r in report:
            if not r["reachable"]:
                print(f"{r['goal']} ({r['color']}): unreachable")
                continue
            print(f"{r['goal']} ({r['color']}): cost {r['cost']:g}, {len(r['plan'])} actions")
            print(f"  salient: {r['salient'] or '(none)'}")
            if args.verbose_plan:
                for step in r["plan"]:
                    print(f"    {step}")
    return 0


def _load_human(path: str, stimuli: dict, filter_outliers: bool) -> tuple[list, list, list]:
    responses = read_human_csv(path)
    excluded: list = []
    if filter_outliers:
        responses, excluded = A.filter_outliers(responses, stimuli)
        for cond, pid in excluded:
            log.warning("excluding participant %s (%s) as an outlier", pid, cond)
    individual = A.human_records(responses, stimuli)
    return individual, A.human_mean_records(individual), excluded


def _traces_from_results(results: list[dict]) -> tuple[list[GoalPosteriorTrace], list[dict]]:
    traces, errors = [], []
    for r in results:
        if "error" in r:
            errors.append(r)
        else:
            traces.append(GoalPosteriorTrace.from_dict(r["trace"]))
    return traces, errors


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_sweep(args, cfg: RunConfig) -> int:
    files = _stimulus_files(args.stimuli)
    stimuli = {s.id: s for s in load_stimuli(args.stimuli)}
    temps = args.temperatures or list(A.DEFAULT_TEMPERATURES)
    conds = list(A.CONDITIONS)
    results = compute_traces(files, conds, temps, cfg)
    by_key: dict = {}
    failures = []
    for r in results:
        if "error" in r:
            failures.append(r)
        else:
            by_key.setdefault((r["temperature"], r["mode"]), []).append(GoalPosteriorTrace.from_dict(r["trace"]))
    if failures:
        raise CLIError(f"{len(failures)} inference runs failed", EXIT_FAILURE,
                       failures=[{"file": f["file"], "error": f["error"]} for f in failures])
    human = None
    if args.human:
        _, human, _ = _load_human(args.human, stimuli, args.filter_outliers)
    sweep = A.temperature_sweep(
        list(stimuli.values()), human, temps, conds,
        runner=lambda _s, mode, T: by_key[(T, mode)],
        n_resamples=args.resamples, seed=cfg.seed,
    )
    rows = [asdict(r) for r in sweep.rows]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        header = list(rows[0])
        _write_csv(out / "sweep.csv", header, ([r[h] for h in header] for r in rows))
        (out / "sweep.json").write_text(_dumps({"rows": rows, "best": sweep.best}) + "\n", encoding="utf-8")
        _write_manifest(out, "sweep", cfg, [{"file": str(f), "status": "ok"} for f in files])
    if args.json:
        print(_dumps({"rows": rows, "best": sweep.best}))
    else:
        print(f"{'T':>8}  {'condition':<22} {'R':>7}  {'95% CI':<17} {'P(g_true)':>9}  {'Brier':>7}")
        for r in sweep.rows:
            mark = " *" if sweep.best.get(r.condition) == r.temperature else ""
            rtxt = f"{r.r:7.3f}" if r.r is not None else "      -"
            ci = f"[{r.ci_low:.3f}, {r.ci_high:.3f}]" if r.ci_low is not None else "-"
            print(f"{r.temperature:8.4g}  {r.condition:<22} {rtxt}  {ci:<17} {r.p_true_mean:9.3f}  {r.brier_mean:7.4f}{mark}")
    return 0


TABLE_HEADER = ("source", "condition",
                "first_p_true", "first_p_true_sd", "first_brier", "first_brier_sd",
                "median_p_true", "median_p_true_sd", "median_brier", "median_brier_sd",
                "last_p_true", "last_p_true_sd", "last_brier", "last_brier_sd", "n_stimuli")


def table_rows(rows: Sequence[A.AccuracyRow]) -> list[list]:
    """Accuracy rows laid out one line per (source, condition), first/median/last side by side."""
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r.source, r.condition), {})[r.point] = r
    out = []
    for (source, cond), points in grouped.items():
        line: list = [source, cond]
        for p in A.POINTS:
            r = points[p]
            line += [r.p_true_mean, r.p_true_sd, r.brier_mean, r.brier_sd]
        line.append(points["first"].n_stimuli)
        out.append(line)
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    files = _stimulus_files(args.stimuli)
    stimuli = {s.id: s for s in load_stimuli(args.stimuli)}
    individual, human, excluded = _load_human(args.human, stimuli, args.filter_outliers)
    results = compute_traces(files, list(A.CONDITIONS), [cfg.temperature], cfg)
    traces, failures = _traces_from_results(results)
    if failures:
        raise CLIError(f"{len(failures)} inference runs failed", EXIT_FAILURE,
                       failures=[{"file": f["file"], "error": f["error"]} for f in failures])
    model = A.model_records(traces)
    table = A.accuracy_table(model + human, stimuli)
    correlations = A.correlation_report(model, human, args.resamples, seed=cfg.seed)
    tests = []
    for cond in A.CONDITIONS:
        try:
            tests.append(A.ttest_model_vs_human(model, human, cond))
        except A.AnalysisError as exc:
            log.info("skipping t-test for %s: %s", cond, exc)
    try:
        tests.append(A.ttest_human_spread(individual))
    except A.AnalysisError as exc:
        log.info("skipping spread t-test: %s", exc)
    report = {
        "temperature": cfg.temperature,
        "excluded_participants": [list(e) for e in excluded],
        "accuracy": [asdict(r) for r in table],
        "correlations": [asdict(c) for c in correlations],
        "ttests": [asdict(t) for t in tests],
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "accuracy_table.csv", TABLE_HEADER, table_rows(table))
        _write_csv(out / "correlations.csv", list(asdict(correlations[0])) if correlations else [],
                   ([*asdict(c).values()] for c in correlations))
        scatter = []
        for label, mc, hc in A.CORRELATIONS:
            for x, y in A.correlation_points(model, human, mc, hc):
                scatter.append((label, x, y))
        _write_csv(out / "scatter.csv", ("comparison", "model", "human"), scatter)
        (out / "report.json").write_text(_dumps(report) + "\n", encoding="utf-8")
        _write_manifest(out, "eval", cfg, [{"file": str(f), "status": "ok"} for f in files])
    if args.json:
        print(_dumps(report))
    else:
        print(f"{'source':<11} {'condition':<21} {'point':<7} {'P(g_true)':>15} {'Brier':>15}")
        for r in table:
            print(f"{r.source:<11} {r.condition:<21} {r.point:<7} "
                  f"{r.p_true_mean:6.2f} ({r.p_true_sd:4.2f})    {r.brier_mean:6.2f} ({r.brier_sd:4.2f})")
        print()
        for c in correlations:
            print(f"R {c.label:<28} {c.r:.3f}  95% CI [{c.ci_low:.3f}, {c.ci_high:.3f}]  n={c.n_points}")
        for t in tests:
            print(f"t-test {t.label:<30} t={t.statistic:.3f}  p={t.p_value:.3g}  n={t.n}")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    files = _stimulus_files(args.stimuli)
    temperature = SYNTH_TEMPERATURE if args.temperature is None else args.temperature
    results = compute_traces(files, list(A.CONDITIONS), [temperature], cfg)
    traces, failures = _traces_from_results(results)
    if failures:
        raise CLIError(f"{len(failures)} inference runs failed", EXIT_FAILURE,
                       failures=[{"file": f["file"], "error": f["error"]} for f in failures])
    responses = A.synthesize_responses(traces, args.participants, args.noise, cfg.seed)
    write_human_csv(args.out, responses)
    summary = {"responses": len(responses), "out": str(args.out), "temperature": temperature}
    print(_dumps(summary) if args.json else f"wrote {len(responses)} responses to {args.out}")
    return 0


def cmd_validate(args, cfg: RunConfig) -> int:
    report = []
    for raw in args.paths:
        path = Path(raw)
        targets = sorted(path.glob("*.json")) + sorted(path.glob("*.map")) if path.is_dir() else [path]
        for target in targets:
            entry = {"file": str(target)}
            try:
                if target.suffix == ".map":
                    from .formats import reachability_report
                    gridmap = load_environment(target)
                    entry.update(kind="map", notes=reachability_report(gridmap))
                elif target.suffix == ".csv":
                    entry.update(kind="human-csv", responses=len(read_human_csv(target)))
                else:
                    stim = load_stimulus(target)
                    entry.update(kind="stimulus", timesteps=len(stim.trajectory))
                entry["status"] = "ok"
            except (FormatError, OSError, ValueError) as exc:
                entry.update(status="error", error=_error_payload(exc))
            report.append(entry)
    failed = [e for e in report if e["status"] != "ok"]
    if args.json:
        print(_dumps({"files": report, "failed": len(failed)}))
    else:
        for e in report:
            status = "ok" if e["status"] == "ok" else f"ERROR {e['error']['message']}"
            print(f"{e['file']}: {status}")
            for note in e.get("notes", []):
                print(f"    {note}")
    return EXIT_INPUT if failed else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teamgoals", description="Goal inference for a principal-assistant team.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--temperature", type=float, help="Boltzmann temperature (default 1.0)")
    common.add_argument("--p-communicate", type=float, dest="p_communicate")
    common.add_argument("--backend", choices=("template", "external-lm"))
    common.add_argument("--heuristic", choices=("manhattan", "maze"))
    common.add_argument("--budget", type=int, help="node expansions per search")
    common.add_argument("--jobs", type=int, help="worker processes for batch commands")
    common.add_argument("--seed", type=int)
    common.add_argument("--cache-dir", dest="cache_dir", help="cache for language model replies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[common], help="goal posteriors for stimuli")
    p.add_argument("stimuli", help="stimulus JSON file or directory")
    p.add_argument("--mode", default="with-instructions",
                   help=f"one of {', '.join(MODES)} (or with / without / instructions)")
    p.add_argument("--out", help="directory for trace JSON/CSV files and a manifest")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("rollout", parents=[common], help="optimal joint plan for each goal")
    p.add_argument("map", help="map file")
    p.add_argument("--goal", action="append", help="gem id (repeatable; default all gems)")
    p.add_argument("--plan", action="store_true", dest="verbose_plan", help="print every action")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("sweep", parents=[common], help="temperature sensitivity sweep")
    p.add_argument("stimuli")
    p.add_argument("--human", help="human-response CSV")
    p.add_argument("--temperatures", type=float, nargs="+", help="default: 0.0625 ... 16 in powers of two")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--filter-outliers", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="compare the model with human judgments")
    p.add_argument("stimuli")
    p.add_argument("--human", required=True, help="human-response CSV")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--filter-outliers", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common],
                       help=f"synthetic human responses from the model (default temperature {SYNTH_TEMPERATURE:g})")
    p.add_argument("stimuli")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--participants", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", parents=[common], help="check file formats")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate)
    return parser


def _run_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k, None) for k in
                 ("p_communicate", "backend", "heuristic", "budget", "jobs", "seed", "cache_dir")}
    if args.command != "synth":
        overrides["temperature"] = args.temperature
    if overrides.get("backend") == "external-lm" and base.lm is None:
        raise ConfigError("--backend external-lm needs an 'lm' endpoint in --config")
    return base.override(**overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        return args.func(args, cfg)
    except CLIError as exc:
        code = exc.code
        payload = _error_payload(exc)
    except (ConfigError, FormatError, MapParseError, ReplayError, A.AnalysisError) as exc:
        code, payload = EXIT_INPUT, _error_payload(exc)
    except LMError as exc:
        code, payload = EXIT_LM, _error_payload(exc)
    except (OSError, ValueError) as exc:
        code, payload = EXIT_FAILURE, _error_payload(exc)
    print(json.dumps({"error": payload}, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
