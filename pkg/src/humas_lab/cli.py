"""Command-line entry point.

Commands: gen-trace (synthetic corpus + ground truth), detect (normalization
plus drift detection, optionally scored against ground truth), simulate
(replay episodes for each configured mode), report (aggregate prior outputs
into a summary with figures).  Every command writes a manifest sufficient to
reproduce its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import (ConfigError, RunConfig, build_gen_spec, config_digest,
                     config_to_dict, load_config, _policy_for)
from .drift import write_detections_csv
from .normalize import estimate_red, write_red_csv
from .parallel import map_keyed, worker_count
from .plan import write_plans_csv, write_quotas_csv
from .scoring import score_detections, write_score_json
from .sim import (EpisodeResult, ObservationConfig, SimMode, observe_service,
                  run_episode)
from .synth import generate, load_true_red, load_upgrades, write_true_red, write_upgrades
from .trace import load_fleet, load_trace, write_fleet, write_trace

log = logging.getLogger(__name__)


def _write_manifest(out: Path, command: str, cfg: RunConfig, args: dict,
                    artifacts: list[str]) -> None:
    import numpy
    doc = {
        "command": command,
        "config": config_to_dict(cfg),
        "config_sha256": config_digest(cfg),
        "global_seed": cfg.global_seed,
        "args": {k: str(v) for k, v in sorted(args.items()) if v is not None},
        "versions": {"humas_lab": __version__, "numpy": numpy.__version__,
                     "python": ".".join(map(str, sys.version_info[:3]))},
        "artifacts": sorted(artifacts),
    }
    (out / f"manifest_{command}.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_out(cfg: RunConfig, flag: str | None) -> Path:
    out = Path(flag) if flag else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_trace(cfg: RunConfig, out_flag: str | None) -> int:
    out = _resolve_out(cfg, out_flag)
    spec, _ = build_gen_spec(cfg)
    traces, upgrades, red_map = generate(spec)
    write_trace(traces, out / "trace.csv")
    write_fleet(spec.fleet, out / "fleet.csv")
    write_upgrades(upgrades, out / "upgrades.csv")
    write_true_red(red_map, out / "true_red.json")
    artifacts = ["trace.csv", "trace.csv.meta.json", "fleet.csv",
                 "upgrades.csv", "true_red.json"]
    _write_manifest(out, "gen-trace", cfg, {"out": out}, artifacts)
    log.info("wrote %d services x %d days to %s", len(traces), spec.days, out)
    return 0


def _observation_task(payload):
    trace, ocfg = payload
    return observe_service(trace, ocfg)


def _observe_all(traces, ocfg) -> dict:
    payloads = {sid: (traces[sid], ocfg) for sid in traces}
    return map_keyed(_observation_task, payloads)


def cmd_detect(cfg: RunConfig, trace_path: str, out_flag: str | None,
               upgrades_path: str | None, fleet_path: str | None) -> int:
    out = _resolve_out(cfg, out_flag)
    fleet_file = Path(fleet_path) if fleet_path else Path(trace_path).parent / "fleet.csv"
    fleet = load_fleet(fleet_file)
    traces = load_trace(trace_path, fleet)
    ocfg = ObservationConfig(wcfg=cfg.window, lcfg=cfg.lsdd,
                             global_seed=cfg.global_seed, detect=True,
                             normalize=True, standard_type=fleet.standard_type)
    observations = _observe_all(traces, ocfg)
    results = [obs.detection for obs in observations.values()]
    write_detections_csv(results, out / "detections.csv")
    red_tables = [estimate_red(traces[sid], fleet.standard_type,
                               window=(max(0, traces[sid].n_minutes - 2880),
                                       traces[sid].n_minutes))
                  for sid in sorted(traces)]
    write_red_csv(red_tables, out / "red_table.csv")
    artifacts = ["detections.csv", "red_table.csv"]

    upgrades_file = Path(upgrades_path) if upgrades_path \
        else Path(trace_path).parent / "upgrades.csv"
    if upgrades_file.exists():
        upgrades = load_upgrades(upgrades_file)
        detections = {sid: obs.detection for sid, obs in observations.items()}
        score = score_detections(detections, upgrades, cfg.window)
        write_score_json(score, out / "detect_score.json")
        artifacts.append("detect_score.json")
        log.info("detection score: %s", json.dumps(score.to_json_dict()))
    _write_manifest(out, "detect", cfg,
                    {"trace": trace_path, "upgrades": upgrades_path,
                     "fleet": fleet_path, "out": out}, artifacts)
    return 0


def _metrics_json_block(res: EpisodeResult) -> dict:
    block = {
        "weighted": res.weighted,
        "per_service": {
            sid: {
                "mean_util_pct": m.mean_util_pct,
                "util_std_total": m.util_std_total,
                "util_std_per_type": m.util_std_per_type,
                "slack_pct": m.slack_pct,
                "vio_pct": m.vio_pct,
                "mean_capacity_cores": m.mean_capacity_cores,
                "n_drifts": m.n_drifts,
                "n_refits": m.n_refits,
            } for sid, m in sorted(res.per_service.items())},
        "shortfall_events": len(res.shortfalls),
    }
    return block


def cmd_simulate(cfg: RunConfig, trace_path: str, out_flag: str | None,
                 fleet_path: str | None, true_red_path: str | None,
                 mode_flag: str | None) -> int:
    out = _resolve_out(cfg, out_flag)
    fleet_file = Path(fleet_path) if fleet_path else Path(trace_path).parent / "fleet.csv"
    fleet = load_fleet(fleet_file)
    traces = load_trace(trace_path, fleet)
    red_file = Path(true_red_path) if true_red_path \
        else Path(trace_path).parent / "true_red.json"
    true_red = load_true_red(red_file) if red_file.exists() else {}
    policies = {sid: _policy_for(cfg, sid) for sid in traces}
    modes = [mode_flag] if mode_flag else list(cfg.modes)

    artifacts = []
    metrics: dict[str, dict] = {}
    plots_rows = []
    for mode_s in modes:
        mode = SimMode.parse(mode_s)
        ocfg = ObservationConfig(
            wcfg=cfg.window, lcfg=cfg.lsdd, global_seed=cfg.global_seed,
            detect=mode.kind in ("humas", "no_normalize"),
            normalize=mode.kind in ("humas", "fixed_relearn"),
            standard_type=fleet.standard_type)
        observations = _observe_all(traces, ocfg)
        res = run_episode(traces, fleet, policies, mode, wcfg=cfg.window,
                          lcfg=cfg.lsdd, pcfg=cfg.pattern,
                          forecast_method=cfg.forecaster_method,
                          latency=cfg.latency, simcfg=cfg.sim,
                          true_red=true_red, global_seed=cfg.global_seed,
                          observations=observations)
        metrics[res.mode] = _metrics_json_block(res)
        ts_path = out / f"timeseries_{res.mode}.csv"
        _write_timeseries(res.timeseries_rows, ts_path)
        write_plans_csv(res.plans, out / f"plans_{res.mode}.csv")
        write_quotas_csv(res.plans, out / f"quotas_{res.mode}.csv")
        artifacts += [ts_path.name, f"plans_{res.mode}.csv", f"quotas_{res.mode}.csv"]
        plots_rows.extend(res.plots_rows)
        log.info("mode %s: %s", res.mode, json.dumps(res.weighted))

    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_plots_csv(plots_rows, out / "plots_data.csv")
    artifacts += ["metrics.json", "plots_data.csv"]
    _write_manifest(out, "simulate", cfg,
                    {"trace": trace_path, "fleet": fleet_path,
                     "true_red": true_red_path, "mode": mode_flag, "out": out},
                    artifacts)
    return 0


def _write_timeseries(rows, path: Path) -> None:
    import csv
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("ts", "service_id", "machine_type", "utilization_pct",
                         "capacity_mcore"))
        for ts, sid, mtype, util, cap in rows:
            writer.writerow([ts, sid, mtype, _fmt(util), _fmt(cap)])


def _write_plots_csv(rows, path: Path) -> None:
    import csv
    rows = sorted(rows, key=lambda r: (r[2], r[1], r[0]))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("ts", "service_id", "mode", "utilization_pct",
                         "capacity_mcore", "workload_rps", "u_star_pct"))
        for ts, sid, mode, util, cap, x, ustar in rows:
            writer.writerow([ts, sid, mode, _fmt(util), _fmt(cap),
                             _fmt(x) if x != "" else "", _fmt(ustar)])


def _fmt(v) -> str:
    import math
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_report(run_dir: str, out_flag: str | None) -> int:
    from .report import build_report
    run = Path(run_dir)
    out = Path(out_flag) if out_flag else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    artifacts = build_report(run, out)
    manifest = {
        "command": "report",
        "inputs": sorted(p.name for p in run.iterdir() if p.is_file()),
        "artifacts": sorted(artifacts),
        "versions": {"humas_lab": __version__},
    }
    (out / "manifest_report.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="humas-lab",
        description="Trace-driven auto-scaling laboratory")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("detect", help="run normalization and drift detection")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--upgrades")
    p.add_argument("--fleet")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="replay auto-scaling episodes")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--fleet")
    p.add_argument("--true-red")
    p.add_argument("--mode")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="aggregate outputs into summary and figures")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dir, args.out)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, global_seed=args.seed)
        if args.command == "gen-trace":
            return cmd_gen_trace(cfg, args.out)
        if args.command == "detect":
            return cmd_detect(cfg, args.trace, args.out, args.upgrades, args.fleet)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.trace, args.out, args.fleet,
                                args.true_red, args.mode)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
