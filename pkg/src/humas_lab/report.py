"""Aggregate run outputs into one summary plus publication-style figures.

Reads whatever artifacts exist in a run directory (detection scores, episode
metrics, plot series) and emits a merged summary JSON, a per-mode metrics
table CSV, and matplotlib figures rendered to PNG files.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIG_DPI = 120


def _load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def _load_plots_csv(path: Path):
    if not path.exists():
        return None
    series = defaultdict(lambda: ([], [], []))  # (ts, util, u_star)
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if not row["utilization_pct"]:
                continue
            key = (row["mode"], row["service_id"])
            ts, util, ustar = series[key]
            ts.append(int(row["ts"]))
            util.append(float(row["utilization_pct"]))
            ustar.append(float(row["u_star_pct"]))
    return series


def _load_detections_csv(path: Path):
    if not path.exists():
        return None
    per_service = defaultdict(list)
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if not row["d2"]:
                continue
            per_service[row["service_id"]].append(
                (int(row["window_end_ts"]), float(row["d2"]), float(row["threshold"]),
                 row["confirmed_drift"] == "1"))
    return per_service


def fig_utilization(series, out: Path) -> list[str]:
    """Utilization timelines, one panel per mode, for the busiest service."""
    if not series:
        return []
    pick = sorted({sid for _, sid in series})[0]
    modes = sorted({mode for mode, sid in series if sid == pick})
    if not modes:
        return []
    fig, ax = plt.subplots(figsize=(9, 4.2))
    for mode in modes:
        ts, util, ustar = series[(mode, pick)]
        days = [t / 1440.0 for t in ts]
        ax.plot(days, util, linewidth=0.9, label=mode)
    if series[(modes[0], pick)][2]:
        ax.axhline(series[(modes[0], pick)][2][0], color="k", linestyle="--",
                   linewidth=0.8, label="target upper limit")
    ax.set_xlabel("day")
    ax.set_ylabel("CPU utilization (%)")
    ax.set_title(f"utilization under each mode: {pick}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    name = "fig_utilization.png"
    fig.savefig(out / name, dpi=FIG_DPI)
    plt.close(fig)
    return [name]


def fig_mode_comparison(metrics: dict, out: Path) -> list[str]:
    if not metrics:
        return []
    modes = sorted(metrics)
    keys = [("slack_pct", "slack (%)"), ("util_std_total", "utilization Std"),
            ("vio_pct", "violations (%)")]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3.4))
    for ax, (key, label) in zip(axes, keys):
        vals = [metrics[m]["weighted"].get(key) or 0.0 for m in modes]
        ax.bar(range(len(modes)), vals, color="#4878d0")
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=30, ha="right", fontsize=8)
        ax.set_title(label, fontsize=10)
    fig.tight_layout()
    name = "fig_mode_comparison.png"
    fig.savefig(out / name, dpi=FIG_DPI)
    plt.close(fig)
    return [name]


def fig_detection(per_service, out: Path) -> list[str]:
    """Statistic-versus-threshold trace with confirmed drifts marked."""
    if not per_service:
        return []
    pick = sorted(per_service, key=lambda s: -len(per_service[s]))[0]
    rows = per_service[pick]
    days = [r[0] / 1440.0 for r in rows]
    fig, ax = plt.subplots(figsize=(9, 3.6))
    ax.plot(days, [r[1] for r in rows], label="density difference", linewidth=1.0)
    ax.plot(days, [r[2] for r in rows], label="permutation threshold",
            linewidth=0.9, linestyle="--")
    drift_days = [d for d, r in zip(days, rows) if r[3]]
    for i, d in enumerate(drift_days):
        ax.axvline(d, color="tab:red", alpha=0.5, linewidth=0.8,
                   label="confirmed drift" if i == 0 else None)
    ax.set_xlabel("window end (day)")
    ax.set_ylabel("statistic")
    ax.set_title(f"drift detection trace: {pick}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    name = "fig_detection.png"
    fig.savefig(out / name, dpi=FIG_DPI)
    plt.close(fig)
    return [name]


def write_mode_table(metrics: dict, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("mode", "slack_pct", "util_std_total", "vio_pct",
                         "mean_capacity_cores", "shortfall_events"))
        for mode in sorted(metrics):
            w = metrics[mode]["weighted"]
            writer.writerow([
                mode,
                _num(w.get("slack_pct")), _num(w.get("util_std_total")),
                _num(w.get("vio_pct")), _num(w.get("mean_capacity_cores")),
                metrics[mode].get("shortfall_events", 0)])


def _num(v):
    return "" if v is None else repr(float(v))


def build_report(run_dir: Path, out: Path) -> list[str]:
    """Collect run artifacts into summary.json, a mode table, and figures."""
    metrics = _load_json(run_dir / "metrics.json")
    score = _load_json(run_dir / "detect_score.json")
    manifests = {p.name: _load_json(p) for p in sorted(run_dir.glob("manifest_*.json"))}
    artifacts: list[str] = []

    summary = {
        "detection_score": score,
        "modes": {m: metrics[m]["weighted"] for m in sorted(metrics)} if metrics else None,
        "manifests": sorted(manifests),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts.append("summary.json")

    if metrics:
        write_mode_table(metrics, out / "summary_modes.csv")
        artifacts.append("summary_modes.csv")
        artifacts += fig_mode_comparison(metrics, out)
    series = _load_plots_csv(run_dir / "plots_data.csv")
    if series:
        artifacts += fig_utilization(series, out)
    detections = _load_detections_csv(run_dir / "detections.csv")
    if detections:
        artifacts += fig_detection(detections, out)
    return artifacts
