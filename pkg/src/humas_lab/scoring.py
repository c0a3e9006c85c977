"""Detection-quality scoring against ground-truth upgrades.

A confirmed drift at window i_d is a true detection when the span of window
i_d or i_d-1 overlaps an injected upgrade of the same service.  Precision is
true detections over all detections; recall counts distinct matched upgrades
so repeated detections of one upgrade cannot inflate it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .drift import DetectionResult, WindowConfig, window_span
from .synth import UpgradeEvent


@dataclass
class DetectionScore:
    upgrades: int
    dd: int = 0
    tdd: int = 0
    fdd: int = 0
    matched_upgrades: int = 0
    matched_by_rate: dict[str, list[int]] = field(default_factory=dict)

    @property
    def precision(self) -> float | None:
        return self.tdd / self.dd if self.dd else None

    @property
    def recall(self) -> float | None:
        return self.matched_upgrades / self.upgrades if self.upgrades else None

    def to_json_dict(self) -> dict:
        def pct(v):
            return None if v is None else v * 100.0
        return {
            "DD": self.dd, "TDD": self.tdd, "FDD": self.fdd,
            "precision": pct(self.precision), "recall": pct(self.recall),
            "upgrades": self.upgrades, "matched_upgrades": self.matched_upgrades,
            "by_change_rate": {
                k: {"upgrades": v[0], "matched": v[1],
                    "detection_rate": (v[1] / v[0] * 100.0) if v[0] else None}
                for k, v in sorted(self.matched_by_rate.items())},
        }


def drift_overlaps_upgrade(drift_index: int, upgrade: UpgradeEvent,
                           wcfg: WindowConfig, ts0: int = 0) -> bool:
    """True when window i_d or i_d-1 overlaps the upgrade interval."""
    lo = window_span(max(drift_index - 1, 0), wcfg, ts0)[0]
    hi = window_span(drift_index, wcfg, ts0)[1]
    return upgrade.start_ts < hi and upgrade.end_ts > lo


RATE_BINS = (
    ("abs_ge_10pct", lambda r: r >= 0.10),
    ("abs_gt_5pct", lambda r: r > 0.05),
    ("abs_le_2pct", lambda r: r <= 0.02),
)


def score_detections(detections: dict[str, DetectionResult],
                     upgrades: list[UpgradeEvent], wcfg: WindowConfig,
                     ts0: int = 0) -> DetectionScore:
    """Score all services' confirmed drifts against ground truth."""
    by_service: dict[str, list[UpgradeEvent]] = {}
    for ev in upgrades:
        by_service.setdefault(ev.service_id, []).append(ev)
    score = DetectionScore(upgrades=len(upgrades))
    matched: set[tuple[str, int]] = set()
    for sid, det in sorted(detections.items()):
        events = by_service.get(sid, [])
        for drift in det.drifts:
            score.dd += 1
            hits = [k for k, ev in enumerate(events)
                    if drift_overlaps_upgrade(drift.drift_index, ev, wcfg, ts0)]
            if hits:
                score.tdd += 1
                matched.update((sid, k) for k in hits)
            else:
                score.fdd += 1
    score.matched_upgrades = len(matched)
    for label, in_bin in RATE_BINS:
        total = 0
        got = 0
        for sid, events in by_service.items():
            for k, ev in enumerate(events):
                if in_bin(abs(ev.change_rate)):
                    total += 1
                    got += (sid, k) in matched
        score.matched_by_rate[label] = [total, got]
    return score


def write_score_json(score: DetectionScore, path: str | Path) -> None:
    Path(path).write_text(json.dumps(score.to_json_dict(), indent=2,
                                     sort_keys=True) + "\n", encoding="utf-8")
