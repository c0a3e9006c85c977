"""Piecewise local-linear workload-to-usage pattern model.

The hypothesis class is L segments of linear models over half-open workload
ranges; the learner is a deterministic greedy segmented-least-squares tree:
candidate splits sit on within-node X quantiles, and a split is kept only
when both children are large enough and the total OLS error drops by a
minimum relative amount.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class PatternConfig:
    max_segments: int = 16
    min_leaf: int = 32
    improvement_min: float = 0.01   # required relative SSE drop per split


@dataclass(frozen=True)
class Segment:
    alpha: float   # slope, mCore per RPS
    beta: float    # intercept, mCore


@dataclass(frozen=True)
class PiecewisePattern:
    """Split points x_0 < ... < x_L and one linear model per segment.

    Segment l covers [x_{l-1}, x_l) with the last interval closed; prediction
    outside the training range extrapolates the boundary segments.
    """

    splits: tuple[float, ...]
    segments: tuple[Segment, ...]
    trained_on: tuple[int, int, int]   # (from_ts, to_ts, sample_count)

    def __post_init__(self):
        if len(self.splits) != len(self.segments) + 1:
            raise ValueError("need exactly one more split point than segments")
        if any(a >= b for a, b in zip(self.splits, self.splits[1:])):
            raise ValueError("split points must be strictly ascending")

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def _ols(sx: float, sy: float, sxx: float, sxy: float, syy: float, n: int):
    """Slope/intercept/SSE from moment sums; flat fit when X is degenerate."""
    cxx = sxx - sx * sx / n
    cxy = sxy - sx * sy / n
    cyy = syy - sy * sy / n
    if cxx <= 0:
        return 0.0, sy / n, max(cyy, 0.0)
    alpha = cxy / cxx
    return alpha, (sy - alpha * sx) / n, max(cyy - cxy * cxy / cxx, 0.0)


class _Node:
    __slots__ = ("lo", "hi", "sse", "best_gain", "best_split_idx", "best_children_sse")

    def __init__(self, lo: int, hi: int):
        self.lo = lo
        self.hi = hi
        self.sse = 0.0
        self.best_gain = -math.inf
        self.best_split_idx = -1
        self.best_children_sse = 0.0


QUANTILE_GRANULARITY = 64


def fit(pairs, cfg: PatternConfig | None = None,
        trained_on: tuple[int, int] | None = None) -> PiecewisePattern:
    """Fit a piecewise-linear pattern to (workload, usage) pairs.

    Greedy binary partitioning on X: the leaf whose best quantile split
    removes the most error is split first, until `max_segments` leaves or no
    split clears the min-leaf and relative-improvement bars.  Deterministic;
    refitting identical input reproduces the model bit for bit.
    """
    cfg = cfg or PatternConfig()
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array-like of (X, Y)")
    n = len(arr)
    if n < 2 * cfg.min_leaf:
        raise InsufficientDataError(
            f"need at least {2 * cfg.min_leaf} pairs, got {n}")
    span = (int(trained_on[0]), int(trained_on[1])) if trained_on else (0, 0)

    order = np.argsort(arr[:, 0], kind="stable")
    x = arr[order, 0]
    y = arr[order, 1]
    if x[0] == x[-1]:
        # Degenerate workload axis: one flat segment around the point.
        return PiecewisePattern(
            splits=(float(x[0]) - 0.5, float(x[0]) + 0.5),
            segments=(Segment(0.0, float(np.mean(y))),),
            trained_on=(span[0], span[1], n))

    # Prefix moment sums give O(1) OLS error for any contiguous index range.
    px = np.concatenate([[0.0], np.cumsum(x)])
    py = np.concatenate([[0.0], np.cumsum(y)])
    pxx = np.concatenate([[0.0], np.cumsum(x * x)])
    pxy = np.concatenate([[0.0], np.cumsum(x * y)])
    pyy = np.concatenate([[0.0], np.cumsum(y * y)])

    def range_sse(lo: int, hi: int) -> float:
        return _ols(px[hi] - px[lo], py[hi] - py[lo], pxx[hi] - pxx[lo],
                    pxy[hi] - pxy[lo], pyy[hi] - pyy[lo], hi - lo)[2]

    def evaluate(node: _Node) -> None:
        lo, hi = node.lo, node.hi
        node.sse = range_sse(lo, hi)
        node.best_gain = -math.inf
        if node.sse <= 0.0 or hi - lo < 2 * cfg.min_leaf:
            return
        qs = np.quantile(x[lo:hi],
                         np.arange(1, QUANTILE_GRANULARITY) / QUANTILE_GRANULARITY)
        cuts = np.unique(np.searchsorted(x, qs, side="left"))
        cuts = cuts[(cuts >= lo + cfg.min_leaf) & (cuts <= hi - cfg.min_leaf)]
        # A usable cut must separate distinct X values, or the half-open
        # segment intervals could not reproduce the index partition.
        cuts = cuts[(x[cuts - 1] < x[cuts]) & (x[cuts] < x[n - 1])]
        for cut in cuts:
            children = range_sse(lo, int(cut)) + range_sse(int(cut), hi)
            gain = node.sse - children
            if gain > node.best_gain:
                node.best_gain = gain
                node.best_split_idx = int(cut)
                node.best_children_sse = children
        if node.best_gain < cfg.improvement_min * node.sse:
            node.best_gain = -math.inf

    root = _Node(0, n)
    evaluate(root)
    leaves = [root]
    while len(leaves) < cfg.max_segments:
        candidates = [nd for nd in leaves if nd.best_gain > 0]
        if not candidates:
            break
        node = max(candidates, key=lambda nd: (nd.best_gain, -nd.lo))
        left = _Node(node.lo, node.best_split_idx)
        right = _Node(node.best_split_idx, node.hi)
        evaluate(left)
        evaluate(right)
        pos = leaves.index(node)
        leaves[pos:pos + 1] = [left, right]

    leaves.sort(key=lambda nd: nd.lo)
    splits = [float(x[0])]
    segments = []
    for nd in leaves:
        sx = px[nd.hi] - px[nd.lo]
        sy = py[nd.hi] - py[nd.lo]
        sxx = pxx[nd.hi] - pxx[nd.lo]
        sxy = pxy[nd.hi] - pxy[nd.lo]
        syy = pyy[nd.hi] - pyy[nd.lo]
        alpha, beta, _ = _ols(sx, sy, sxx, sxy, syy, nd.hi - nd.lo)
        segments.append(Segment(float(alpha), float(beta)))
        splits.append(float(x[nd.hi - 1]) if nd.hi == n else float(x[nd.hi]))
    return PiecewisePattern(splits=tuple(splits), segments=tuple(segments),
                            trained_on=(span[0], span[1], n))


def predict(model: PiecewisePattern, x: float) -> float:
    """Evaluate the pattern at one workload value, floored at zero.

    Interior boundaries are half-open (a value on a split takes the right
    segment); values outside the training range extrapolate the boundary
    segments, which is logged since the model was never trained there.
    """
    if x < model.splits[0] or x > model.splits[-1]:
        log.debug("prediction at x=%s extrapolates beyond trained range [%s, %s]",
                  x, model.splits[0], model.splits[-1])
    interior = model.splits[1:-1]
    idx = int(np.searchsorted(interior, x, side="right"))
    seg = model.segments[idx]
    return max(seg.alpha * x + seg.beta, 0.0)


def predict_many(model: PiecewisePattern, xs: np.ndarray) -> np.ndarray:
    interior = np.asarray(model.splits[1:-1])
    idx = np.searchsorted(interior, xs, side="right")
    alphas = np.asarray([s.alpha for s in model.segments])
    betas = np.asarray([s.beta for s in model.segments])
    return np.maximum(alphas[idx] * xs + betas[idx], 0.0)


def training_sse(model: PiecewisePattern, pairs) -> float:
    """SSE of the raw segment responses (no non-negativity floor), i.e. the
    objective the splits were selected on."""
    arr = np.asarray(pairs, dtype=np.float64)
    interior = np.asarray(model.splits[1:-1])
    idx = np.searchsorted(interior, arr[:, 0], side="right")
    alphas = np.asarray([s.alpha for s in model.segments])
    betas = np.asarray([s.beta for s in model.segments])
    raw = alphas[idx] * arr[:, 0] + betas[idx]
    return float(np.sum((arr[:, 1] - raw) ** 2))


def dump_model(model: PiecewisePattern, service_id: str) -> dict:
    return {
        "service_id": service_id,
        "splits": list(model.splits),
        "segments": [{"alpha": s.alpha, "beta": s.beta} for s in model.segments],
        "trained_on": {"from_ts": model.trained_on[0], "to_ts": model.trained_on[1],
                       "sample_count": model.trained_on[2]},
    }


def write_model_json(model: PiecewisePattern, service_id: str, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dump_model(model, service_id), indent=2,
                                     sort_keys=True) + "\n", encoding="utf-8")


def load_model_json(path: str | Path) -> tuple[str, PiecewisePattern]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    model = PiecewisePattern(
        splits=tuple(doc["splits"]),
        segments=tuple(Segment(s["alpha"], s["beta"]) for s in doc["segments"]),
        trained_on=(doc["trained_on"]["from_ts"], doc["trained_on"]["to_ts"],
                    doc["trained_on"]["sample_count"]))
    return doc["service_id"], model
