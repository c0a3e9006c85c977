"""Online usage-pattern drift detection over sliding windows.

Each window of (total workload, total normalized usage) pairs is compared
against a reference window with the least-squares density difference (LSDD):
the integrated squared difference between the two probability densities,
estimated in closed form with a Gaussian RBF basis.  The rejection threshold
is calibrated per test by permuting the pooled windows, and a drift is
confirmed only after `theta` consecutive rejections, which filters transient
interference.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .normalize import TotalsSeries
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

DETECTIONS_COLUMNS = ("service_id", "window_index", "window_end_ts", "d2",
                      "threshold", "rejected", "confirmed_drift", "i_d")


class LsddSolverError(RuntimeError):
    """Ridge system stayed ill-conditioned after lambda escalation."""


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between row sets, clamped at zero."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window and hypothesis-test parameters."""

    w_hours: float = 48.0
    s_hours: float = 8.0
    theta: int = 3
    mu: float = 0.05
    m: int = 100
    max_missing_fraction: float = 0.25
    # Which window seeds the next reference after a confirmed drift: the
    # confirming window (default: it holds the most post-drift data, so the
    # detector re-arms with less pre-drift carry-over and fewer repeat
    # detections of one upgrade) or the earliest rejected window i_d.
    reset_reference: str = "confirm_window"

    def __post_init__(self):
        if self.s_hours > self.w_hours:
            raise ValueError("slide step S must not exceed window size W")
        if not 0 < self.mu < 0.5:
            raise ValueError("mu must be in (0, 0.5)")
        if self.m < 1.0 / self.mu:
            raise ValueError("m must be at least 1/mu so the percentile is interior")
        if self.theta < 1:
            raise ValueError("theta must be >= 1")
        if self.reset_reference not in ("drift_window", "confirm_window"):
            raise ValueError("reset_reference must be drift_window or confirm_window")

    @property
    def w_minutes(self) -> int:
        return int(round(self.w_hours * 60))

    @property
    def s_minutes(self) -> int:
        return int(round(self.s_hours * 60))


@dataclass(frozen=True)
class LsddConfig:
    """Estimator internals: RBF centers, bandwidth/ridge grids, CV folds.

    `sigma_grid`, when given, holds absolute bandwidths; otherwise the grid is
    `sigma_multipliers` times a median pairwise distance.  The scale is the
    smaller of the two samples' own median distances rather than the pooled
    one: when the samples are far apart the pooled median measures their
    separation, not the density width, and every candidate bandwidth would be
    far too wide to represent either density.
    """

    max_centers: int = 200
    sigma_grid: tuple[float, ...] | None = None
    sigma_multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    lambda_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0)
    cv_folds: int = 5
    center_seed: int = 0
    standardize: bool = True
    # Windows larger than this are deterministically subsampled before the
    # test; keeps one detection step well under a second.
    max_points_per_window: int = 360
    # Reuse the observed pair's selected (sigma, lambda) and Gram matrices
    # across the permutation replicates; False recalibrates per permutation.
    reuse_model: bool = True

    def __post_init__(self):
        if self.max_centers < 10:
            raise ValueError("max_centers must be >= 10")
        if self.sigma_grid is not None and len(self.sigma_grid) == 0:
            raise ValueError("sigma_grid must be non-empty")
        if len(self.lambda_grid) == 0 or len(self.sigma_multipliers) == 0:
            raise ValueError("grids must be non-empty")


def _solve_ridge(h_mat: np.ndarray, lam: float, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve (H + lam*I) theta = rhs by Cholesky, escalating lambda x10 up to 3 times."""
    eye = np.eye(h_mat.shape[0])
    cur = lam
    for attempt in range(4):
        try:
            fac = scipy.linalg.cho_factor(h_mat + cur * eye, lower=True,
                                          check_finite=False)
            return scipy.linalg.cho_solve(fac, rhs, check_finite=False), cur
        except np.linalg.LinAlgError:
            if attempt == 3:
                break
            cur *= 10.0
    raise LsddSolverError(f"ridge system ill-conditioned even at lambda={cur}")


def _solve_ridge_all_lambdas(h_mat: np.ndarray, lams: tuple[float, ...],
                             rhs: np.ndarray) -> np.ndarray:
    """(H + lam*I) solves for every lambda in the grid; returns (L, b, nrhs)."""
    out = np.empty((len(lams),) + rhs.shape)
    for i, lam in enumerate(lams):
        out[i], _ = _solve_ridge(h_mat, lam, rhs)
    return out


class _LsddProblem:
    """Shared precomputation for one (reference, test) pair.

    The pooled sample is canonically sorted so that centers, standardization
    and group means do not depend on argument order; swapping the two inputs
    then flips h exactly and leaves the score bit-identical.
    """

    def __init__(self, z_u: np.ndarray, z_v: np.ndarray, cfg: LsddConfig):
        z_u = np.asarray(z_u, dtype=np.float64)
        z_v = np.asarray(z_v, dtype=np.float64)
        if z_u.ndim != 2 or z_v.ndim != 2 or z_u.shape[1] != z_v.shape[1]:
            raise ValueError("inputs must be 2-D point sets with equal dimension")
        if len(z_u) < 20 or len(z_v) < 20:
            raise ValueError(f"need >= 20 points per window, got {len(z_u)}/{len(z_v)}")
        self.cfg = cfg
        self.n_u = len(z_u)
        self.n_v = len(z_v)
        pooled = np.vstack([z_u, z_v])
        labels = np.zeros(len(pooled), dtype=bool)
        labels[: self.n_u] = True
        order = np.lexsort(pooled.T[::-1])
        pooled = pooled[order]
        labels = labels[order]
        if cfg.standardize:
            mean = pooled.mean(axis=0)
            std = pooled.std(axis=0)
            std = np.where(std > 0, std, 1.0)
            pooled = (pooled - mean) / std
        self.pooled = pooled
        self.is_u = labels
        self.dim = pooled.shape[1]

        n = len(pooled)
        if n <= cfg.max_centers:
            centers = pooled
        else:
            idx = rng_for(cfg.center_seed, "centers", n).choice(
                n, size=cfg.max_centers, replace=False)
            centers = pooled[np.sort(idx)]
        self.centers = centers

        if cfg.sigma_grid is not None:
            self.sigmas = tuple(float(s) for s in cfg.sigma_grid)
        else:
            med_u = self._median_pairwise(pooled[labels], cfg)
            med_v = self._median_pairwise(pooled[~labels], cfg)
            candidates = [m for m in (med_u, med_v) if m > 0]
            scale = min(candidates) if candidates else 0.0
            if scale <= 0:
                scale = self._median_pairwise(pooled, cfg)
            if scale <= 0:
                scale = 1.0
            self.sigmas = tuple(m * scale for m in cfg.sigma_multipliers)

        d2_pc = _sq_dists(pooled, centers)
        d2_cc = _sq_dists(centers, centers)
        self.kernels: dict[float, np.ndarray] = {}
        self.grams: dict[float, np.ndarray] = {}
        for s in self.sigmas:
            self.kernels[s] = np.exp(d2_pc / (-2.0 * s * s))
            self.grams[s] = (math.pi * s * s) ** (self.dim / 2.0) * np.exp(
                d2_cc / (-4.0 * s * s))
        self._selected: tuple[float, float] | None = None

    @staticmethod
    def _median_pairwise(pts: np.ndarray, cfg: LsddConfig) -> float:
        if len(pts) < 2:
            return 0.0
        if len(pts) > 256:
            idx = rng_for(cfg.center_seed, "median", len(pts)).choice(
                len(pts), size=256, replace=False)
            pts = pts[np.sort(idx)]
        d2 = _sq_dists(pts, pts)
        iu = np.triu_indices(len(pts), k=1)
        return float(np.median(np.sqrt(d2[iu])))

    def group_mean_rows(self, kernel: np.ndarray, is_u: np.ndarray) -> np.ndarray:
        """h vector: mean kernel row over group u minus mean over group v."""
        return kernel[is_u].mean(axis=0) - kernel[~is_u].mean(axis=0)

    def _fold_indicators(self, is_u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-(fold, group) row-sum indicator matrix and member counts."""
        folds = min(self.cfg.cv_folds, int(np.sum(is_u)), int(np.sum(~is_u)))
        pos_u = np.flatnonzero(is_u)
        pos_v = np.flatnonzero(~is_u)
        ind = np.zeros((2 * folds, len(self.pooled)))
        counts = np.zeros(2 * folds)
        for f in range(folds):
            sel_u = pos_u[np.arange(len(pos_u)) % folds == f]
            sel_v = pos_v[np.arange(len(pos_v)) % folds == f]
            ind[f, sel_u] = 1.0
            ind[folds + f, sel_v] = 1.0
            counts[f] = len(sel_u)
            counts[folds + f] = len(sel_v)
        return ind, counts, np.array([folds])

    def cv_select(self, is_u: np.ndarray) -> tuple[float, float]:
        """Pick (sigma, lambda) by k-fold CV on the LSDD objective.

        Folds are assigned by index order within each group, so selection is
        deterministic; the held-out objective theta' H theta - 2 theta' h is
        an unbiased estimate of the criterion the estimator minimizes.
        """
        ind, counts, folds_arr = self._fold_indicators(is_u)
        folds = int(folds_arr[0])
        cnt_u, cnt_v = counts[:folds], counts[folds:]
        lams = self.cfg.lambda_grid

        best = (math.inf, 0, 0)  # (score, sigma index, lambda index)
        for si, s in enumerate(self.sigmas):
            kernel = self.kernels[s]
            gram = self.grams[s]
            sums = ind @ kernel                     # (2F, b) per-fold group sums
            sum_u, sum_v = sums[:folds], sums[folds:]
            tot_u = sum_u.sum(axis=0)
            tot_v = sum_v.sum(axis=0)
            hold_h = (sum_u / cnt_u[:, None] - sum_v / cnt_v[:, None]).T
            train_h = ((tot_u - sum_u) / (cnt_u.sum() - cnt_u)[:, None]
                       - (tot_v - sum_v) / (cnt_v.sum() - cnt_v)[:, None]).T
            thetas = _solve_ridge_all_lambdas(gram, lams, train_h)   # (L, b, F)
            gram_thetas = gram @ thetas
            obj = np.einsum("lbf,lbf->lf", thetas, gram_thetas) \
                - 2.0 * np.einsum("lbf,bf->lf", thetas, hold_h)
            scores = obj.mean(axis=1)
            li = int(np.argmin(scores))
            if scores[li] < best[0]:
                best = (float(scores[li]), si, li)
        return self.sigmas[best[1]], lams[best[2]]

    def selected(self) -> tuple[float, float]:
        """CV selection for the observed grouping, computed once and cached."""
        if self._selected is None:
            self._selected = self.cv_select(self.is_u)
        return self._selected

    def score(self, sigma: float, lam: float, is_u: np.ndarray) -> float:
        kernel = self.kernels[sigma]
        gram = self.grams[sigma]
        h = self.group_mean_rows(kernel, is_u)
        theta, _ = _solve_ridge(gram, lam, h)
        val = 2.0 * float(h @ theta) - float(theta @ (gram @ theta))
        return max(val, 0.0)

    def estimate(self, is_u: np.ndarray | None = None) -> float:
        if is_u is None:
            sigma, lam = self.selected()
            return self.score(sigma, lam, self.is_u)
        sigma, lam = self.cv_select(is_u)
        return self.score(sigma, lam, is_u)

    def permutation_scores(self, m: int, rng_seed: int) -> np.ndarray:
        """LSDD scores of m random re-splits of the pooled sample.

        With reuse_model the observed pair's (sigma, lambda) and Gram
        factorization are shared by all replicates; otherwise each replicate
        re-runs the full CV selection on its own split.
        """
        rng = np.random.default_rng(rng_seed)
        n = len(self.pooled)
        perms = np.empty((m, n), dtype=np.int64)
        for k in range(m):
            perms[k] = rng.permutation(n)
        if not self.cfg.reuse_model:
            out = np.empty(m)
            for k in range(m):
                labels = np.zeros(n, dtype=bool)
                labels[perms[k, : self.n_u]] = True
                out[k] = self.estimate(labels)
            return out

        sigma, lam = self.selected()
        kernel = self.kernels[sigma]
        gram = self.grams[sigma]
        weights = np.full((m, n), -1.0 / self.n_v)
        rows = np.repeat(np.arange(m), self.n_u)
        weights[rows, perms[:, : self.n_u].ravel()] = 1.0 / self.n_u
        h_all = weights @ kernel                      # (m, b)
        theta, _ = _solve_ridge(gram, lam, h_all.T)   # (b, m)
        gram_theta = gram @ theta
        scores = 2.0 * np.einsum("bm,bm->m", h_all.T, theta) \
            - np.einsum("bm,bm->m", theta, gram_theta)
        return np.maximum(scores, 0.0)


def lsdd_estimate(z_u: np.ndarray, z_v: np.ndarray, cfg: LsddConfig | None = None) -> float:
    """Estimate the integrated squared density difference of two point sets.

    Non-negative by clamping; exactly zero for identical multisets; symmetric
    in its arguments.
    """
    cfg = cfg or LsddConfig()
    return _LsddProblem(z_u, z_v, cfg).estimate()


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest of n values."""
    vals = np.sort(np.asarray(values))
    k = max(1, math.ceil(q * len(vals)))
    return float(vals[k - 1])


def permutation_threshold(z_ref: np.ndarray, z_test: np.ndarray,
                          cfg: LsddConfig | None = None, mu: float = 0.05,
                          m: int = 100, rng_seed: int = 0) -> float:
    """(1-mu) nearest-rank percentile of m permuted LSDD scores.

    Pools the two windows, re-splits them m times preserving the original
    sizes (an equal-size split when the windows match), and scores each
    replicate; deterministic given rng_seed.
    """
    cfg = cfg or LsddConfig()
    problem = _LsddProblem(z_ref, z_test, cfg)
    scores = problem.permutation_scores(m, rng_seed)
    return nearest_rank_percentile(scores, 1.0 - mu)


def lsdd_two_sample_test(z_ref: np.ndarray, z_test: np.ndarray, cfg: LsddConfig,
                         mu: float, m: int, rng_seed: int) -> tuple[float, float]:
    """(d2, threshold) computed on one shared problem instance."""
    problem = _LsddProblem(z_ref, z_test, cfg)
    d2 = problem.estimate()
    threshold = nearest_rank_percentile(problem.permutation_scores(m, rng_seed), 1.0 - mu)
    return d2, threshold


# ---------------------------------------------------------------------------
# Sliding-window detection procedure


@dataclass
class WindowRecord:
    window_index: int
    window_end_ts: int
    d2: float
    threshold: float
    rejected: bool
    skipped: bool = False
    confirmed_drift: bool = False
    drift_index: int | None = None


@dataclass
class DriftState:
    """Bookkeeping between detection steps of one service.

    `counter` equals the length of the current run of consecutive rejections;
    `candidates` holds that run's window indices in ascending order, with the
    window data retained so a confirmed drift can promote the earliest
    candidate to the new reference.
    """

    reference_index: int
    reference_points: np.ndarray
    counter: int = 0
    candidates: list[int] = field(default_factory=list)
    candidate_points: dict[int, np.ndarray] = field(default_factory=dict)
    history: list[WindowRecord] = field(default_factory=list)


@dataclass(frozen=True)
class Decision:
    kind: str                      # no_drift | pending | drift | skipped
    counter: int
    drift_index: int | None = None


def detect_step(state: DriftState, window_index: int, points: np.ndarray,
                wcfg: WindowConfig, lcfg: LsddConfig, rng_seed: int) -> Decision:
    """Run one hypothesis test of window `window_index` against the reference.

    On the theta-th consecutive rejection the earliest candidate window i_d is
    reported as the drift and becomes the new reference; the counter and
    candidate run reset either on acceptance or on confirmation.
    """
    d2, threshold = lsdd_two_sample_test(state.reference_points, points, lcfg,
                                         wcfg.mu, wcfg.m, rng_seed)
    rejected = d2 > threshold
    record = WindowRecord(window_index=window_index, window_end_ts=-1,
                          d2=d2, threshold=threshold, rejected=rejected)
    state.history.append(record)
    if not rejected:
        state.counter = 0
        state.candidates.clear()
        state.candidate_points.clear()
        return Decision("no_drift", 0)
    state.counter += 1
    state.candidates.append(window_index)
    state.candidate_points[window_index] = points
    if state.counter < wcfg.theta:
        return Decision("pending", state.counter)
    drift_index = min(state.candidates)
    record.confirmed_drift = True
    record.drift_index = drift_index
    ref_index = window_index if wcfg.reset_reference == "confirm_window" else drift_index
    state.reference_index = ref_index
    state.reference_points = state.candidate_points[ref_index]
    state.counter = 0
    state.candidates.clear()
    state.candidate_points.clear()
    return Decision("drift", 0, drift_index)


@dataclass(frozen=True)
class DriftEvent:
    drift_index: int          # i_d: earliest rejected window of the run
    confirm_index: int        # window at which theta was reached
    drift_end_ts: int         # end minute of window i_d
    confirm_end_ts: int       # end minute of the confirming window


@dataclass
class DetectionResult:
    service_id: str
    records: list[WindowRecord]
    drifts: list[DriftEvent]


def window_count(n_minutes: int, wcfg: WindowConfig) -> int:
    if n_minutes < wcfg.w_minutes:
        return 0
    return (n_minutes - wcfg.w_minutes) // wcfg.s_minutes + 1


def window_span(index: int, wcfg: WindowConfig, ts0: int = 0) -> tuple[int, int]:
    """Half-open minute span [start, end) of sliding window `index`."""
    start = ts0 + index * wcfg.s_minutes
    return start, start + wcfg.w_minutes


def window_points(totals: TotalsSeries, index: int, wcfg: WindowConfig,
                  lcfg: LsddConfig, service_id: str, global_seed: int,
                  ) -> np.ndarray | None:
    """(X, Y) pairs of one window, or None when too sparse to test.

    Windows missing more than the configured fraction of grid points are
    skipped; large windows are subsampled to `max_points_per_window` with a
    per-window seed so repeated runs see identical data.
    """
    lo = index * wcfg.s_minutes
    hi = lo + wcfg.w_minutes
    if hi > totals.n_minutes:
        return None
    valid = totals.valid[lo:hi] & np.isfinite(totals.y[lo:hi])
    n_valid = int(np.sum(valid))
    if n_valid < 20 or (1.0 - n_valid / (hi - lo)) > wcfg.max_missing_fraction:
        return None
    pts = np.column_stack([totals.x[lo:hi][valid], totals.y[lo:hi][valid]])
    cap = lcfg.max_points_per_window
    if cap and len(pts) > cap:
        rng = rng_for(service_id, "winsub", index, global_seed)
        keep = np.sort(rng.choice(len(pts), size=cap, replace=False))
        pts = pts[keep]
    return pts


def run_detection(totals: TotalsSeries, wcfg: WindowConfig, lcfg: LsddConfig,
                  global_seed: int, start_window: int = 0) -> DetectionResult:
    """Slide over a totals series, testing each window against the reference.

    The first usable window at or after `start_window` seeds the reference;
    skipped windows leave the rejection counter untouched.
    """
    sid = totals.service_id
    result = DetectionResult(service_id=sid, records=[], drifts=[])
    n_windows = window_count(totals.n_minutes, wcfg)
    state: DriftState | None = None
    for i in range(start_window, n_windows):
        end_ts = int(totals.ts0 + window_span(i, wcfg)[1])
        pts = window_points(totals, i, wcfg, lcfg, sid, global_seed)
        if pts is None:
            log.debug("service %s window %d skipped (sparse)", sid, i)
            result.records.append(WindowRecord(i, end_ts, math.nan, math.nan,
                                               rejected=False, skipped=True))
            continue
        if state is None:
            state = DriftState(reference_index=i, reference_points=pts)
            continue
        seed = derive_seed(sid, i, global_seed)
        decision = detect_step(state, i, pts, wcfg, lcfg, seed)
        record = state.history[-1]
        record.window_end_ts = end_ts
        result.records.append(record)
        if decision.kind == "drift":
            i_d = decision.drift_index
            result.drifts.append(DriftEvent(
                drift_index=i_d, confirm_index=i,
                drift_end_ts=int(totals.ts0 + window_span(i_d, wcfg)[1]),
                confirm_end_ts=end_ts))
    return result


def write_detections_csv(results: list[DetectionResult], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETECTIONS_COLUMNS)
        for res in sorted(results, key=lambda r: r.service_id):
            for rec in res.records:
                writer.writerow([
                    res.service_id, rec.window_index, rec.window_end_ts,
                    "" if math.isnan(rec.d2) else repr(rec.d2),
                    "" if math.isnan(rec.threshold) else repr(rec.threshold),
                    int(rec.rejected), int(rec.confirmed_drift),
                    "" if rec.drift_index is None else rec.drift_index,
                ])
