"""
Trajectory error metrics

Errors are planar distances between each estimate and the ground truth
linearly interpolated to the estimate's timestamp. No alignment is applied:
both trajectories start from the same anchored pose.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from edgebot.core.errors import MetricsError
from edgebot.models.schemas import MetricsReport, SolveStats


@dataclass(frozen=True)
class ErrorSeries:
    e: np.ndarray
    t_us: np.ndarray

    def __post_init__(self):
        if self.e.size == 0:
            raise MetricsError("error series is empty")
        if np.any(self.e < 0) or not np.all(np.isfinite(self.e)):
            raise MetricsError("errors must be finite and non-negative")

    def __len__(self) -> int:
        return int(self.e.size)


def _as_series(es) -> np.ndarray:
    e = es.e if isinstance(es, ErrorSeries) else np.asarray(es, dtype=float)
    if e.size == 0:
        raise MetricsError("metric of an empty error series")
    return e


def interpolate_positions(gt_t: np.ndarray, gt_xy: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Ground-truth positions at times `t` by per-axis linear interpolation"""
    gt_t = np.asarray(gt_t, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.size and (t.min() < gt_t[0] or t.max() > gt_t[-1]):
        raise MetricsError(
            f"estimate timestamps [{t.min():.0f}, {t.max():.0f}] outside ground truth span "
            f"[{gt_t[0]:.0f}, {gt_t[-1]:.0f}]"
        )
    return np.column_stack([np.interp(t, gt_t, gt_xy[:, 0]), np.interp(t, gt_t, gt_xy[:, 1])])


def error_series(est_t: np.ndarray, est_poses: np.ndarray, gt_t: np.ndarray, gt_poses: np.ndarray) -> ErrorSeries:
    """
    Per-estimate planar error against interpolated ground truth

    Raises:
        MetricsError: empty input or an estimate outside the ground-truth span
    """
    est_t = np.asarray(est_t)
    est_poses = np.asarray(est_poses, dtype=float).reshape(-1, 3) if len(est_t) else np.zeros((0, 3))
    if est_t.size == 0:
        raise MetricsError("estimated trajectory is empty")
    if len(gt_t) == 0:
        raise MetricsError("ground truth is empty")
    gt_xy = np.asarray(gt_poses, dtype=float)[:, :2]
    ref = interpolate_positions(gt_t, gt_xy, est_t)
    e = np.hypot(est_poses[:, 0] - ref[:, 0], est_poses[:, 1] - ref[:, 1])
    return ErrorSeries(e=e, t_us=est_t.astype(np.int64))


def rmse(es) -> float:
    """sqrt(sum e(i)^2 / n)"""
    e = _as_series(es)
    return math.sqrt(float(np.sum(e * e)) / e.size)


def percentile(es, q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest error"""
    if not 0.0 < q <= 1.0:
        raise MetricsError(f"percentile fraction must be in (0, 1], got {q}")
    e = np.sort(_as_series(es))
    # guard float noise such as 0.9 * 10 = 9.000000000000002
    rank = max(1, math.ceil(round(q * e.size, 9)))
    return float(e[rank - 1])


def cdf(es) -> List[Tuple[float, float]]:
    """Empirical CDF with one step per distinct error value"""
    e = np.sort(_as_series(es))
    values, counts = np.unique(e, return_counts=True)
    fractions = np.cumsum(counts) / e.size
    fractions[-1] = 1.0
    return [(float(v), float(f)) for v, f in zip(values, fractions)]


def endpoint_error(est_t: np.ndarray, est_poses: np.ndarray, gt_t: np.ndarray, gt_poses: np.ndarray) -> float:
    """Error at the final estimate timestamp"""
    es = error_series(est_t, est_poses, gt_t, gt_poses)
    return float(es.e[-1])


def build_report(
    method: str,
    seed: int,
    est_t: np.ndarray,
    est_poses: np.ndarray,
    gt_t: np.ndarray,
    gt_poses: np.ndarray,
    path_length: float,
    solve: Optional[SolveStats] = None,
    loop_edges: int = 0,
    injected_edges: int = 0,
    injected_weight_mean: Optional[float] = None,
) -> MetricsReport:
    es = error_series(est_t, est_poses, gt_t, gt_poses)
    return MetricsReport(
        method=method,
        seed=seed,
        rmse=rmse(es),
        p90=percentile(es, 0.9),
        endpoint=float(es.e[-1]),
        cdf=cdf(es),
        path_length=path_length,
        samples=len(es),
        solve=solve,
        loop_edges=loop_edges,
        injected_edges=injected_edges,
        injected_weight_mean=injected_weight_mean,
    )


def enhancement_ratio(baseline: float, proposed: float) -> float:
    """(baseline - proposed) / proposed"""
    if proposed <= 0:
        return math.inf if baseline > proposed else 0.0
    return (baseline - proposed) / proposed
