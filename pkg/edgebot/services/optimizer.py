"""
Levenberg-Marquardt pose-graph solver with Dynamic Covariance Scaling

Loop edges are re-weighted every iteration by s = min(1, 2φ/(φ+χ²)). The
residual is scaled by s, so an edge enters the normal equations with s² times
its information and the objective is the matching robust cost ρ(χ²).

The sparsity pattern of the normal equations depends only on the edge list, so
it is built once per graph and every iteration only refills the values.
"""
import copy
import math
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from edgebot.core.errors import SolverDiverged
from edgebot.core.logging import app_logger
from edgebot.models.schemas import SolverConfig, SolveStats
from edgebot.services.pose_graph import (
    PoseGraph,
    loop_arrays,
    loop_terms,
    odom_arrays,
    odom_terms,
)

# Objective below which the graph is already consistent
_ZERO_COST = 1e-24
_LAMBDA_MIN = 1e-12


def dcs_weight(chi2: float, phi: float) -> float:
    """Residual scale for a loop edge with squared error `chi2`"""
    if chi2 < 0 or phi <= 0:
        raise ValueError(f"dcs_weight needs chi2 >= 0 and phi > 0, got chi2={chi2}, phi={phi}")
    return min(1.0, 2.0 * phi / (phi + chi2))


def dcs_weights(chi2: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, 2.0 * phi / (phi + chi2))


def robust_cost(chi2: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Cost whose derivative in chi2 is the squared DCS scale"""
    chi2 = np.asarray(chi2, dtype=float)
    return np.where(chi2 <= phi, chi2, 3.0 * phi - 4.0 * phi * phi / (phi + chi2))


def _wrap(theta: np.ndarray) -> np.ndarray:
    out = np.asarray(theta, dtype=float).copy()
    bad = (out <= -math.pi) | (out > math.pi)
    if np.any(bad):
        w = np.mod(out[bad] + math.pi, 2.0 * math.pi) - math.pi
        w[w <= -math.pi] = math.pi
        out[bad] = w
    return out


def _block_index(a_nodes: np.ndarray, c_nodes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column of every entry of the 3x3 blocks (a, c), block-major"""
    k3 = np.arange(3)
    rows = (3 * a_nodes[:, None, None] + k3[None, :, None]).repeat(3, axis=2).reshape(-1)
    cols = (3 * c_nodes[:, None, None] + k3[None, None, :]).repeat(3, axis=1).reshape(-1)
    return rows, cols


def _grad_index(nodes: np.ndarray) -> np.ndarray:
    return (3 * nodes[:, None] + np.arange(3)[None, :]).reshape(-1)


class _Problem:
    """Fixed graph structure evaluated at changing poses"""

    def __init__(self, graph: PoseGraph, robust: bool, phi_scale: float = 1.0):
        self.graph = graph
        self.n = len(graph.nodes)
        self.robust = robust
        self.odom = graph.odom_edges
        self.loops = graph.loop_edges
        self.odom_arrays = odom_arrays(self.odom) if self.odom else None
        self.loop_arrays = loop_arrays(self.loops) if self.loops else None
        self.phi = np.array([e.phi for e in self.loops], dtype=float) * phi_scale
        dim = 3 * self.n
        self.free = np.ones(dim, dtype=bool)
        a = graph.anchor_id
        self.free[3 * a : 3 * a + 3] = False
        self.dim = dim
        self.idx = np.flatnonzero(self.free)
        self._build_pattern()

    def scaled(self, phi_scale: float) -> "_Problem":
        """Same graph and pattern under the robust kernel with every phi multiplied"""
        stage = copy.copy(self)
        stage.robust = True
        stage.phi = self.phi * phi_scale
        return stage

    def _build_pattern(self) -> None:
        """
        CSC layout of H over the free coordinates; entry k of the block data
        produced by `linearize` accumulates into slot `_slot[k]`
        """
        nf = self.idx.size
        rows, cols, grads = [], [], []
        for arrays in (self.odom_arrays, self.loop_arrays):
            if arrays is None:
                continue
            I, J = arrays[0], arrays[1]
            for a_nodes, c_nodes in ((I, I), (J, J), (I, J), (J, I)):
                r, c = _block_index(a_nodes, c_nodes)
                rows.append(r)
                cols.append(c)
            grads.extend([_grad_index(I), _grad_index(J)])

        if not rows:
            self._keep = np.zeros(0, dtype=bool)
            self._slot = np.zeros(0, dtype=np.int64)
            self._indices = np.zeros(0, dtype=np.int32)
            self._indptr = np.zeros(nf + 1, dtype=np.int32)
            self._grads = np.zeros(0, dtype=np.int64)
            return

        pos = np.full(self.dim, -1, dtype=np.int64)
        pos[self.idx] = np.arange(nf)
        fr = pos[np.concatenate(rows)]
        fc = pos[np.concatenate(cols)]
        self._keep = (fr >= 0) & (fc >= 0)
        keys = fc[self._keep] * nf + fr[self._keep]
        unique, slot = np.unique(keys, return_inverse=True)
        self._slot = slot.reshape(-1)
        self._indices = (unique % nf).astype(np.int32)
        counts = np.bincount(unique // nf, minlength=nf)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self._grads = np.concatenate(grads)

    def loop_chi2(self, poses: np.ndarray) -> np.ndarray:
        if not self.loops:
            return np.zeros(0)
        _, _, r, _ = loop_terms(poses, self.loops, self.loop_arrays)
        return np.einsum("ij,ij->i", r, r)

    def odom_chi2(self, poses: np.ndarray) -> np.ndarray:
        if not self.odom:
            return np.zeros(0)
        _, _, r, _, _, info = odom_terms(poses, self.odom, self.odom_arrays)
        return np.einsum("mi,mij,mj->m", r, info, r)

    def weights(self, poses: np.ndarray) -> np.ndarray:
        chi2 = self.loop_chi2(poses)
        if not self.robust:
            return np.ones_like(chi2)
        return dcs_weights(chi2, self.phi)

    def cost(self, poses: np.ndarray) -> float:
        total = float(self.odom_chi2(poses).sum())
        if self.loops:
            chi2 = self.loop_chi2(poses)
            total += float(robust_cost(chi2, self.phi).sum() if self.robust else chi2.sum())
        return total

    def linearize(self, poses: np.ndarray):
        """
        Normal equations H dx = -b over the free coordinates

        Returns:
            (H_free, b_free) with H_free in CSC form
        """
        nf = self.idx.size
        data, grad = [], []

        if self.odom:
            I, J, r, Ji, Jj, info = odom_terms(poses, self.odom, self.odom_arrays)
            JiT_O = np.einsum("mki,mkl->mil", Ji, info)
            JjT_O = np.einsum("mki,mkl->mil", Jj, info)
            Hij = np.einsum("mil,mlj->mij", JiT_O, Jj)
            data += [
                np.einsum("mil,mlj->mij", JiT_O, Ji).reshape(-1),
                np.einsum("mil,mlj->mij", JjT_O, Jj).reshape(-1),
                Hij.reshape(-1),
                np.transpose(Hij, (0, 2, 1)).reshape(-1),
            ]
            grad += [
                np.einsum("mil,ml->mi", JiT_O, r).reshape(-1),
                np.einsum("mil,ml->mi", JjT_O, r).reshape(-1),
            ]

        if self.loops:
            _, _, r, inv_sigma = loop_terms(poses, self.loops, self.loop_arrays)
            chi2 = np.einsum("ij,ij->i", r, r)
            s = dcs_weights(chi2, self.phi) if self.robust else np.ones_like(chi2)
            c = (s * s) * inv_sigma * inv_sigma
            block = np.zeros((len(self.loops), 3, 3))
            block[:, 0, 0] = block[:, 1, 1] = c
            data += [block.reshape(-1), block.reshape(-1), -block.reshape(-1), -block.reshape(-1)]
            g = np.zeros((len(self.loops), 3))
            g[:, :2] = (s * s * inv_sigma)[:, None] * r
            grad += [-g.reshape(-1), g.reshape(-1)]

        if not data:
            return sp.csc_matrix((nf, nf)), np.zeros(nf)
        values = np.bincount(
            self._slot, weights=np.concatenate(data)[self._keep], minlength=self._indices.size
        )
        H = sp.csc_matrix((values, self._indices, self._indptr), shape=(nf, nf))
        b = np.bincount(self._grads, weights=np.concatenate(grad), minlength=self.dim)
        return H, b[self.idx]

    def step(self, poses: np.ndarray, dx_free: np.ndarray) -> np.ndarray:
        dx = np.zeros(self.dim)
        dx[self.free] = dx_free
        new = poses + dx.reshape(-1, 3)
        a = self.graph.anchor_id
        new[a] = poses[a]
        new[:, 2] = _wrap(new[:, 2])
        new[a] = poses[a]
        return new


def _solve_damped(H_free, b_free: np.ndarray, lam: float, dense: bool) -> Optional[np.ndarray]:
    """Solve (H + λ diag(H)) dx = -b; None when singular or non-finite"""
    if dense:
        A = H_free.toarray()
        A[np.diag_indices_from(A)] += lam * np.diag(A)
        try:
            dx = np.linalg.solve(A, -b_free)
        except np.linalg.LinAlgError:
            return None
    else:
        A = (H_free + sp.diags(lam * H_free.diagonal(), format="csc")).tocsc()
        with np.errstate(all="ignore"):
            try:
                # symmetric positive definite: fill-reducing order on A + A^T, no pivoting
                factor = splu(
                    A,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
                dx = factor.solve(-b_free)
            except RuntimeError:
                return None
    dx = np.asarray(dx, dtype=float).reshape(-1)
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def _predicted_decrease(H_free, b_free: np.ndarray, dx: np.ndarray) -> float:
    """Decrease of the quadratic model F + 2 b.dx + dx.H.dx along dx"""
    return float(-2.0 * b_free.dot(dx) - dx.dot(H_free @ dx))


def _levenberg_marquardt(problem: _Problem, poses: np.ndarray, cfg: SolverConfig, max_iters: Optional[int] = None):
    """
    Damped Gauss-Newton iterations; accepted steps never raise the objective

    λ follows the gain ratio ρ of actual to predicted decrease: an accepted
    step scales it by max(1/3, 1 - (2ρ - 1)³), a rejected one by a factor
    that doubles on every consecutive rejection.

    Returns:
        (poses, history, iterations, converged, lambda)
    """
    max_iters = max_iters or cfg.max_iters
    dense = problem.n < cfg.dense_threshold
    cost = problem.cost(poses)
    history = [cost]
    lam = cfg.lambda_init
    nu = 2.0
    iterations = 0
    converged = cost <= _ZERO_COST

    while not converged and iterations < max_iters:
        iterations += 1
        H_free, b_free = problem.linearize(poses)

        accepted = False
        while True:
            dx = _solve_damped(H_free, b_free, lam, dense)
            if dx is None:
                lam *= nu
                nu *= 2.0
                if lam > cfg.lambda_max:
                    raise SolverDiverged(
                        f"normal equations singular with lambda {lam:.3g}",
                        SolveStats(
                            initial_chi2=history[0],
                            final_chi2=cost,
                            iterations=iterations,
                            chi2_history=history,
                            converged=False,
                            final_lambda=lam,
                        ),
                    )
                continue
            candidate = problem.step(poses, dx)
            new_cost = problem.cost(candidate)
            if new_cost <= cost:
                accepted = True
                break
            lam *= nu
            nu *= 2.0
            if lam > cfg.lambda_max:
                break

        if not accepted:
            # No step reduces the objective: at a (local) minimum
            converged = True
            break

        decrease = cost - new_cost
        predicted = _predicted_decrease(H_free, b_free, dx)
        rho = decrease / predicted if predicted > 0.0 else 0.0
        lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), _LAMBDA_MIN)
        nu = 2.0
        poses, cost = candidate, new_cost
        history.append(cost)
        if cost <= _ZERO_COST or decrease <= cfg.rel_tol * max(history[-2], _ZERO_COST):
            converged = True

    return poses, history, iterations, converged, lam


def _prefer_annealed(problem: _Problem, annealed: Tuple[np.ndarray, float],
                     direct: Tuple[np.ndarray, float], gate: float) -> bool:
    """
    Pick between the annealed and the direct solution

    A solution whose mean odometry chi2 per edge exceeds `gate` has bent the
    odometry chain to satisfy loop edges; it loses to one that has not.
    Otherwise the lower target cost wins.
    """
    (a_poses, a_cost), (d_poses, d_cost) = annealed, direct
    a_odom = float(problem.odom_chi2(a_poses).mean()) if problem.odom else 0.0
    d_odom = float(problem.odom_chi2(d_poses).mean()) if problem.odom else 0.0
    a_ok, d_ok = a_odom <= gate, d_odom <= gate
    if a_ok != d_ok:
        if not a_ok:
            app_logger.warning(
                f"Annealed solution bends odometry (mean chi2 {a_odom:.3g} > {gate:.3g}); keeping the direct one"
            )
        return a_ok
    return a_cost < d_cost


def optimize(graph: PoseGraph, cfg: Optional[SolverConfig] = None) -> Tuple[PoseGraph, SolveStats]:
    """
    Optimize node poses with node `anchor_id` held fixed

    With `gnc_phi_start` set, a second run anneals φ down from that value,
    capping each intermediate stage at `gnc_stage_iters`; the annealed and the
    direct solutions are compared and the better one is returned.

    Returns:
        A solved copy of the graph (loop-edge weights updated) and its SolveStats

    Raises:
        SolverDiverged: the damped system stayed singular past lambda_max
    """
    cfg = cfg or SolverConfig()
    graph.check_connected()
    out = graph.copy()
    poses0 = graph.poses_array()
    target = _Problem(graph, cfg.robust)
    initial = target.cost(poses0) if len(graph) else 0.0

    if len(graph) < 2:
        return out, SolveStats(initial_chi2=initial, final_chi2=initial, iterations=0,
                               weights=[1.0] * len(graph.loop_edges), chi2_history=[initial], converged=True)

    poses, history, iterations, converged, lam = _levenberg_marquardt(target, poses0, cfg)
    annealed = False

    if cfg.robust and cfg.gnc_phi_start is not None and cfg.gnc_steps > 1 and graph.loop_edges:
        scales = np.geomspace(cfg.gnc_phi_start / cfg.phi, 1.0, cfg.gnc_steps)[:-1]
        stage_iters = min(cfg.max_iters, cfg.gnc_stage_iters)
        a_poses = poses0
        for scale in scales:
            a_poses, _, n_it, _, _ = _levenberg_marquardt(target.scaled(float(scale)), a_poses, cfg, stage_iters)
            iterations += n_it
            app_logger.debug(f"GNC stage phi x{scale:.3g}: {n_it} iterations")
        a_poses, a_history, n_it, a_converged, a_lam = _levenberg_marquardt(target, a_poses, cfg)
        iterations += n_it
        if _prefer_annealed(target, (a_poses, a_history[-1]), (poses, history[-1]), cfg.odom_chi2_gate):
            poses, history, converged, lam = a_poses, a_history, a_converged, a_lam
            annealed = True

    out.set_poses(poses)
    weights = target.weights(poses)
    for edge, w in zip(out.loop_edges, weights):
        edge.weight = float(w)

    stats = SolveStats(
        initial_chi2=initial,
        final_chi2=history[-1],
        iterations=iterations,
        weights=[float(w) for w in weights],
        chi2_history=history,
        converged=converged,
        final_lambda=lam,
        annealed=annealed,
    )
    app_logger.debug(
        f"optimize: {len(graph)} nodes, {len(graph.loop_edges)} loops, chi2 {initial:.4g} -> "
        f"{stats.final_chi2:.4g} in {iterations} iterations{' (annealed)' if annealed else ''}"
    )
    return out, stats
