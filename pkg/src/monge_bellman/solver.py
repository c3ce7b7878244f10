"""Monotone wide-stencil discretization of

    sup_{a PSD, tr a = 1} [tr(a v_xx) + det(a)^(1/d) f] = 0,   v = g on dD,

solved by Howard policy iteration.  Controls are restricted to the lattice
frames of the grid's control family with free simplex weights, so policy
improvement is an exact per-node maximization and every frozen-policy
system is a nonsingular M-matrix.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .controls import F_VERTEX, FrameControl, inner_max_batch
from .grid import Grid, GridFunction

logger = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 60_000


class LinearSolveError(RuntimeError):
    pass


class PolicyExtractionError(RuntimeError):
    pass


@dataclass
class Policy:
    """Per-node frame index and simplex weights."""

    grid: Grid
    frame_index: np.ndarray
    weights: np.ndarray

    def frame_control(self, node: int) -> FrameControl:
        frame = self.grid.frames[self.frame_index[node]]
        return FrameControl(self.grid.family.control_frame(frame), self.weights[node])

    def generators(self) -> np.ndarray:
        """Generator matrices A (N, n, n) with L = tr(A D^2)."""
        grid = self.grid
        frames = grid.frames.astype(float)
        unit = frames / np.linalg.norm(frames, axis=-1, keepdims=True)
        U = unit[self.frame_index]  # (N, d, r, n)
        return grid.family.scale * np.einsum("nk,nkri,nkrj->nij", self.weights, U, U)

    def rates(self) -> np.ndarray:
        """det(a)^(1/d) per node."""
        d = self.weights.shape[1]
        return np.prod(np.clip(self.weights, 0, None), axis=1) ** (1.0 / d)


@dataclass
class SolutionBundle:
    v: GridFunction
    policy: Policy
    residual: float
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = True
    nodewise: np.ndarray | None = None
    at_vertex: np.ndarray | None = None

    @property
    def grid(self) -> Grid:
        return self.v.grid


def build_grid(problem, h: float, width: int | None = None) -> Grid:
    if problem.family is None:
        raise ValueError(f"problem {problem.name!r} has no real control family; reduce it first")
    return Grid(problem.df, problem.g, h, problem.family, width)


def f_field(problem, grid: Grid) -> np.ndarray:
    f = np.broadcast_to(np.asarray(problem.f(grid.points), float), (grid.n_nodes,)).copy()
    if np.any(f < 0):
        raise ValueError("f must be nonnegative on the grid")
    return f


def _direction_diffs(grid: Grid, values: np.ndarray) -> list[np.ndarray]:
    return [grid.second_difference_all(values, e) for e in grid.directions]


def _group_deltas(grid: Grid, diffs, j: int) -> np.ndarray:
    fd = grid.frame_dirs[j]
    d, r = fd.shape
    G = np.zeros((grid.n_nodes, d))
    for k in range(d):
        for s in range(r):
            G[:, k] += diffs[fd[k, s]]
    return grid.family.scale * G


def evaluate(grid: Grid, values: np.ndarray, fvals: np.ndarray):
    """Discrete Bellman operator and its maximizing policy.

    Returns ``(F, frame_index, weights)``; ties between frames go to the
    lowest frame index.
    """
    diffs = _direction_diffs(grid, values)
    best = np.full(grid.n_nodes, -np.inf)
    idx = np.zeros(grid.n_nodes, dtype=np.int64)
    d = grid.frame_dirs.shape[1]
    W = np.zeros((grid.n_nodes, d))
    for j in range(len(grid.frames)):
        G = _group_deltas(grid, diffs, j)
        val, lam = inner_max_batch(G, fvals)
        better = val > best
        best[better] = val[better]
        idx[better] = j
        W[better] = lam[better]
    return best, idx, W


def bellman_residual(v: GridFunction, fvals) -> GridFunction:
    """Nodewise value of the discrete Bellman operator F_h[v]."""
    F, _, _ = evaluate(v.grid, v.values, np.asarray(fvals, float))
    return GridFunction(v.grid, F)


def assemble(grid: Grid, fvals: np.ndarray, frame_index: np.ndarray, weights: np.ndarray):
    """Sparse system A v = b of the frozen policy, A = -L_policy."""
    N = grid.n_nodes
    d = weights.shape[1]
    scale = grid.family.scale
    rate = np.prod(np.clip(weights, 0, None), axis=1) ** (1.0 / d)
    rhs = rate * fvals
    diag = np.zeros(N)
    rows, cols, vals = [], [], []
    # group node slots by the direction they use
    for j in np.unique(frame_index):
        S = np.flatnonzero(frame_index == j)
        for k in range(d):
            w = scale * weights[S, k]
            live = w > 0
            if not live.any():
                continue
            Sk, wk = S[live], w[live]
            for e_id in grid.frame_dirs[j, k]:
                cp, cm, ap, am = grid.stencil(grid.directions[e_id])
                for coef, arm in ((cp, ap), (cm, am)):
                    c = wk * coef[Sk]
                    diag[Sk] += c
                    nb = arm.nbr[Sk]
                    inner = nb >= 0
                    rows.append(Sk[inner])
                    cols.append(nb[inner])
                    vals.append(-c[inner])
                    np.add.at(rhs, Sk[~inner], c[~inner] * arm.gval[Sk[~inner]])
    rows.append(np.arange(N))
    cols.append(np.arange(N))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    return A, rhs


def solve_linear(A, b, x0=None, method: str = "auto", rtol: float = 1e-12,
                 atol: float | None = None, dim: int | None = None):
    """Solve the M-matrix system A x = b.

    ``auto`` factorizes directly for planar grids below DIRECT_SOLVE_LIMIT
    unknowns and otherwise runs AMG-preconditioned GMRES, restarting while
    the max-norm residual stays above ``atol`` and keeps improving.
    """
    N = A.shape[0]
    if method == "auto":
        method = "direct" if (dim is None or dim <= 2) and N <= DIRECT_SOLVE_LIMIT else "iterative"
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
    elif method == "iterative":
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="nonsymmetric", max_coarse=500)
        # pyamg's tolerance is relative to |b|_2; tighten it toward atol
        tol = rtol if atol is None else max(min(rtol, 0.1 * atol / max(np.linalg.norm(b), 1.0)), 1e-16)
        x = x0
        prev = np.inf
        for _ in range(6):
            x = ml.solve(b, x0=x, tol=tol, accel="gmres", maxiter=400)
            res = np.abs(A @ x - b).max()
            if atol is None or res <= atol or res >= 0.5 * prev:
                break
            prev = res
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("linear solve produced non-finite values")
    rel = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), np.finfo(float).tiny)
    if rel > 100 * rtol:
        raise LinearSolveError(f"relative residual {rel:.3e} exceeds {100 * rtol:.3e}")
    return x


def initial_policy(grid: Grid):
    d = grid.frame_dirs.shape[1]
    return np.zeros(grid.n_nodes, dtype=np.int64), np.full((grid.n_nodes, d), 1.0 / d)


def howard_solve(problem, grid: Grid | None = None, h: float = 1 / 16, width: int | None = None,
                 tol: float = 1e-8, max_iters: int = 100, linear_solver: str = "auto",
                 stall_iters: int = 8) -> SolutionBundle:
    """Policy iteration for the discrete Bellman equation."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if grid is None:
        grid = build_grid(problem, h, width)
    fvals = f_field(problem, grid)
    idx, W = initial_policy(grid)
    A, b = assemble(grid, fvals, idx, W)
    v = solve_linear(A, b, method=linear_solver, atol=1e-2 * tol, dim=grid.dim)
    history = []
    best = np.inf
    since_best = 0
    converged = False
    it = 0
    while True:
        F, idx, W = evaluate(grid, v, fvals)
        res = float(np.abs(F).max())
        history.append((it, res))
        logger.debug("howard iteration %d residual %.3e", it, res)
        if res <= tol:
            converged = True
            break
        if res < best * (1 - 1e-3):
            best, since_best = res, 0
        else:
            since_best += 1
        if it >= max_iters or since_best >= stall_iters:
            logger.warning("howard stopped at iteration %d with residual %.3e", it, res)
            break
        A, b = assemble(grid, fvals, idx, W)
        v = solve_linear(A, b, x0=v, method=linear_solver, atol=1e-2 * tol, dim=grid.dim)
        it += 1
    vf = GridFunction(grid, v)
    return SolutionBundle(v=vf, policy=Policy(grid, idx, W), residual=res, iterations=it,
                          history=history, converged=converged, nodewise=F,
                          at_vertex=fvals < F_VERTEX)


def extract_policy(v: GridFunction, fvals, delta: float = 1e-8):
    """Regularized optimal control (delta I - H)^{-1} / tr per node.

    H is the numeric Hessian in the maximizing frame, diagonal there with the
    group second differences on the diagonal.  If delta is not above every
    eigenvalue it is raised once.  Returns ``(policy, delta_used)``.
    """
    grid = v.grid
    fvals = np.asarray(fvals, float)
    _, idx, _ = evaluate(grid, v.values, fvals)
    diffs = _direction_diffs(grid, v.values)
    d = grid.frame_dirs.shape[1]
    G = np.empty((grid.n_nodes, d))
    for j in np.unique(idx):
        S = idx == j
        G[S] = _group_deltas(grid, diffs, j)[S]
    top = G.max()
    used = delta
    if not delta > top:
        used = max(10 * delta, 2 * top + delta)
        logger.info("extract_policy: raising delta from %.3e to %.3e", delta, used)
        if not used > top:
            raise PolicyExtractionError(f"delta {used:.3e} not above numeric Hessian max {top:.3e}")
    inv = 1.0 / (used - G)
    lam = inv / inv.sum(axis=1, keepdims=True)
    return Policy(grid, idx, lam), used


def policy_objective(policy: Policy, v: GridFunction, fvals) -> np.ndarray:
    """Nodewise frame objective of ``policy`` evaluated on v."""
    grid = v.grid
    diffs = _direction_diffs(grid, v.values)
    out = np.empty(grid.n_nodes)
    d = policy.weights.shape[1]
    for j in np.unique(policy.frame_index):
        S = policy.frame_index == j
        G = _group_deltas(grid, diffs, j)[S]
        lam = policy.weights[S]
        out[S] = np.sum(lam * G, axis=1) + np.asarray(fvals)[S] * np.prod(lam, axis=1) ** (1.0 / d)
    return out


def max_error(v: GridFunction, reference, mask=None) -> float:
    err = np.abs(v.values - reference(v.grid.points))
    if mask is not None:
        err = err[mask]
    return float(err.max()) if err.size else 0.0


def max_stencil_concavity(v: GridFunction) -> float:
    """Largest pure second difference over every stencil direction and node."""
    grid = v.grid
    return float(max(grid.second_difference_all(v.values, e).max() for e in grid.directions))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_solution_csv(bundle: SolutionBundle, path) -> None:
    """Node coordinates, v, policy weights and frame angles, 17 significant digits."""
    grid = bundle.grid
    pol = bundle.policy
    n, d = grid.dim, pol.weights.shape[1]
    frames = grid.frames.astype(float)
    lead = frames[pol.frame_index][:, :, 0, :]  # leading direction per group
    angles = np.arctan2(lead[..., 1], lead[..., 0]) if n >= 2 else np.zeros(lead.shape[:2])
    header = ([f"x{i}" for i in range(n)] + ["v"] + [f"lambda{k}" for k in range(d)]
              + ["frame"] + [f"angle{k}" for k in range(d)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(grid.n_nodes):
            w.writerow([_fmt(t) for t in grid.points[i]] + [_fmt(bundle.v.values[i])]
                       + [_fmt(t) for t in pol.weights[i]] + [str(int(pol.frame_index[i]))]
                       + [_fmt(t) for t in angles[i]])


def run_summary(bundle: SolutionBundle) -> dict:
    grid = bundle.grid
    return {
        "residual": bundle.residual,
        "iterations": bundle.iterations,
        "converged": bundle.converged,
        "h": grid.h,
        "W": grid.width,
        "n_nodes": grid.n_nodes,
        "n_frames": int(len(grid.frames)),
    }


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
