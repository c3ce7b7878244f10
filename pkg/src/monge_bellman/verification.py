"""Empirical checks of the derivative estimates, the Monge-Ampere residual
and the Bellman/Monge-Ampere equivalence on random instances.

Gradient estimate:  |v_(xi)| <= N (|xi| + |psi_(xi)| / psi^(1/2))
Hessian estimate:   -N (|xi|^2 + psi_(xi)^2 / psi) <= v_(xi)(xi) <= 0

Fits report N as the largest observed ratio; they are never compared with a
theoretical constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .complex_reduction import complex_hessian_from_real
from .controls import brute_force_sup, control_objective, inner_max, optimal_control
from .domain import DefiningFunction
from .grid import GridFunction

N_RANDOM_DIRECTIONS = 32
N_SHELLS = 8
MAX_SAMPLE_NODES = 50_000


@dataclass
class BoundFit:
    """Ratios of an estimate at (node, direction) samples.

    ``ratio = numerator / (xi_part + psi_part)``; the parts are kept apart so
    the fit can be recomputed for a rescaled defining function.
    """

    kind: str  # "gradient" or "hessian"
    nodes: np.ndarray
    directions: np.ndarray
    dir_index: np.ndarray
    numerator: np.ndarray
    xi_part: np.ndarray
    psi_part: np.ndarray
    psi: np.ndarray
    cap: float = np.inf
    upper_max: float | None = None
    upper_tol: float | None = None
    shell_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ratios(self) -> np.ndarray:
        return self.numerator / (self.xi_part + self.psi_part)

    @property
    def fitted_N(self) -> float:
        r = self.ratios
        return float(r.max()) if r.size else 0.0

    @property
    def violated(self) -> bool:
        return bool(np.any(self.ratios > self.cap))

    @property
    def upper_ok(self) -> bool:
        return self.upper_max is None or self.upper_max <= self.upper_tol

    @property
    def shell_profile(self) -> list[tuple[float, float]]:
        """(lower psi level, max ratio) per shell, empty shells skipped."""
        r = self.ratios
        out = []
        edges = self.shell_edges
        for k in range(len(edges) - 1):
            m = (self.psi >= edges[k]) & (self.psi <= edges[k + 1] if k == len(edges) - 2
                                          else self.psi < edges[k + 1])
            if m.any():
                out.append((float(edges[k]), float(r[m].max())))
        return out

    def rescaled(self, factor: float) -> "BoundFit":
        """The same fit for the defining function factor * psi."""
        # psi_(xi) / sqrt(psi) scales by sqrt(factor), psi_(xi)^2 / psi by factor
        p = np.sqrt(factor) if self.kind == "gradient" else factor
        return BoundFit(self.kind, self.nodes, self.directions, self.dir_index, self.numerator,
                        self.xi_part, p * self.psi_part, factor * self.psi, self.cap,
                        self.upper_max, self.upper_tol, factor * self.shell_edges)

    def summary(self) -> dict:
        d = {"fitted_N": self.fitted_N, "violated": self.violated, "n_samples": int(self.ratios.size),
             "shell_profile": [list(t) for t in self.shell_profile]}
        if self.upper_max is not None:
            d["upper_max"] = self.upper_max
            d["upper_ok"] = self.upper_ok
        return d


def _sample_nodes(v: GridFunction, df: DefiningFunction, max_nodes: int):
    grid = v.grid
    psi = df.eval(grid.points)
    nodes = np.flatnonzero(psi >= grid.h)
    if nodes.size > max_nodes:
        nodes = nodes[np.linspace(0, nodes.size - 1, max_nodes).astype(np.int64)]
    return nodes, psi[nodes]


def _shells(psi: np.ndarray, n_shells: int) -> np.ndarray:
    if psi.size == 0:
        return np.zeros(0)
    return np.linspace(psi.min(), psi.max(), n_shells + 1)


def _random_directions(rng, n_shells, n_dirs, dim):
    xi = rng.standard_normal((n_shells, n_dirs, dim))
    return xi / np.linalg.norm(xi, axis=-1, keepdims=True)


def _fit(kind, v, df, directions, n_random, seed, cap, max_nodes, tol=None):
    grid = v.grid
    nodes, psi = _sample_nodes(v, df, max_nodes)
    edges = _shells(psi, N_SHELLS)
    stencil = grid.directions if directions is None else np.asarray(directions, np.int64)
    unit = stencil / np.linalg.norm(stencil, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    rand = _random_directions(rng, N_SHELLS, n_random, grid.dim)
    gpsi = df.gradient(grid.points[nodes])
    cols_node, cols_dir, num, dpsi = [], [], [], []
    upper = -np.inf
    for k, e in enumerate(stencil):
        if kind == "gradient":
            q = grid.first_difference_all(v.values, e)[nodes]
            num.append(np.abs(q))
        else:
            q = grid.second_difference_all(v.values, e)
            upper = max(upper, float(q.max()))
            num.append(-q[nodes])
        cols_node.append(np.arange(nodes.size))
        cols_dir.append(np.full(nodes.size, k))
        dpsi.append(gpsi @ unit[k])
    if n_random and nodes.size:
        shell = np.clip(np.searchsorted(edges, psi, side="right") - 1, 0, N_SHELLS - 1)
        if kind == "gradient":
            G = grid.numeric_gradient(v.values)[nodes]
        else:
            H = grid.numeric_hessian(v.values)[nodes]
        for j in range(n_random):
            xi = rand[shell, j]  # (m, n)
            if kind == "gradient":
                num.append(np.abs(np.einsum("mi,mi->m", G, xi)))
            else:
                # the axis-difference Hessian is not sign-preserving across
                # kinks, so random directions stay out of the concavity check
                num.append(-np.einsum("mi,mij,mj->m", xi, H, xi))
            cols_node.append(np.arange(nodes.size))
            cols_dir.append(len(stencil) + shell * n_random + j)
            dpsi.append(np.einsum("mi,mi->m", gpsi, xi))
    all_dirs = np.concatenate([unit, rand.reshape(-1, grid.dim)])
    idx = np.concatenate(cols_node) if cols_node else np.zeros(0, np.int64)
    numer = np.concatenate(num) if num else np.zeros(0)
    dp = np.concatenate(dpsi) if dpsi else np.zeros(0)
    ps = psi[idx]
    if kind == "gradient":
        xi_part = np.ones_like(numer)
        psi_part = np.abs(dp) / np.sqrt(ps)
        upper_max, upper_tol = None, None
    else:
        # ratios measure the lower bound; concave samples give numer >= 0
        xi_part = np.ones_like(numer)
        psi_part = dp**2 / ps
        upper_max, upper_tol = upper, 10 * tol
    return BoundFit(kind, nodes[idx], all_dirs, np.concatenate(cols_dir) if cols_dir else idx,
                    numer, xi_part, psi_part, ps, cap, upper_max, upper_tol, edges)


def fit_gradient_bound(v: GridFunction, df: DefiningFunction, directions=None,
                       n_random: int = N_RANDOM_DIRECTIONS, seed: int = 0, cap: float = np.inf,
                       max_nodes: int = MAX_SAMPLE_NODES) -> BoundFit:
    """Ratios |v_(xi)| / (|xi| + |psi_(xi)| / sqrt(psi)) at nodes with psi >= h.

    Stencil directions use the three-point first difference along the
    lattice direction; random unit directions use the axis-difference
    gradient.  Large grids are thinned to ``max_nodes`` evenly strided nodes.
    """
    return _fit("gradient", v, df, directions, n_random, seed, cap, max_nodes)


def fit_hessian_bound(v: GridFunction, df: DefiningFunction, directions=None,
                      n_random: int = N_RANDOM_DIRECTIONS, seed: int = 0, cap: float = np.inf,
                      tol: float = 1e-8, max_nodes: int = MAX_SAMPLE_NODES) -> BoundFit:
    """Ratios -v_(xi)(xi) / (|xi|^2 + psi_(xi)^2 / psi), plus the concavity check.

    ``upper_max`` is the largest pure second difference over every stencil
    direction at every node; ``upper_ok`` holds when it is at most 10 tol.
    """
    return _fit("hessian", v, df, directions, n_random, seed, cap, max_nodes, tol)


def ma_residual(v: GridFunction, f_field, complex_: bool = False, return_nodes: bool = False):
    """max |det(-D_h^2 v) - d^-d f^d| over nodes with a full interior stencil.

    For complex runs the determinant is that of the Wirtinger Hessian built
    from the real numeric Hessian, on C^d with d = n / 2.
    """
    grid = v.grid
    mask = grid.full_stencil_mask(grid.hessian_dirs())
    f = np.broadcast_to(np.asarray(f_field, float), (grid.n_nodes,))[mask]
    H = -grid.numeric_hessian(v.values)[mask]
    if complex_:
        C = complex_hessian_from_real(H)
        d = C.shape[-1]
        det = np.linalg.det(C).real
    else:
        d = grid.dim
        det = np.linalg.det(H)
    res = np.abs(det - (f / d) ** d)
    value = float(res.max()) if res.size else 0.0
    if return_nodes:
        return value, np.flatnonzero(mask), res
    return value


@dataclass
class LemmaReport:
    n_instances: int
    max_abs_zero_value: float
    brute_force_range: tuple[float, float]
    chain_max_violation: float
    chain_monotone: bool
    optimal_control_max_value: float
    sign_checks: int
    failures: list = field(default_factory=list)

    @property
    def passes(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"n_instances": self.n_instances, "max_abs_zero_value": self.max_abs_zero_value,
                "brute_force_range": list(self.brute_force_range),
                "chain_max_violation": self.chain_max_violation,
                "chain_monotone": self.chain_monotone,
                "optimal_control_max_value": self.optimal_control_max_value,
                "sign_checks": self.sign_checks, "failures": self.failures,
                "passes": self.passes}


def random_negative_definite(rng, d: int, low: float = 0.5, high: float = 2.0) -> np.ndarray:
    """-Q diag(lam) Q^T with Haar Q and lam uniform in [low, high]."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    lam = rng.uniform(low, high, d)
    H = -(Q * lam) @ Q.T
    return 0.5 * (H + H.T)


def lemma_check(n_instances: int = 100, seed: int = 0, n_brute: int = 100_000,
                deltas=(1e-1, 1e-2, 1e-3), zero_tol: float = 1e-9,
                brute_slack: float = 1e-2) -> LemmaReport:
    """Bellman/Monge-Ampere equivalence on random negative definite H.

    With f = d det(-H)^(1/d), the eigenframe supremum is zero, sampled
    controls never exceed it, it changes sign with f around that value, and
    det(delta I - H) decreases to det(-H) = d^-d f^d as delta decreases.
    Dimensions alternate between 2 and 3.
    """
    rng = np.random.default_rng(seed)
    failures = []
    max_zero = 0.0
    bf_lo, bf_hi = np.inf, -np.inf
    chain_viol = 0.0
    monotone = True
    oc_max = 0.0
    signs = 0
    for i in range(n_instances):
        d = 2 + i % 2
        H = random_negative_definite(rng, d)
        eig = np.linalg.eigvalsh(H)
        f = d * np.prod(-eig) ** (1.0 / d)
        val = inner_max(eig, f).value
        max_zero = max(max_zero, abs(val))
        if abs(val) > zero_tol:
            failures.append({"instance": i, "check": "zero_value", "value": val})
        bf = brute_force_sup(H, f, n_brute, seed=seed * 100_003 + i)
        bf_lo, bf_hi = min(bf_lo, bf), max(bf_hi, bf)
        if not -brute_slack <= bf <= 0.0:
            failures.append({"instance": i, "check": "brute_force", "value": bf})
        for factor, sign in ((1.1, 1), (0.9, -1)):
            v2 = inner_max(eig, factor * f).value
            signs += 1
            if np.sign(v2) != sign:
                failures.append({"instance": i, "check": "sign", "factor": factor, "value": v2})
        target = (f / d) ** d
        gaps = [float(np.linalg.det(dl * np.eye(d) - H)) - target for dl in sorted(deltas, reverse=True)]
        chain_viol = max(chain_viol, max(0.0, -min(gaps)))
        if min(gaps) < -1e-12 * max(1.0, target):
            failures.append({"instance": i, "check": "delta_chain", "gaps": gaps})
        if any(b > a for a, b in zip(gaps, gaps[1:])):
            monotone = False
            failures.append({"instance": i, "check": "delta_monotone", "gaps": gaps})
        a = optimal_control(H, 1e-12)
        oc = control_objective(a, H, f)
        oc_max = max(oc_max, abs(oc))
    return LemmaReport(n_instances, max_zero, (float(bf_lo), float(bf_hi)), chain_viol, monotone,
                       oc_max, signs, failures)
