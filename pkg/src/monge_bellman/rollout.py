"""Monte Carlo payoff of controlled diffusions run to the exit time of D.

Paths follow dx = sigma dw with sigma sigma^T = 2 A, where A is the
generator matrix of the control (L v = tr(A v_xx)); the payoff is
g(x_tau) + int_0^tau det(a)^(1/d) f(x_t) dt.

Paths are simulated in fixed-size blocks, each with its own generator
seeded from (seed, block index), so results do not depend on how many
worker threads run the blocks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .complex_reduction import phi_mat
from .domain import boundary_project, boundary_samples, ray_intersect
from .solver import Policy, SolutionBundle

logger = logging.getLogger(__name__)

BLOCK_SIZE = 32768
EXIT_BISECTIONS = 3


class CovarianceError(RuntimeError):
    pass


def _generator_of(problem, a: np.ndarray) -> np.ndarray:
    if problem.kind == "complex":
        return 0.25 * phi_mat(a)
    return np.asarray(a, float)


def _sqrt_cov(A: np.ndarray) -> np.ndarray:
    """Symmetric square root of 2A (batched)."""
    cov = 2.0 * np.asarray(A, float)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, V = np.linalg.eigh(cov)
    if np.any(w < -1e-10):
        raise CovarianceError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0, None))[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass(frozen=True)
class ConstantControl:
    """A fixed control matrix (real symmetric or Hermitian, trace one)."""

    a: np.ndarray

    def describe(self):
        a = np.asarray(self.a)
        if np.iscomplexobj(a):
            return {"type": "constant", "re": a.real.tolist(), "im": a.imag.tolist()}
        return {"type": "constant", "a": a.tolist()}


@dataclass(frozen=True)
class GridPolicy:
    """Nearest-node control of a solved grid policy."""

    policy: Policy

    def describe(self):
        return {"type": "grid", "h": self.policy.grid.h, "n_nodes": self.policy.grid.n_nodes}


@dataclass(frozen=True)
class RolloutConfig:
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    max_time: float = 50.0
    policy_source: ConstantControl | GridPolicy | None = None
    bridge: bool = True
    threads: int = 1
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not self.max_time >= self.dt:
            raise ValueError("max_time must be >= dt")
        if self.threads < 1 or self.block_size < 1:
            raise ValueError("threads and block_size must be positive")

    def echo(self) -> dict:
        d = {"dt": self.dt, "n_paths": self.n_paths, "seed": self.seed, "max_time": self.max_time,
             "bridge": self.bridge, "block_size": self.block_size}
        if self.policy_source is not None:
            d["policy_source"] = self.policy_source.describe()
        return d


@dataclass
class RolloutResult:
    estimate: float
    std_error: float
    mean_exit_time: float
    censored_fraction: float
    n_paths: int
    exit_time_std_error: float = 0.0
    fallback_lookups: int = 0
    bridge_exits: int = 0
    payoffs: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("payoffs")
        return d


def _gradient_bound(df, n: int = 4096) -> float:
    """Twice the largest |psi_x| seen on boundary and interior samples."""
    b = boundary_samples(df, n, seed=0)
    inner = df.origin + np.linspace(0.0, 1.0, 17)[:, None, None] * (b[None] - df.origin)
    return 2.0 * float(np.linalg.norm(df.gradient(inner.reshape(-1, df.dim)), axis=1).max())


class _Controller:
    """Per-position diffusion factor and running-payoff rate."""

    def __init__(self, problem, source):
        if isinstance(source, ConstantControl):
            a = np.asarray(source.a)
            d = a.shape[0]
            A = _generator_of(problem, a)
            if A.shape != (problem.df.dim,) * 2:
                raise ValueError("control size does not match the problem")
            self.const = True
            self.sigma = _sqrt_cov(A)
            det = max(float(np.linalg.det(a).real), 0.0)
            self.rate = det ** (1.0 / d)
            top = float(np.linalg.eigvalsh(2.0 * A)[-1])
        elif isinstance(source, GridPolicy):
            pol = source.policy
            self.const = False
            self.grid = pol.grid
            self.sigma = _sqrt_cov(pol.generators())
            self.rate = pol.rates()
            self.tree = cKDTree(self.grid.points)
            top = float(np.linalg.eigvalsh(2.0 * pol.generators())[:, -1].max())
        else:
            raise TypeError(f"unsupported policy source {source!r}")
        # the bridge test is skipped where the crossing probability is below e^-50
        G = _gradient_bound(problem.df)
        self.bridge_screen = 25.0 * G**2 * top

    def nodes(self, x):
        """Nearest node per position and the number of KD-tree fallbacks."""
        idx = self.grid.nearest_node(x)
        miss = idx < 0
        if miss.any():
            idx[miss] = self.tree.query(x[miss])[1]
        return idx, int(miss.sum())

    def step(self, x, z):
        """Increment per sqrt(dt), rate, per-path factors and fallback count."""
        if self.const:
            return z @ self.sigma.T, np.full(len(x), self.rate), None, 0
        idx, miss = self.nodes(x)
        S = self.sigma[idx]
        return np.einsum("nij,nj->ni", S, z), self.rate[idx], S, miss


def _exit_fraction(df, x, dx):
    """Fraction s in (0, 1] of the step where the path crosses the boundary."""
    lo = np.zeros(len(x))
    hi = np.ones(len(x))
    for _ in range(EXIT_BISECTIONS):
        mid = 0.5 * (lo + hi)
        inside = df.eval(x + mid[:, None] * dx) > 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    start = x + lo[:, None] * dx
    t = ray_intersect(df, start, (hi - lo)[:, None] * dx)
    return lo + t * (hi - lo)


def _simulate_block(x0, problem, config, ctrl, block: int, m: int):
    df = problem.df
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(block,)))
    n = df.dim
    dt = config.dt
    sq = math.sqrt(dt)
    payoff = np.zeros(m)
    time = np.zeros(m)
    censored = np.zeros(m, bool)
    # state of the paths still running, compacted after every exit
    ids = np.arange(m)
    x = np.tile(np.asarray(x0, float), (m, 1))
    psi = np.full(m, float(df.eval(np.asarray(x0, float))))
    acc = np.zeros(m)
    tm = np.zeros(m)
    bridged = 0
    fallbacks = 0
    n_steps = int(math.floor(config.max_time / dt + 1e-9))
    for _ in range(n_steps):
        if ids.size == 0:
            break
        z = rng.standard_normal((ids.size, n))
        inc, rate, S, miss = ctrl.step(x, z)
        fallbacks += miss
        dx = sq * inc
        xn = x + dx
        run = rate * np.broadcast_to(problem.f(x), rate.shape) * dt
        psi_n = df.eval(xn)
        acc += run
        tm += dt
        out = psi_n <= 0
        fin = np.flatnonzero(out)
        pts = np.empty((0, n))
        if fin.size:
            s = _exit_fraction(df, x[fin], dx[fin])
            acc[fin] -= (1.0 - s) * run[fin]
            tm[fin] -= (1.0 - s) * dt
            pts = x[fin] + s[:, None] * dx[fin]
        if config.bridge:
            near = np.flatnonzero(~out & (psi * psi_n < ctrl.bridge_screen * dt))
            if near.size:
                kill = near[_bridge_kill(df, x[near], xn[near], psi[near], psi_n[near],
                                         ctrl, None if S is None else S[near], dt, rng)]
                if kill.size:
                    acc[kill] -= 0.5 * run[kill]
                    tm[kill] -= 0.5 * dt
                    bridged += kill.size
                    kb, _ = boundary_project(df, xn[kill])
                    fin = np.concatenate([fin, kill])
                    pts = np.concatenate([pts, kb])
        if fin.size:
            payoff[ids[fin]] = acc[fin] + problem.g(pts)
            time[ids[fin]] = tm[fin]
            keep = np.ones(ids.size, bool)
            keep[fin] = False
            ids, xn, psi_n, acc, tm = ids[keep], xn[keep], psi_n[keep], acc[keep], tm[keep]
        x, psi = xn, psi_n
    if ids.size:
        b, _ = boundary_project(df, x)
        payoff[ids] = acc + problem.g(b)
        time[ids] = tm
        censored[ids] = True
    return payoff, time, censored, bridged, fallbacks


def _normal_distance(df, x, psi):
    """Distance to the boundary along -psi_x from a quadratic model of psi.

    Solves psi - t |psi_x| + k t^2 / 2 = 0 with k the curvature of psi along
    the normal; exact for balls.  Returns (distance, unit normal).
    """
    g = df.gradient(x)
    gn = np.linalg.norm(g, axis=1)
    ok = gn > 0
    nrm = g / np.where(ok, gn, 1.0)[:, None]
    k = np.einsum("ni,nij,nj->n", nrm, df.hessian(x), nrm)
    disc = np.sqrt(np.clip(gn**2 - 2.0 * k * psi, 0.0, None))
    dist = np.where(ok, 2.0 * psi / np.where(ok, gn + disc, 1.0), np.inf)
    return dist, nrm


def _bridge_kill(df, x, xn, psi0, psi1, ctrl, S, dt, rng):
    """Indices (into the rows given) of paths whose Brownian bridge crossed.

    Half-plane crossing probability exp(-2 d0 d1 / (sigma_n^2 dt)) with the
    boundary distances at both ends and the path variance along the normal.
    """
    d0, nrm = _normal_distance(df, x, psi0)
    d1, _ = _normal_distance(df, xn, psi1)
    sig_n = nrm @ ctrl.sigma if S is None else np.einsum("ni,nij->nj", nrm, S)
    var = np.sum(sig_n**2, axis=1) * dt
    ok = (var > 0) & np.isfinite(d0) & np.isfinite(d1)
    p = np.where(ok, np.exp(-2.0 * np.where(ok, d0 * d1, 0.0) / np.where(ok, var, 1.0)), 0.0)
    u = rng.random(p.size)
    return np.flatnonzero(u < p)


def simulate(x0, problem, config: RolloutConfig) -> RolloutResult:
    """Monte Carlo estimate of the payoff from x0 under ``config.policy_source``."""
    x0 = np.asarray(x0, float)
    if x0.shape != (problem.df.dim,):
        raise ValueError(f"x0 must have {problem.df.dim} coordinates")
    if not problem.df.eval(x0) > 0:
        raise ValueError("x0 must lie inside D")
    source = config.policy_source
    if source is None:
        d = problem.control_dim
        source = ConstantControl(np.eye(d) / d)
    ctrl = _Controller(problem, source)
    B = config.block_size
    sizes = [min(B, config.n_paths - k * B) for k in range(-(-config.n_paths // B))]

    def run(k):
        return _simulate_block(x0, problem, config, ctrl, k, sizes[k])

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    payoff = np.concatenate([p[0] for p in parts])
    time = np.concatenate([p[1] for p in parts])
    censored = np.concatenate([p[2] for p in parts])
    N = payoff.size
    se = float(payoff.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    tse = float(time.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    return RolloutResult(estimate=float(payoff.mean()), std_error=se,
                         mean_exit_time=float(time.mean()),
                         censored_fraction=float(censored.mean()), n_paths=N,
                         exit_time_std_error=tse, fallback_lookups=int(sum(p[4] for p in parts)),
                         bridge_exits=int(sum(p[3] for p in parts)), payoffs=payoff)


def policy_gap(x0, problem, solution: SolutionBundle, config: RolloutConfig):
    """v_solver(x0) minus the rollout estimate under the solved grid policy.

    Returns ``(gap, result)``.
    """
    if not solution.converged:
        raise ValueError("policy_gap needs a converged solution")
    cfg = RolloutConfig(dt=config.dt, n_paths=config.n_paths, seed=config.seed,
                        max_time=config.max_time, policy_source=GridPolicy(solution.policy),
                        bridge=config.bridge, threads=config.threads, block_size=config.block_size)
    res = simulate(x0, problem, cfg)
    return solution.v.at(x0) - res.estimate, res


def fit_bias_constant(x0, problem, config: RolloutConfig, reference: float, dts=(1e-2, 1e-3)):
    """max over dt of |estimate - reference| / sqrt(dt) with the other settings of config."""
    out = []
    for dt in dts:
        cfg = RolloutConfig(dt=dt, n_paths=config.n_paths, seed=config.seed,
                            max_time=config.max_time, policy_source=config.policy_source,
                            bridge=config.bridge, threads=config.threads,
                            block_size=config.block_size)
        r = simulate(x0, problem, cfg)
        out.append(abs(r.estimate - reference) / math.sqrt(dt))
    return float(max(out)), out
