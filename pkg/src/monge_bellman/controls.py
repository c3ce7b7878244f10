"""Pointwise algebra of the supremum over trace-one PSD controls.

For a fixed orthonormal frame with pure second derivatives ``delta_k`` the
control is a point ``lam`` of the simplex and the objective is

    sum_k lam_k * delta_k + f * (prod_k lam_k) ** (1/d),

a concave function.  For f > 0 the stationarity conditions give
``lam_k = t / (mu - delta_k)`` and eliminating ``t`` leaves one scalar
equation: the geometric mean of ``mu - delta_k`` equals ``f / d``.  The
optimal value is then exactly ``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging

import numpy as np

logger = logging.getLogger(__name__)

PSD_TOL = 1e-12
F_VERTEX = 1e-14


class InnerMaxError(RuntimeError):
    """Root bracketing for the inner maximization failed."""


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


@dataclass(frozen=True)
class ControlMatrix:
    """A point of the control set: symmetric/Hermitian, PSD, trace one."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("control matrix must be square")
        a = _symmetrize(a)
        if not np.iscomplexobj(a):
            a = a.astype(float)
        w = np.linalg.eigvalsh(a)
        if w[0] < -PSD_TOL:
            raise ValueError(f"control matrix not PSD (min eigenvalue {w[0]:.3e})")
        tr = np.trace(a).real
        if abs(tr - 1.0) > PSD_TOL:
            raise ValueError(f"control matrix trace {tr!r} != 1")
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.entries)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def det(self) -> float:
        return float(np.prod(np.clip(self.eigenvalues(), 0.0, None)))


@dataclass(frozen=True)
class FrameControl:
    """Orthonormal frame (columns) plus simplex weights."""

    frame: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.frame)
        lam = np.asarray(self.weights, float)
        if V.ndim != 2 or V.shape[1] != lam.size:
            raise ValueError("frame must have one column per weight")
        if np.linalg.norm(np.conj(V.T) @ V - np.eye(lam.size)) > 1e-12:
            raise ValueError("frame columns are not orthonormal")
        if np.any(lam < -PSD_TOL) or abs(lam.sum() - 1.0) > 1e-12:
            raise ValueError("weights are not a simplex point")
        object.__setattr__(self, "frame", V)
        object.__setattr__(self, "weights", lam)

    def matrix(self) -> ControlMatrix:
        V = self.frame
        return ControlMatrix((V * self.weights) @ np.conj(V.T))


@dataclass(frozen=True)
class InnerMaxResult:
    value: float
    weights: np.ndarray
    multiplier: float
    at_vertex: bool

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "weights": self.weights.tolist(),
                           "multiplier": self.multiplier, "at_vertex": self.at_vertex})


def frame_objective(delta, weights, f_val) -> np.ndarray:
    """sum lam_k delta_k + f (prod lam_k)^(1/d), batched over leading axes."""
    delta = np.asarray(delta, float)
    lam = np.asarray(weights, float)
    d = lam.shape[-1]
    geo = np.prod(np.clip(lam, 0.0, None), axis=-1) ** (1.0 / d)
    return np.sum(lam * delta, axis=-1) + np.asarray(f_val, float) * geo


def inner_max(second_diffs, f_val: float, tol: float = 1e-12, verbose: bool = False) -> InnerMaxResult:
    """Maximize the frame objective over the simplex (scalar reference path)."""
    delta = np.asarray(second_diffs, dtype=float).ravel()
    if delta.size == 0 or not np.all(np.isfinite(delta)):
        raise ValueError("second differences must be a finite non-empty vector")
    if not f_val >= 0:
        raise ValueError(f"f_val must be nonnegative, got {f_val}")
    d = delta.size
    if f_val < F_VERTEX:
        k = int(np.argmax(delta))
        lam = np.zeros(d)
        lam[k] = 1.0
        res = InnerMaxResult(float(delta[k]), lam, float(delta[k]), True)
    else:
        q = f_val / d
        dmax = delta.max()
        offset = dmax - delta  # >= 0, zero at the largest entries

        def excess(s):
            # log geometric mean of the gaps s + offset minus log(f/d); increasing in s
            with np.errstate(divide="ignore"):
                return np.mean(np.log(s + offset)) - np.log(q)

        # bisect on s = mu - max(delta) so tiny gaps keep full precision
        lo = max(0.0, q - offset.mean())
        hi = q
        if excess(hi) < 0:
            raise InnerMaxError(f"upper bracket {hi} has negative excess for delta={delta}, f={f_val}")
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if excess(mid) < 0:
                lo = mid
            else:
                hi = mid
        gaps = hi + offset
        mu = dmax + hi
        geo = np.exp(np.mean(np.log(gaps)))
        if not abs(geo - q) <= tol * max(1.0, q) + 8 * np.finfo(float).eps * max(q, geo):
            raise InnerMaxError(
                f"bisection stalled: |GM - f/d| = {abs(geo - q):.3e}, mu={mu!r}, delta={delta}, f={f_val}")
        t = 1.0 / np.sum(1.0 / gaps)
        lam = t / gaps
        lam /= lam.sum()
        value = float(frame_objective(delta, lam, f_val))
        res = InnerMaxResult(value, lam, float(mu), False)
    if verbose:
        logger.info(res.to_json())
    return res


def inner_max_batch(delta: np.ndarray, f_val, newton_iters: int = 100):
    """Vectorized inner maximization: returns (values, weights).

    ``delta`` has shape (N, d); ``f_val`` broadcasts to (N,).  Closed forms
    for d <= 2; for d >= 3 Newton on prod(mu - delta_k) - (f/d)^d, which is
    convex increasing in mu, started to the right of the root at mu = max + f/d.
    """
    delta = np.asarray(delta, float)
    N, d = delta.shape
    f = np.broadcast_to(np.asarray(f_val, float), (N,))
    values = np.empty(N)
    weights = np.zeros((N, d))
    vert = f < F_VERTEX
    if vert.any():
        k = np.argmax(delta[vert], axis=1)
        values[vert] = delta[vert][np.arange(k.size), k]
        w = np.zeros((k.size, d))
        w[np.arange(k.size), k] = 1.0
        weights[vert] = w
    act = ~vert
    if not act.any():
        return values, weights
    D = delta[act]
    q = f[act] / d
    if d == 1:
        gaps = np.broadcast_to(q[:, None], D.shape)
        mu = D[:, 0] + q
    elif d == 2:
        half = 0.5 * (D[:, 0] - D[:, 1])
        r = np.hypot(half, q)
        far = r + np.abs(half)
        near = q * q / far
        # the larger delta gets the small gap
        big0 = D[:, 0] >= D[:, 1]
        gaps = np.stack([np.where(big0, near, far), np.where(big0, far, near)], axis=1)
        mu = np.where(big0, D[:, 0] + near, D[:, 1] + near)
    else:
        dmax = D.max(axis=1)
        off = dmax[:, None] - D
        target = q**d
        # Newton on the gap s = mu - max(delta), which keeps tiny gaps exact
        gap = q.copy()
        for _ in range(newton_iters):
            g = gap[:, None] + off
            p = np.prod(g, axis=1)
            dp = p * np.sum(1.0 / g, axis=1)
            new = gap - (p - target) / dp
            new = np.where(new > 0, new, 0.5 * gap)
            if np.all(np.abs(new - gap) <= 4 * np.finfo(float).eps * new):
                gap = new
                break
            gap = new
        gaps = gap[:, None] + off
        mu = dmax + gap
    inv = 1.0 / gaps
    lam = inv / inv.sum(axis=1, keepdims=True)
    weights[act] = lam
    values[act] = mu
    return values, weights


def optimal_control(hessian, delta: float, return_normalizer: bool = False):
    """(delta I - H)^{-1} normalized to unit trace.

    With ``return_normalizer`` also returns c_delta^{-1} = tr[(delta I - H)^{-1}].
    """
    H = _symmetrize(np.asarray(hessian))
    n = H.shape[0]
    w, V = np.linalg.eigh(delta * np.eye(n) - H)
    if not w[0] > 0:
        raise ValueError(f"delta I - H is not positive definite (min eigenvalue {w[0]:.3e})")
    inv_w = 1.0 / w
    tr_inv = float(inv_w.sum())
    a = (V * (inv_w / tr_inv)) @ np.conj(V.T)
    ctrl = ControlMatrix(a)
    if return_normalizer:
        return ctrl, tr_inv
    return ctrl


def control_objective(a, hessian, f_val: float) -> float:
    """tr(a H) + f det(a)^(1/d)."""
    A = a.entries if isinstance(a, ControlMatrix) else np.asarray(a)
    H = np.asarray(hessian)
    d = A.shape[0]
    det = max(float(np.linalg.det(A).real), 0.0)
    return float(np.trace(A @ H).real + f_val * det ** (1.0 / d))


def haar_frames(rng: np.random.Generator, n: int, d: int, complex_: bool = False) -> np.ndarray:
    """n Haar-distributed orthogonal (or unitary) d x d matrices."""
    G = rng.standard_normal((n, d, d))
    if complex_:
        G = (G + 1j * rng.standard_normal((n, d, d))) / np.sqrt(2.0)
    Q, R = np.linalg.qr(G)
    diag = np.diagonal(R, axis1=1, axis2=2)
    phase = diag / np.abs(diag)
    return Q * phase[:, None, :]


def sample_control(seed, d: int = 2, complex_: bool = False) -> ControlMatrix:
    """Haar frame times uniform simplex weights; deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Q = haar_frames(rng, 1, d, complex_)[0]
    lam = rng.dirichlet(np.ones(d))
    return ControlMatrix((Q * lam) @ np.conj(Q.T))


def brute_force_sup(hessian, f_val: float, n_samples: int, seed: int = 0,
                    batch: int = 20000) -> float:
    """Monte Carlo lower bound for sup over controls of tr(aH) + f det(a)^(1/d)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    H = _symmetrize(np.asarray(hessian))
    d = H.shape[0]
    complex_ = np.iscomplexobj(H)
    rng = np.random.default_rng(seed)
    best = -np.inf
    left = n_samples
    while left > 0:
        m = min(batch, left)
        Q = haar_frames(rng, m, d, complex_)
        lam = rng.dirichlet(np.ones(d), m)
        # q_k^* H q_k for each frame column k
        diag = np.einsum("nik,ij,njk->nk", np.conj(Q), H, Q).real
        vals = frame_objective(diag, lam, f_val)
        best = max(best, float(vals.max()))
        left -= m
    return best
