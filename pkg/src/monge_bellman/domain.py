"""Domains described by a defining function psi, with D = {psi > 0}.

The solver and the Monte Carlo rollouts only see a domain through
``DefiningFunction``: values, gradients and Hessians of psi, all vectorized
over a trailing coordinate axis.  Closed forms are provided for balls,
ellipsoids, complex balls and cubic polynomials.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

BOUNDARY_TOL = 1e-10


class NotStrictlyConvex(ValueError):
    """The defining function is not strictly concave on the sample set."""


class ProjectionFailed(RuntimeError):
    """Newton projection onto the zero level set did not converge."""


class DomainKind(enum.Enum):
    REAL_CONVEX = "real"
    COMPLEX_PSEUDOCONVEX = "complex"


@dataclass(frozen=True)
class DefiningFunction:
    """Analytic defining function of a bounded domain.

    ``func``, ``grad`` and ``hess`` take arrays of shape ``(..., n)`` and
    return shapes ``(...)``, ``(..., n)`` and ``(..., n, n)``.  ``scale``
    multiplies all three; ``normalize`` changes it, never the callables.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    kind: DomainKind = DomainKind.REAL_CONVEX
    scale: float = 1.0
    radius: float = 1.0  # D lies in the box [-radius, radius]^n around center
    center: np.ndarray | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def complex_dim(self) -> int:
        if self.kind is not DomainKind.COMPLEX_PSEUDOCONVEX:
            raise ValueError("complex_dim is only defined for complex domains")
        return self.dim // 2

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(self.dim) if self.center is None else np.asarray(self.center, float)

    def eval(self, x) -> np.ndarray:
        return self.scale * self.func(np.asarray(x, dtype=float))

    def gradient(self, x) -> np.ndarray:
        return self.scale * self.grad(np.asarray(x, dtype=float))

    def hessian(self, x) -> np.ndarray:
        return self.scale * self.hess(np.asarray(x, dtype=float))

    def contains(self, x) -> np.ndarray:
        return self.eval(x) > 0

    def scaled(self, factor: float) -> "DefiningFunction":
        return replace(self, scale=self.scale * float(factor))


def _quadratic(dim, c0, b, A, *, kind, radius, center, name, params):
    """psi(x) = c0 + b.x + x.A.x/2 with constant Hessian A."""
    b = np.asarray(b, float)
    A = np.asarray(A, float)

    def func(x):
        return c0 + x @ b + 0.5 * np.einsum("...i,ij,...j->...", x, A, x)

    def grad(x):
        return b + x @ A.T

    def hess(x):
        return np.broadcast_to(A, x.shape[:-1] + A.shape).copy()

    return DefiningFunction(dim, func, grad, hess, kind=kind, radius=radius,
                            center=center, name=name, params=params)


def unit_ball(dim: int = 2) -> DefiningFunction:
    """psi = 1 - |x|^2 on R^dim."""
    return _quadratic(dim, 1.0, np.zeros(dim), -2.0 * np.eye(dim),
                      kind=DomainKind.REAL_CONVEX, radius=1.0, center=None,
                      name="unit_ball", params={})


def ellipsoid(semi_axes) -> DefiningFunction:
    """psi = 1 - sum (x_i / a_i)^2."""
    a = np.asarray(semi_axes, float)
    if a.ndim != 1 or a.size < 1 or np.any(a <= 0):
        raise ValueError("semi_axes must be a list of positive reals")
    return _quadratic(a.size, 1.0, np.zeros(a.size), -2.0 * np.diag(1.0 / a**2),
                      kind=DomainKind.REAL_CONVEX, radius=float(a.max()), center=None,
                      name="ellipsoid", params={"semi_axes": a.tolist()})


def complex_ball(d: int = 1) -> DefiningFunction:
    """psi = 1 - |z|^2 on C^d, stored on the embedding x = (Re z, Im z)."""
    return _quadratic(2 * d, 1.0, np.zeros(2 * d), -2.0 * np.eye(2 * d),
                      kind=DomainKind.COMPLEX_PSEUDOCONVEX, radius=1.0, center=None,
                      name="complex_ball", params={"d": d})


def cubic(c0, b, A, T, *, kind=DomainKind.REAL_CONVEX, radius=1.0, name="cubic"):
    """psi(x) = c0 + b.x + x.A.x/2 + T(x,x,x)/6 with symmetric A and T."""
    b = np.asarray(b, float)
    A = np.asarray(A, float)
    A = 0.5 * (A + A.T)
    T = np.asarray(T, float)
    # full symmetrization of the third-order tensor
    T = sum(np.transpose(T, p) for p in
            [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]) / 6.0
    n = b.size

    def func(x):
        return (c0 + x @ b + 0.5 * np.einsum("...i,ij,...j->...", x, A, x)
                + np.einsum("ijk,...i,...j,...k->...", T, x, x, x) / 6.0)

    def grad(x):
        return b + x @ A.T + 0.5 * np.einsum("ijk,...j,...k->...i", T, x, x)

    def hess(x):
        return A + np.einsum("ijk,...k->...ij", T, x)

    return DefiningFunction(n, func, grad, hess, kind=kind, radius=radius, name=name,
                            params={"c0": c0})


def _as_points(samples, dim) -> np.ndarray:
    pts = np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.size == 0 or pts.shape[0] == 0:
        raise ValueError("sample list is empty")
    if pts.shape[-1] != dim:
        raise ValueError(f"samples must have {dim} coordinates, got {pts.shape[-1]}")
    return pts.reshape(-1, dim)


def strict_concavity_margin(df: DefiningFunction, samples) -> float:
    """Max over samples of lambda_max(psi_xx).

    sup over trace-one PSD a of tr(a H) is lambda_max(H), so a negative
    margin certifies strict concavity on the sample set.
    """
    pts = _as_points(samples, df.dim)
    H = df.hessian(pts)
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite Hessian in strict_concavity_margin")
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return float(np.linalg.eigvalsh(H)[..., -1].max())


def normalize(df: DefiningFunction, samples, margin=strict_concavity_margin) -> DefiningFunction:
    """Scale psi so its margin on `samples` is at most -1.

    Functions already at or below -1 are returned with scale unchanged.
    ``margin`` can be swapped for the plurisuperharmonic margin on complex
    domains.
    """
    m = margin(df, samples)
    if not m < 0:
        raise NotStrictlyConvex(f"margin {m:.3e} >= 0: psi is not strictly concave on samples")
    factor = max(1.0, -1.0 / m)
    return df.scaled(factor)


def boundary_samples(df: DefiningFunction, n_samples: int, seed: int = 0) -> np.ndarray:
    """Points of the zero level set hit by rays from ``df.origin``."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_samples, df.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x0 = np.broadcast_to(df.origin, u.shape)
    reach = 2.0 * df.radius * np.sqrt(df.dim) * u
    t = ray_intersect(df, x0, reach)
    return x0 + t[:, None] * reach


def check_nonsingular(df: DefiningFunction, boundary_pts) -> float:
    """Min |psi_x| over boundary samples (should be >= 1)."""
    pts = _as_points(boundary_pts, df.dim)
    return float(np.linalg.norm(df.gradient(pts), axis=-1).min())


def ray_intersect(df: DefiningFunction, x, step, tol: float = 1e-13,
                  max_iter: int = 80) -> np.ndarray:
    """Fractions t in (0, 1] with psi(x + t*step) = 0.

    Rows of ``x`` must be inside D and rows of ``x + step`` outside or on
    the boundary; for convex D the crossing is unique.  Safeguarded Newton
    with bisection fallback.
    """
    x = np.atleast_2d(np.asarray(x, float))
    s = np.atleast_2d(np.asarray(step, float))
    m = x.shape[0]
    lo = np.zeros(m)
    hi = np.ones(m)
    phi_hi = df.eval(x + s)
    if np.any(phi_hi > 0):
        raise ValueError("ray_intersect: segment end point lies inside D")
    if np.any(df.eval(x) <= 0):
        raise ValueError("ray_intersect: segment start point lies outside D")
    t = np.where(phi_hi == 0, 1.0, 0.5)
    done = phi_hi == 0
    for _ in range(max_iter):
        if done.all():
            break
        idx = np.flatnonzero(~done)
        p = x[idx] + t[idx, None] * s[idx]
        phi = df.eval(p)
        dphi = np.einsum("ij,ij->i", df.gradient(p), s[idx])
        conv = np.abs(phi) <= tol
        done[idx[conv]] = True
        pos = phi > 0
        lo[idx] = np.where(pos, t[idx], lo[idx])
        hi[idx] = np.where(pos, hi[idx], t[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t[idx] - phi / dphi
        bad = ~np.isfinite(tn) | (tn <= lo[idx]) | (tn >= hi[idx])
        tn[bad] = 0.5 * (lo[idx][bad] + hi[idx][bad])
        t[idx[~conv]] = tn[~conv]
        stalled = (hi[idx] - lo[idx]) <= 4 * np.finfo(float).eps
        done[idx[stalled]] = True
    if not done.all():
        raise ProjectionFailed("ray_intersect did not converge")
    return t


def _project_batch(df, x, tol, max_iter, b0=None):
    """Damped Newton on b - x = mu psi_x(b), psi(b) = 0; returns (b, mu, ok)."""
    n = df.dim
    b = x.copy()
    mu = np.zeros(x.shape[0])
    eye = np.eye(n)
    if b0 is not None:
        b = b0.copy()
        gb = df.gradient(b)
        mu = np.einsum("ij,ij->i", b - x, gb) / np.einsum("ij,ij->i", gb, gb)
    else:
        # interior points start from the boundary crossing along -psi_x
        inner = df.eval(x) > tol
        if inner.any():
            g0 = df.gradient(x[inner])
            norm = np.linalg.norm(g0, axis=1, keepdims=True)
            ok0 = norm[:, 0] > 0
            idx = np.flatnonzero(inner)[ok0]
            reach = -4.0 * df.radius * np.sqrt(n) * g0[ok0] / norm[ok0]
            t = ray_intersect(df, x[idx], reach)
            b[idx] = x[idx] + t[:, None] * reach
            gb = df.gradient(b[idx])
            mu[idx] = np.einsum("ij,ij->i", b[idx] - x[idx], gb) / np.einsum("ij,ij->i", gb, gb)

    def residual(b, mu):
        g = df.gradient(b)
        F1 = b - x - mu[:, None] * g
        F2 = df.eval(b)
        return F1, F2, g

    F1, F2, g = residual(b, mu)
    merit = np.sqrt(np.sum(F1**2, axis=1) + F2**2)
    ok = np.zeros(x.shape[0], bool)
    for _ in range(max_iter):
        ok = (np.abs(F2) <= tol) & (np.linalg.norm(F1, axis=1) <= 1e-12 * (1 + np.linalg.norm(x, axis=1)))
        if ok.all():
            break
        H = df.hessian(b)
        J = np.zeros((x.shape[0], n + 1, n + 1))
        J[:, :n, :n] = eye - mu[:, None, None] * H
        J[:, :n, n] = -g
        J[:, n, :n] = g
        rhs = -np.concatenate([F1, F2[:, None]], axis=1)
        try:
            step = np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise ProjectionFailed(f"singular projection Jacobian: {exc}") from exc
        alpha = np.ones(x.shape[0])
        for _ in range(30):
            bn = b + alpha[:, None] * step[:, :n]
            mun = mu + alpha * step[:, n]
            G1, G2, gn = residual(bn, mun)
            mn = np.sqrt(np.sum(G1**2, axis=1) + G2**2)
            accept = (mn < merit) | ok | (mn <= tol)
            if accept.all():
                break
            alpha = np.where(accept, alpha, 0.5 * alpha)
        keep = ~ok
        b[keep], mu[keep] = bn[keep], mun[keep]
        F1[keep], F2[keep], g[keep] = G1[keep], G2[keep], gn[keep]
        merit[keep] = mn[keep]
    return b, mu, ok


def _is_local_min(df, b, mu):
    """Second-order test: I - mu psi_xx(b) is positive definite on the tangent space."""
    n = df.dim
    g = df.gradient(b)
    unit = g / np.linalg.norm(g, axis=1, keepdims=True)
    P = np.eye(n) - unit[:, :, None] * unit[:, None, :]
    M = np.eye(n) - mu[:, None, None] * df.hessian(b)
    # the normal direction gets a large eigenvalue so only tangent ones count
    T = P @ M @ P + 1e6 * (unit[:, :, None] * unit[:, None, :])
    return np.linalg.eigvalsh(0.5 * (T + np.swapaxes(T, 1, 2)))[:, 0] > 0


def boundary_project(df: DefiningFunction, x, tube: float | None = None,
                     tol: float = BOUNDARY_TOL, max_iter: int = 60):
    """Closest boundary point of ``x`` by damped Newton on the KKT system.

    Points outside D start from (b, mu) = (x, 0), whose first Newton step
    is the plain gradient step; interior points start where the ray along
    -psi_x leaves D.  Failures and saddle points are retried from the
    nearest point of a boundary sample cloud.  Returns ``(b, distance)``; accepts a single
    point or a stack of points.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if tube is not None and np.any(np.abs(df.eval(pts)) > tube):
        raise ValueError(f"point outside projection tube |psi| <= {tube}")
    b, mu, ok = _project_batch(df, pts, tol, max_iter)
    retry = ~ok
    retry[ok] = ~_is_local_min(df, b[ok], mu[ok])
    if retry.any():
        # restart stragglers and saddles from the nearest point of a boundary cloud
        cloud = boundary_samples(df, 1024, seed=0)
        xr = pts[retry]
        near = cloud[np.argmin(((xr[:, None, :] - cloud[None]) ** 2).sum(-1), axis=1)]
        br, _, okr = _project_batch(df, xr, tol, max_iter, b0=near)
        b[retry] = br
        ok[retry] = okr
    if not ok.all():
        raise ProjectionFailed(
            f"boundary projection failed for {np.count_nonzero(~ok)} point(s); "
            f"max |psi| = {np.abs(df.eval(b[~ok])).max():.3e}")
    dist = np.linalg.norm(b - pts, axis=1)
    if single:
        return b[0], float(dist[0])
    return b, dist
