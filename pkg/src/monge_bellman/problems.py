"""Benchmark Dirichlet problems with closed-form reference solutions.

Every problem is stated for v = -u: the Bellman solution with v = g on the
boundary.  References are callables so errors can be measured on any grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .complex_reduction import complex_hessian_from_real
from .domain import DefiningFunction, boundary_samples, complex_ball, ellipsoid, unit_ball
from .frames import ControlFamily, real_family


class UnknownProblem(KeyError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    kind: str  # "real" or "complex"
    df: DefiningFunction
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    reference: Callable[[np.ndarray], np.ndarray] | None = None
    reference_hessian: Callable[[np.ndarray], np.ndarray] | None = None
    family: ControlFamily | None = None
    notes: str = ""
    K: float | None = None
    # points where the reference is not twice differentiable, as a distance function
    kink_distance: Callable[[np.ndarray], np.ndarray] | None = None
    reduced: bool = False
    params: dict = field(default_factory=dict)

    @property
    def control_dim(self) -> int:
        return self.df.dim // 2 if self.kind == "complex" else self.df.dim


def _const(c):
    return lambda x: np.full(np.shape(x)[:-1], float(c))


def _sq(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def _neg_half_sq_hessian(n):
    return lambda x: np.broadcast_to(-np.eye(n), np.shape(x)[:-1] + (n, n)).copy()


def _radial(n, name, notes):
    return ProblemSpec(
        name=name, kind="real", df=unit_ball(n), f=_const(n), g=_const(-0.5),
        reference=lambda x: -0.5 * _sq(x), reference_hessian=_neg_half_sq_hessian(n),
        family=real_family(n), notes=notes, K=0.0)


def _gtw_piece(x):
    x = np.asarray(x, float)
    return np.clip(x**2 - 0.5, 0.0, None)


def _gtw_v(x):
    p = _gtw_piece(x)
    return -np.max(p, axis=-1) ** 2


def _gtw_hessian(x):
    x = np.asarray(x, float)
    p = _gtw_piece(x)
    k = np.argmax(p, axis=-1)
    active = np.take_along_axis(p, k[..., None], axis=-1)[..., 0] > 0
    xk = np.take_along_axis(x, k[..., None], axis=-1)[..., 0]
    H = np.zeros(x.shape + (x.shape[-1],))
    val = np.where(active, -(12 * xk**2 - 2), 0.0)
    idx = np.indices(k.shape)
    H[(*idx, k, k)] = val
    return H


def _gtw_kink_distance(x):
    x = np.asarray(x, float)
    to_edges = np.min(np.abs(np.abs(x) - np.sqrt(0.5)), axis=-1)
    # switching set between the two pieces where both are positive
    both = np.all(x**2 > 0.5, axis=-1)
    switch = np.where(both, np.abs(np.abs(x[..., 0]) - np.abs(x[..., 1])) / np.sqrt(2), np.inf)
    return np.minimum(to_edges, switch)


def _affine(x):
    x = np.asarray(x, float)
    return 0.3 + 0.5 * x[..., 0] - 0.25 * x[..., 1]


def _aniso_v(x):
    x = np.asarray(x, float)
    return -0.5 * (x[..., 0] ** 2 + 4 * x[..., 1] ** 2)


def _quartic_hessian(x):
    x = np.asarray(x, float)
    r2 = _sq(x)[..., None, None]
    return -(r2 * np.eye(2) + 2 * x[..., :, None] * x[..., None, :])


def _complex_radial(d, f):
    n = 2 * d
    return ProblemSpec(
        name=f"complex_radial_d{d}", kind="complex", df=complex_ball(d), f=_const(f),
        g=_const(-1.0), reference=lambda x: -_sq(x), reference_hessian=lambda x: 2 * _neg_half_sq_hessian(n)(x),
        notes=f"u = |z|^2 on the unit ball of C^{d}: det u_zzbar = 1 = d^-d f^d with f = {f}",
        K=0.0, params={"d": d})


def _build_registry() -> dict[str, ProblemSpec]:
    reg = {}
    reg["real_radial_2d"] = _radial(
        2, "real_radial_2d",
        "u = |x|^2/2 on the unit disk: det u_xx = 1 = f^2/4 with f = 2; f constant so K = 0")
    reg["real_radial_3d"] = _radial(
        3, "real_radial_3d",
        "u = |x|^2/2 on the unit ball of R^3: det u_xx = 1 = f^3/27 with f = 3; K = 0")
    reg["gtw_degenerate"] = ProblemSpec(
        name="gtw_degenerate", kind="real", df=unit_ball(2), f=_const(0.0), g=_gtw_v,
        reference=_gtw_v, reference_hessian=_gtw_hessian, family=real_family(2),
        notes=("u = max((x1^2 - 1/2)+, (x2^2 - 1/2)+)^2, f = 0: only C^{1,1} across "
               "|x_k| = 1/sqrt 2, each smooth piece has a zero Hessian row; K = 0"),
        K=0.0, kink_distance=_gtw_kink_distance)
    reg["real_homogeneous_affine"] = ProblemSpec(
        name="real_homogeneous_affine", kind="real", df=unit_ball(2), f=_const(0.0), g=_affine,
        reference=_affine, reference_hessian=lambda x: np.zeros(np.shape(x) + (2,)),
        family=real_family(2), notes="affine boundary trace with f = 0: v is the affine function; K = 0",
        K=0.0)
    reg["real_anisotropic_2d"] = ProblemSpec(
        name="real_anisotropic_2d", kind="real", df=unit_ball(2), f=_const(4.0), g=_aniso_v,
        reference=_aniso_v,
        reference_hessian=lambda x: np.broadcast_to(-np.diag([1.0, 4.0]), np.shape(x) + (2,)).copy(),
        family=real_family(2), notes="u = (x1^2 + 4 x2^2)/2: det u_xx = 4 = f^2/4 with f = 4; K = 0",
        K=0.0)
    reg["real_quartic_2d"] = ProblemSpec(
        name="real_quartic_2d", kind="real", df=unit_ball(2),
        f=lambda x: 2 * np.sqrt(3.0) * _sq(x), g=_const(-0.25),
        reference=lambda x: -0.25 * _sq(x) ** 2, reference_hessian=_quartic_hessian,
        family=real_family(2),
        notes=("u = |x|^4/4: det u_xx = 3|x|^4 = f^2/4 with f = 2 sqrt(3) |x|^2, degenerate at 0; "
               "f convex so K = 0"),
        K=0.0)
    reg["complex_radial_d1"] = _complex_radial(1, 1.0)
    reg["complex_radial_d2"] = _complex_radial(2, 2.0)
    return reg


_REGISTRY = _build_registry()


def names() -> list[str]:
    return sorted(_REGISTRY)


def get(name: str) -> ProblemSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownProblem(f"unknown problem {name!r}; known: {', '.join(names())}") from None


def list_problems() -> list[dict]:
    return [{"name": p.name, "kind": p.kind, "dim": p.df.dim, "has_reference": p.reference is not None,
             "K": p.K, "notes": p.notes} for p in (_REGISTRY[n] for n in names())]


INLINE_DOMAINS = ("unit_ball", "ellipsoid", "complex_ball")


def inline_problem(domain: str, dim: int = 2, semi_axes=None, f: float = 0.0,
                   g: float = 0.0) -> ProblemSpec:
    """Constant data f, g on a closed-form domain, with its quadratic reference.

    ``dim`` is the real dimension for ``unit_ball`` and the complex dimension
    for ``complex_ball``; ``ellipsoid`` takes its dimension from ``semi_axes``.
    The reference is v = g + c psi with c fixed by det(-v_xx) = d^-d f^d.
    """
    f, g = float(f), float(g)
    if f < 0:
        raise ValueError(f"f must be >= 0, got {f}")
    if domain == "complex_ball":
        d = int(dim)
        df = complex_ball(d)
        c = f / d
        return ProblemSpec(
            name="inline_complex_ball", kind="complex", df=df, f=_const(f), g=_const(g),
            reference=lambda x: g + c * df.eval(x),
            reference_hessian=lambda x: 2 * c * _neg_half_sq_hessian(2 * d)(x),
            notes=f"constant data f = {f}, g = {g} on the unit ball of C^{d}", K=0.0,
            params={"d": d})
    if domain == "unit_ball":
        a = np.ones(int(dim))
        df = unit_ball(int(dim))
    elif domain == "ellipsoid":
        if semi_axes is None:
            raise ValueError("ellipsoid needs semi_axes")
        a = np.asarray(semi_axes, float)
        df = ellipsoid(a)
    else:
        raise ValueError(f"domain must be one of {', '.join(INLINE_DOMAINS)}, got {domain!r}")
    n = a.size
    c = 0.5 * (f / n) * np.prod(a) ** (2.0 / n)
    H = -2 * c * np.diag(1 / a**2)
    return ProblemSpec(
        name=f"inline_{domain}", kind="real", df=df, f=_const(f), g=_const(g),
        reference=lambda x: g + c * df.eval(x),
        reference_hessian=lambda x: np.broadcast_to(H, np.shape(x)[:-1] + (n, n)).copy(),
        family=real_family(n), notes=f"constant data f = {f}, g = {g} on {domain} of R^{n}", K=0.0)


def interior_samples(df: DefiningFunction, n: int, seed: int = 0) -> np.ndarray:
    """Uniform-ish points of D by rejection from the bounding box."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        x = df.origin + df.radius * rng.uniform(-1, 1, (4 * n, df.dim))
        out.append(x[df.eval(x) > 0])
    return np.concatenate(out)[:n]


def equation_residual(spec: ProblemSpec, x) -> np.ndarray:
    """|det(-v_xx) - d^-d f^d| (complex: with the Wirtinger Hessian)."""
    H = -spec.reference_hessian(x)
    f = np.broadcast_to(spec.f(x), H.shape[:-2])
    if spec.kind == "complex":
        C = complex_hessian_from_real(H)
        d = C.shape[-1]
        det = np.linalg.det(C).real
    else:
        d = H.shape[-1]
        det = np.linalg.det(H)
    return np.abs(det - (f / d) ** d)


def validate_reference(spec: ProblemSpec, n_samples: int = 1000, seed: int = 0,
                       margin: float = 2 / 64) -> dict:
    """Pointwise equation residual and boundary mismatch of the stored reference."""
    if spec.reference is None:
        raise ValueError(f"problem {spec.name!r} has no reference")
    x = interior_samples(spec.df, n_samples, seed)
    if spec.kink_distance is not None:
        x = x[spec.kink_distance(x) > margin]
    eq = equation_residual(spec, x)
    concave = np.linalg.eigvalsh(spec.reference_hessian(x))[..., -1]
    if spec.kind == "complex":
        concave = np.linalg.eigvalsh(complex_hessian_from_real(spec.reference_hessian(x)))[..., -1]
    b = boundary_samples(spec.df, n_samples, seed)
    bnd = np.abs(spec.reference(b) - spec.g(b))
    mismatches = [x[i].tolist() for i in np.flatnonzero(eq > 1e-10)]
    fvals = np.broadcast_to(spec.f(x), eq.shape)
    return {
        "max_equation_residual": float(eq.max()) if eq.size else 0.0,
        "max_boundary_mismatch": float(bnd.max()),
        "max_concavity_eigenvalue": float(concave.max()),
        "min_f": float(fvals.min()),
        "n_interior": int(len(x)),
        "mismatches": mismatches,
    }


def check_K_witness(spec: ProblemSpec, n_samples: int = 2000, seed: int = 0,
                    step: float = 1e-3) -> float:
    """Min second difference of f + K|x|^2 along random directions (want >= -1e-8)."""
    if spec.K is None:
        raise ValueError(f"problem {spec.name!r} has no K witness")
    rng = np.random.default_rng(seed)
    x = interior_samples(spec.df, n_samples, seed)
    e = rng.standard_normal(x.shape)
    e /= np.linalg.norm(e, axis=1, keepdims=True)

    def F(y):
        return np.broadcast_to(spec.f(y), y.shape[:-1]) + spec.K * _sq(y)

    # small step keeps roundoff cancellation below the tolerance
    return float(np.min((F(x + step * e) + F(x - step * e) - 2 * F(x)) / step**2))
