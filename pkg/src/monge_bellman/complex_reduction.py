"""Complex Monge-Ampere on C^d as a real Bellman problem on R^{2d}.

Points z in C^d are stored as x = (Re z, Im z).  The embedding of matrices,

    phi_mat(A) = [[Re A, Im A], [-Im A, Re A]],

satisfies phi_mat(A) phi_vec(z) = phi_vec(conj(A) z), det phi_mat(a) =
det(a)^2 and tr(phi_mat(a) H) = 4 tr(a u_zzbar) for Hermitian a.  A
Hermitian control a = sum lam_k u_k u_k^* acts on R^{2d} through the
generator phi_mat(a) / 4, and phi_mat(u u^*) = w1 w1^T + w2 w2^T with
w1 = phi_vec(conj u), w2 = phi_vec(i conj u).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.linalg

from .controls import PSD_TOL, ControlMatrix
from .domain import DefiningFunction, DomainKind, NotStrictlyConvex, cubic
from .frames import ControlFamily

FRAME_GRAD_MIN = 1e-3


def phi_vec(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    return np.concatenate([z.real, z.imag], axis=-1)


def unphi_vec(x) -> np.ndarray:
    x = np.asarray(x, float)
    d = x.shape[-1] // 2
    return x[..., :d] + 1j * x[..., d:]


def phi_mat(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    top = np.concatenate([a.real, a.imag], axis=-1)
    bot = np.concatenate([-a.imag, a.real], axis=-1)
    return np.concatenate([top, bot], axis=-2)


@dataclass(frozen=True)
class ComplexPoint:
    z: np.ndarray

    @property
    def embedding(self) -> np.ndarray:
        return phi_vec(self.z)

    @classmethod
    def from_embedding(cls, x) -> "ComplexPoint":
        return cls(unphi_vec(x))


@dataclass(frozen=True)
class HermitianControl:
    """Hermitian PSD trace-one matrix."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("control must be square")
        if np.abs(a - a.conj().T).max() > PSD_TOL:
            raise ValueError("control is not Hermitian")
        # delegate PSD and trace checks
        object.__setattr__(self, "entries", ControlMatrix(a).entries)

    def embed(self) -> "EmbeddedControl":
        return EmbeddedControl(phi_mat(self.entries))


@dataclass(frozen=True)
class EmbeddedControl:
    """Real 2d x 2d block matrix [[S, T], [-T, S]] with S PSD, T skew, tr S = 1."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, float)
        if not is_embedded_form(m):
            raise ValueError("matrix is not in the embedded control set")
        object.__setattr__(self, "entries", m)

    def source(self) -> HermitianControl:
        d = self.entries.shape[0] // 2
        S, T = self.entries[:d, :d], self.entries[:d, d:]
        return HermitianControl(S + 1j * T)


def is_embedded_form(m, tol: float = 1e-12) -> bool:
    """Whether m = phi_mat(a) for some Hermitian PSD trace-one a."""
    m = np.asarray(m, float)
    n = m.shape[0]
    if m.ndim != 2 or n != m.shape[1] or n % 2:
        return False
    d = n // 2
    S, T = m[:d, :d], m[:d, d:]
    if np.abs(m[d:, d:] - S).max() > tol or np.abs(m[d:, :d] + T).max() > tol:
        return False
    if np.abs(S - S.T).max() > tol or np.abs(T + T.T).max() > tol:
        return False
    if abs(np.trace(S) - 1) > tol:
        return False
    return bool(np.linalg.eigvalsh(S + 1j * T)[0] >= -tol)


@dataclass(frozen=True)
class FrameIdentityData:
    chi: complex
    R: np.ndarray
    rho: float
    varkappa: float
    Q: np.ndarray


def det_identity(a) -> tuple[float, float]:
    """(det phi_mat(a), det(a)^2)."""
    A = a.entries if isinstance(a, HermitianControl) else np.asarray(a, complex)
    return float(np.linalg.det(phi_mat(A))), float(abs(np.linalg.det(A)) ** 2)


def wirtinger_gradient(df: DefiningFunction, x):
    """(psi_z, psi_zbar) at embedded points x."""
    g = df.gradient(x)
    d = g.shape[-1] // 2
    gx, gy = g[..., :d], g[..., d:]
    psi_z = 0.5 * (gx - 1j * gy)
    return psi_z, np.conj(psi_z)


def complex_hessian_from_real(H, tol: float = 1e-10) -> np.ndarray:
    """Hermitian u_{z^k zbar^j} from the real 2d x 2d Hessian (batched).

    Entry [k, j] = (1/4)[(u_xkxj + u_ykyj) + i(u_xkyj - u_ykxj)].
    """
    H = np.asarray(H, float)
    if np.abs(H - np.swapaxes(H, -1, -2)).max() > tol:
        raise ValueError("real Hessian is not symmetric")
    d = H.shape[-1] // 2
    Hxx, Hxy = H[..., :d, :d], H[..., :d, d:]
    Hyx, Hyy = H[..., d:, :d], H[..., d:, d:]
    return 0.25 * ((Hxx + Hyy) + 1j * (Hxy - Hyx))


def trace_identity(a, df: DefiningFunction, z) -> tuple[float, float]:
    """(tr[phi_mat(a) psi_xx], 4 tr(a psi_zzbar)) at the point z."""
    A = a.entries if isinstance(a, HermitianControl) else np.asarray(a, complex)
    x = phi_vec(z.z if isinstance(z, ComplexPoint) else z)
    H = df.hessian(x)
    C = complex_hessian_from_real(H)
    return float(np.trace(phi_mat(A) @ H)), float(4 * np.trace(A @ C).real)


def pluri_margin(df: DefiningFunction, samples) -> float:
    """Max over samples of lambda_max(psi_zzbar)."""
    pts = np.atleast_2d(np.asarray(samples, float))
    if pts.size == 0:
        raise ValueError("sample list is empty")
    C = complex_hessian_from_real(df.hessian(pts))
    return float(np.linalg.eigvalsh(C)[..., -1].max())


def frame_identity_data(df: DefiningFunction, z, xi) -> FrameIdentityData:
    x = phi_vec(z)
    xi = np.asarray(xi, complex)
    psi_z, psi_zb = wirtinger_gradient(df, x)
    norm2 = float(np.sum(np.abs(psi_zb) ** 2))
    if np.sqrt(norm2) < FRAME_GRAD_MIN:
        raise ValueError(f"|psi_zbar| = {np.sqrt(norm2):.3e} below {FRAME_GRAD_MIN}")
    H = df.hessian(x)
    d = xi.size
    dg = H @ phi_vec(xi)  # real gradient differentiated along xi
    dpsi_z = 0.5 * (dg[:d] - 1j * dg[d:])
    dpsi_zb = np.conj(dpsi_z)
    chi = complex(-np.sum(psi_zb * dpsi_z) / norm2)
    R = (np.outer(psi_zb, dpsi_z) - np.outer(dpsi_zb, psi_z)) / norm2
    rho, kappa = chi.real, chi.imag
    Q = R + 1j * kappa * np.eye(d)
    return FrameIdentityData(chi, R, rho, kappa, Q)


def frame_identity_check(df: DefiningFunction, z, xi, full: bool = False):
    """Residual of (psi_zbar)_(xi) + Q psi_zbar + rho psi_zbar = 0.

    With ``full`` returns a dict that also holds the skew-Hermitian defect of
    Q and the residual of the same identity transported to R^{2d} through
    psi_x = 2 phi_vec(psi_zbar), where Q acts as phi_mat(conj Q).
    """
    data = frame_identity_data(df, z, xi)
    x = phi_vec(z)
    H = df.hessian(x)
    _, psi_zb = wirtinger_gradient(df, x)
    dg = H @ phi_vec(np.asarray(xi, complex))
    d = psi_zb.size
    dpsi_zb = 0.5 * (dg[:d] + 1j * dg[d:])
    res = float(np.linalg.norm(dpsi_zb + data.Q @ psi_zb + data.rho * psi_zb))
    if not full:
        return res
    gx = df.gradient(x)
    P = phi_mat(np.conj(data.Q))
    real_res = float(np.linalg.norm(dg + P @ gx + data.rho * gx))
    skew = float(np.abs(data.Q + data.Q.conj().T).max())
    return {"residual": res, "real_residual": real_res, "skew_defect": skew, "data": data}


def unitary_transport_ok(U, a, tol: float = 1e-12) -> bool:
    """U a U^* is a control, and its embedding is phi_mat(U) phi_mat(a) phi_mat(U)^T."""
    A = a.entries if isinstance(a, HermitianControl) else np.asarray(a, complex)
    b = U @ A @ U.conj().T
    try:
        HermitianControl(b)
    except ValueError:
        return False
    lhs = phi_mat(U) @ phi_mat(A) @ phi_mat(U).T
    return is_embedded_form(lhs, tol) and np.abs(lhs - phi_mat(b)).max() <= tol


def expm_check(Q) -> tuple[float, float]:
    """(unitarity defect of e^Q, |phi_mat(e^Q) - e^{phi_mat Q}|)."""
    Q = np.asarray(Q, complex)
    E = scipy.linalg.expm(Q)
    unit = float(np.abs(E.conj().T @ E - np.eye(len(Q))).max())
    return unit, float(np.abs(phi_mat(E) - scipy.linalg.expm(phi_mat(Q))).max())


def non_closure_witness(d: int = 2):
    """Orthogonal O and b in the embedded control set with O b O^T outside it.

    O swaps Re z^1 and Im z^1.  For d = 1 the embedded set is {I_2}, which
    every orthogonal map fixes, so ``d >= 2`` is required.
    """
    if d < 2:
        raise ValueError("the embedded control set is orthogonally closed for d = 1")
    n = 2 * d
    O = np.eye(n)
    O[[0, d]] = O[[d, 0]]
    a = np.zeros((d, d), complex)
    a[0, 0] = a[1, 1] = 0.5
    a[0, 1], a[1, 0] = 0.5j, -0.5j
    b = phi_mat(a)
    image = O @ b @ O.T
    return O, b, image, is_embedded_form(image)


def random_cubic_domain(d: int, rng: np.random.Generator, scale: float = 0.2) -> DefiningFunction:
    """Perturbed complex ball psi = 1 - |z|^2 + quadratic and cubic noise.

    The noise carries no Hermitian structure, so psi_xx exercises the full
    real Hessian in identity sweeps.
    """
    n = 2 * d
    A = rng.standard_normal((n, n))
    T = rng.standard_normal((n, n, n))
    return cubic(1.0, scale * rng.standard_normal(n), -2.0 * np.eye(n) + scale * (A + A.T) / 2,
                 scale * T, kind=DomainKind.COMPLEX_PSEUDOCONVEX, name="random_cubic")


# --- Hermitian frame family ------------------------------------------------


def _gaussian_vectors(d: int, width: int):
    """Gaussian-integer vectors with |Re|, |Im| <= width, one per complex line."""
    rng = range(-width, width + 1)
    best: dict[tuple, np.ndarray] = {}
    for comps in itertools.product(rng, repeat=2 * d):
        c = np.array(comps, float)
        u = c[:d] + 1j * c[d:]
        if not np.any(u):
            continue
        k = int(np.flatnonzero(u)[0])
        unit = u * (abs(u[k]) / u[k]) / np.linalg.norm(u)
        key = tuple(np.round(np.concatenate([unit.real, unit.imag]), 10))
        prev = best.get(key)
        if prev is None or np.vdot(u, u).real < np.vdot(prev, prev).real:
            best[key] = u
    vecs = list(best.values())
    # coordinate vectors first so frame 0 is the standard basis
    vecs.sort(key=lambda u: (np.abs(np.concatenate([u.real, u.imag])).max(),
                             np.vdot(u, u).real, tuple(-np.concatenate([u.real, u.imag]))))
    return vecs


@lru_cache(maxsize=None)
def _hermitian_frames_cached(d: int, width: int) -> np.ndarray:
    vecs = _gaussian_vectors(d, width)
    V = np.array(vecs)
    G = V.conj() @ V.T
    frames = []

    def extend(chosen, start):
        if len(chosen) == d:
            frames.append(V[chosen])
            return
        for j in range(start, len(V)):
            if all(abs(G[c, j]) < 1e-9 for c in chosen):
                extend(chosen + [j], j + 1)

    extend([], 0)
    out = []
    for U in frames:
        groups = []
        for u in U:
            w1 = phi_vec(np.conj(u))
            w2 = phi_vec(1j * np.conj(u))
            groups.append([w1, w2])
        out.append(groups)
    return np.rint(np.array(out)).astype(np.int64)


def hermitian_frames(d: int, width: int) -> np.ndarray:
    """Unitary frames of Gaussian-integer vectors, shape (m, d, 2, 2d)."""
    if d < 1 or width < 1:
        raise ValueError("dimension and stencil width must be positive")
    return _hermitian_frames_cached(d, width).copy()


def hermitian_family(d: int) -> ControlFamily:
    """Hermitian trace-one controls on C^d acting on R^{2d}."""

    def generator(a):
        return 0.25 * phi_mat(a)

    def control_frame(frame):
        w1 = frame[:, 0, :].astype(float)
        u = w1[:, :d] - 1j * w1[:, d:]
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return u.T

    return ControlFamily(name="hermitian", control_dim=d, space_dim=2 * d, group_size=2,
                         scale=0.25, build=lambda w: hermitian_frames(d, w),
                         generator=generator, control_frame=control_frame)


def reduce_problem(problem, samples=None):
    """Real Bellman problem on R^{2d} equivalent to a complex problem on C^d.

    The nodewise objective of the result is tr(a v_zzbar) + det(a)^(1/d) f
    for Hermitian a, so f and g carry over unchanged and the factor 1/4 of
    the embedded generator lives in the control family.
    """
    df = problem.df
    if df.kind is not DomainKind.COMPLEX_PSEUDOCONVEX:
        raise NotStrictlyConvex(f"problem {problem.name!r} is not posed on a complex domain")
    if samples is None:
        from .domain import boundary_samples

        bs = boundary_samples(df, 64, seed=0)
        samples = np.concatenate([bs, 0.5 * bs, df.origin[None, :]])
    m = pluri_margin(df, samples)
    if not m < 0:
        raise NotStrictlyConvex(f"psi is not strictly plurisuperharmonic (margin {m:.3e})")
    return replace(problem, family=hermitian_family(df.dim // 2), reduced=True)
