"""Lattice grids hZ^n restricted to D, with boundary closure along stencil arms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import DefiningFunction, ray_intersect
from .frames import ControlFamily, default_width


class StencilError(RuntimeError):
    """A stencil arm could not be closed."""


@dataclass(frozen=True)
class Arm:
    """One signed stencil arm for every node.

    ``nbr[i]`` is the neighbour node index or -1 when the arm leaves D; in
    that case ``frac[i] <= 1`` is the fraction of the lattice arm at which
    it meets the boundary and ``gval[i]`` the boundary value there.
    """

    nbr: np.ndarray
    frac: np.ndarray
    gval: np.ndarray

    @property
    def cut(self) -> np.ndarray:
        return self.nbr < 0


class Grid:
    """Interior nodes of hZ^n inside D and the stencil directions of a family."""

    def __init__(self, df: DefiningFunction, g, h: float, family: ControlFamily,
                 width: int | None = None):
        if not h > 0:
            raise ValueError("grid spacing must be positive")
        if family.space_dim != df.dim:
            raise ValueError("control family and domain dimensions differ")
        self.df = df
        self.g = g
        self.h = float(h)
        self.family = family
        self.width = default_width(df.dim) if width is None else int(width)
        n = df.dim
        c = df.origin
        lo = np.floor((c - df.radius) / h).astype(int) - 1
        hi = np.ceil((c + df.radius) / h).astype(int) + 1
        self.box_lo = lo
        self.box_shape = tuple(int(s) for s in hi - lo + 1)
        axes = [np.arange(lo[i], hi[i] + 1) for i in range(n)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        inside = df.eval(mesh * h) > 0
        self.keys = mesh[inside]
        self.points = self.keys * h
        self.index = np.full(self.box_shape, -1, dtype=np.int64)
        self.index[tuple((self.keys - lo).T)] = np.arange(len(self.keys))
        frames = family.frames(self.width)
        dirs: list[tuple] = []
        lookup: dict[tuple, int] = {}
        fidx = np.empty(frames.shape[:3], dtype=np.int64)
        for j, k, r in np.ndindex(*frames.shape[:3]):
            e = tuple(int(t) for t in frames[j, k, r])
            neg = tuple(-t for t in e)
            if e in lookup:
                fidx[j, k, r] = lookup[e]
            elif neg in lookup:
                fidx[j, k, r] = lookup[neg]
            else:
                lookup[e] = len(dirs)
                fidx[j, k, r] = len(dirs)
                dirs.append(e)
        self.frames = frames
        self.frame_dirs = fidx
        self.directions = np.array(dirs, dtype=np.int64)
        self._arms: dict[tuple, Arm] = {}
        self._psi = None

    @property
    def n_nodes(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.df.dim

    @property
    def psi(self) -> np.ndarray:
        if self._psi is None:
            self._psi = self.df.eval(self.points)
        return self._psi

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Node index for integer lattice keys (N, n); -1 where not a node."""
        rel = keys - self.box_lo
        ok = np.all((rel >= 0) & (rel < np.array(self.box_shape)), axis=1)
        out = np.full(len(keys), -1, dtype=np.int64)
        out[ok] = self.index[tuple(rel[ok].T)]
        return out

    def nearest_node(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.lookup(np.rint(x / self.h).astype(np.int64))

    def arm(self, e) -> Arm:
        """Arm along +e (integer direction) for all nodes, cached."""
        key = tuple(int(t) for t in e)
        if key in self._arms:
            return self._arms[key]
        ev = np.array(key, dtype=np.int64)
        nbr = self.lookup(self.keys + ev)
        cut = np.flatnonzero(nbr < 0)
        frac = np.ones(self.n_nodes)
        gval = np.zeros(self.n_nodes)
        if cut.size:
            step = np.broadcast_to(self.h * ev.astype(float), (cut.size, self.dim))
            try:
                t = ray_intersect(self.df, self.points[cut], step)
            except Exception as exc:
                raise StencilError(f"cannot close arm {key}: {exc}") from exc
            b = self.points[cut] + t[:, None] * step
            frac[cut] = t
            gval[cut] = self.g(b)
        arm = Arm(nbr, frac, gval)
        self._arms[key] = arm
        return arm

    def boundary_points(self, e) -> np.ndarray:
        """Closure points of the +e arms that leave D (rows of cut nodes)."""
        a = self.arm(e)
        cut = a.cut
        return self.points[cut] + (a.frac[cut, None] * self.h) * np.asarray(e, float)

    def stencil(self, e):
        """Three-point coefficients along e / |e|.

        Returns ``(cp, cm, arm_plus, arm_minus)`` with
        D_e v = cp (v_+ - v) + cm (v_- - v), exact for quadratics.
        """
        ap = self.arm(e)
        am = self.arm(tuple(-int(t) for t in e))
        L = self.h * math.sqrt(float(np.dot(e, e)))
        hp = L * ap.frac
        hm = L * am.frac
        cp = 2.0 / (hp * (hp + hm))
        cm = 2.0 / (hm * (hp + hm))
        return cp, cm, ap, am

    def neighbour_values(self, values: np.ndarray, arm: Arm) -> np.ndarray:
        out = arm.gval.copy()
        inner = ~arm.cut
        out[inner] = values[arm.nbr[inner]]
        return out

    def second_difference_all(self, values: np.ndarray, e) -> np.ndarray:
        """Pure second difference along e at every node."""
        cp, cm, ap, am = self.stencil(e)
        vp = self.neighbour_values(values, ap)
        vm = self.neighbour_values(values, am)
        return cp * (vp - values) + cm * (vm - values)

    def first_difference_all(self, values: np.ndarray, e) -> np.ndarray:
        """Derivative along e / |e|, three-point with unequal arms."""
        ap = self.arm(e)
        am = self.arm(tuple(-int(t) for t in e))
        L = self.h * math.sqrt(float(np.dot(e, e)))
        hp = L * ap.frac
        hm = L * am.frac
        vp = self.neighbour_values(values, ap)
        vm = self.neighbour_values(values, am)
        return (hm**2 * (vp - values) - hp**2 * (vm - values)) / (hp * hm * (hp + hm))

    def full_stencil_mask(self, dirs) -> np.ndarray:
        """Nodes whose arms along all of ``dirs`` (both signs) stay inside D."""
        ok = np.ones(self.n_nodes, bool)
        for e in dirs:
            ok &= ~self.arm(e).cut
            ok &= ~self.arm(tuple(-int(t) for t in e)).cut
        return ok

    def hessian_dirs(self):
        """Axis directions and e_i +/- e_j used to assemble a full Hessian."""
        n = self.dim
        eye = np.eye(n, dtype=np.int64)
        dirs = [tuple(eye[i]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                dirs.append(tuple(eye[i] + eye[j]))
                dirs.append(tuple(eye[i] - eye[j]))
        return dirs

    def numeric_hessian(self, values: np.ndarray) -> np.ndarray:
        """Hessian at every node from axis and diagonal second differences."""
        n = self.dim
        H = np.zeros((self.n_nodes, n, n))
        eye = np.eye(n, dtype=np.int64)
        for i in range(n):
            H[:, i, i] = self.second_difference_all(values, eye[i])
        for i in range(n):
            for j in range(i + 1, n):
                # D_e gives e^T H e / |e|^2 with |e|^2 = 2
                plus = 2.0 * self.second_difference_all(values, eye[i] + eye[j])
                minus = 2.0 * self.second_difference_all(values, eye[i] - eye[j])
                H[:, i, j] = H[:, j, i] = 0.25 * (plus - minus)
        return H

    def numeric_gradient(self, values: np.ndarray) -> np.ndarray:
        eye = np.eye(self.dim, dtype=np.int64)
        return np.stack([self.first_difference_all(values, eye[i]) for i in range(self.dim)], axis=1)


@dataclass
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise ValueError("GridFunction values must have one entry per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridFunction values must be finite")

    def at(self, x) -> float:
        """Value at the node nearest to x."""
        idx = self.grid.nearest_node(np.asarray(x, float))[0]
        if idx < 0:
            d = np.linalg.norm(self.grid.points - np.asarray(x, float), axis=1)
            idx = int(np.argmin(d))
        return float(self.values[idx])


def second_difference(v: GridFunction, node: int, e) -> float:
    """Pure second difference of v along the stencil direction e at one node."""
    grid = v.grid
    if not 0 <= node < grid.n_nodes:
        raise StencilError(f"node {node} is not an interior node")
    ev = np.asarray(e, dtype=np.int64)
    if not ev.any():
        raise ValueError("direction must be nonzero")
    cp, cm, ap, am = grid.stencil(ev)
    vp = ap.gval[node] if ap.nbr[node] < 0 else v.values[ap.nbr[node]]
    vm = am.gval[node] if am.nbr[node] < 0 else v.values[am.nbr[node]]
    if not (np.isfinite(vp) and np.isfinite(vm)):
        raise StencilError("boundary closure unavailable")
    x = v.values[node]
    return float(cp[node] * (vp - x) + cm[node] * (vm - x))
