"""Stencil frames: finite families of orthonormal lattice frames.

A frame is stored as an integer array of shape ``(d, r, n)``: ``d`` groups
(one per simplex weight), each of ``r`` lattice directions in Z^n.  The
discrete operator of a frame control with weights ``lam`` is

    scale * sum_k lam_k * sum_{e in group k} D_e,

where ``D_e`` is the pure second difference along e / |e|.  Real problems
use ``r = 1, scale = 1``; the complex reduction supplies its own family.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ControlFamily:
    """How simplex-weighted frames act on functions of n real variables."""

    name: str
    control_dim: int
    space_dim: int
    group_size: int
    scale: float
    build: Callable[[int], np.ndarray] = field(repr=False)
    # maps a d x d control matrix to the generator matrix A, L v = tr(A v_xx)
    generator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    # frame (d, r, n) -> d x d matrix whose columns are the frame's control directions
    control_frame: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def frames(self, width: int) -> np.ndarray:
        return self.build(width)

    def frame_generator(self, frame: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """scale * sum_k lam_k sum_r e e^T / |e|^2 for one frame."""
        unit = frame / np.linalg.norm(frame, axis=-1, keepdims=True)
        return self.scale * np.einsum("k,kri,krj->ij", weights, unit, unit)


def _primitive(v) -> bool:
    return math.gcd(*[abs(int(c)) for c in v]) == 1


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    k = np.flatnonzero(v)[0]
    return v if v[k] > 0 else -v


@lru_cache(maxsize=None)
def _real_frames_cached(n: int, width: int) -> np.ndarray:
    rng = range(-width, width + 1)
    vecs = []
    seen = set()
    for comps in itertools.product(rng, repeat=n):
        v = np.array(comps, dtype=np.int64)
        if not v.any() or not _primitive(v):
            continue
        v = _canonical_sign(v)
        key = tuple(v)
        if key not in seen:
            seen.add(key)
            vecs.append(v)
    # axis directions first so frame 0 is the coordinate frame
    vecs.sort(key=lambda v: (int(np.abs(v).max()), int(v @ v), tuple(-v)))
    V = np.array(vecs)
    G = V @ V.T
    frames = []

    def extend(chosen, start):
        if len(chosen) == n:
            frames.append(V[chosen])
            return
        for j in range(start, len(V)):
            if all(G[j, c] == 0 for c in chosen):
                extend(chosen + [j], j + 1)

    extend([], 0)
    return np.array(frames)[:, :, None, :]


def real_frames(n: int, width: int) -> np.ndarray:
    """All orthogonal frames of primitive integer vectors with max-norm <= width.

    Returns shape (m, n, 1, n).  Frame 0 is the coordinate frame.
    """
    if n < 1 or width < 1:
        raise ValueError("dimension and stencil width must be positive")
    return _real_frames_cached(n, width).copy()


def default_width(n: int) -> int:
    """Stencil width used when a run does not set one."""
    if n <= 2:
        return 3
    if n == 3:
        return 2
    return 1


def real_family(d: int) -> ControlFamily:
    """Symmetric trace-one controls on R^d."""

    def generator(a):
        return np.asarray(a, float)

    def control_frame(frame):
        e = frame[:, 0, :].astype(float)
        return (e / np.linalg.norm(e, axis=1, keepdims=True)).T

    return ControlFamily(name="symmetric", control_dim=d, space_dim=d, group_size=1,
                         scale=1.0, build=lambda w: real_frames(d, w),
                         generator=generator, control_frame=control_frame)
