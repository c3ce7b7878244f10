import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from monge_bellman.controls import brute_force_sup
from monge_bellman.domain import (BOUNDARY_TOL, NotStrictlyConvex, boundary_project,
                                  boundary_samples, check_nonsingular, cubic, ellipsoid, normalize,
                                  ray_intersect, strict_concavity_margin, unit_ball)


def half_space():
    return cubic(0.0, [1.0, 0.0], np.zeros((2, 2)), np.zeros((2, 2, 2)), name="slab")


def test_margin_unit_disk(rng):
    pts = rng.uniform(-0.7, 0.7, (50, 2))
    assert strict_concavity_margin(unit_ball(2), pts) == pytest.approx(-2.0)


def test_margin_half_space_is_zero(rng):
    assert strict_concavity_margin(half_space(), rng.uniform(0, 1, (20, 2))) == 0.0


def test_margin_ellipse():
    df = ellipsoid([1.0, 0.5])
    assert strict_concavity_margin(df, boundary_samples(df, 64)) == pytest.approx(-2.0)


def test_margin_requires_samples():
    with pytest.raises(ValueError):
        strict_concavity_margin(unit_ball(2), np.zeros((0, 2)))


@pytest.mark.parametrize("factor, expected_scale", [(1.0, 1.0), (0.25, 2.0), (5e-4, 1e3)])
def test_normalize_scales(factor, expected_scale):
    df = unit_ball(2).scaled(factor)
    pts = np.zeros((1, 2))
    out = normalize(df, pts)
    assert out.scale / df.scale == pytest.approx(expected_scale)
    assert strict_concavity_margin(out, pts) <= -1 + 1e-12


def test_normalize_rejects_flat_domain():
    with pytest.raises(NotStrictlyConvex):
        normalize(half_space(), np.array([[0.5, 0.0]]))


@given(st.floats(0.01, 100.0), st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_scaling_covariance(factor, seed):
    df = ellipsoid([1.0, 0.6])
    x = np.random.default_rng(seed).uniform(-1, 1, (10, 2))
    s = df.scaled(factor)
    assert_allclose(s.eval(x), factor * df.eval(x), rtol=1e-14)
    assert_allclose(s.gradient(x), factor * df.gradient(x), rtol=1e-14)
    assert_allclose(s.hessian(x), factor * df.hessian(x), rtol=1e-14)
    assert np.array_equal(s.contains(x), df.contains(x))


def test_margin_matches_brute_force_sup():
    df = cubic(1.0, [0.1, 0.0], [[-2.0, 0.3], [0.3, -1.0]], np.zeros((2, 2, 2)))
    H = df.hessian(np.zeros(2))
    lam = strict_concavity_margin(df, np.zeros((1, 2)))
    sampled = brute_force_sup(H, 0.0, 20_000, seed=1)
    assert sampled <= lam + 1e-12
    assert lam <= sampled + 1e-2


@pytest.mark.parametrize("x, b, dist", [
    ((0.5, 0.0), (1.0, 0.0), 0.5),
    ((0.0, -0.9), (0.0, -1.0), 0.1),
])
def test_project_disk(x, b, dist):
    bp, d = boundary_project(unit_ball(2), np.array(x))
    assert_allclose(bp, b, atol=1e-12)
    assert d == pytest.approx(dist, abs=1e-12)


def test_project_ellipse_against_dense_sampling():
    df = ellipsoid([1.0, 0.5])
    x = np.array([0.0, 0.6])
    b, d = boundary_project(df, x)
    assert_allclose(b, [0.0, 0.5], atol=1e-10)
    assert d == pytest.approx(0.1, abs=1e-10)
    t = np.linspace(0, 2 * np.pi, 200_001)
    ring = np.stack([np.cos(t), 0.5 * np.sin(t)], axis=1)
    assert np.linalg.norm(ring - x, axis=1).min() == pytest.approx(d, abs=1e-8)


@given(st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_projection_invariants(seed):
    rng = np.random.default_rng(seed)
    df = ellipsoid(rng.uniform(0.4, 1.5, 3))
    x = boundary_samples(df, 8, seed) * rng.uniform(0.5, 1.3, (8, 1))
    b, dist = boundary_project(df, x)
    assert np.abs(df.eval(b)).max() <= BOUNDARY_TOL
    cloud = boundary_samples(df, 20_000, seed + 1)
    nearest = np.sqrt(((x[:, None] - cloud[None]) ** 2).sum(-1)).min(axis=1)
    assert np.all(dist <= nearest + 1e-12)
    g = df.gradient(b)
    r = b - x
    keep = np.linalg.norm(r, axis=1) > 1e-8
    cos = np.abs(np.einsum("ij,ij->i", r, g)[keep]) / (
        np.linalg.norm(r[keep], axis=1) * np.linalg.norm(g[keep], axis=1))
    assert np.all(np.arccos(np.clip(cos, -1, 1)) <= 1e-6)


def test_ray_intersect_hits_boundary(rng):
    df = unit_ball(2)
    x = rng.uniform(-0.5, 0.5, (100, 2))
    u = rng.standard_normal((100, 2))
    step = 2 * u / np.linalg.norm(u, axis=1, keepdims=True)
    t = ray_intersect(df, x, step)
    assert np.abs(df.eval(x + t[:, None] * step)).max() <= 1e-12
    assert np.all((t > 0) & (t <= 1))


def test_ray_intersect_rejects_inside_end():
    with pytest.raises(ValueError):
        ray_intersect(unit_ball(2), np.zeros((1, 2)), np.array([[0.5, 0.0]]))


def test_boundary_gradient_nonsingular():
    df = unit_ball(3)
    assert check_nonsingular(df, boundary_samples(df, 100)) == pytest.approx(2.0)
