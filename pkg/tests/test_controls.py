import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from monge_bellman.controls import (ControlMatrix, brute_force_sup, control_objective,
                                    haar_frames, inner_max, inner_max_batch, optimal_control,
                                    sample_control)
from monge_bellman.verification import random_negative_definite


@pytest.mark.parametrize("delta, f, value, weights, vertex", [
    ((-1.0, -1.0), 2.0, 0.0, (0.5, 0.5), False),
    ((-4.0, -1.0), 4.0, 0.0, (0.2, 0.8), False),
    ((-2.0, -5.0), 0.0, -2.0, (1.0, 0.0), True),
])
def test_inner_max_examples(delta, f, value, weights, vertex):
    res = inner_max(delta, f)
    assert res.value == pytest.approx(value, abs=1e-12)
    assert_allclose(res.weights, weights, atol=1e-10)
    assert res.at_vertex is vertex


def test_inner_max_rejects_negative_f():
    with pytest.raises(ValueError):
        inner_max([-1.0, -1.0], -0.1)


def test_kkt_quadratic_root():
    # weights of the (-4, -1), f = 4 case solve 25 l^2 - 25 l + 4 = 0
    lam = inner_max([-4.0, -1.0], 4.0).weights[0]
    assert 25 * lam**2 - 25 * lam + 4 == pytest.approx(0.0, abs=1e-10)


@given(st.integers(1, 5), st.floats(0.0, 10.0), st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_batch_matches_scalar(d, f, seed):
    delta = np.random.default_rng(seed).uniform(-3, 1, (4, d))
    vals, w = inner_max_batch(delta, f)
    for k in range(4):
        ref = inner_max(delta[k], f)
        assert vals[k] == pytest.approx(ref.value, abs=1e-9 * (1 + abs(ref.value)))
        assert_allclose(w[k], ref.weights, atol=1e-7)
    assert_allclose(w.sum(axis=1), 1.0)


@given(st.permutations(range(4)), st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_permutation_equivariance(perm, seed):
    delta = np.random.default_rng(seed).uniform(-2, 0, 4)
    a = inner_max(delta, 1.3)
    b = inner_max(delta[list(perm)], 1.3)
    assert b.value == pytest.approx(a.value, abs=1e-12)
    assert_allclose(b.weights, a.weights[list(perm)], atol=1e-10)


def test_eigenframe_dominates_random_frames():
    rng = np.random.default_rng(3)
    for i in range(100):
        d = 2 + i % 2
        H = random_negative_definite(rng, d)
        f = rng.uniform(0, 4)
        eig = inner_max(np.linalg.eigvalsh(H), f).value
        assert eig >= brute_force_sup(H, f, 2000, seed=i) - 1e-6
        Q = haar_frames(rng, 1, d)[0]
        other = inner_max(np.einsum("ik,ij,jk->k", Q, H, Q), f).value
        assert other <= eig + 1e-10


@pytest.mark.parametrize("d", [2, 3, 4])
def test_optimal_control_isotropic(d):
    assert_allclose(optimal_control(-np.eye(d), 0.3).entries, np.eye(d) / d, atol=1e-14)


def test_optimal_control_diagonal():
    a = optimal_control(np.diag([-4.0, -1.0]), 1e-8)
    assert np.linalg.norm(a.entries - np.diag([0.2, 0.8])) <= 1e-7


def test_optimal_control_concentrates_on_flat_direction():
    a11 = [optimal_control(np.diag([0.0, -1.0]), dl).entries[0, 0] for dl in (1e-1, 1e-3, 1e-6)]
    # (delta I - H)^-1 = diag(1/delta, 1/(1 + delta)) normalized to unit trace
    assert a11[1] == pytest.approx(1.001 / 1.002, rel=1e-12)
    assert a11[0] < a11[1] < a11[2] and a11[2] > 1 - 1e-5


def test_optimal_control_rejects_indefinite():
    with pytest.raises(ValueError):
        optimal_control(np.diag([1.0, -1.0]), 0.5)


def test_delta_limit_monotone():
    rng = np.random.default_rng(4)
    for _ in range(20):
        H = random_negative_definite(rng, 3)
        f_eq = 3 * np.linalg.det(-H) ** (1 / 3)
        vals = [control_objective(optimal_control(H, dl), H, f_eq) for dl in (1e-2, 1e-4, 1e-6)]
        assert vals[0] <= vals[1] + 1e-12 <= vals[2] + 2e-12
        assert vals[2] == pytest.approx(inner_max(np.linalg.eigvalsh(H), f_eq).value, abs=1e-5)


@pytest.mark.parametrize("H, f", [(-np.eye(2), 2.0), (-np.eye(3), 3.0), (np.diag([-4.0, -1.0]), 4.0)])
def test_brute_force_below_zero_sup(H, f):
    assert -1e-3 <= brute_force_sup(H, f, 100_000, seed=0) <= 0.0


def test_brute_force_f_zero():
    assert brute_force_sup(-np.eye(3), 0.0, 1000) == pytest.approx(-1.0)


def test_brute_force_rotation_invariance(rng):
    H = random_negative_definite(rng, 3)
    Q = haar_frames(rng, 1, 3)[0]
    a = brute_force_sup(H, 2.0, 20_000, seed=1)
    b = brute_force_sup(Q @ H @ Q.T, 2.0, 20_000, seed=2)
    assert abs(a - b) <= 1e-2


def test_sample_control_deterministic_and_unbiased():
    assert np.array_equal(sample_control(7).entries, sample_control(7).entries)
    rng = np.random.default_rng(0)
    draws = np.stack([sample_control(rng, d=3).entries for _ in range(10_000)])
    assert_allclose(np.trace(draws, axis1=1, axis2=2), 1.0, atol=1e-14)
    assert_allclose(draws.mean(axis=0), np.eye(3) / 3, atol=5e-2)


def test_control_matrix_validation():
    with pytest.raises(ValueError):
        ControlMatrix(np.diag([1.2, -0.2]))
    with pytest.raises(ValueError):
        ControlMatrix(np.eye(2))
    c = ControlMatrix(np.array([[0.5, 0.1j], [-0.1j, 0.5]]))
    assert c.is_complex and c.det() == pytest.approx(0.24)


def test_inner_max_rejects_non_finite():
    with pytest.raises(ValueError):
        inner_max([np.nan, 0.0], 1.0)
