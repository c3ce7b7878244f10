from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from monge_bellman import problems, solver
from monge_bellman.complex_reduction import (complex_hessian_from_real, det_identity, expm_check,
                                             frame_identity_check, frame_identity_data,
                                             hermitian_family, hermitian_frames, is_embedded_form,
                                             non_closure_witness, phi_mat, phi_vec, pluri_margin,
                                             random_cubic_domain, reduce_problem, trace_identity,
                                             unitary_transport_ok, unphi_vec)
from monge_bellman.controls import haar_frames
from monge_bellman.domain import DomainKind, NotStrictlyConvex, complex_ball, cubic


def random_control(rng, d):
    U = haar_frames(rng, 1, d, complex_=True)[0]
    a = (U * rng.dirichlet(np.ones(d))) @ U.conj().T
    return 0.5 * (a + a.conj().T)


def diagonal_ball(c):
    """psi = 1 - sum c_k |z_k|^2."""
    c = np.asarray(c, float)
    n = 2 * c.size
    A = -2.0 * np.diag(np.concatenate([c, c]))
    return cubic(1.0, np.zeros(n), A, np.zeros((n, n, n)), kind=DomainKind.COMPLEX_PSEUDOCONVEX)


def test_phi_examples():
    assert_allclose(phi_mat(np.array([[1j]])), [[0, 1], [-1, 0]])
    assert_allclose(phi_mat(np.eye(3)), np.eye(6))


@given(st.integers(1, 4), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_phi_is_a_homomorphism(d, seed):
    rng = np.random.default_rng(seed)
    A, B = (rng.standard_normal((2, d, d)) + 1j * rng.standard_normal((2, d, d)))
    z = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    assert_allclose(phi_mat(A @ B), phi_mat(A) @ phi_mat(B), atol=1e-12)
    assert_allclose(phi_mat(A) @ phi_vec(z), phi_vec(np.conj(A) @ z), atol=1e-12)
    assert_allclose(unphi_vec(phi_vec(z)), z)
    # covariance of the embedded diffusion
    assert_allclose(phi_mat(A) @ phi_mat(A).T, phi_mat(A @ A.conj().T), atol=1e-12)


@pytest.mark.parametrize("a, expected", [
    (np.diag([1 / 3, 2 / 3]), 4 / 81),
    (np.eye(2) / 2, 0.5**4),
    (np.eye(3) / 3, (1 / 3) ** 6),
])
def test_det_identity_examples(a, expected):
    assert_allclose(det_identity(a), (expected, expected), rtol=1e-12)


@given(st.integers(1, 4), st.integers(0, 2**16))
@settings(max_examples=50, deadline=None)
def test_det_identity_random(d, seed):
    lhs, rhs = det_identity(random_control(np.random.default_rng(seed), d))
    assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("d, a", [(1, np.eye(1)), (2, np.eye(2) / 2)])
def test_trace_identity_ball(d, a):
    assert_allclose(trace_identity(a, complex_ball(d), np.zeros(d)), (-4.0, -4.0), atol=1e-12)


def test_trace_identity_diagonal_weights(rng):
    c = rng.uniform(0.5, 2.0, 3)
    a = random_control(rng, 3)
    expected = -4 * np.sum(c * np.diag(a).real)
    z = 0.2 * (rng.standard_normal(3) + 1j * rng.standard_normal(3))
    assert_allclose(trace_identity(a, diagonal_ball(c), z), (expected, expected), rtol=1e-12)


def test_complex_hessian_examples():
    assert_allclose(complex_hessian_from_real(2 * np.eye(4)), np.eye(2))
    # u = Re(z^2) = x^2 - y^2 is pluriharmonic
    assert_allclose(complex_hessian_from_real(np.diag([2.0, -2.0])), [[0.0]])
    with pytest.raises(ValueError):
        complex_hessian_from_real(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_complex_hessian_matches_finite_differences(rng):
    d, n, eps = 2, 4, 1e-3
    A = rng.standard_normal((n, n))
    A = A + A.T

    def u(x):
        return 0.5 * x @ A @ x

    def partial(f, i):
        e = np.zeros(n)
        e[i] = eps
        return lambda x: (f(x + e) - f(x - e)) / (2 * eps)

    x0 = rng.standard_normal(n)
    C = np.zeros((d, d), complex)
    for k in range(d):
        for j in range(d):
            # (d_xk - i d_yk)(d_xj + i d_yj) u / 4
            dj = [partial(u, j), partial(u, d + j)]
            C[k, j] = 0.25 * (partial(dj[0], k)(x0) + 1j * partial(dj[1], k)(x0)
                              - 1j * partial(dj[0], d + k)(x0) + partial(dj[1], d + k)(x0))
    assert_allclose(complex_hessian_from_real(A), C, atol=1e-8)


@given(st.integers(1, 3), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_frame_identity_ball(d, seed):
    rng = np.random.default_rng(seed)
    z = 0.5 * (rng.standard_normal(d) + 1j * rng.standard_normal(d))
    xi = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    assert frame_identity_check(complex_ball(d), z, xi) <= 1e-12


def test_frame_identity_zero_direction():
    data = frame_identity_data(complex_ball(2), np.array([0.3, 0.1j]), np.zeros(2))
    assert data.chi == 0
    assert not data.R.any()
    assert frame_identity_check(complex_ball(2), np.array([0.3, 0.1j]), np.zeros(2)) == 0.0


def test_frame_identity_needs_gradient():
    with pytest.raises(ValueError):
        frame_identity_check(complex_ball(1), np.zeros(1), np.ones(1))


def test_frame_identity_random_polynomials():
    rng = np.random.default_rng(11)
    count = 0
    while count < 100:
        d = 1 + count % 3
        df = random_cubic_domain(d, rng)
        z = 0.3 * (rng.standard_normal(d) + 1j * rng.standard_normal(d))
        x = phi_vec(z)
        g = df.gradient(x)
        if np.linalg.norm(0.5 * (g[:d] + 1j * g[d:])) < 1e-2:
            continue
        xi = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        chk = frame_identity_check(df, z, xi, full=True)
        assert chk["residual"] <= 1e-10
        assert chk["real_residual"] <= 1e-10
        assert chk["skew_defect"] <= 1e-12
        count += 1


@given(st.integers(1, 4), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_unitary_transport_and_orthogonality(d, seed):
    rng = np.random.default_rng(seed)
    U = haar_frames(rng, 1, d, complex_=True)[0]
    assert unitary_transport_ok(U, random_control(rng, d))
    P = phi_mat(U)
    assert np.abs(P.T @ P - np.eye(2 * d)).max() <= 1e-12


@given(st.integers(1, 4), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_exponential_of_skew_hermitian(d, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    unit, gap = expm_check(M - M.conj().T)
    assert unit <= 1e-10 and gap <= 1e-10


def test_non_closure_witness():
    O, b, image, embedded = non_closure_witness(2)
    assert_allclose(O @ O.T, np.eye(4))
    assert is_embedded_form(b)
    assert not embedded
    assert not is_embedded_form(image)
    with pytest.raises(ValueError):
        non_closure_witness(1)


def test_hermitian_frame_counts():
    assert len(hermitian_frames(1, 1)) == 1
    assert len(hermitian_frames(2, 1)) == 7
    assert len(hermitian_frames(2, 2)) == 51


@pytest.mark.parametrize("d", [1, 2])
def test_family_generators_consistent(d, rng):
    fam = hermitian_family(d)
    for frame in fam.frames(1):
        lam = rng.dirichlet(np.ones(d))
        U = fam.control_frame(frame)
        assert_allclose(U.conj().T @ U, np.eye(d), atol=1e-12)
        a = (U * lam) @ U.conj().T
        assert_allclose(fam.frame_generator(frame, lam), fam.generator(a), atol=1e-12)
        assert_allclose(fam.generator(a), 0.25 * phi_mat(a), atol=1e-12)


def test_pluri_margin_ball():
    assert pluri_margin(complex_ball(2), np.zeros((1, 4))) == pytest.approx(-1.0)


def test_reduce_rejects_real_domain():
    with pytest.raises(NotStrictlyConvex):
        reduce_problem(problems.get("real_radial_2d"))


def test_reduced_constant_data():
    spec = reduce_problem(problems.get("complex_radial_d1"))
    flat = replace(spec, f=lambda x: np.zeros(np.shape(x)[:-1]), g=lambda x: np.full(np.shape(x)[:-1], 0.7))
    b = solver.howard_solve(flat, h=1 / 8)
    assert_allclose(b.v.values, 0.7, atol=1e-8)


def test_reduced_ball_d2():
    spec = reduce_problem(problems.get("complex_radial_d2"))
    assert spec.reduced and spec.family.control_dim == 2
    b = solver.howard_solve(spec, h=1 / 4)
    assert b.converged
    assert solver.max_error(b.v, spec.reference) <= 1e-10


def test_expm_agrees_with_scipy():
    Q = np.array([[0.0, 1.0 + 1j], [-1.0 + 1j, 0.5j]])
    assert_allclose(phi_mat(scipy.linalg.expm(Q)), scipy.linalg.expm(phi_mat(Q)), atol=1e-12)
