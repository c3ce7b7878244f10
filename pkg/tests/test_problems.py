import numpy as np
import pytest

from monge_bellman import problems

WITH_REFERENCE = [p["name"] for p in problems.list_problems() if p["has_reference"]]


@pytest.mark.parametrize("name", WITH_REFERENCE)
def test_reference_solves_equation(name):
    rep = problems.validate_reference(problems.get(name))
    assert rep["max_equation_residual"] <= 1e-10, rep["mismatches"][:3]
    assert rep["max_boundary_mismatch"] <= 1e-12
    assert rep["max_concavity_eigenvalue"] <= 1e-12
    assert rep["min_f"] >= 0
    assert rep["n_interior"] > 500


def test_radial_reference_is_exact():
    rep = problems.validate_reference(problems.get("real_radial_2d"))
    assert rep["max_equation_residual"] <= 1e-12


def test_degenerate_reference_has_zero_determinant():
    spec = problems.get("gtw_degenerate")
    x = problems.interior_samples(spec.df, 500, seed=2)
    x = x[spec.kink_distance(x) > 1e-2]
    assert np.abs(np.linalg.det(spec.reference_hessian(x))).max() <= 1e-12


@pytest.mark.parametrize("name", problems.names())
def test_K_witness(name):
    spec = problems.get(name)
    if spec.K is None:
        pytest.skip("no K witness")
    assert problems.check_K_witness(spec) >= -1e-8


def test_unknown_problem():
    with pytest.raises(problems.UnknownProblem, match="known"):
        problems.get("no_such_problem")


def test_listing():
    listed = problems.list_problems()
    assert [p["name"] for p in listed] == problems.names()
    assert {"real_radial_2d", "gtw_degenerate", "complex_radial_d1", "complex_radial_d2"} <= set(problems.names())
    for p in listed:
        assert p["kind"] in ("real", "complex")
        assert p["notes"]


def test_interior_samples_inside():
    df = problems.get("real_radial_3d").df
    x = problems.interior_samples(df, 300, seed=1)
    assert x.shape == (300, 3)
    assert np.all(df.eval(x) > 0)
