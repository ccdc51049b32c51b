import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepopt.errors import EmptySample, OutsideProxRadius
from sweepopt.geometry import BoxSampler, LevelSetC, Region, annulus, ball, estimate_constants


@pytest.fixture(scope="module")
def ann():
    return annulus(bdry_tol=1e-6)


@pytest.mark.parametrize("x, expected", [((1, 0), 0.0), ((0, 0), 4.0), ((1.5, 0), -2.1875)])
def test_eval_psi_values(ann, x, expected):
    assert ann.eval_psi(x) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, region", [((1, 0), Region.BOUNDARY_BAND), ((1.5, 0), Region.DEEP_INTERIOR),
                                       ((3, 0), Region.OUTSIDE)])
def test_classify(ann, x, region):
    assert ann.classify(x) is region


def test_classify_with_wider_band(ann):
    # psi(1.001, 0) is about -6e-3
    assert ann.classify((1.001, 0.0)) is Region.DEEP_INTERIOR
    assert ann.classify((1.001, 0.0), band=1e-2) is Region.BOUNDARY_BAND


@pytest.mark.parametrize("x, y", [((0.5, 0), (1, 0)), ((1.5, 0), (1.5, 0)), ((0, 2.5), (0, 2))])
def test_projection(ann, x, y):
    np.testing.assert_allclose(ann.project_onto_C(x), y, atol=1e-15)


def test_projection_of_center_is_not_unique(ann):
    with pytest.raises(OutsideProxRadius):
        ann.project_onto_C((0.0, 0.0))


def test_newton_projection_matches_closed_form(ann):
    plain = ann.__class__(ann.psi, ann.grad_psi, ann.hess_psi, ann.eta, ann.m_psi_bar, ann.m_psi,
                          ann.rho_smooth, ann.bdry_tol)
    for x in [(0.95, 0.1), (2.05, -0.1), (-0.05, 0.93)]:
        np.testing.assert_allclose(plain.project_onto_C(x), ann.project_onto_C(x), atol=1e-7)
    # 0.27 away from C, beyond eta / m_psi
    with pytest.raises(OutsideProxRadius):
        plain.project_onto_C((0.7, 0.2))


def test_estimate_constants_annulus(ann):
    sampler = BoxSampler(ann, (-2.5, -2.5), (2.5, 2.5), seed=1)
    eta, m_bar, m_psi = estimate_constants(ann, sampler, safety=0.9)
    assert eta == pytest.approx(2.7, rel=1e-6)
    assert m_bar == pytest.approx(12.0, rel=1e-6)
    assert m_psi >= 4 * eta / ann.rho_smooth
    fresh = BoxSampler(ann, (-2.5, -2.5), (2.5, 2.5), seed=99).boundary(200)
    assert min(np.linalg.norm(ann.grad_psi(p)) for p in fresh) > 2 * eta


def test_estimate_constants_sphere():
    unit = ball(1.0)
    sampler = BoxSampler(unit, (-1.5, -1.5), (1.5, 1.5), seed=0)
    eta, _, _ = estimate_constants(unit, sampler, safety=1.0)
    assert eta == pytest.approx(1.0, rel=1e-6)


def test_estimate_constants_empty_sample():
    far = ball(1.0, center=(100.0, 100.0))
    with pytest.raises(EmptySample):
        estimate_constants(far, BoxSampler(far, (-1, -1), (1, 1)), safety=0.9)


def test_annulus_constants(ann):
    assert ann.eta == 2.7
    assert ann.m_psi_bar == pytest.approx(12.0)
    assert ann.m_psi >= 4 * ann.eta / ann.rho_smooth


def test_invalid_eta():
    with pytest.raises(ValueError):
        LevelSetC(lambda x: 0.0, lambda x: x, lambda x: x, eta=0.0, m_psi_bar=1.0, m_psi=1.0)


def _fd_grad(f, x, eps=1e-6):
    return np.array([(f(x + eps * e) - f(x - eps * e)) / (2 * eps) for e in np.eye(x.size)])


points_in_C = st.tuples(st.floats(1.0, 2.0), st.floats(0.0, 2 * np.pi)).map(
    lambda rt: np.array([rt[0] * np.cos(rt[1]), rt[0] * np.sin(rt[1])]))


@settings(max_examples=100, deadline=None)
@given(points_in_C)
def test_grad_psi_matches_differences(x):
    geom = annulus()
    g = geom.grad_psi(x)
    fd = _fd_grad(geom.psi, x)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


@settings(max_examples=100, deadline=None)
@given(points_in_C)
def test_hess_psi_matches_differences(x):
    geom = annulus()
    H = geom.hess_psi(x)
    fd = np.array([_fd_grad(lambda y: geom.grad_psi(y)[i], x) for i in range(2)])
    assert np.abs(H - fd).max() <= 1e-5 * max(np.abs(H).max(), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.0, 2 * np.pi))
def test_projection_idempotent_and_feasible(r, th):
    geom = annulus()
    y = geom.project_onto_C([r * np.cos(th), r * np.sin(th)])
    assert geom.eval_psi(y) <= geom.bdry_tol
    np.testing.assert_allclose(geom.project_onto_C(y), y, atol=1e-15)
