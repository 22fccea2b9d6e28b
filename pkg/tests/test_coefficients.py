import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from spde_ergo.coefficients import (
    CoefficientSet,
    Closure,
    Constant,
    Mollified,
    Mollifier,
    Polynomial,
    Sine,
    TruncationGate,
    gate,
    make_preset,
    mollify,
    validate,
)
from spde_ergo.errors import ConfigurationError, HypothesisViolation


def test_burgers_preset():
    c = make_preset("burgers", sigma_const=1.0)
    r = np.array([-2.0, 0.0, 2.0])
    np.testing.assert_allclose(c.g2(0, 0.5, r), r**2 / 2)
    assert np.all(c.b(0, 0.5, r) == 0) and np.all(c.g1(0, 0.5, r) == 0)
    assert c.g2(0, 0, 2.0) == 2.0 <= c.K * (1 + 4)
    assert c.k1 == 1.0 and c.k2 == 1.0


def test_cubic_reaction_rejected_with_witness():
    with pytest.raises(HypothesisViolation) as info:
        make_preset("reaction_diffusion", b_coeffs=(0, 0, 0, -1))
    assert info.value.hypothesis == "H1"
    assert abs(info.value.witness["r"]) > 1
    assert "(H1)" in str(info.value) and "witness" in str(info.value)


def test_custom_sigma_bounds_scanned():
    c = make_preset("custom", sigma=lambda t, x, r: 0.5 + 0.1 * np.sin(r))
    assert c.k1 == pytest.approx(0.4, abs=1e-6)
    assert c.k2 == pytest.approx(0.6, abs=1e-6)


def test_declared_bounds_checked():
    with pytest.raises(HypothesisViolation, match="H4"):
        make_preset("custom", sigma=lambda t, x, r: 0.5 + 0.1 * np.sin(r), k1=0.45)
    with pytest.raises(HypothesisViolation, match="H3"):
        make_preset("custom", sigma=Sine(1.0, 3.0), L=1.0)
    with pytest.raises(HypothesisViolation, match="H2"):
        make_preset("custom", g2=Polynomial((0, 0, 2.0)))


def test_validation_deterministic():
    verdicts = []
    for _ in range(2):
        try:
            make_preset("reaction_diffusion", b_coeffs=(0, 3.0))
            verdicts.append("ok")
        except HypothesisViolation as exc:
            verdicts.append(str(exc))
    assert verdicts[0] == verdicts[1] != "ok"


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        make_preset("navier_stokes")


def test_gate_values():
    g = TruncationGate(5.0)
    assert gate(g, 3.0) == 1.0
    assert gate(g, 5.0) == 1.0
    assert gate(g, 6.5) == 0.0
    assert gate(g, 6.0) == 0.0
    assert gate(TruncationGate(), 1e300) == 1.0


def test_gate_slope_bounded():
    g = TruncationGate(5.0)
    r = np.linspace(0, 10, 200001)
    slope = np.abs(np.diff(g.value(r)) / np.diff(r))
    assert slope.max() <= 2.0
    assert np.max(np.abs(g.derivative(r))) == pytest.approx(15 / 8, rel=1e-6)


def test_gate_is_c1():
    g = TruncationGate(5.0)
    h = 1e-4
    for r0 in (5.0, 6.0):
        left = (g.value(r0) - g.value(r0 - h)) / h
        right = (g.value(r0 + h) - g.value(r0)) / h
        assert abs(left - right) < 1e-6


def test_gate_derivative_matches_finite_difference():
    g = TruncationGate(2.0)
    r = np.linspace(-4, 4, 801)
    h = 1e-6
    fd = (g.value(r + h) - g.value(r - h)) / (2 * h)
    np.testing.assert_allclose(g.derivative(r), fd, atol=1e-6)


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), st.floats(min_value=0.1, max_value=100))
@settings(max_examples=200, deadline=None)
def test_gate_range(r, R):
    v = float(TruncationGate(R).value(r))
    assert 0.0 <= v <= 1.0


def test_bump_unit_mass():
    m = Mollifier(1)
    val, _ = integrate.quad(m.phi, -1, 1, epsabs=1e-13)
    assert abs(val - 1) < 1e-8
    assert abs(m.weights.sum() - 1) < 1e-12


def test_mollify_constant_unchanged():
    c = make_preset("custom", b=Constant(0.3), sigma=0.7)
    for n in (1, 4, 64):
        m = mollify(c, n)
        r = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(m.b(0, 0, r), 0.3, rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.sigma(0, 0, r), 0.7, rtol=0, atol=1e-15)


def test_mollify_abs_kink():
    base = Closure(lambda t, x, r: np.abs(r))
    vals = []
    for n in (2, 4, 8, 16, 32):
        s = base.mollify(Mollifier(n))
        vals.append(float(s(0, 0, 0.0)))
    # oracle: sigma_n(0) = int phi(z)|z| dz / n by adaptive quadrature; the
    # fixed Gauss rule sees the kink, hence the looser tolerance
    first, _ = integrate.quad(lambda z: Mollifier(1).phi(z) * abs(z), 0, 1)
    np.testing.assert_allclose(np.array(vals) * np.array([2, 4, 8, 16, 32]), 2 * first, rtol=1e-3)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_mollified_derivative_bounded_by_lipschitz():
    c = make_preset("custom", sigma=lambda t, x, r: 1.0 + 0.5 * np.abs(np.sin(r)), L=0.5)
    r = np.linspace(-20, 20, 4001)
    for n in (1, 8, 64):
        m = mollify(c, n)
        assert np.max(np.abs(m.sigma.deriv(0, 0, r))) <= c.L * (1 + 1e-9)


def test_mollified_growth_derivative_bound():
    c = make_preset("reaction_diffusion", b_coeffs=(0, -1.0), b_sin_amp=0.5, K=2, L=2)
    m = mollify(c, 16)
    xi = np.linspace(-50, 50, 1001)
    M = 2.0
    assert np.all(np.abs(m.b.deriv(0, 0, xi)) <= M * (1 + np.abs(xi)))


def test_analytic_mollification_matches_quadrature():
    moll = Mollifier(3)
    r = np.linspace(-4, 4, 17)
    for term in (Polynomial((0.5, -1.0, 0.25, 0.1)), Sine(0.7, 2.3)):
        np.testing.assert_allclose(term.mollify(moll)(0, 0, r), Mollified(term, moll)(0, 0, r), atol=1e-12)
        np.testing.assert_allclose(term.mollify(moll).deriv(0, 0, r), Mollified(term, moll).deriv(0, 0, r), atol=1e-9)


def test_mollification_converges_monotonically_for_convex_kink():
    base = Closure(lambda t, x, r: np.abs(r))
    r = np.linspace(-3, 3, 2001)
    dist = [np.max(np.abs(base.mollify(Mollifier(n))(0, 0, r) - np.abs(r))) for n in (1, 2, 4, 8, 16)]
    assert all(b <= a + 1e-6 for a, b in zip(dist, dist[1:]))


def test_mollified_preset_is_near_identity():
    c = make_preset("burgers", sigma_const=0.5, sigma_amp=0.2)
    m = mollify(c, 64)
    r = np.linspace(-3, 3, 61)
    np.testing.assert_allclose(m.sigma(0, 0, r), c.sigma(0, 0, r), atol=1e-4)
    # g2 only gains a constant, which does not affect the flux divergence
    np.testing.assert_allclose(m.g2.deriv(0, 0, r), c.g2.deriv(0, 0, r), atol=1e-12)


def test_time_space_dependence_supported():
    b = Closure(lambda t, x, r: np.sin(np.pi * x) * (1 + t) * 0.1 * r)
    c = validate(CoefficientSet(b=b, sigma=Constant(1.0), K=1.0, L=1.0))
    out = c.b(np.array([0.0, 1.0])[:, None], np.array([0.5]), np.array([2.0, 2.0])[:, None])
    np.testing.assert_allclose(out.ravel(), [0.2, 0.4])
