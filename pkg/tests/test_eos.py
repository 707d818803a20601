import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from compww.eos import EOSError, make_eos, verify_structural_conditions

# gamma = 2, kappa = 10 on [-0.5, 0.5]: symbolic derivatives of log rho(h), 1e4 samples
GAMMA2_RATIO_TO_DE = [1.0, 0.10526315789473684, 0.022160664819944602, 0.006998104679982504]
GAMMA2_RATIO_TO_POWER = [1.0, 1.0, 2.0, 6.0]
GAMMA2_SUP = [0.10526315789473685, 0.0110803324099723, 0.0023327015599941686, 0.0007366425978928953]


def test_linear_examples():
    eos = make_eos("linear", 100.0)
    h = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(eos.de(h), 0.01)
    for k in (2, 3, 4):
        assert np.all(eos.de(h, k) == 0.0)


@pytest.mark.parametrize("kind", ["linear", "gamma-law"])
def test_normalisation(kind):
    eos = make_eos(kind, 7.0, 1.4 if kind == "gamma-law" else None)
    assert float(eos.rho(0.0)) == 1.0
    assert float(eos.e(0.0)) == 0.0
    assert float(eos.dp(1.0)) == pytest.approx(7.0, abs=1e-10)


def _rho_oracle(eos, h):
    """Invert ``h(rho) = int_1^rho p'(l)/l dl`` numerically."""
    def H(r):
        return quad(lambda l: float(eos.dp(l)) / l, 1.0, r, epsabs=1e-13)[0] - h
    return brentq(H, 0.05, 20.0, xtol=1e-14)


def test_gamma2_density_matches_inversion():
    eos = make_eos("gamma-law", 1.0, 2.0)
    for h in (-0.5, -0.1, 0.0, 0.3, 1.5):
        assert float(eos.rho(h)) == pytest.approx(1.0 + h, abs=1e-12)
        assert float(eos.rho(h)) == pytest.approx(_rho_oracle(eos, h), abs=1e-10)


def test_invalid_parameters():
    with pytest.raises(EOSError):
        make_eos("linear", 0.0)
    with pytest.raises(EOSError):
        make_eos("gamma-law", 10.0, 1.0)
    with pytest.raises(EOSError):
        make_eos("polytrope", 10.0)
    with pytest.raises(EOSError):
        make_eos("gamma-law", 1.0, 2.0, h_range=(-2.0, 1.0))


def test_structural_linear():
    rep = verify_structural_conditions(make_eos("linear", 50.0), r=3)
    assert rep.passed
    assert rep.ratio_to_de == [1.0, 0.0, 0.0, 0.0]


def test_structural_gamma_law_oracle():
    rep = verify_structural_conditions(make_eos("gamma-law", 10.0, 2.0), h_range=(-0.5, 0.5), r=3)
    np.testing.assert_allclose(rep.ratio_to_de, GAMMA2_RATIO_TO_DE, rtol=1e-9)
    np.testing.assert_allclose(rep.ratio_to_de_power, GAMMA2_RATIO_TO_POWER, rtol=1e-9)
    np.testing.assert_allclose(rep.sup_abs, GAMMA2_SUP, rtol=1e-9)
    assert rep.passed and rep.c0 == pytest.approx(1.1 * 6.0)


def test_e_decreases_with_kappa():
    h = np.linspace(-2, 2, 101)
    sups = [np.abs(make_eos("linear", k).e(h)).max() for k in (1e2, 1e3, 1e4)]
    assert sups[0] > sups[1] > sups[2]


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["linear", "gamma-law"]), st.floats(1.0, 1e4), st.floats(1.1, 3.0))
def test_chain_consistency(kind, kappa, gamma):
    eos = make_eos(kind, kappa, gamma)
    lo, hi = eos.h_range
    h = np.linspace(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), 21)
    eps = 1e-6 * max(1.0, abs(lo), hi)
    fd = (np.log(eos.rho(h + eps)) - np.log(eos.rho(h - eps))) / (2 * eps)
    np.testing.assert_allclose(fd, eos.de(h), rtol=1e-6, atol=1e-8)
    assert np.all(eos.de(h) > 0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["linear", "gamma-law"]), st.floats(1.0, 1e3), st.floats(1.1, 3.0), st.floats(1.0, 3.0))
def test_potential_identities(kind, kappa, gamma, rho):
    eos = make_eos(kind, kappa, gamma)
    assert float(eos.Q(1.0)) == 0.0
    d = 1e-6
    dQ = (eos.Q(rho + d) - eos.Q(rho - d)) / (2 * d)
    assert float(dQ) == pytest.approx(float(eos.p(rho)) / rho ** 2, rel=1e-6, abs=1e-6)
    assert float(eos.dp(rho)) > 0


def test_incompressible_degeneration():
    h = np.linspace(-1, 1, 11)
    for kind in ("linear", "gamma-law"):
        des = [np.max(make_eos(kind, k).de(h)) for k in (1e2, 1e4, 1e6)]
        assert des[2] < 1.1e-6 and des[0] > des[1] > des[2]
        assert math.isclose(float(make_eos(kind, 1e6).e(0.5)), 0.0, abs_tol=1e-6)
