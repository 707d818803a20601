from fractions import Fraction

import numpy as np
import pytest
import sympy as sp

from compww.commutators import (MAX_ORDER, AnalyticFlow, CommutatorError, HistoryError, MaterialState,
                                _FlowProvider, assemble_sources, check_f_structure, check_g_structure,
                                commutator_indexed, derivative_weight, evaluate_terms, expand, f_terms,
                                format_terms, g_terms, random_flow, symmetric_dot_indexed, verify_expansion,
                                wave_residual)
from compww.eos import make_eos
from compww.geometry import LagrangianMap
from compww.mesh import StripGrid

GRID = StripGrid(32, 16)


def _shear_flow(grid):
    t, y1, y2 = sp.symbols("t y1 y2")
    x1 = y1 + t * y2
    return AnalyticFlow(grid, [x1, y2], sp.sin(x1), t, (y1, y2))


def test_first_commutator():
    terms = expand("Dt_partial_r", 1)
    assert len(terms) == 1
    assert terms[0].coefficient == -1
    assert terms[0].factors == (("v", 1, 0), (".", 1, 0))


def test_second_commutator_binomials():
    terms = {t.factors: t.coefficient for t in expand("Dt_partial_r", 2)}
    assert terms == {(("v", 1, 0), (".", 2, 0)): -2, (("v", 2, 0), (".", 1, 0)): -1}


@pytest.mark.parametrize("r", range(1, 5))
def test_closed_form_coefficients(r):
    from math import comb
    for s, t in enumerate(expand("Dt_partial_r", r)):
        assert t.coefficient == -comb(r, s + 1)
        assert t.factors[0][1] + t.factors[1][1] == r + 1


def test_partial_dtk_is_transpose_of_first():
    raw = commutator_indexed("partial_Dtk", 1)
    assert format_terms(raw) == "1 * (d_i0 v^j0) (d_j0 f)"
    engine = commutator_indexed("Dt_partial_r", 1)
    assert [c for c, _ in engine] == [Fraction(-1)]


def test_order_cap():
    with pytest.raises(CommutatorError):
        expand("laplacian_Dt", MAX_ORDER + 1)
    with pytest.raises(CommutatorError):
        commutator_indexed("nonsense", 1)


def test_engine_matches_closed_form():
    for r in (1, 2, 3):
        engine = symmetric_dot_indexed(r)
        raw = commutator_indexed("Dt_partial_r", r)
        flow = random_flow(GRID, seed=r)
        prov = _FlowProvider(flow, 0.2)
        np.testing.assert_allclose(evaluate_terms(engine, prov, nfree=r), evaluate_terms(raw, prov, nfree=r),
                                   atol=1e-10)


def test_shear_hand_computation():
    flow = _shear_flow(GRID)
    out = evaluate_terms(symmetric_dot_indexed(1), _FlowProvider(flow, 0.0), nfree=1)
    y1 = GRID.coords[0]
    # [D_t, d_2] sin(x1) = -(d_2 v^1)(d_1 sin x1) = -cos x1
    np.testing.assert_allclose(out[1], -np.cos(y1), atol=1e-12)
    np.testing.assert_allclose(out[0], 0.0, atol=1e-12)
    rep = verify_expansion("Dt_partial_r", 1, flow, t0=0.0, levels=3)
    assert rep.residuals[0] / rep.residuals[1] == pytest.approx(4.0, rel=1e-3)
    assert rep.residuals[1] / rep.residuals[2] == pytest.approx(4.0, rel=1e-3)


def test_rest_flow_commutators_vanish():
    t, y1, y2 = sp.symbols("t y1 y2")
    flow = AnalyticFlow(GRID, [y1, y2], sp.cos(y1 - t) * sp.exp(y2), t, (y1, y2))
    prov = _FlowProvider(flow, 0.1)
    for ident, order, nfree in (("Dt_partial_r", 2, 2), ("partial_Dtk", 2, 1), ("laplacian_Dt", 2, 0)):
        terms = symmetric_dot_indexed(order) if ident == "Dt_partial_r" else commutator_indexed(ident, order)
        assert np.max(np.abs(evaluate_terms(terms, prov, nfree=nfree))) == 0.0


@pytest.mark.parametrize("identity", ["Dt_partial_r", "partial_Dtk", "laplacian_Dt"])
def test_richardson_decay(identity):
    rep = verify_expansion(identity, 2, random_flow(GRID, seed=4), levels=4)
    for ratio in rep.richardson_ratios:
        assert 3.0 < ratio < 5.0


def test_coefficients_are_rationals():
    for r in range(1, 4):
        for c, _ in f_terms(r) + g_terms(r):
            assert isinstance(c, Fraction)


def test_f1_single_term():
    assert len(f_terms(1)) == 1
    assert format_terms(f_terms(1)) == "1 * (d_j0 v^j1) (d_j1 v^j0)"


@pytest.mark.parametrize("r", range(1, MAX_ORDER + 1))
def test_structure_invariants(r):
    assert check_f_structure(r) == []
    assert check_g_structure(r) == []
    for _, fs in f_terms(r):
        assert derivative_weight(fs) == r + 1


def test_structure_checker_flags_violations():
    bad = [(Fraction(1), (("v", 0, (1000,), 1001), ("v", 0, (1001,), 1000), ("h", 0, (1002,))))]
    assert check_f_structure(1, bad)
    bad_g = [(Fraction(1), (("e", 2, 1), ("h", 1, ()), ("h", 1, ()), ("h", 1, ())))]
    assert check_g_structure(2, bad_g)


def test_sources_examples():
    eos = make_eos("linear", 100.0)
    y1, y2 = GRID.coords
    h = -y2
    shear = MaterialState(GRID, np.array([y2, 0 * y2]), h, eos)
    np.testing.assert_allclose(assemble_sources(1, shear).f, 0.0, atol=1e-12)
    # periodic analogue of v = (x2, x1): f1 = 2 cos y1, equal to 2 where cos y1 = 1
    swap = MaterialState(GRID, np.array([y2, np.sin(y1)]), h, eos)
    np.testing.assert_allclose(assemble_sources(1, swap).f, 2 * np.cos(y1), atol=1e-12)
    src = assemble_sources(2, MaterialState(GRID, np.array([0.1 * np.sin(y1) * y2, 0.1 * np.cos(y1)]),
                                            h + 0.01 * np.sin(y1) * y2, eos))
    assert np.all(src.g == 0.0)
    assert src.f_norm_weighted >= src.f_norm


def test_gamma_law_g_nonzero():
    eos = make_eos("gamma-law", 10.0, 2.0)
    y1, y2 = GRID.coords
    st = MaterialState(GRID, np.array([0.1 * np.sin(y1) * y2, 0.1 * np.cos(y1) * y2]), -y2, eos)
    assert np.max(np.abs(assemble_sources(2, st).g)) > 0


def test_history_depth():
    eos = make_eos("linear", 100.0)
    y2 = GRID.coords[1]
    st = MaterialState(GRID, np.zeros((2,) + GRID.shape), -y2, eos, max_depth=2)
    with pytest.raises(HistoryError):
        assemble_sources(2, st)
    with pytest.raises(HistoryError):
        st.dt_h(3)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_wave_equation_residual(r):
    eos = make_eos("linear", 100.0)
    y1, y2 = GRID.coords
    s = 1 + y2
    lm = LagrangianMap(GRID, np.array([0.05 * np.sin(y1) * s, 0.1 * np.cos(y1) * s ** 2]))
    v = np.array([0.1 * np.sin(y1) * np.cos(y2), 0.1 * np.cos(y1) * y2])
    h = -y2 - lm.displacement[1] + 0.01 * np.sin(y1) * np.sin(np.pi * y2)
    st = MaterialState(GRID, v, h, eos, lm.inverse_jacobian)
    res = wave_residual(r, st)
    assert np.max(np.abs(res)) <= 1e-12 * max(1.0, np.max(np.abs(st.dt_h(r + 1))))
