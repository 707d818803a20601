import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compww.geometry import (GeometryError, LagrangianMap, boundary_geometry, geometry_report_json,
                             kinematics_check, kinematics_refinement, metric_from_map, q_contract, q_form,
                             smoothstep_cutoff)
from compww.mesh import StripGrid

GRID = StripGrid(64, 32)


def _graph_map(grid, a=0.1):
    y1, y2 = grid.coords
    return LagrangianMap(grid, np.array([0 * y1, a * np.sin(y1) * (1 + y2) ** 2]))


def _random_map(grid, seed, amp=0.05):
    rng = np.random.default_rng(seed)
    y1, y2 = grid.coords
    c = rng.uniform(-1, 1, 6)
    d1 = amp * (c[0] * np.sin(y1) * np.cos(y2) + c[1] * np.cos(2 * y1) * (1 + y2))
    d2 = amp * (c[2] * np.cos(y1) * (1 + y2) ** 2 + c[3] * np.sin(2 * y1 + c[4]) * y2 + c[5] * np.sin(y1) ** 2)
    return LagrangianMap(grid, np.array([d1, d2]))


def test_identity_metric():
    m = metric_from_map(LagrangianMap.identity(GRID))
    np.testing.assert_allclose(m.g, np.eye(2)[:, :, None, None] * np.ones(GRID.shape), atol=1e-14)
    np.testing.assert_allclose(m.sqrt_det, 1.0, atol=1e-14)


def test_stretched_metric():
    # vertical stretching (the horizontal period is fixed by the strip)
    y1, y2 = GRID.coords
    m = metric_from_map(LagrangianMap(GRID, np.array([0 * y1, y2])))
    np.testing.assert_allclose(m.g[0, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(m.g[1, 1], 4.0, atol=1e-12)
    np.testing.assert_allclose(m.g[0, 1], 0.0, atol=1e-12)


def test_metric_matches_complex_step_oracle():
    g = StripGrid(32, 129)
    y1, y2 = g.coords

    def x(s1, s2):
        return np.array([s1 + 0.05 * np.sin(s1) * np.cos(2 * s2),
                         s2 + 0.08 * np.cos(s1 + 0.3) * (1 + s2) ** 2])

    h = 1e-30
    J = np.array([np.imag(x(y1 + 1j * h, y2 + 0j)) / h, np.imag(x(y1 + 0j, y2 + 1j * h)) / h])  # J[a, i]
    g_ref = np.einsum("ai...,bi...->ab...", J, J)
    lm = LagrangianMap.from_positions(g, x(y1, y2))
    np.testing.assert_allclose(metric_from_map(lm).g, g_ref, atol=1e-8)


def test_metric_invariants():
    lm = _random_map(GRID, 1)
    m = metric_from_map(lm)
    prod = np.einsum("ab...,bc...->ac...", m.g, m.g_inv)
    np.testing.assert_allclose(prod, np.eye(2)[:, :, None, None] * np.ones(GRID.shape), atol=1e-10)
    np.testing.assert_allclose(m.g, np.swapaxes(m.g, 0, 1))
    assert np.all(np.linalg.eigvalsh(np.moveaxis(m.g, (0, 1), (-2, -1))) > 0)
    ident = np.einsum("ai...,ib...->ab...", lm.inverse_jacobian, lm.jacobian)
    np.testing.assert_allclose(ident, np.eye(2)[:, :, None, None] * np.ones(GRID.shape), atol=1e-10)


def test_singular_map_rejected():
    y1, y2 = GRID.coords
    with pytest.raises(GeometryError, match="node"):
        LagrangianMap(GRID, np.array([0 * y1, -2 * y2])).det


def test_flat_boundary():
    b = boundary_geometry(LagrangianMap.identity(GRID))
    np.testing.assert_allclose(b.theta, 0.0, atol=1e-14)
    np.testing.assert_allclose(b.sigma, 0.0, atol=1e-14)
    np.testing.assert_allclose(b.normal[1], 1.0)
    np.testing.assert_allclose(b.normal[0], 0.0)


def test_graph_curvature():
    # sigma is the divergence of the outward normal: minus the graph curvature
    a = 0.1
    b = boundary_geometry(_graph_map(GRID, a))
    s = GRID.y_horizontal
    curv = -a * np.sin(s) / (1 + a * a * np.cos(s) ** 2) ** 1.5
    np.testing.assert_allclose(b.sigma, -curv, atol=1e-10)


def test_sphere_cap_3d():
    g = StripGrid(16, 8, dim=3)
    Y = g.coords
    A = 0.1       # crest of A(cos y1 + cos y2) is umbilic with radius 1/A
    lm = LagrangianMap(g, np.array([0 * Y[0], 0 * Y[0], A * (np.cos(Y[0]) + np.cos(Y[1])) * (1 + Y[2]) ** 2]))
    assert boundary_geometry(lm).sigma[0, 0] == pytest.approx(2 * A, abs=1e-6)


def test_geometry_report_json():
    rep = json.loads(geometry_report_json(_graph_map(GRID)))
    assert set(rep) == {"K_monitor", "min_det_jacobian", "sigma_range", "l0_proxy"}
    assert rep["K_monitor"] > 0 and rep["min_det_jacobian"] > 0


def test_q_form_zones():
    lm = LagrangianMap.identity(GRID)
    b = boundary_geometry(lm)
    ext = q_form(lm, b, d0=0.4)
    far = ext.distance > 0.2
    np.testing.assert_allclose(ext.q[..., far], np.broadcast_to(np.eye(2)[:, :, None], (2, 2, far.sum())),
                               atol=1e-14)
    np.testing.assert_allclose(ext.q[..., -1], np.diag([1.0, 0.0])[:, :, None] * np.ones(64), atol=1e-14)
    mid = (ext.distance > 0.1) & (ext.distance < 0.2)
    assert mid.any()
    eig = np.linalg.eigvalsh(np.moveaxis(ext.q[..., mid], -1, 0))
    eta = smoothstep_cutoff(ext.distance[mid], 0.4)
    np.testing.assert_allclose(np.sort(eig, axis=1), np.stack([1 - eta ** 2, np.ones_like(eta)], axis=1),
                               atol=1e-13)


def test_q_form_window():
    lm = LagrangianMap.identity(GRID)
    b = boundary_geometry(lm)
    with pytest.raises(GeometryError):
        q_form(lm, b, d0=0.9)
    with pytest.raises(GeometryError):
        q_form(lm, b, d0=0.01)


def test_smoothstep():
    d = np.linspace(0, 1, 101)
    eta = smoothstep_cutoff(d, 0.8)
    assert np.all(eta[d <= 0.2] == 1.0) and np.all(eta[d >= 0.4] == 0.0)
    assert np.all(np.diff(eta) <= 0)


def test_kinematics_zero_and_translation():
    lm = _graph_map(GRID)
    zero = kinematics_check(lm, np.zeros((2,) + GRID.shape), 1e-3)
    assert all(v == 0.0 for k, v in zero.items() if k != "dt")
    trans = kinematics_check(lm, np.ones((2,) + GRID.shape) * np.array([0.3, 0.0])[:, None, None], 1e-3)
    assert trans["Dtg"] <= 1e-12


def test_kinematics_shear_second_order():
    lm = _graph_map(GRID)
    y1, y2 = GRID.coords
    v = np.array([0.2 * (1 + y2) ** 2 + 0.1 * np.sin(y1), 0.1 * np.cos(y1) * (1 + y2)])
    reps = kinematics_refinement(lm, v, 0.02, levels=3)
    # g and sqrt(det g) are polynomial in t for a linear-in-time map: central differences are exact
    assert max(r["Dtg"] for r in reps) < 1e-10 and max(r["dg"] for r in reps) < 1e-10
    for key in ("Dtg_inverse", "DtN", "T2_pointwise"):
        r1 = reps[0][key] / reps[1][key]
        r2 = reps[1][key] / reps[2][key]
        assert 3.5 < r1 < 4.5 and 3.5 < r2 < 4.5, key


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_boundary_invariants(seed):
    lm = _random_map(StripGrid(32, 16), seed)
    m = metric_from_map(lm)
    b = boundary_geometry(lm, m)
    g_top = m.g[..., -1]
    gi_top = m.g_inv[..., -1]
    np.testing.assert_allclose(np.einsum("ab...,a...,b...->...", g_top, b.normal_up, b.normal_up), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.einsum("ab...,b...->a...", b.gamma, b.normal_up), 0.0, atol=1e-10)
    np.testing.assert_allclose(b.theta, np.swapaxes(b.theta, 0, 1), atol=1e-12)
    np.testing.assert_allclose(b.sigma, np.einsum("ab...,ab...->...", gi_top, b.theta), atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_q_boundary_is_tangential_projection(seed):
    g = StripGrid(32, 16)
    lm = _random_map(g, seed)
    b = boundary_geometry(lm)
    ext = q_form(lm, b)
    assert np.all(np.linalg.eigvalsh(np.moveaxis(ext.q, (0, 1), (-2, -1))) > -1e-12)
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal((2, 2) + g.shape[:-1])
    P = np.eye(2)[:, :, None] - np.einsum("i...,j...->ij...", b.normal, b.normal)
    pa = np.einsum("ij...,jk...,kl...->il...", P, alpha, P)
    lhs = q_contract(ext.q[..., -1], alpha, alpha, 2)
    np.testing.assert_allclose(lhs, np.sum(pa * pa, axis=(0, 1)), atol=1e-10)
