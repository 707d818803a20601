import numpy as np
import pytest

from compww.energy import energy_E0
from compww.eos import make_eos
from compww.evolve import (SimState, SimulationHalt, StepperConfig, evolve_with_monitor, incompressible_state,
                           incompressible_step, kappa_sweep, max_stable_dt, observed_time, run,
                           spectral_filter, step)
from compww.geometry import LagrangianMap
from compww.initdata import InitialDataProblem, construct_compatible_data, hydrostatic, irrotational_bump, swirl
from compww.mesh import StripGrid, gradient

GRID = StripGrid(64, 32)
EOS = make_eos("linear", 100.0)


def _rest(grid=GRID, eos=EOS, v=None):
    v = np.zeros((grid.dim,) + grid.shape) if v is None else v
    return SimState(0.0, LagrangianMap.identity(grid), v, -grid.coords[-1], eos)


def _data_state(u0, eos=EOS, grid=GRID):
    data = construct_compatible_data(InitialDataProblem(grid, u0, eos, r=2))
    return SimState(0.0, data.lmap, data.v0, data.h[0], eos)


def _div(state):
    return np.einsum("ii...->...", gradient(state.v, state.grid, state.lmap.inverse_jacobian))


def test_hydrostatic_fixed_point():
    cfg = StepperConfig(dt=1e-3)
    s = run(_rest(), cfg, T=0.1)
    assert np.max(np.abs(s.v)) <= 1e-12
    np.testing.assert_allclose(s.h, -GRID.coords[1], atol=1e-12)
    inc = run(incompressible_state(hydrostatic(GRID), LagrangianMap.identity(GRID)), cfg, T=0.1,
              incompressible=True)
    assert np.max(np.abs(inc.v)) <= 1e-12


def test_horizontal_translation():
    v = np.zeros((2,) + GRID.shape)
    v[0] = 0.3
    s0 = _rest(v=v)
    s = run(s0, StepperConfig(dt=1e-3), T=0.1)
    np.testing.assert_allclose(s.lmap.displacement[0], 0.03, atol=1e-14)
    np.testing.assert_allclose(s.lmap.displacement[1], 0.0, atol=1e-14)
    np.testing.assert_allclose(s.v, v, atol=1e-14)
    assert energy_E0(s, EOS) == pytest.approx(energy_E0(s0, EOS), abs=1e-13)


def test_reprojection_ab():
    cfg = StepperConfig(dt=2e-3)
    s = run(_data_state(swirl(GRID)), cfg, T=0.02)
    assert np.max(np.abs(s.h[:, -1])) <= 1e-9
    # without it the surface enthalpy drifts at the discretization order of the data
    drift = []
    for nv in (16, 32, 64):
        g = StripGrid(64, nv)
        T = 0.0025
        n = int(np.ceil(T / (0.5 * max_stable_dt(g, EOS))))
        s = run(_data_state(swirl(g), grid=g), StepperConfig(dt=T / n, reproject=False), T=T)
        drift.append(np.max(np.abs(s.h[:, -1])))
    assert drift[0] / drift[1] > 6 and drift[1] / drift[2] > 6


def test_incompressible_divergence_free():
    s = incompressible_state(swirl(GRID), LagrangianMap.identity(GRID))
    cfg = StepperConfig(dt=1e-3)
    for _ in range(10):
        s = incompressible_step(s, cfg)
        div = _div(s)
        # the wall rows carry the boundary conditions of the projection, not the equation
        assert np.max(np.abs(div[:, 1:-1])) <= 1e-9
        assert np.max(np.abs(div)) <= 1e-5
    assert s.t == pytest.approx(0.01)


def test_large_kappa_matches_incompressible():
    res = kappa_sweep(GRID, swirl(GRID), [1e6], T=0.05, monitor=False)
    assert res.runs[0].final_diff_v <= 1e-3
    assert not res.partial


def test_zero_velocity_sweep():
    res = kappa_sweep(GRID, hydrostatic(GRID), [1e2, 1e3], T=0.02, every=5)
    for row in res.summary():
        assert row["final_diff_v"] <= 1e-12 and row["final_diff_h"] <= 1e-12
        assert row["T_obs"] == pytest.approx(0.02) and row["E_ratio_max"] == pytest.approx(1.0, abs=1e-12)


def test_cfl_violation_halts():
    dt = 1.5 * max_stable_dt(GRID, EOS, -GRID.coords[1])
    with pytest.raises(SimulationHalt, match="CFL"):
        step(_rest(), StepperConfig(dt=dt))


def test_monitored_rest_run():
    series = evolve_with_monitor(_rest(), StepperConfig(dt=1e-3), r=2, every=10, T=0.05)
    assert series.T_obs == pytest.approx(0.05)
    np.testing.assert_allclose(series.E_star, series.E_star[0], rtol=1e-12)
    assert len(series.rows) == 6 and series.halted is None


def test_curl_stays_small_for_irrotational_data():
    eos = make_eos("linear", 1e3)
    s0 = _data_state(irrotational_bump(GRID), eos)
    s = run(s0, StepperConfig(dt=0.9 * max_stable_dt(GRID, eos, s0.h)), T=0.02)
    du = gradient(s.v, GRID, s.lmap.inverse_jacobian)
    curl = du[0, 1] - du[1, 0]
    assert np.max(np.abs(curl)) <= 1e-3 * np.max(np.abs(du))


def test_observed_time():
    t = np.linspace(0, 1, 6)
    E = np.array([1.0, 1.5, 1.9, 2.1, 1.0, 1.0])
    assert observed_time(t, E, np.ones(6)) == pytest.approx(0.4)
    eps = np.array([1.0, 0.9, 0.4, 1.0, 1.0, 1.0])
    assert observed_time(t, np.ones(6), eps) == pytest.approx(0.2)
    assert observed_time(t, np.ones(6), np.ones(6)) == 1.0


def test_spectral_filter_damps_top_modes_only():
    y1 = GRID.coords[0]
    low, high = np.cos(2 * y1), np.cos(30 * y1)
    np.testing.assert_allclose(spectral_filter(low, GRID, 0.05), low, atol=1e-14)
    np.testing.assert_allclose(spectral_filter(high, GRID, 0.05), 0.95 * high, atol=1e-14)


def test_stepper_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(dt=0.0)
    with pytest.raises(ValueError):
        StepperConfig(scheme="euler")
    with pytest.raises(ValueError):
        StepperConfig(filter_strength=1.0)
    with pytest.raises(ValueError):
        StepperConfig(vertical_dissipation=0.5)
