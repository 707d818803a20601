"""Lagrangian time stepping of the compressible system, the incompressible reference
solver, the kappa sweep and the energy/monitor time series."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import AprioriMonitor, EnergyBreakdown, EnergyError, apriori_monitor, csv_row, energy_Er, \
    write_time_series
from .eos import EquationOfState
from .geometry import GeometryError, LagrangianMap
from .mesh import Field, StripGrid, gradient
from .operators import EllipticProblem, SolverError, solve_dirichlet


class SimulationHalt(RuntimeError):
    def __init__(self, message: str, state: "SimState | None" = None, series: "TimeSeries | None" = None):
        super().__init__(message)
        self.state = state
        self.series = series


@dataclass(frozen=True)
class SimState:
    """Positions (through the map), velocity and enthalpy at time ``t``.

    For the incompressible reference ``h`` holds the pressure.
    """

    t: float
    lmap: LagrangianMap
    v: np.ndarray
    h: np.ndarray
    eos: EquationOfState | None = None

    @property
    def grid(self) -> StripGrid:
        return self.lmap.grid


@dataclass(frozen=True)
class StepperConfig:
    dt: float = 1e-3
    scheme: str = "RK4"
    filter_strength: float = 0.05
    filter_fraction: float = 1.0 / 3.0
    reproject: bool = True
    T_final: float = 0.1
    cfl: float = 1.0
    vertical_dissipation: float = 0.01

    def __post_init__(self):
        if not 0 <= self.vertical_dissipation <= 0.02:
            raise ValueError("vertical dissipation must lie in [0, 0.02]")
        if self.scheme != "RK4":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.filter_strength < 1:
            raise ValueError("filter strength must lie in [0, 1)")


def sound_speed(eos: EquationOfState, h: np.ndarray) -> float:
    return float(np.sqrt(np.max(eos.dp(eos.rho(h)))))


def max_stable_dt(grid: StripGrid, eos: EquationOfState, h: np.ndarray | None = None, cfl: float = 1.0) -> float:
    c = math.sqrt(eos.kappa) if h is None else sound_speed(eos, h)
    return cfl * grid.min_spacing / c


def spectral_filter(values: np.ndarray, grid: StripGrid, strength: float, fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Damp the top ``fraction`` of horizontal modes by ``1 - strength``."""
    if strength == 0:
        return values
    out = values
    lead = values.ndim - grid.dim
    kmax = grid.n_horizontal // 2
    damp = np.where(np.abs(grid.wavenumbers) > (1 - fraction) * kmax, 1.0 - strength, 1.0)
    for a in range(grid.dim - 1):
        ax = lead + a
        shape = [1] * values.ndim
        shape[ax] = -1
        out = np.fft.ifft(np.fft.fft(out, axis=ax) * damp.reshape(shape), axis=ax).real
    return out


def _unit_vertical(grid: StripGrid) -> np.ndarray:
    e = np.zeros((grid.dim,) + grid.shape)
    e[-1] = 1.0
    return e


@functools.lru_cache(maxsize=8)
def _dissipation_matrix(n: int, spacing: float, p: int = 4) -> np.ndarray:
    """``-(-1)^p Delta^{2p} / spacing`` on rows with a centred stencil, zero near the walls.

    Boundary rows are left alone: the one-sided derivative closures make every
    discrete state rough there at ``O(spacing^4)``, and damping that roughness
    at rate ``c/spacing`` pollutes the low-Mach solution.
    """
    stencil = np.array([(-1) ** j * math.comb(2 * p, j) for j in range(2 * p + 1)], float)
    Q = np.zeros((n, n))
    for i in range(p, n - p):
        Q[i, i - p:i + p + 1] = stencil
    return -(-1) ** p * Q / spacing


def _vertical_damp(values: np.ndarray, grid: StripGrid, strength: float) -> np.ndarray:
    Q = _dissipation_matrix(grid.n_vertical, grid.dy_vertical)
    return strength * np.tensordot(values, Q, axes=([-1], [1]))


def _compressible_rhs(X: np.ndarray, v: np.ndarray, h: np.ndarray, grid: StripGrid, eos: EquationOfState,
                      hold_top: bool, damping: float = 0.0):
    lmap = LagrangianMap(grid, X)
    inv = lmap.inverse_jacobian
    dv = -gradient(h, grid, inv) - _unit_vertical(grid)
    div = np.einsum("ii...->...", gradient(v, grid, inv))
    dh = -div / eos.de(h, 1)
    if damping:
        # the one-sided vertical closures reflect a grid-scale mode with gain, growth ~0.05 c/dy
        dv = dv + _vertical_damp(v, grid, damping)
        dh = dh + _vertical_damp(h, grid, damping)
    dX = v.copy()
    # impermeable flat bottom
    dX[-1][..., 0] = 0.0
    dv[-1][..., 0] = 0.0
    if hold_top:
        dh[..., -1] = 0.0
    return dX, dv, dh


def _rk4(f, y, dt):
    k1 = f(*y)
    k2 = f(*[a + 0.5 * dt * b for a, b in zip(y, k1)])
    k3 = f(*[a + 0.5 * dt * b for a, b in zip(y, k2)])
    k4 = f(*[a + dt * b for a, b in zip(y, k3)])
    return [a + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]


def check_cfl(state: SimState, config: StepperConfig) -> None:
    limit = max_stable_dt(state.grid, state.eos, state.h, config.cfl)
    if config.dt > limit * (1 + 1e-12):
        raise SimulationHalt(f"CFL violation: dt={config.dt:.3e} exceeds {limit:.3e}", state)


def step(state: SimState, config: StepperConfig) -> SimState:
    """One RK4 step of ``x' = v``, ``v' = -grad h - e_n``, ``h' = -div v / e'(h)``."""
    check_cfl(state, config)
    grid, eos = state.grid, state.eos
    c = math.sqrt(eos.kappa)
    f = lambda X, v, h: _compressible_rhs(X, v, h, grid, eos, config.reproject,
                                          config.vertical_dissipation * c)
    try:
        X, v, h = _rk4(f, [state.lmap.displacement, state.v, state.h], config.dt)
        if config.reproject:
            h[..., -1] = 0.0
        v = spectral_filter(v, grid, config.filter_strength, config.filter_fraction)
        h = spectral_filter(h, grid, config.filter_strength, config.filter_fraction)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(h)) and np.all(np.isfinite(X))):
            raise SimulationHalt("non-finite values after step", state)
        lmap = LagrangianMap(grid, X)
        lmap.det  # raises on a degenerate map
    except GeometryError as exc:
        raise SimulationHalt(f"jacobian degeneracy: {exc}", state) from exc
    return SimState(state.t + config.dt, lmap, v, h, eos)


def acoustic_pulse_state(grid: StripGrid, eos: EquationOfState, amplitude: float = 0.01, k: int = 1) -> SimState:
    """Rest state with enthalpy ``-y_n + a cos(k y_1) sin(pi y_n / depth)``.

    The perturbation vanishes on both walls, so the data respect ``h = 0`` on top;
    it launches acoustic and gravity waves of amplitude ``a``.
    """
    y = grid.coords
    h = -y[-1] + amplitude * np.cos(k * y[0]) * np.sin(np.pi * y[-1] / grid.depth)
    return SimState(0.0, LagrangianMap.identity(grid), np.zeros((grid.dim,) + grid.shape), h, eos)


# -- incompressible reference -------------------------------------------------------------

def incompressible_pressure(v: np.ndarray, lmap: LagrangianMap, tol: float = 1e-11) -> np.ndarray:
    """``Delta p = -(d_i v^k)(d_k v^i)``, ``p = 0`` on top, ``d p/d x_n = -1`` at the bottom."""
    grid = lmap.grid
    du = gradient(v, grid, lmap.inverse_jacobian)
    rhs = -np.einsum("ik...,ki...->...", du, du)
    p = EllipticProblem(Field(grid, rhs), 0.0, "neumann", -1.0, lmap, tol=tol, form="divgrad")
    return solve_dirichlet(p).values.copy()


def project_divergence_free(v: np.ndarray, lmap: LagrangianMap, tol: float = 1e-11) -> np.ndarray:
    grid = lmap.grid
    inv = lmap.inverse_jacobian
    div = np.einsum("ii...->...", gradient(v, grid, inv))
    q = solve_dirichlet(EllipticProblem(Field(grid, div), 0.0, "neumann", 0.0, lmap, tol=tol,
                                        form="divgrad")).values
    out = v - gradient(q, grid, inv)
    out[-1][..., 0] = 0.0
    return out


def _incompressible_rhs(X, v, grid):
    lmap = LagrangianMap(grid, X)
    p = incompressible_pressure(v, lmap)
    dv = -gradient(p, grid, lmap.inverse_jacobian) - _unit_vertical(grid)
    dv[-1][..., 0] = 0.0
    dX = v.copy()
    dX[-1][..., 0] = 0.0
    return dX, dv


def incompressible_step(state: SimState, config: StepperConfig) -> SimState:
    """RK4 for ``x' = v``, ``v' = -grad p - e_n`` with the Lagrangian pressure equation,
    followed by an exact projection of ``v`` onto discretely divergence-free fields."""
    grid = state.grid
    try:
        X, v = _rk4(lambda X, v: _incompressible_rhs(X, v, grid), [state.lmap.displacement, state.v], config.dt)
        lmap = LagrangianMap(grid, X)
        v = project_divergence_free(v, lmap)
        v = spectral_filter(v, grid, config.filter_strength, config.filter_fraction)
        p = incompressible_pressure(v, lmap)
    except GeometryError as exc:
        raise SimulationHalt(f"jacobian degeneracy: {exc}", state) from exc
    except SolverError as exc:
        raise SimulationHalt(f"pressure solve failed: {exc}", state) from exc
    return SimState(state.t + config.dt, lmap, v, p, state.eos)


def incompressible_state(u0: np.ndarray, lmap: LagrangianMap, t: float = 0.0) -> SimState:
    v = project_divergence_free(np.asarray(u0, float), lmap)
    return SimState(t, lmap, v, incompressible_pressure(v, lmap))


def run(state: SimState, config: StepperConfig, T: float | None = None, incompressible: bool = False) -> SimState:
    T = config.T_final if T is None else T
    n = max(1, int(round(T / config.dt)))
    stepper = incompressible_step if incompressible else step
    for _ in range(n):
        state = stepper(state, config)
    return state


# -- monitored evolution -------------------------------------------------------------------

@dataclass
class TimeSeries:
    r: int
    rows: list[list[float]] = field(default_factory=list)
    tilde_star: list[float] = field(default_factory=list)
    breakdowns: list[EnergyBreakdown] = field(default_factory=list)
    monitors: list[AprioriMonitor] = field(default_factory=list)
    T_obs: float = 0.0
    halted: str | None = None
    final: SimState | None = None

    @property
    def t(self) -> np.ndarray:
        return np.array([row[0] for row in self.rows])

    @property
    def E_star(self) -> np.ndarray:
        return np.array([row[self.r + 2] for row in self.rows])

    @property
    def E0(self) -> np.ndarray:
        return np.array([row[1] for row in self.rows])

    @property
    def eps(self) -> np.ndarray:
        return np.array([row[self.r + 3] for row in self.rows])

    def E_ratio_max(self) -> float:
        E = self.E_star
        return float(np.max(E / E[0])) if len(E) else float("nan")

    def write_csv(self, path) -> None:
        write_time_series(path, self.r, self.rows)


def observed_time(t: np.ndarray, E_star: np.ndarray, eps: np.ndarray) -> float:
    """Largest sampled ``T`` with ``E*(t) <= 2 E*(0)`` and ``eps(t) >= eps(0)/2`` for all ``t <= T``."""
    ok = (E_star <= 2 * E_star[0]) & (eps >= eps[0] / 2)
    if not ok[0]:
        return 0.0
    bad = np.flatnonzero(~ok)
    last = len(t) - 1 if bad.size == 0 else bad[0] - 1
    return float(t[last])


def _sample(state: SimState, r: int, series: TimeSeries) -> None:
    bd = energy_Er(state, state.eos, r, "tilde")
    mon = apriori_monitor(state, state.eos, r)
    series.rows.append(csv_row(state.t, bd, mon))
    series.tilde_star.append(bd.tilde_E_r_star)
    series.breakdowns.append(bd)
    series.monitors.append(mon)


def evolve_with_monitor(state: SimState, config: StepperConfig, r: int = 2, every: int = 1,
                        T: float | None = None) -> TimeSeries:
    """Evolve to ``T`` recording energies and monitors every ``every`` steps."""
    T = config.T_final if T is None else T
    n = max(1, int(round(T / config.dt)))
    series = TimeSeries(r)
    try:
        _sample(state, r, series)
        for i in range(1, n + 1):
            state = step(state, config)
            if i % every == 0 or i == n:
                _sample(state, r, series)
    except (SimulationHalt, EnergyError, GeometryError) as exc:
        series.halted = str(exc)
        series.T_obs = observed_time(series.t, series.E_star, series.eps) if series.rows else 0.0
        raise SimulationHalt(str(exc), getattr(exc, "state", None) or state, series) from exc
    series.T_obs = observed_time(series.t, series.E_star, series.eps)
    series.final = state
    return series


# -- kappa sweep --------------------------------------------------------------------------

@dataclass
class SweepRun:
    kappa: float
    dt: float
    T: float
    series: TimeSeries | None
    final_diff_v: float
    final_diff_h: float
    halted: str | None = None


@dataclass
class SweepResult:
    kappas: list[float]
    runs: list[SweepRun]
    slope_v: float
    monotone_v: bool
    tilde_E_star0: list[float]
    partial: bool

    def summary(self) -> list[dict]:
        out = []
        for run_ in self.runs:
            s = run_.series
            out.append({"kappa": run_.kappa, "final_diff_v": run_.final_diff_v, "final_diff_h": run_.final_diff_h,
                        "T_obs": s.T_obs if s else 0.0, "E_ratio_max": s.E_ratio_max() if s else float("nan"),
                        "halted": run_.halted})
        return out


def kappa_sweep(grid: StripGrid, u0: np.ndarray, kappas, T: float = 0.1, r: int = 2, eos_kind: str = "linear",
                gamma: float | None = None, config: StepperConfig | None = None, every: int = 10,
                max_steps: int = 20000, monitor: bool = True) -> SweepResult:
    """Compressible runs from compatible data for each ``kappa`` against one incompressible reference."""
    from .eos import make_eos
    from .initdata import InitialDataProblem, construct_compatible_data

    config = config or StepperConfig(T_final=T)
    lmap0 = LagrangianMap.identity(grid)
    runs = []
    ref_cache: dict[float, SimState] = {}
    for kappa in kappas:
        eos = make_eos(eos_kind, kappa, gamma)
        data = construct_compatible_data(InitialDataProblem(grid, u0, eos, r=r))
        # sound speed of the data, with slack for its growth along the run
        dt = min(config.dt, 0.95 * max_stable_dt(grid, eos, data.h[0], cfl=config.cfl))
        T_k = T
        if T / dt > max_steps:
            T_k = max_steps * dt
        n = max(1, int(round(T_k / dt)))
        dt = T_k / n
        cfg = replace(config, dt=dt, T_final=T_k)
        state = SimState(0.0, data.lmap, data.v0, data.h[0], eos)
        halted, series, final = None, None, None
        try:
            if monitor:
                series = evolve_with_monitor(state, cfg, r, every=every)
                final = series.final
            else:
                final = run(state, cfg)
        except SimulationHalt as exc:
            halted, series = str(exc), exc.series
        key = round(T_k, 12)
        if key not in ref_cache:
            n_ref = max(1, int(math.ceil(T_k / config.dt)))
            ref_cfg = replace(config, dt=T_k / n_ref, T_final=T_k)
            ref_cache[key] = run(incompressible_state(u0, lmap0), ref_cfg, T_k, incompressible=True)
        ref = ref_cache[key]
        if final is not None:
            dv = float(np.max(np.abs(final.v - ref.v)))
            dh = float(np.max(np.abs(final.h - ref.h)))
        else:
            dv = dh = float("nan")
        runs.append(SweepRun(float(kappa), dt, T_k, series, dv, dh, halted))
    diffs = np.array([r_.final_diff_v for r_ in runs])
    ks = np.array([r_.kappa for r_ in runs])
    good = np.isfinite(diffs) & (diffs > 0)
    slope = float(np.polyfit(np.log(ks[good]), np.log(diffs[good]), 1)[0]) if good.sum() >= 2 else float("nan")
    monotone = bool(np.all(np.diff(diffs) < 0)) if np.all(np.isfinite(diffs)) else False
    e0 = [r_.series.tilde_star[0] if r_.series and r_.series.tilde_star else float("nan") for r_ in runs]
    return SweepResult(list(map(float, kappas)), runs, slope, monotone, e0, any(r_.halted for r_ in runs))
