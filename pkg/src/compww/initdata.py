"""Compatible initial data by successive approximation, and checks of the sign condition.

Given a divergence-free ``u0`` on the initial domain, the data consist of
``v0 = u0 + grad(phi)`` and ``h_k`` standing for ``D_t^k h`` at ``t = 0``.  The
``h_k`` solve the wave equations rewritten as Poisson problems,

    Delta h_k = e'(h_0) h_{k+2} - F_k - G_k,   h_k = 0 on the free surface,

with ``F_k = f_{k+1}`` and ``G_k = g_{k+1}`` taken from the commutator engine
and ``h_r = h_{r+1} = 0``.  ``h_0`` carries the hydrostatic part ``-x_n``.

Bottom conditions come from ``D_t^{k+1} v . e_n = 0`` on the flat wall, which
fixes ``d h_k / d x_n`` there.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .commutators import FieldProvider, MaterialState, dt_v_terms, evaluate_terms, f_terms, g_terms
from .eos import EquationOfState
from .geometry import LagrangianMap, boundary_geometry
from .mesh import Field, StripGrid, WeightSpec, gradient, norm, save_field
from .operators import EllipticProblem, laplacian, solve_dirichlet, top_normal_derivative

S_LOW = 2


class InitDataError(RuntimeError):
    def __init__(self, message: str, trace: "IterationTrace | None" = None):
        super().__init__(message)
        self.trace = trace


# -- presets -----------------------------------------------------------------------

def _coords(grid: StripGrid):
    y = grid.coords
    return y[0], y[-1]


def _embed(grid: StripGrid, u_h: np.ndarray, u_v: np.ndarray) -> np.ndarray:
    u = np.zeros((grid.dim,) + grid.shape)
    u[0], u[-1] = u_h, u_v
    return u


def hydrostatic(grid: StripGrid) -> np.ndarray:
    return np.zeros((grid.dim,) + grid.shape)


def swirl_stream(grid: StripGrid, amplitude: float = 0.1) -> np.ndarray:
    x, y = _coords(grid)
    d = grid.depth
    return amplitude * np.sin(x) * np.sin(np.pi * y / d) * ((y + d) / d) ** 2


def swirl(grid: StripGrid, amplitude: float = 0.1) -> np.ndarray:
    """``u = (-psi_y, psi_x)`` for ``psi = a sin(x) sin(pi y/d) ((y+d)/d)^2``.

    ``psi`` vanishes on both walls, so ``u . e_n = 0`` there.  The derivatives
    are the grid's, which makes ``u`` divergence free to rounding.
    """
    psi = swirl_stream(grid, amplitude)
    n = grid.dim - 1
    return _embed(grid, -grid.diff(psi, n), grid.diff(psi, 0))


def bump_potential(grid: StripGrid, amplitude: float = 0.05, k: int = 1) -> np.ndarray:
    x, y = _coords(grid)
    d = grid.depth
    return amplitude * np.cosh(k * (y + d)) / math.cosh(k * d) * np.cos(k * x)


def irrotational_bump(grid: StripGrid, amplitude: float = 0.05, k: int = 1) -> np.ndarray:
    """Grid gradient of the harmonic potential ``a cosh(k(y+d))/cosh(kd) cos(kx)``."""
    return gradient(bump_potential(grid, amplitude, k), grid)


def linear_wave(grid: StripGrid, amplitude: float = 0.01, k: int = 1) -> np.ndarray:
    """Velocity of the linear standing gravity wave whose surface is flat at t = 0
    and reaches height ``amplitude``."""
    d = grid.depth
    omega = math.sqrt(k * math.tanh(k * d))
    a = amplitude * omega / k * math.cosh(k * d) / math.sinh(k * d)
    return irrotational_bump(grid, a, k)


PRESETS = {
    "hydrostatic": lambda grid, amplitude=0.0: hydrostatic(grid),
    "swirl": lambda grid, amplitude=0.1: swirl(grid, amplitude),
    "irrotational-bump": lambda grid, amplitude=0.05: irrotational_bump(grid, amplitude),
    "linear-wave": lambda grid, amplitude=0.01: linear_wave(grid, amplitude),
}


# -- types -------------------------------------------------------------------------

@dataclass
class InitialDataProblem:
    grid: StripGrid
    u0: np.ndarray
    eos: EquationOfState
    r: int = 2
    mu: float = 2.0
    s: int | None = None
    lmap: LagrangianMap | None = None
    max_iter: int = 50
    tol: float = 1e-10
    solver_tol: float = 1e-12
    div_tol: float = 1e-5

    def __post_init__(self):
        if self.r < 1:
            raise InitDataError("compatibility order r must be >= 1")
        if self.s is None:
            self.s = self.r + 1
        if self.s < self.r + 1:
            raise InitDataError("need s >= r + 1")
        self.u0 = np.asarray(self.u0, float)
        div = np.einsum("ii...->...", gradient(self.u0, self.grid, self._inv_jac()))
        scale = max(1.0, float(np.max(np.abs(self.u0))))
        if np.max(np.abs(div)) > self.div_tol * scale:
            raise InitDataError(f"u0 is not divergence free (max |div u0| = {np.max(np.abs(div)):.2e})")

    def _inv_jac(self):
        return None if self.lmap is None else self.lmap.inverse_jacobian


@dataclass
class IterationTrace:
    m: list[list[float]] = field(default_factory=list)       # m_k^nu, k < r
    m_star: list[float] = field(default_factory=list)
    diff: list[float] = field(default_factory=list)          # successive differences (nu >= 1)
    ratios: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        r = len(self.m[0]) if self.m else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["nu"] + [f"m_{k}" for k in range(r)] + ["m_star", "diff"])
            for nu, (mk, ms) in enumerate(zip(self.m, self.m_star)):
                d = self.diff[nu - 1] if nu >= 1 else float("nan")
                w.writerow([nu] + [repr(x) for x in mk] + [repr(ms), repr(d)])


@dataclass
class CompatibleData:
    grid: StripGrid
    lmap: LagrangianMap
    eos: EquationOfState
    r: int
    u0: np.ndarray
    v0: np.ndarray
    h: list[np.ndarray]                # h_0 .. h_{r+1}
    phi: np.ndarray
    trace: IterationTrace
    converged: bool = True

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_field(Field(self.grid, self.v0, 1), d / "v0.bin", "bin")
        save_field(Field(self.grid, self.u0, 1), d / "u0.bin", "bin")
        save_field(Field(self.grid, self.phi), d / "phi.bin", "bin")
        save_field(Field(self.grid, self.lmap.displacement, 1), d / "displacement.bin", "bin")
        for k, hk in enumerate(self.h):
            save_field(Field(self.grid, hk), d / f"h{k}.bin", "bin")
        self.trace.write_csv(d / "trace.csv")
        meta = {"r": self.r, "eos": {"kind": self.eos.kind, "kappa": self.eos.kappa,
                                     "gamma": self.eos.gamma, "h_range": list(self.eos.h_range)},
                "converged": self.converged, "iterations": len(self.trace.m)}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_compatible_data(directory) -> CompatibleData:
    from .eos import make_eos
    from .mesh import load_field
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    v0 = load_field(d / "v0.bin")
    grid = v0.grid
    e = meta["eos"]
    eos = make_eos(e["kind"], e["kappa"], e["gamma"], tuple(e["h_range"]))
    r = meta["r"]
    h = [load_field(d / f"h{k}.bin").values for k in range(r + 2)]
    trace = IterationTrace()
    with open(d / "trace.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        trace.m.append([float(x) for x in row[1:-2]])
        trace.m_star.append(float(row[-2]))
        if row[0] != "0":
            trace.diff.append(float(row[-1]))
    lmap = LagrangianMap(grid, load_field(d / "displacement.bin").values.copy())
    return CompatibleData(grid, lmap, eos, r, load_field(d / "u0.bin").values.copy(), v0.values.copy(),
                          h, load_field(d / "phi.bin").values.copy(), trace, meta["converged"])


# -- providers ---------------------------------------------------------------------

class DataProvider(FieldProvider):
    """Factors evaluated from ``v0`` and the list ``h_k`` (material derivatives at t = 0)."""

    def __init__(self, grid, v0, h, eos, inv_jac=None):
        super().__init__(grid, inv_jac)
        self.v0 = v0
        self.h = h
        self.eos = eos

    def base(self, kind: str, k: int) -> np.ndarray:
        if kind == "v":
            if k != 0:
                raise InitDataError("closed source terms should not contain D_t^k v with k > 0")
            return self.v0
        if kind == "h":
            return self.h[k] if k < len(self.h) else np.zeros(self.grid.shape)
        raise InitDataError(f"no field {kind!r}")

    def eos_factor(self, m: int, p: int) -> np.ndarray:
        return self.eos.de(self.h[0], m) ** p


def _F(k: int, prov: DataProvider) -> np.ndarray:
    return evaluate_terms(f_terms(k + 1), prov)


def _G(k: int, prov: DataProvider) -> np.ndarray:
    if prov.eos.kind == "linear":
        # e^(m) = 0 for m >= 2
        return np.zeros(prov.grid.shape)
    return evaluate_terms(g_terms(k + 1), prov)


def _bottom_flux(k: int, prov_no_hk: DataProvider) -> np.ndarray:
    """``d h_k/d x_n`` on the bottom from ``(D_t^{k+1} v)^n = 0``, i.e. the remainder
    of ``D_t^{k+1} v^n`` once the ``-d_n h_k`` term is removed."""
    rest = evaluate_terms(dt_v_terms(k + 1), prov_no_hk, nfree=1)
    return rest[-1][..., 0]


# The data must satisfy the discrete relations the stepper and the energy
# formulas use, so every Laplacian here is div(grad) of the grid derivatives.
LAPLACIAN_FORM = "divgrad"


def _solve(grid, lmap, rhs, bottom, tol) -> np.ndarray:
    p = EllipticProblem(Field(grid, rhs), 0.0, "neumann", bottom, lmap, tol=tol, form=LAPLACIAN_FORM)
    return solve_dirichlet(p).values.copy()


def pressure_from_velocity(u0: np.ndarray, grid: StripGrid, lmap: LagrangianMap | None = None,
                           tol: float = 1e-12) -> Field:
    """Incompressible pressure deviation ``p~ = p + x_n``.

    Solves ``Delta p~ = -(d_i u^k)(d_k u^i)`` with ``p = 0`` on the free surface and
    ``d p/d x_n = -1`` on the bottom wall (so ``d p~/d x_n = 0`` there).
    """
    inv = None if lmap is None else lmap.inverse_jacobian
    du = gradient(np.asarray(u0, float), grid, inv)
    rhs = -np.einsum("ik...,ki...->...", du, du)
    xn_top = grid.top(grid.coords[-1] if lmap is None else lmap.positions[-1])
    p = EllipticProblem(Field(grid, rhs), xn_top, "neumann", 0.0, lmap, tol=tol, form=LAPLACIAN_FORM)
    return solve_dirichlet(p)


# -- construction --------------------------------------------------------------------

def _norms(grid, h, v, r, s, weight, inv, positions, cheap):
    ms = []
    for k in range(r):
        order = min(S_LOW, s - k) if cheap else s - k
        ms.append(norm(Field(grid, h[k]), "Hw", order, weight, inv, positions))
    vs = S_LOW if cheap else s
    return ms, sum(ms) + norm(Field(grid, v, 1), "Hw", vs, weight, inv, positions)


def _diff_norm(grid, h_new, h_old, v_new, v_old, r, weight, inv, positions):
    d = sum(norm(Field(grid, h_new[k] - h_old[k]), "Hw", S_LOW, weight, inv, positions) for k in range(r))
    return d + norm(Field(grid, v_new - v_old, 1), "Hw", S_LOW, weight, inv, positions)


def construct_compatible_data(problem: InitialDataProblem) -> CompatibleData:
    """Successive approximation of the compatibility system.

    Iterate ``nu = 0`` solves the system with ``v0 = u0`` and no ``e'``-coupling;
    later iterates use the previous ``h_k`` in the ``e'(h_0) h_{k+2}`` and ``G_k``
    terms and the current ones in ``F_k`` (Gauss-Seidel over ``k``).
    """
    P = problem
    grid, eos, r = P.grid, P.eos, P.r
    lmap = P.lmap or LagrangianMap.identity(grid)
    inv = P._inv_jac()
    positions = lmap.positions
    weight = WeightSpec(P.mu)
    zeros = np.zeros(grid.shape)

    def sweep(v, h_prev, coupled):
        h = [zeros.copy() for _ in range(r + 2)]
        de0 = eos.de(h_prev[0], 1) if coupled else None
        prov_prev = DataProvider(grid, v, h_prev, eos, inv)
        for k in range(r):
            prov = DataProvider(grid, v, h, eos, inv)
            rhs = -_F(k, prov)
            if coupled:
                rhs = rhs + de0 * h_prev[k + 2] - _G(k, prov_prev)
            flux = _bottom_flux(k, DataProvider(grid, v, h[:k], eos, inv))
            h[k] = _solve(grid, P.lmap, rhs, flux, P.solver_tol)
        return h

    trace = IterationTrace()
    v = P.u0.copy()
    phi = zeros.copy()
    h = sweep(v, None, coupled=False)
    mk, mstar = _norms(grid, h, v, r, P.s, weight, inv, positions, cheap=False)
    trace.m.append(mk)
    trace.m_star.append(mstar)

    converged = False
    bad = 0
    for nu in range(1, P.max_iter + 1):
        de0 = eos.de(h[0], 1)
        phi = _solve(grid, P.lmap, -de0 * h[1], 0.0, P.solver_tol)
        v_new = P.u0 + gradient(phi, grid, inv)
        h_new = sweep(v_new, h, coupled=True)
        d = _diff_norm(grid, h_new, h, v_new, v, r, weight, inv, positions)
        mk, mstar = _norms(grid, h_new, v_new, r, P.s, weight, inv, positions, cheap=True)
        trace.m.append(mk)
        trace.m_star.append(mstar)
        if trace.diff:
            ratio = d / trace.diff[-1] if trace.diff[-1] > 0 else 0.0
            trace.ratios.append(ratio)
            bad = bad + 1 if ratio >= 1 else 0
        trace.diff.append(d)
        h, v = h_new, v_new
        if d <= P.tol * mstar:
            converged = True
            break
        if bad >= 3:
            raise InitDataError("iteration diverging: kappa too small", trace)
    # full-norm confirmation of the final iterate
    trace.m[-1], trace.m_star[-1] = _norms(grid, h, v, r, P.s, weight, inv, positions, cheap=False)
    h[r] = zeros.copy()
    h[r + 1] = zeros.copy()
    return CompatibleData(grid, lmap, eos, r, P.u0.copy(), v, h, phi, trace, converged)


# -- diagnostics ----------------------------------------------------------------------

@dataclass
class CompatibilityReport:
    boundary: list[float]          # sup_top |h_j| of the data, j = 0..k_max
    closure_boundary: list[float]  # sup_top |D_t^j h| rebuilt from the closure relations
    relation: list[float]          # interior residual of the relation defining h_j
    scale: float

    def passed(self, tol: float = 1e-8) -> bool:
        return all(b <= tol * self.scale for b in self.boundary)


def data_scale(data: CompatibleData) -> float:
    xn = data.lmap.positions[-1]
    return max(1.0, float(np.max(np.abs(data.h[0] + xn))), float(np.max(np.abs(data.v0))))


def verify_compatibility(data: CompatibleData, k_max: int | None = None) -> CompatibilityReport:
    """Boundary values of ``D_t^j h`` at ``t = 0`` for ``j <= k_max``.

    ``boundary`` uses the data ``h_j`` directly.  ``closure_boundary`` rebuilds
    ``D_t h = -div v0 / e'(h_0)`` and, for ``j >= 2``,
    ``D_t^j h = (Delta h_{j-2} + f_{j-1} + g_{j-1}) / e'(h_0)`` with the commutator
    engine; its boundary values carry the discretization error of the
    Laplacian at the surface amplified by ``1/e'``.
    """
    grid, eos = data.grid, data.eos
    k_max = data.r + 1 if k_max is None else k_max
    inv = data.lmap.inverse_jacobian
    prov = DataProvider(grid, data.v0, data.h, eos, inv)
    de = eos.de(data.h[0], 1)
    div = np.einsum("ii...->...", gradient(data.v0, grid, inv))
    inner = (slice(None),) * (grid.dim - 1) + (slice(1, -1),)
    boundary, closure, relation = [], [], []
    for j in range(k_max + 1):
        hj = data.h[j] if j < len(data.h) else np.zeros(grid.shape)
        boundary.append(float(np.max(np.abs(grid.top(hj)))))
        if j == 0:
            closure.append(boundary[-1])
            relation.append(0.0)
            continue
        if j == 1:
            rec = -div / de
        else:
            lap = laplacian(data.h[j - 2], grid, data.lmap, LAPLACIAN_FORM)
            src = evaluate_terms(f_terms(j - 1), prov) + (evaluate_terms(g_terms(j - 1), prov)
                                                           if eos.kind != "linear" else 0.0)
            rec = (lap + src) / de
        closure.append(float(np.max(np.abs(grid.top(rec)))))
        relation.append(float(np.max(np.abs(de * (rec - hj))[inner])))
    return CompatibilityReport(boundary, closure, relation, data_scale(data))


@dataclass
class SignReport:
    superharmonic: str             # "positive", "degenerate" or "fail"
    min_minus_laplacian: float
    eps: float
    eps_location: tuple[int, ...]
    green_points: list[int]
    green_bound: list[float]
    minus_dn_h0: list[float]
    green_ok: bool
    probe_depth: float

    @property
    def passed(self) -> bool:
        return self.superharmonic in ("positive", "degenerate") and self.eps > 0 and self.green_ok


def green_boundary_integral(grid: StripGrid, lmap: LagrangianMap | None, node: int, b: float,
                            tol: float = 1e-12) -> float:
    """``int_{x_n=b} P(x, y) dS(x)`` for the top node ``y`` and the Poisson kernel ``P``.

    ``P(., y)`` is the harmonic function with a discrete unit mass at ``y`` as
    Dirichlet data on top (Neumann bottom); the line ``x_n = b`` is taken as the
    reference row ``y_n = b`` with linear interpolation between rows.
    """
    top = np.zeros(grid.shape[:-1])
    top.flat[node] = 1.0 / grid.boundary_weights.flat[node]
    if lmap is not None:
        top.flat[node] /= boundary_geometry(lmap, check_intersection=False).surface_element.flat[node]
    p = EllipticProblem(Field.zeros(grid), top, "neumann", 0.0, lmap, tol=tol)
    phi = solve_dirichlet(p).values
    yv = grid.y_vertical
    j = int(np.clip(np.searchsorted(yv, b) - 1, 0, len(yv) - 2))
    t = (b - yv[j]) / (yv[j + 1] - yv[j])
    row = (1 - t) * phi[..., j] + t * phi[..., j + 1]
    if lmap is None or grid.dim != 2:
        ds = grid.boundary_weights
    else:
        J = lmap.jacobian
        Jr = (1 - t) * J[:, 0, :, j] + t * J[:, 0, :, j + 1]
        ds = grid.boundary_weights * np.linalg.norm(Jr, axis=0)
    return float(np.sum(ds * row))


def check_sign_condition(data: CompatibleData, b: float | None = None, samples: int = 8,
                         green_tol: float = 1e-2, curl_tol: float = 1e-8) -> SignReport:
    grid = data.grid
    lmap = data.lmap
    inv = lmap.inverse_jacobian
    du = gradient(data.u0, grid, inv)
    curl = du - np.swapaxes(du, 0, 1)
    if np.max(np.abs(curl)) > curl_tol * max(1.0, float(np.max(np.abs(du)))):
        raise InitDataError("superharmonicity check needs irrotational u0 (curl u0 != 0)")
    xn = lmap.positions[-1]
    mlap = -laplacian(data.h[0] + xn, grid, lmap, LAPLACIAN_FORM)
    inner = mlap[(slice(None),) * (grid.dim - 1) + (slice(1, -1),)]
    scale = data_scale(data)
    if np.max(np.abs(inner)) <= 1e-9 * scale:
        status = "degenerate"
    elif np.min(inner) > 0:
        status = "positive"
    else:
        status = "fail"
    bgeom = boundary_geometry(lmap, check_intersection=False)
    minus_dn = -top_normal_derivative(data.h[0], grid, lmap, bgeom)
    i = int(np.argmin(minus_dn))
    eps = float(minus_dn.flat[i])
    b = -grid.depth / 2 if b is None else b
    nb = minus_dn.size
    pts = sorted({int(round(q)) for q in np.linspace(0, nb, samples, endpoint=False)})
    flat = lmap if np.any(lmap.displacement) else None
    bounds = [green_boundary_integral(grid, flat, p, b) for p in pts]
    vals = [float(minus_dn.flat[p]) for p in pts]
    ok = all(v >= gb - green_tol for v, gb in zip(vals, bounds))
    return SignReport(status, float(np.min(inner)), eps, tuple(int(a) for a in np.unravel_index(i, minus_dn.shape)),
                      pts, bounds, vals, ok, b)


def compatible_state(data: CompatibleData):
    """``MaterialState`` of the data (closure-based material derivatives)."""
    return MaterialState(data.grid, data.v0, data.h[0], data.eos, inv_jac=data.lmap.inverse_jacobian)
