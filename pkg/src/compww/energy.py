"""Energy functionals and a-priori monitors for the compressible free-surface system.

A *state* is any object with ``lmap`` (``LagrangianMap``), ``v`` (shape
``(dim,) + grid.shape``) and ``h`` (shape ``grid.shape``) attributes.  Material
derivatives ``D_t^k v`` and ``D_t^k h`` are rebuilt from the closure relations,
so only the current time level is needed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np

from .commutators import MaterialState
from .eos import EquationOfState, verify_structural_conditions
from .geometry import BoundaryGeometry, LagrangianMap, boundary_geometry, q_contract, q_form
from .mesh import WeightSpec
from .operators import bgeom_projector, top_normal_derivative

CSV_SCHEMA_VERSION = 1
SIGN_TOLERANCE = 1e-6

Variant = Literal["plain", "tilde", "weighted"]


class EnergyError(ValueError):
    pass


class State(Protocol):
    lmap: LagrangianMap
    v: np.ndarray
    h: np.ndarray


@dataclass
class EnergyBreakdown:
    r: int
    mu: float | None
    E0: float
    E_sk: dict[tuple[int, int], float]
    K_r: float
    W_j: list[float]                      # W_1 .. W_{r+1}
    E_r: float
    E_r_star: float
    E_by_order: list[float]               # E_0 .. E_r
    tilde_W_j: list[float]
    tilde_E_r: float
    tilde_E_r_star: float
    # decay-consistent diagnostic: h replaced by h + x_n in first derivatives
    W_j_dev: list[float]
    E_r_dev: float
    E_r_star_dev: float
    E_w_r: float | None = None
    E_w_r_star: float | None = None
    E_w_sk: dict[tuple[int, int], float] = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        out = {f"E_{s}{k}": val for (s, k), val in self.E_sk.items()}
        out["K_r"] = self.K_r
        out.update({f"W_{j + 1}^2": w * w for j, w in enumerate(self.W_j)})
        return out


class _Context:
    """Per-state quantities shared by all energy components."""

    def __init__(self, state: State, eos: EquationOfState, max_depth: int, weight: WeightSpec | None = None):
        lmap = state.lmap
        self.grid = grid = lmap.grid
        self.lmap = lmap
        self.eos = eos
        self.ms = MaterialState(grid, state.v, state.h, eos, inv_jac=lmap.inverse_jacobian,
                                max_depth=max_depth)
        self.bgeom = boundary_geometry(lmap, check_intersection=False)
        self.rho = eos.rho(state.h)
        self.de = eos.de(state.h, 1)
        self.vol = grid.quad_weights * lmap.det
        self.bdy = grid.boundary_weights * self.bgeom.surface_element
        self.w = weight(lmap.positions) if weight is not None else None
        self._q = None
        self._proj = None
        self._nu = None

    @property
    def q(self) -> np.ndarray:
        if self._q is None:
            self._q = q_form(self.lmap, self.bgeom).q
        return self._q

    @property
    def proj(self) -> np.ndarray:
        if self._proj is None:
            self._proj = bgeom_projector(self.bgeom)
        return self._proj

    @property
    def nu(self) -> np.ndarray:
        if self._nu is None:
            minus_dn = -top_normal_derivative(self.ms.h, self.grid, self.lmap, self.bgeom)
            i = int(np.argmin(minus_dn))
            if minus_dn.flat[i] < SIGN_TOLERANCE:
                node = np.unravel_index(i, minus_dn.shape)
                raise EnergyError(f"sign condition violated: -grad_N h = {minus_dn.flat[i]:.3e} "
                                  f"at top node {tuple(int(a) for a in node)}")
            self._nu = 1.0 / minus_dn
        return self._nu

    def h_tensor(self, k: int, s: int, deviation: bool = False) -> np.ndarray:
        T = self.ms.tensor("h", k, s)
        if deviation and k == 0 and s == 1:
            T = T.copy()
            T[-1] += 1.0
        return T

    def integral(self, density: np.ndarray, weighted: bool = False) -> float:
        w = self.vol * self.w if weighted else self.vol
        return float(np.sum(w * density))

    def boundary_integral(self, density: np.ndarray, weighted: bool = False) -> float:
        w = self.bdy * self.grid.top(self.w) if weighted else self.bdy
        return float(np.sum(w * density))


def _sum_leading(a: np.ndarray, dim_grid: int) -> np.ndarray:
    return np.sum(a, axis=tuple(range(a.ndim - dim_grid))) if a.ndim > dim_grid else a


def _esk_densities(ctx: _Context, s: int, k: int, deviation: bool = False):
    """Interior and boundary integrands of ``E_{s,k}`` (without the weight)."""
    nd = ctx.grid.dim
    V = ctx.ms.tensor("v", k, s)
    H = ctx.h_tensor(k, s, deviation)
    qv = _sum_leading(q_contract(ctx.q, V, V, s), nd)
    qh = q_contract(ctx.q, H, H, s)
    interior = 0.5 * ctx.rho * qv + 0.5 * ctx.rho * ctx.de * qh
    if s == 0:
        # D_t^k h vanishes on the free surface, so the boundary term is absent
        return interior, None
    Hb = ctx.grid.top(H)
    rho_b = ctx.grid.top(ctx.rho)
    boundary = 0.5 * rho_b * q_contract(ctx.proj, Hb, Hb, s) * ctx.nu
    return interior, boundary


def _esk(ctx: _Context, s: int, k: int, weighted: bool = False, deviation: bool = False) -> float:
    interior, boundary = _esk_densities(ctx, s, k, deviation)
    val = ctx.integral(interior, weighted)
    if boundary is not None:
        val += ctx.boundary_integral(boundary, weighted)
    return val


def _curl(ctx: _Context) -> np.ndarray:
    dv = ctx.ms.tensor("v", 0, 1)            # dv[i, j] = d_i v^j
    return dv - np.swapaxes(dv, 0, 1)


def _curl_derivs(ctx: _Context, order: int) -> np.ndarray:
    from .mesh import gradient
    c = _curl(ctx)
    for _ in range(order):
        c = gradient(c, ctx.grid, ctx.lmap.inverse_jacobian)
    return c


def _k_r(ctx: _Context, r: int, weighted: bool = False) -> float:
    c = _curl_derivs(ctx, r - 1)
    dens = ctx.rho * _sum_leading(c * c, ctx.grid.dim)
    return ctx.integral(dens, weighted)


def _l2(ctx: _Context, f: np.ndarray, weighted: bool = False) -> float:
    return float(np.sqrt(ctx.integral(_sum_leading(f * f, ctx.grid.dim), weighted)))


def _w_j(ctx: _Context, j: int, weighted: bool = False, deviation: bool = False) -> float:
    a = _l2(ctx, np.sqrt(ctx.de) * ctx.ms.dt_h(j), weighted)
    b = _l2(ctx, ctx.h_tensor(j - 1, 1, deviation), weighted)
    return 0.5 * a + 0.5 * b


def _w_tilde_j(ctx: _Context, j: int) -> float:
    a = _l2(ctx, ctx.de * ctx.ms.dt_h(j))
    b = _l2(ctx, np.sqrt(ctx.de) * ctx.h_tensor(j - 1, 1))
    return 0.5 * a + 0.5 * b


def energy_E0(state: State, eos: EquationOfState) -> float:
    """Conserved energy: kinetic, internal, surface-potential and density-potential parts.

    The two surface-potential integrals are evaluated through
    ``int_D x_n - int_{ref} x_n`` with the reference strip ``-depth < x_n < 0``;
    on the truncated domain this difference equals their sum exactly.
    """
    lmap = state.lmap
    grid = lmap.grid
    vol = grid.quad_weights * lmap.det
    rho = eos.rho(state.h)
    xn = lmap.positions[-1]
    kinetic = 0.5 * np.sum(vol * rho * np.sum(state.v * state.v, axis=0))
    internal = np.sum(vol * rho * eos.Q(rho))
    area = (2 * np.pi) ** (grid.dim - 1)
    surface = np.sum(vol * xn) + 0.5 * grid.depth ** 2 * area
    density = np.sum(vol * (rho - 1.0) * xn)
    return float(kinetic + internal + surface + density)


def _order_energy(ctx: _Context, r: int, weighted: bool = False, deviation: bool = False):
    esk = {(s, r - s): _esk(ctx, s, r - s, weighted, deviation) for s in range(r + 1)}
    K = _k_r(ctx, r, weighted)
    W = [_w_j(ctx, j, weighted, deviation) for j in range(1, r + 2)]
    total = sum(esk.values()) + K + sum(w * w for w in W)
    return esk, K, W, total


def energy_Er(state: State, eos: EquationOfState, r: int, variant: Variant = "plain",
              mu: float | None = None) -> EnergyBreakdown:
    """Full breakdown of the order-``r`` energy and its star sum.

    The plain, tilde and deviation columns are always filled; ``variant='weighted'``
    additionally evaluates the weighted energies with ``w = (1+|x|^2)^mu``
    on both the interior and the boundary.
    """
    if r < 1:
        raise EnergyError("energy order r must be >= 1")
    if variant not in ("plain", "tilde", "weighted"):
        raise EnergyError(f"unknown variant {variant!r}")
    weight = None
    if variant == "weighted":
        mu = 2.0 if mu is None else mu
        weight = WeightSpec(mu)
    ctx = _Context(state, eos, max_depth=r + 1, weight=weight)
    ctx.nu  # sign-condition check up front

    E0 = energy_E0(state, eos)
    by_order, dev_order = [E0], [E0]
    for rp in range(1, r + 1):
        esk, K, W, total = _order_energy(ctx, rp)
        by_order.append(total)
        dev_order.append(_order_energy(ctx, rp, deviation=True)[3])
    W_dev = _order_energy(ctx, r, deviation=True)[2]

    tilde_by_order = [E0]
    tilde_W = []
    for rp in range(1, r + 1):
        tW = [_w_tilde_j(ctx, j) for j in range(1, rp + 2)]
        e_rp = (sum(_esk(ctx, s, rp - s) for s in range(rp + 1)) + _k_r(ctx, rp)
                + sum(w * w for w in tW))
        tilde_by_order.append(e_rp)
        tilde_W = tW

    bd = EnergyBreakdown(
        r=r, mu=mu, E0=E0, E_sk=esk, K_r=K, W_j=W, E_r=by_order[-1], E_r_star=float(sum(by_order)),
        E_by_order=by_order, tilde_W_j=tilde_W, tilde_E_r=tilde_by_order[-1],
        tilde_E_r_star=float(sum(tilde_by_order)), W_j_dev=W_dev, E_r_dev=dev_order[-1],
        E_r_star_dev=float(sum(dev_order)),
    )
    if weight is not None:
        w_orders = [E0]
        for rp in range(1, r + 1):
            esk_w, _, _, tot = _order_energy(ctx, rp, weighted=True)
            w_orders.append(tot)
        bd.E_w_r, bd.E_w_r_star, bd.E_w_sk = w_orders[-1], float(sum(w_orders)), esk_w
    return bd


def energy_Er_monolithic(state: State, eos: EquationOfState, r: int) -> float:
    """``E_r`` from one interior and one boundary quadrature of the summed integrands."""
    ctx = _Context(state, eos, max_depth=r + 1)
    interior = np.zeros(ctx.grid.shape)
    boundary = np.zeros(ctx.grid.shape[:-1])
    for s in range(r + 1):
        i_d, b_d = _esk_densities(ctx, s, r - s)
        interior += i_d
        if b_d is not None:
            boundary += b_d
    c = _curl_derivs(ctx, r - 1)
    interior += ctx.rho * _sum_leading(c * c, ctx.grid.dim)
    total = ctx.integral(interior) + ctx.boundary_integral(boundary)
    return total + sum(_w_j(ctx, j) ** 2 for j in range(1, r + 2))


def tilde_dominated(bd: EnergyBreakdown, c0: float, rtol: float = 1e-12) -> bool:
    """``tilde E_r <= max(1, c0)^2 E_r``; with ``e' <= c0`` on the range each tilde
    norm is bounded by ``max(1, c0)`` times its plain counterpart."""
    return bd.tilde_E_r <= max(1.0, c0) ** 2 * bd.E_r * (1 + rtol) + 1e-300


# -- monitors --------------------------------------------------------------------

@dataclass
class AprioriMonitor:
    K: float
    M: float
    eps: float
    calE: float
    c0: float
    M_parts: dict[str, float]
    eps_location: tuple[int, ...]
    sign_ok: bool


def _pointwise_norm(a: np.ndarray, dim_grid: int) -> np.ndarray:
    return np.sqrt(_sum_leading(a * a, dim_grid))


def apriori_monitor(state: State, eos: EquationOfState, r: int = 2,
                    bgeom: BoundaryGeometry | None = None) -> AprioriMonitor:
    lmap = state.lmap
    grid = lmap.grid
    nd = grid.dim
    bgeom = bgeom or boundary_geometry(lmap, check_intersection=False)
    ms = MaterialState(grid, state.v, state.h, eos, inv_jac=lmap.inverse_jacobian, max_depth=2)
    minus_dn = -top_normal_derivative(state.h, grid, lmap, bgeom)
    i = int(np.argmin(minus_dn))
    eps = float(minus_dn.flat[i])
    calE = float(np.max(np.abs(1.0 / minus_dn))) if np.all(minus_dn != 0) else np.inf

    rho = eos.rho(state.h)
    dv = ms.tensor("v", 0, 1)
    curl = dv - np.swapaxes(dv, 0, 1)
    from .mesh import gradient
    dcurl = gradient(curl, grid, lmap.inverse_jacobian)
    div_curl = np.einsum("jij...->i...", dcurl)       # d^j curl_{ij}
    de = eos.de(state.h, 1)
    parts = {
        "rho": float(np.max(np.abs(rho))),
        "curl": float(np.max(_pointwise_norm(div_curl, nd))),
        "v_h": float(np.max(_pointwise_norm(dv, nd) + _pointwise_norm(ms.tensor("h", 0, 1), nd)
                            + _pointwise_norm(ms.tensor("h", 0, 2), nd)
                            + _pointwise_norm(ms.tensor("h", 1, 1), nd))),
        "Dt_h": float(np.max(np.abs(de * ms.dt_h(1)) + np.abs(de * ms.dt_h(2)))),
    }
    c0 = verify_structural_conditions(eos, r=r).c0
    return AprioriMonitor(
        K=float(bgeom.K_monitor), M=max(parts.values()), eps=eps, calE=calE, c0=c0, M_parts=parts,
        eps_location=tuple(int(a) for a in np.unravel_index(i, minus_dn.shape)), sign_ok=eps > 0)


# -- time series ------------------------------------------------------------------

def csv_header(r: int) -> list[str]:
    return ["t", "E0"] + [f"E{j}" for j in range(1, r + 1)] + [f"E{r}*", "eps", "K", "M"]


def csv_row(t: float, bd: EnergyBreakdown, mon: AprioriMonitor) -> list[float]:
    return [t] + list(bd.E_by_order) + [bd.E_r_star, mon.eps, mon.K, mon.M]


def write_time_series(path, r: int, rows: list[list[float]]) -> None:
    """CSV with a ``# schema=`` comment line followed by the header and rows."""
    buf = io.StringIO()
    buf.write(f"# schema={CSV_SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(r))
    for row in rows:
        w.writerow([repr(float(x)) for x in row])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_time_series(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header = rows[0]
    data = np.array([[float(x) for x in row] for row in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(header)))
    return header, data
