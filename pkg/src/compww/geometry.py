"""Lagrangian map, induced metric, free-surface geometry and the q-form."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .mesh import StripGrid, gradient


class GeometryError(ValueError):
    pass


def _fmt_node(idx) -> str:
    return "(" + ", ".join(str(int(i)) for i in idx) + ")"


@dataclass(frozen=True)
class LagrangianMap:
    """Particle positions ``x(y) = y + displacement(y)``.

    The displacement is periodic in the horizontal reference directions, which
    keeps spectral differentiation exact for the map itself.
    """

    grid: StripGrid
    displacement: np.ndarray

    @classmethod
    def identity(cls, grid: StripGrid) -> "LagrangianMap":
        return cls(grid, np.zeros((grid.dim,) + grid.shape))

    @classmethod
    def from_positions(cls, grid: StripGrid, x: np.ndarray) -> "LagrangianMap":
        return cls(grid, np.asarray(x, float) - grid.coords)

    @property
    def positions(self) -> np.ndarray:
        return self.grid.coords + self.displacement

    @property
    def jacobian(self) -> np.ndarray:
        """``J[i, a] = dx^i/dy^a``."""
        return self._derived[0]

    @property
    def inverse_jacobian(self) -> np.ndarray:
        """``Jinv[a, i] = dy^a/dx^i``."""
        return self._derived[1]

    @property
    def det(self) -> np.ndarray:
        return self._derived[2]

    @property
    def _derived(self):
        cache = self.__dict__.get("_cache")
        if cache is None:
            g = self.grid
            J = np.array([[g.diff(self.displacement[i], a) for a in range(g.dim)]
                          for i in range(g.dim)])
            J += np.eye(g.dim).reshape((g.dim, g.dim) + (1,) * g.dim)
            Jm = np.moveaxis(J, (0, 1), (-2, -1))
            det = np.linalg.det(Jm)
            if not np.all(det > 0):
                idx = np.unravel_index(np.argmin(det), det.shape)
                raise GeometryError(f"singular Lagrangian map: det={det[idx]:.3e} at node {_fmt_node(idx)}")
            Jinv = np.moveaxis(np.linalg.inv(Jm), (-2, -1), (0, 1))
            cache = (J, Jinv, det)
            object.__setattr__(self, "_cache", cache)
        return cache

    def advance(self, velocity: np.ndarray, dt: float) -> "LagrangianMap":
        return LagrangianMap(self.grid, self.displacement + dt * velocity)


@dataclass(frozen=True)
class Metric:
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det: np.ndarray


def metric_from_map(lmap: LagrangianMap) -> Metric:
    """Pull-back of the Euclidean metric, ``g_ab = dx^i/dy^a dx^i/dy^b``."""
    J = lmap.jacobian
    g = np.einsum("ia...,ib...->ab...", J, J)
    Jinv = lmap.inverse_jacobian
    g_inv = np.einsum("ai...,bi...->ab...", Jinv, Jinv)
    return Metric(g, g_inv, lmap.det.copy())


@dataclass(frozen=True)
class BoundaryGeometry:
    """Geometry of the top boundary (all arrays live on top nodes).

    ``normal`` is the Eulerian outward unit normal, ``conormal``/``normal_up``
    are ``N_a`` and ``N^a`` in Lagrangian components.  ``theta`` is the
    second fundamental form in Lagrangian components, ``theta_euler`` in
    Eulerian ones, ``sigma`` its trace.
    """

    normal: np.ndarray
    conormal: np.ndarray
    normal_up: np.ndarray
    gamma: np.ndarray
    projection: np.ndarray
    theta: np.ndarray
    theta_euler: np.ndarray
    sigma: np.ndarray
    surface_element: np.ndarray
    theta_max: float
    l1_proxy: float
    l0_proxy: float
    K_monitor: float

    def report(self, lmap: LagrangianMap) -> dict:
        return {
            "K_monitor": self.K_monitor,
            "min_det_jacobian": float(lmap.det.min()),
            "sigma_range": [float(self.sigma.min()), float(self.sigma.max())],
            "l0_proxy": self.l0_proxy,
        }


def _periodic_images(dim: int):
    shifts = [-1, 0, 1]
    grids = np.meshgrid(*([shifts] * (dim - 1)), indexing="ij")
    out = np.zeros((3 ** (dim - 1), dim))
    for a, s in enumerate(grids):
        out[:, a] = s.ravel() * 2 * np.pi
    return out


def normal_variation_radius(points: np.ndarray, normals: np.ndarray, max_nodes: int = 1024) -> float:
    """``min |x1 - x2| / angle(N1, N2)`` over boundary node pairs (periodic images included)."""
    dim = points.shape[0]
    P = points.reshape(dim, -1).T
    Nn = normals.reshape(dim, -1).T
    if len(P) > max_nodes:
        stride = int(math.ceil(len(P) / max_nodes))
        P, Nn = P[::stride], Nn[::stride]
    chord = np.linalg.norm(Nn[:, None, :] - Nn[None, :, :], axis=-1)
    ang = 2 * np.arcsin(np.clip(chord / 2, 0.0, 1.0))
    best = np.inf
    for shift in _periodic_images(dim):
        d = np.linalg.norm(P[:, None, :] - (P[None, :, :] + shift), axis=-1)
        mask = ang > 1e-10
        if mask.any():
            best = min(best, float(np.min(d[mask] / ang[mask])))
    return best


def boundary_geometry(lmap: LagrangianMap, metric: Metric | None = None,
                      check_intersection: bool = True) -> BoundaryGeometry:
    grid = lmap.grid
    dim = grid.dim
    metric = metric or metric_from_map(lmap)
    top = grid.top
    Jinv = top(lmap.inverse_jacobian)
    J = top(lmap.jacobian)
    g_inv = top(metric.g_inv)
    g = top(metric.g)

    # co-normal is proportional to dy^n
    gnn = g_inv[dim - 1, dim - 1]
    conormal = np.zeros((dim,) + gnn.shape)
    conormal[dim - 1] = 1.0 / np.sqrt(gnn)
    normal_up = np.einsum("ab...,b...->a...", g_inv, conormal)
    normal = Jinv[dim - 1] / np.linalg.norm(Jinv[dim - 1], axis=0)
    gamma = g - np.einsum("a...,b...->ab...", conormal, conormal)
    projection = np.eye(dim).reshape((dim, dim) + (1,) * (dim - 1)) - np.einsum(
        "a...,b...->ab...", conormal, normal_up)

    # surface parametrized by horizontal reference coordinates
    nh = dim - 1
    T = J[:, :nh]                                   # T[i, alpha]
    I = np.einsum("ia...,ib...->ab...", T, T)
    I_m = np.moveaxis(I, (0, 1), (-2, -1))
    I_inv = np.moveaxis(np.linalg.inv(I_m), (-2, -1), (0, 1))
    surface_element = np.sqrt(np.linalg.det(I_m))

    # derivatives of N along the boundary (horizontal axes of the boundary grid)
    bgrid_diff = lambda arr, ax: grid.diff(arr[..., None], ax)[..., 0]
    dN = np.array([bgrid_diff(normal, b) for b in range(nh)])     # dN[beta, i]
    theta_ab = np.einsum("ia...,bi...->ab...", T, dN)
    theta_ab = 0.5 * (theta_ab + np.swapaxes(theta_ab, 0, 1))
    dual = np.einsum("ab...,ib...->ai...", I_inv, T)                # e^alpha_i
    theta_euler = np.einsum("ai...,bj...,ab...->ij...", dual, dual, theta_ab)
    theta = np.einsum("ia...,jb...,ij...->ab...", J, J, theta_euler)
    sigma = np.einsum("ii...->...", theta_euler)

    theta_max = float(np.sqrt(np.einsum("ij...,ij...->...", theta_euler, theta_euler)).max())
    l1 = normal_variation_radius(top(lmap.positions), normal)
    if check_intersection and l1 < grid.min_spacing:
        raise GeometryError(f"surface self-intersection suspected: l1 proxy {l1:.3e} below grid spacing")
    l0 = min(l1 / 2, 1.0 / theta_max if theta_max > 0 else math.inf)
    K = theta_max + (1.0 / l0 if l0 > 0 else math.inf)
    return BoundaryGeometry(normal, conormal, normal_up, gamma, projection, theta, theta_euler,
                            sigma, surface_element, theta_max, l1, l0, K)


def geometry_report_json(lmap: LagrangianMap, bgeom: BoundaryGeometry | None = None) -> str:
    bgeom = bgeom or boundary_geometry(lmap)
    rep = bgeom.report(lmap)
    return json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                       for k, v in rep.items()})


# -- q-form ------------------------------------------------------------------

def smoothstep_cutoff(d: np.ndarray, d0: float) -> np.ndarray:
    """1 for d <= d0/4, 0 for d >= d0/2, quintic (C^2) blend in between."""
    t = np.clip((d - d0 / 4) / (d0 / 4), 0.0, 1.0)
    return 1.0 - t ** 3 * (10 - 15 * t + 6 * t * t)


@dataclass(frozen=True)
class NormalExtension:
    distance: np.ndarray
    eta: np.ndarray
    normal: np.ndarray      # extended Eulerian normal
    q: np.ndarray           # q^{ij}
    d0: float


def _trig_eval(coef: np.ndarray, k: np.ndarray, s: np.ndarray, order: int = 0) -> np.ndarray:
    n = coef.shape[-1]
    phase = np.exp(1j * np.multiply.outer(s, k))
    mult = (1j * k) ** order
    return (phase @ (coef * mult).T).real.T / n


def distance_to_top(lmap: LagrangianMap, iters: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance from each node to the top surface and the foot-point normal.

    2-D: Newton projection onto the trigonometric interpolant of the surface.
    3-D: length of the vertical coordinate line to the surface, with the
    normal taken from the boundary node above (coarse approximation).
    """
    grid = lmap.grid
    x = lmap.positions
    if grid.dim == 3:
        J = lmap.jacobian
        seg = np.linalg.norm(J[:, -1], axis=0)
        wv = grid.dy_vertical
        cum = np.zeros(grid.shape)
        for j in range(grid.n_vertical - 2, -1, -1):
            cum[..., j] = cum[..., j + 1] + 0.5 * wv * (seg[..., j] + seg[..., j + 1])
        nb = boundary_geometry(lmap, check_intersection=False).normal
        return cum, np.broadcast_to(nb[..., None], (3,) + grid.shape).copy()
    k = grid.wavenumbers
    top = grid.top(lmap.displacement)
    coef = np.fft.fft(top, axis=-1)            # periodic part of the surface
    s = grid.coords[0].copy()                  # initial guess: same column

    def surf(sv, order):
        p = _trig_eval(coef, k, sv.ravel(), order).reshape((2,) + sv.shape)
        if order == 0:
            p[0] += sv
        elif order == 1:
            p[0] += 1.0
        return p

    for _ in range(iters):
        p, dp, ddp = surf(s, 0), surf(s, 1), surf(s, 2)
        r = p - x
        F = np.sum(r * dp, axis=0)
        dF = np.sum(dp * dp, axis=0) + np.sum(r * ddp, axis=0)
        step = F / dF
        s = s - step
        if np.max(np.abs(step)) < 1e-14:
            break
    p, dp = surf(s, 0), surf(s, 1)
    dist = np.linalg.norm(p - x, axis=0)
    tang = dp / np.linalg.norm(dp, axis=0)
    nrm = np.array([-tang[1], tang[0]])        # outward: rotate tangent (d/ds) by +90 degrees
    return dist, nrm


def q_form(lmap: LagrangianMap, bgeom: BoundaryGeometry, d0: float | None = None) -> NormalExtension:
    """``q^{ij} = delta^{ij} - eta(d)^2 N^i N^j`` with the cutoff scale ``d0``.

    The admissible window is ``[l0/16, l0/2]`` where ``l0`` is the boundary
    injectivity proxy capped by the strip depth (the normal tube cannot reach
    past the truncation).
    """
    grid = lmap.grid
    l0 = min(bgeom.l0_proxy, grid.depth)
    if d0 is None:
        d0 = l0 / 2
    if not (l0 / 16 - 1e-14 <= d0 <= l0 / 2 + 1e-14):
        raise GeometryError(f"d0={d0} outside admissible window [{l0 / 16}, {l0 / 2}]")
    dist, nrm = distance_to_top(lmap)
    dist[..., -1] = 0.0
    nrm[..., -1] = bgeom.normal
    eta = smoothstep_cutoff(dist, d0)
    dim = grid.dim
    q = np.eye(dim).reshape((dim, dim) + (1,) * dim) - eta ** 2 * np.einsum("i...,j...->ij...", nrm, nrm)
    return NormalExtension(dist, eta, nrm, q, d0)


def q_contract(q: np.ndarray, alpha: np.ndarray, beta: np.ndarray, rank: int) -> np.ndarray:
    """``Q(alpha, beta) = q^{i1 j1} ... q^{ir jr} alpha_I beta_J`` pointwise."""
    out = alpha
    for p in range(rank):
        out = np.moveaxis(np.einsum("ij...,i...->j...", q, np.moveaxis(out, p, 0)), 0, p)
    return np.sum(out * beta, axis=tuple(range(rank))) if rank else out * beta


# -- kinematic identities ------------------------------------------------------

def _kinematic_quantities(lmap: LagrangianMap):
    m = metric_from_map(lmap)
    b = boundary_geometry(lmap, m, check_intersection=False)
    return m, b


def kinematics_check(lmap: LagrangianMap, velocity: np.ndarray, dt: float) -> dict:
    """Residuals of the kinematic identities for the flow ``x(t) = x + t v``.

    Time derivatives are central differences between ``x - dt v`` and
    ``x + dt v``; the right-hand sides are evaluated at the centre.  The
    surface-element identity is checked in integrated form (the tangential
    divergence integrates to zero on the periodic boundary) and pointwise in
    its complete form ``D_t dmu_gamma = div_Gamma(v) dmu_gamma``.
    """
    grid = lmap.grid
    dim = grid.dim
    mp, bp = _kinematic_quantities(lmap.advance(velocity, dt))
    mm, bm = _kinematic_quantities(lmap.advance(velocity, -dt))
    m0, b0 = _kinematic_quantities(lmap)
    J = lmap.jacobian
    dv = np.array([[grid.diff(velocity[i], a) for a in range(dim)] for i in range(dim)])  # dv[i,a]

    def rel(a, b):
        return float(np.max(np.abs(a - b)))

    Dtg = (mp.g - mm.g) / (2 * dt)
    rhs_g = np.einsum("ia...,ib...->ab...", dv, J) + np.einsum("ia...,ib...->ab...", J, dv)
    Dtg_inv = (mp.g_inv - mm.g_inv) / (2 * dt)
    rhs_ginv = -np.einsum("ac...,bd...,cd...->ab...", m0.g_inv, m0.g_inv, rhs_g)
    DtN = (bp.conormal - bm.conormal) / (2 * dt)
    top = grid.top
    Nc = b0.conormal
    contr = np.einsum("cd...,c...,d...->...", top(rhs_ginv), Nc, Nc)
    rhs_N = -0.5 * Nc * contr
    Dtmu = (mp.sqrt_det - mm.sqrt_det) / (2 * dt)
    Jinv = lmap.inverse_jacobian
    divv = np.einsum("ai...,ia...->...", Jinv, dv)
    rhs_mu = divv * m0.sqrt_det
    Dtsurf = (bp.surface_element - bm.surface_element) / (2 * dt)
    vtop = top(velocity)
    vN = np.sum(vtop * b0.normal, axis=0)
    wts = grid.boundary_weights
    integrated_lhs = float(np.sum(wts * Dtsurf))
    integrated_rhs = float(np.sum(wts * b0.sigma * vN * b0.surface_element))
    # full pointwise form: tangential divergence of v on the surface
    P = np.eye(dim).reshape((dim, dim) + (1,) * (dim - 1)) - np.einsum("i...,j...->ij...", b0.normal, b0.normal)
    grad_v = np.einsum("ai...,ja...->ij...", top(Jinv), top(dv))      # grad_v[i, j] = d_i v^j
    div_gamma = np.einsum("ij...,ij...->...", P, grad_v)
    return {
        "dt": dt,
        "Dtg": rel(Dtg, rhs_g),
        "Dtg_inverse": rel(Dtg_inv, rhs_ginv),
        "DtN": rel(DtN, rhs_N),
        "dg": rel(Dtmu, rhs_mu),
        "T2": abs(integrated_lhs - integrated_rhs),
        "T2_pointwise": rel(Dtsurf, div_gamma * b0.surface_element),
    }


def kinematics_refinement(lmap: LagrangianMap, velocity: np.ndarray, dt: float, levels: int = 3) -> list[dict]:
    """Residual reports at ``dt, dt/2, ...`` (expected O(dt^2) decay)."""
    return [kinematics_check(lmap, velocity, dt / 2 ** i) for i in range(levels)]
