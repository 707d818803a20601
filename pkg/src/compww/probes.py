"""Empirical probes of the functional inequalities used by the energy estimates.

Each probe evaluates both sides of an inequality on random sample fields and
reports the worst ratio LHS/RHS.  All ratios are homogeneous of degree zero in
the sample field, so they measure the geometry-dependent constant directly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from .geometry import (BoundaryGeometry, LagrangianMap, NormalExtension, boundary_geometry,
                       q_form)
from .mesh import StripGrid, WeightSpec, gradient

ProbeKind = Literal["hodge", "elliptic_I", "elliptic_II", "tensor", "theta", "trace", "poincare",
                    "interior_sobolev", "boundary_interpolation", "gagliardo_nirenberg"]
PROBE_KINDS: tuple[str, ...] = ("hodge", "elliptic_I", "elliptic_II", "tensor", "theta", "trace",
                                "poincare", "interior_sobolev", "boundary_interpolation",
                                "gagliardo_nirenberg")

# Calibrated on the flat and 10%-perturbed 64x32 strips (1000 samples, seed 0),
# rounded up with a safety factor of about 1.5.  The pointwise Hodge ratio in
# 2-D is bounded algebraically by the golden ratio (attained on the boundary).
DEFAULT_CONSTANTS: dict[str, float] = {
    "hodge": 1.7,
    "elliptic_I": 3.0,
    "elliptic_II": 2.0,
    "tensor": 1.5,
    "theta": 1.5,
    "trace": 1.5,
    "poincare": 1.0,
    "interior_sobolev": 1.5,
    "boundary_interpolation": 1.5,
    "gagliardo_nirenberg": 1.5,
}


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeReport:
    kind: str
    weighted: bool
    samples: int
    worst_ratio: float
    constant_estimate: float
    constant: float
    passed: bool
    seed: int
    scale_invariance_error: float
    explicit_constant: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def perturbed_map(grid: StripGrid, amplitude: float = 0.1) -> LagrangianMap:
    """Smooth deformation of relative size ``amplitude`` that keeps the bottom flat."""
    y = grid.coords
    s = (y[-1] + grid.depth) / grid.depth          # 0 at the bottom, 1 on top
    disp = np.zeros_like(y)
    if grid.dim == 2:
        disp[0] = 0.5 * amplitude * np.sin(y[0]) * s
        disp[1] = amplitude * np.cos(y[0]) * s
    else:
        disp[0] = 0.5 * amplitude * np.sin(y[0]) * s
        disp[1] = 0.5 * amplitude * np.sin(y[1]) * s
        disp[2] = amplitude * np.cos(y[0]) * np.cos(y[1]) * s
    return LagrangianMap(grid, disp)


# -- sample fields ----------------------------------------------------------------

def sample_field(grid: StripGrid, rng: np.random.Generator) -> np.ndarray:
    """Random band-limited trigonometric polynomial or a periodic Gaussian bump."""
    y = grid.coords
    t = 2 * (y[-1] + grid.depth) / grid.depth - 1          # [-1, 1] vertically
    if rng.random() < 0.5:
        kmax = 4
        out = np.zeros(grid.shape)
        for _ in range(6):
            ks = rng.integers(-kmax, kmax + 1, size=grid.dim - 1)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(k * y[a] for a, k in enumerate(ks)) + phase
            cheb = np.polynomial.chebyshev.chebval(t, rng.normal(size=4) / (1 + np.arange(4)) ** 2)
            out += rng.normal() * np.cos(arg) * cheb
        return out
    centre = rng.uniform(0, 2 * np.pi, size=grid.dim - 1)
    width = rng.uniform(0.4, 1.0)
    zc = rng.uniform(-grid.depth, 0)
    r2 = sum(2 * (1 - np.cos(y[a] - centre[a])) for a in range(grid.dim - 1)) + (y[-1] - zc) ** 2
    return rng.normal() * np.exp(-r2 / (2 * width ** 2))


# -- geometry context -----------------------------------------------------------------

class ProbeContext:
    """Precomputed geometry for evaluating probe norms on one strip."""

    def __init__(self, lmap: LagrangianMap, weight: WeightSpec | None = None):
        self.lmap = lmap
        self.grid = g = lmap.grid
        self.bgeom: BoundaryGeometry = boundary_geometry(lmap)
        self.ext: NormalExtension = q_form(lmap, self.bgeom)
        self.Jinv = lmap.inverse_jacobian
        x = lmap.positions
        w = weight(x) if weight is not None else np.ones(g.shape)
        self.vol = g.quad_weights * lmap.det * w
        self.bdy = g.boundary_weights * self.bgeom.surface_element * g.top(w)
        self.height = float(np.max(g.top(x[-1])) - np.min(g.bottom(x[-1])))
        self.K = max(self.bgeom.K_monitor, 1.0 / g.depth)
        N = self.bgeom.normal
        dim = g.dim
        self.P = np.eye(dim).reshape((dim, dim) + (1,) * (dim - 1)) - np.einsum("i...,j...->ij...", N, N)
        # surface calculus in the horizontal reference parameters
        nh = dim - 1
        T = g.top(lmap.jacobian)[:, :nh]
        self.I = np.einsum("ia...,ib...->ab...", T, T)
        self.Iinv = np.moveaxis(np.linalg.inv(np.moveaxis(self.I, (0, 1), (-2, -1))), (-2, -1), (0, 1))
        dI = np.array([self.sdiff(self.I, c) for c in range(nh)])          # dI[c, a, b]
        self.Gamma = self._christoffel(dI)
        theta = self.bgeom.theta_euler
        self.theta_par = np.einsum("ia...,jb...,ij...->ab...", T, T, theta)
        self.grad_theta_norm = self._cov_norm3(self.theta_par)

    # boundary spectral derivative along parameter axis ``c``
    def sdiff(self, arr: np.ndarray, c: int) -> np.ndarray:
        return self.grid.diff(arr[..., None], c)[..., 0]

    def _christoffel(self, dI):
        # Gamma^g_ab = 1/2 I^{gd} (d_a I_db + d_b I_da - d_d I_ab)
        t = (np.einsum("adb...->dab...", dI) + np.einsum("bda...->dab...", dI)
             - np.einsum("dab...->dab...", dI))
        return 0.5 * np.einsum("gd...,dab...->gab...", self.Iinv, t)

    def _cov_norm3(self, A: np.ndarray) -> np.ndarray:
        """Pointwise norm of the surface covariant derivative of a symmetric 2-tensor."""
        nh = self.grid.dim - 1
        dA = np.array([self.sdiff(A, c) for c in range(nh)])       # dA[c, a, b]
        cov = (dA - np.einsum("dca...,db...->cab...", self.Gamma, A)
               - np.einsum("dcb...,ad...->cab...", self.Gamma, A))
        Ii = self.Iinv
        return np.sqrt(np.abs(np.einsum("cf...,ag...,bh...,cab...,fgh...->...", Ii, Ii, Ii, cov, cov)))

    def surface_grad_norms(self, u_top: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise ``|nabla-bar u|`` and ``|nabla-bar^2 u|`` for a scalar on the top."""
        nh = self.grid.dim - 1
        du = np.array([self.sdiff(u_top, a) for a in range(nh)])
        ddu = np.array([[self.sdiff(du[a], b) for b in range(nh)] for a in range(nh)])
        H = ddu - np.einsum("gab...,g...->ab...", self.Gamma, du)
        g1 = np.sqrt(np.abs(np.einsum("ab...,a...,b...->...", self.Iinv, du, du)))
        g2 = np.sqrt(np.abs(np.einsum("ac...,bd...,ab...,cd...->...", self.Iinv, self.Iinv, H, H)))
        return g1, g2

    # norms
    def nv(self, pointwise_sq: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.vol * pointwise_sq)))

    def nb(self, pointwise_sq: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.bdy * pointwise_sq)))

    def derivs(self, u: np.ndarray, order: int) -> list[np.ndarray]:
        out = [u]
        for _ in range(order):
            out.append(gradient(out[-1], self.grid, self.Jinv))
        return out

    def project(self, T: np.ndarray) -> np.ndarray:
        """Tangential projection of every index of an Eulerian tensor on the top."""
        r = T.ndim - (self.grid.dim - 1)
        out = T
        for p in range(r):
            out = np.moveaxis(np.einsum("ij...,j...->i...", self.P, np.moveaxis(out, p, 0)), 0, p)
        return out


def _sq(T: np.ndarray, rank: int) -> np.ndarray:
    return np.sum(T * T, axis=tuple(range(rank))) if rank else T * T


# -- individual probes: return (lhs, rhs) -------------------------------------------

def _probe_pair(kind: str, ctx: ProbeContext, u: np.ndarray, u2: np.ndarray | None, weighted: bool):
    g = ctx.grid
    top = g.top
    if kind == "hodge":
        vec = np.array([u, u2] + ([np.roll(u, 3, axis=0)] if g.dim == 3 else []))
        dv = gradient(vec, g, ctx.Jinv)                        # dv[k, i] = d_k v^i
        lhs_pt = _sq(dv, 2)
        div = np.einsum("ii...->...", dv)
        curl = dv - np.swapaxes(dv, 0, 1)
        q = ctx.ext.q
        tang = np.einsum("kl...,ki...,li...->...", q, dv, dv)
        if not weighted:
            rhs_pt = tang + div ** 2 + _sq(curl, 2)
            mask = rhs_pt > 1e-14 * rhs_pt.max()
            i = np.argmax(np.where(mask, lhs_pt / np.where(mask, rhs_pt, 1.0), 0.0))
            return np.sqrt(lhs_pt.ravel()[i]), np.sqrt(rhs_pt.ravel()[i])
        N = ctx.ext.normal
        ndv = np.einsum("i...,ki...->k...", N, dv)
        rhs_pt = _sq(ndv, 1) + div ** 2 + _sq(curl, 2) + ctx.K ** 2 * _sq(vec, 1)
        return ctx.nv(lhs_pt), ctx.nv(rhs_pt)
    if kind == "poincare":
        d = ctx.derivs(u, 1)
        return ctx.nv(u * u), ctx.nv(_sq(d[1], 1))
    if kind == "trace":
        d = ctx.derivs(u, 1)
        return ctx.nb(top(u) ** 2), ctx.nv(u * u) + ctx.nv(_sq(d[1], 1))
    if kind == "interior_sobolev":
        d = ctx.derivs(u, 2)
        return float(np.max(np.abs(u))), sum(ctx.nv(_sq(d[l], l)) for l in range(3))
    if kind in ("elliptic_I", "elliptic_II"):
        d = ctx.derivs(u, 2)
        lap = np.einsum("ii...->...", d[2])
        dlap = gradient(lap, g, ctx.Jinv)
        pis = [ctx.nb(top(u) ** 2)] + [ctx.nb(_sq(ctx.project(top(d[s])), s)) for s in (1, 2)]
        grad = ctx.nv(_sq(d[1], 1))
        if kind == "elliptic_I":
            lhs = ctx.nb(_sq(top(d[2]), 2))
            if weighted:
                lhs += ctx.nv(_sq(d[2], 2))
            return lhs, sum(pis) + ctx.nv(lap ** 2) + ctx.nv(_sq(dlap, 1)) + grad
        lhs = ctx.nv(_sq(d[2], 2))
        if weighted:
            lhs += ctx.nb(_sq(top(d[1]), 1))
        return lhs, sum(pis) + ctx.nv(lap ** 2) + grad
    if kind in ("tensor", "theta"):
        d = ctx.derivs(u, 3)
        dN = np.sum(top(d[1]) * ctx.bgeom.normal, axis=0)
        pi3 = ctx.nb(_sq(ctx.project(top(d[3])), 3))
        lower = ctx.nb(_sq(top(d[2]), 2)) + ctx.nb(_sq(top(d[1]), 1))
        if kind == "tensor":
            return pi3, ctx.nb((ctx.grad_theta_norm * dN) ** 2) + lower
        eps = float(np.min(-dN))
        if eps <= 0:
            raise ProbeError("sign condition violated by theta-probe sample")
        return eps * ctx.nb(ctx.grad_theta_norm ** 2), pi3 + lower
    if kind in ("boundary_interpolation", "gagliardo_nirenberg"):
        ut = top(u)
        g1, g2 = ctx.surface_grad_norms(ut)
        l2 = ctx.nb(ut ** 2)
        if kind == "boundary_interpolation":
            top_norm = ctx.nb(g2 ** 2)
            if weighted:
                top_norm += l2 + ctx.nb(g1 ** 2)
            return ctx.nb(g1 ** 2), np.sqrt(l2 * top_norm)
        l4 = float(np.sum(ctx.bdy * ut ** 4)) ** 0.25
        return l4 ** 2, l2 * np.sqrt(l2 ** 2 + ctx.nb(g1 ** 2) ** 2)
    raise ProbeError(f"unknown probe kind {kind!r}")


def _prepare_sample(kind: str, grid: StripGrid, rng: np.random.Generator):
    u = sample_field(grid, rng)
    u2 = sample_field(grid, rng) if kind == "hodge" else None
    yn = grid.coords[-1]
    if kind in ("poincare", "tensor"):
        u = yn * u                                    # vanishes on top
    elif kind == "theta":
        # positive interior enthalpy-like field with -d_N h > 0 on top
        u = -yn * (1.0 + 0.5 * np.tanh(u / (np.max(np.abs(u)) + 1e-300)))
    return u, u2


def inequality_probe(kind: str, lmap: LagrangianMap | None = None, weighted: bool = False,
                     samples: int = 1000, seed: int = 0, constant: float | None = None,
                     weight: WeightSpec | None = None, grid: StripGrid | None = None,
                     min_samples: int = 1, context: ProbeContext | None = None) -> ProbeReport:
    if kind not in PROBE_KINDS:
        raise ProbeError(f"unknown probe kind {kind!r}")
    if samples < min_samples:
        raise ProbeError(f"sample count {samples} below configured minimum {min_samples}")
    if context is None:
        if lmap is None:
            lmap = LagrangianMap.identity(grid or StripGrid())
        context = ProbeContext(lmap, (weight or WeightSpec()) if weighted else None)
    ctx = context
    if not np.isfinite(ctx.bgeom.K_monitor):
        raise ProbeError("degenerate geometry: K monitor not finite")
    rng = np.random.default_rng(seed)
    worst, scale_err = 0.0, 0.0
    for _ in range(samples):
        u, u2 = _prepare_sample(kind, ctx.grid, rng)
        lhs, rhs = _probe_pair(kind, ctx, u, u2, weighted)
        if rhs <= 0:
            continue
        ratio = lhs / rhs
        l10, r10 = _probe_pair(kind, ctx, 10 * u, None if u2 is None else 10 * u2, weighted)
        if ratio > 0:
            scale_err = max(scale_err, abs(l10 / r10 - ratio) / ratio)
        worst = max(worst, ratio)
    explicit = None
    if constant is None:
        constant = DEFAULT_CONSTANTS[kind]
    if kind == "poincare":
        explicit = ctx.height
        constant = min(constant * ctx.height, ctx.height)
    return ProbeReport(kind, weighted, samples, float(worst), float(worst), float(constant),
                       bool(worst <= constant), seed, float(scale_err), explicit)
