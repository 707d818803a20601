"""Eulerian operators through the Lagrangian map and the strip elliptic solver."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .geometry import BoundaryGeometry, LagrangianMap
from .mesh import Field, StripGrid, gradient


class SolverError(RuntimeError):
    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


def _inv_jac(lmap: LagrangianMap | None):
    return None if lmap is None else lmap.inverse_jacobian


def eulerian_derivative(f: Field, lmap: LagrangianMap | None = None, order: int = 1) -> Field:
    """``d f`` (rank + 1) or the symmetrized ``d^2 f`` (rank + 2) in Eulerian components."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    Jinv = _inv_jac(lmap)
    out = gradient(f.values, f.grid, Jinv)
    if order == 2:
        out = gradient(out, f.grid, Jinv)
        out = 0.5 * (out + np.swapaxes(out, 0, 1))
    return Field(f.grid, out, f.rank + order)


def div_curl(v: Field, lmap: LagrangianMap | None = None) -> tuple[Field, Field]:
    """``div v`` and ``curl_ij v = d_i v_j - d_j v_i``."""
    dv = gradient(v.values, v.grid, _inv_jac(lmap))      # dv[i, j] = d_i v^j
    div = np.einsum("ii...->...", dv)
    curl = dv - np.swapaxes(dv, 0, 1)
    return Field(v.grid, div), Field(v.grid, curl, 2)


class LaplaceOperator:
    """``Delta = delta^{ij} d_i d_j`` written in the reference coordinates.

    ``Delta u = g^{ab} d_a d_b u + c^b d_b u`` with ``g^{ab} = Jinv[a,i] Jinv[b,i]``
    and ``c^b = Jinv[a,i] d_a Jinv[b,i]``; pure second derivatives use the
    direct second-derivative stencils, so the flat case is exactly the
    operator inverted by the Fourier solver.

    ``form="divgrad"`` instead composes the first-derivative operators,
    ``Delta u = div(grad u)``, which is the Laplacian the Lagrangian stepper
    and the commutator engine see.
    """

    def __init__(self, grid: StripGrid, lmap: LagrangianMap | None = None, form: str = "direct"):
        if form not in ("direct", "divgrad"):
            raise ValueError(f"unknown Laplacian form {form!r}")
        self.grid = grid
        self.lmap = lmap
        self.form = form
        self.flat = lmap is None or not np.any(lmap.displacement)
        if form == "divgrad":
            self.Jinv = None if self.flat else lmap.inverse_jacobian
        elif not self.flat:
            Jinv = lmap.inverse_jacobian
            self.ginv = np.einsum("ai...,bi...->ab...", Jinv, Jinv)
            dJ = np.array([grid.diff(Jinv, a) for a in range(grid.dim)])   # dJ[c, b, i]
            self.c = np.einsum("ai...,abi...->b...", Jinv, dJ)
            self.Jinv = Jinv

    def __call__(self, u: np.ndarray) -> np.ndarray:
        g = self.grid
        if self.form == "divgrad":
            return np.einsum("ii...->...", gradient(gradient(u, g, self.Jinv), g, self.Jinv))
        if self.flat:
            return sum(g.diff(u, a, 2) for a in range(g.dim))
        out = np.zeros_like(u)
        first = [g.diff(u, a) for a in range(g.dim)]
        for a in range(g.dim):
            out += self.ginv[a, a] * g.diff(u, a, 2) + self.c[a] * first[a]
            for b in range(a + 1, g.dim):
                out += 2 * self.ginv[a, b] * g.diff(first[a], b)
        return out

    def dxn(self, u: np.ndarray) -> np.ndarray:
        """Eulerian vertical derivative ``d u / d x_n``."""
        g = self.grid
        if self.flat:
            return g.diff(u, g.dim - 1)
        return sum(self.Jinv[a, -1] * g.diff(u, a) for a in range(g.dim))


def laplacian(values: np.ndarray, grid: StripGrid, lmap: LagrangianMap | None = None,
              form: str = "direct") -> np.ndarray:
    return LaplaceOperator(grid, lmap, form)(values)


@dataclass
class EllipticProblem:
    """``Delta u = rhs`` with Dirichlet data on top and Dirichlet/Neumann data at the bottom.

    The Neumann condition prescribes ``d u/d x_n`` on the bottom wall.
    """

    rhs: Field
    top: np.ndarray | float = 0.0
    bottom_kind: Literal["dirichlet", "neumann"] = "dirichlet"
    bottom: np.ndarray | float = 0.0
    lmap: LagrangianMap | None = None
    tol: float = 1e-10
    max_iter: int = 400
    form: Literal["direct", "divgrad"] = "direct"

    def __post_init__(self):
        if self.form not in ("direct", "divgrad"):
            raise ValueError(f"unknown Laplacian form {self.form!r}")
        if self.bottom_kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown bottom condition {self.bottom_kind!r}")
        for name in ("top", "bottom"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} boundary data not finite")
        self.rhs.check_finite()


@functools.lru_cache(maxsize=16)
def _flat_inverses(grid: StripGrid, bottom_kind: str, form: str = "direct") -> np.ndarray:
    nv = grid.n_vertical
    D1 = grid.fd(1)
    D2 = grid.fd(2) if form == "direct" else D1 @ D1
    kr = np.fft.rfftfreq(grid.n_horizontal, 1.0 / grid.n_horizontal)
    k = grid.wavenumbers
    if form == "divgrad":
        # first derivatives drop the Nyquist mode
        nyq = grid.n_horizontal // 2
        kr = np.where(np.abs(kr) == nyq, 0.0, kr)
        k = np.where(np.abs(k) == nyq, 0.0, k)
    if grid.dim == 2:
        k2 = kr ** 2
    else:
        k2 = k[:, None] ** 2 + kr[None, :] ** 2
    A = np.broadcast_to(D2, k2.shape + (nv, nv)).copy()
    A -= k2[..., None, None] * np.eye(nv)
    A[..., -1, :] = 0.0
    A[..., -1, -1] = 1.0
    A[..., 0, :] = 0.0
    if bottom_kind == "dirichlet":
        A[..., 0, 0] = 1.0
    else:
        A[..., 0, :] = D1[0]
    return np.linalg.inv(A)


def _flat_solve(grid: StripGrid, rhs_rows: np.ndarray, bottom_kind: str, form: str = "direct") -> np.ndarray:
    """Solve with boundary rows already substituted into ``rhs_rows``."""
    inv = _flat_inverses(grid, bottom_kind, form)
    haxes = tuple(range(grid.dim - 1))
    fh = np.fft.rfftn(rhs_rows, axes=haxes) if grid.dim == 3 else np.fft.rfft(rhs_rows, axis=0)
    uh = np.einsum("...ij,...j->...i", inv, fh)
    if grid.dim == 2:
        return np.fft.irfft(uh, n=grid.n_horizontal, axis=0)
    return np.fft.irfftn(uh, s=(grid.n_horizontal, grid.n_horizontal), axes=haxes)


def _bc_rows(p: EllipticProblem) -> np.ndarray:
    b = np.array(p.rhs.values, dtype=float)
    b[..., -1] = p.top
    b[..., 0] = p.bottom
    return b


def elliptic_operator(p: EllipticProblem):
    """Matrix-free operator with the boundary rows replaced by the boundary conditions."""
    grid = p.rhs.grid
    L = LaplaceOperator(grid, p.lmap, p.form)

    def apply(u: np.ndarray) -> np.ndarray:
        out = L(u)
        out[..., -1] = u[..., -1]
        if p.bottom_kind == "dirichlet":
            out[..., 0] = u[..., 0]
        else:
            out[..., 0] = L.dxn(u)[..., 0]
        return out

    return apply, L


def solve_dirichlet(p: EllipticProblem) -> Field:
    grid = p.rhs.grid
    b = _bc_rows(p)
    apply, L = elliptic_operator(p)
    if L.flat:
        return Field(grid, _flat_solve(grid, b, p.bottom_kind, p.form))
    n = grid.size
    A = LinearOperator((n, n), matvec=lambda x: apply(x.reshape(grid.shape)).ravel(), dtype=float)
    M = LinearOperator((n, n), matvec=lambda x: _flat_solve(grid, x.reshape(grid.shape), p.bottom_kind,
                                                            p.form).ravel(), dtype=float)
    history: list[float] = []
    x0 = _flat_solve(grid, b, p.bottom_kind, p.form).ravel()
    bnorm = np.linalg.norm(b) or 1.0
    x, info = gmres(A, b.ravel(), x0=x0, M=M, rtol=p.tol, atol=0.0, restart=60, maxiter=p.max_iter,
                    callback=lambda r: history.append(float(r)), callback_type="pr_norm")
    res = np.linalg.norm(A @ x - b.ravel()) / bnorm
    if info != 0 or res > 100 * p.tol:
        raise SolverError(f"elliptic solve did not converge (relative residual {res:.2e})", history)
    return Field(grid, x.reshape(grid.shape))


def dense_operator_matrix(p: EllipticProblem) -> np.ndarray:
    """Dense matrix of the discrete operator (coarse grids; used as a direct-solve oracle)."""
    grid = p.rhs.grid
    apply, _ = elliptic_operator(p)
    n = grid.size
    cols = [apply(np.eye(1, n, j).reshape(grid.shape)).ravel() for j in range(n)]
    return np.array(cols).T


def solve_dense(p: EllipticProblem) -> Field:
    from scipy.linalg import lu_factor, lu_solve
    A = dense_operator_matrix(p)
    x = lu_solve(lu_factor(A), _bc_rows(p).ravel())
    return Field(p.rhs.grid, x.reshape(p.rhs.grid.shape))


# -- boundary utilities ---------------------------------------------------------

def volume_weights(grid: StripGrid, lmap: LagrangianMap | None = None) -> np.ndarray:
    w = grid.quad_weights
    return w if lmap is None else w * lmap.det


def bottom_normal_derivative(u: np.ndarray, grid: StripGrid, lmap: LagrangianMap | None = None) -> np.ndarray:
    """Outward normal derivative on the bottom wall (outward is ``-x_n``)."""
    return -LaplaceOperator(grid, lmap).dxn(u)[..., 0]


def top_normal_derivative(u: np.ndarray, grid: StripGrid, lmap: LagrangianMap, bgeom: BoundaryGeometry) -> np.ndarray:
    du = gradient(u, grid, lmap.inverse_jacobian)
    return np.sum(grid.top(du) * bgeom.normal, axis=0)


def green_residual(u: np.ndarray, phi: np.ndarray, grid: StripGrid, lmap: LagrangianMap,
                   bgeom: BoundaryGeometry) -> float:
    """``int (u Lap phi - phi Lap u) - oint (u d_N phi - phi d_N u)`` over top and bottom."""
    L = LaplaceOperator(grid, lmap)
    vol = np.sum(volume_weights(grid, lmap) * (u * L(phi) - phi * L(u)))
    wt = grid.boundary_weights * bgeom.surface_element
    top = np.sum(wt * (grid.top(u) * top_normal_derivative(phi, grid, lmap, bgeom)
                       - grid.top(phi) * top_normal_derivative(u, grid, lmap, bgeom)))
    # bottom wall stays flat: surface element is d x'/d y'
    J = lmap.jacobian
    wb = grid.boundary_weights * np.abs(grid.bottom(J[0, 0]) if grid.dim == 2 else
                                        np.linalg.det(np.moveaxis(grid.bottom(J[:2, :2]), (0, 1), (-2, -1))))
    bot = np.sum(wb * (grid.bottom(u) * bottom_normal_derivative(phi, grid, lmap)
                       - grid.bottom(phi) * bottom_normal_derivative(u, grid, lmap)))
    return float(vol - top - bot)


def projection_formula_residual(q: np.ndarray, grid: StripGrid, lmap: LagrangianMap,
                                bgeom: BoundaryGeometry) -> tuple[float, float]:
    """Max nodal mismatch of ``Pi d^2 q`` and ``theta d_N q`` on the top (for ``q = 0`` there).

    Returns the absolute residual and the size of ``theta d_N q`` for scaling.
    """
    H = gradient(gradient(q, grid, lmap.inverse_jacobian), grid, lmap.inverse_jacobian)
    H = grid.top(0.5 * (H + np.swapaxes(H, 0, 1)))
    P = bgeom_projector(bgeom)
    PHP = np.einsum("ik...,kl...,jl...->ij...", P, H, P)
    dNq = top_normal_derivative(q, grid, lmap, bgeom)
    rhs = bgeom.theta_euler * dNq
    return float(np.max(np.abs(PHP - rhs))), float(np.max(np.abs(rhs)))


def bgeom_projector(bgeom: BoundaryGeometry) -> np.ndarray:
    """Eulerian tangential projector ``delta_ij - N_i N_j`` on the top."""
    N = bgeom.normal
    dim = N.shape[0]
    return np.eye(dim).reshape((dim, dim) + (1,) * (N.ndim - 1)) - np.einsum("i...,j...->ij...", N, N)
