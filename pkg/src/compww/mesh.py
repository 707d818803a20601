"""Reference strip discretization, field storage, quadrature and norms.

The reference domain is the horizontally periodic strip
``[0, 2*pi)^(dim-1) x [-depth, 0]``.  Horizontal directions are handled with
Fourier collocation, the vertical direction with uniform nodes and
fourth-order finite differences (one-sided at the two boundaries).  The last
array axis is always vertical; index ``0`` is the bottom, ``-1`` the top
(image of the free surface).

Field values are stored as ``(dim,)*rank + grid.shape`` arrays.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np

MAX_SOBOLEV_ORDER = 6

Region = Literal["interior", "top"]


class GridError(ValueError):
    pass


class NonFiniteFieldError(ValueError):
    """Raised when a field carries NaN/inf samples."""

    def __init__(self, index: tuple[int, ...]):
        super().__init__(f"non-finite value at node {index}")
        self.index = index


def fd_weights(z: float, x: np.ndarray, m: int) -> np.ndarray:
    """Fornberg's finite difference weights.

    Returns ``c`` of shape ``(len(x), m+1)`` with ``c[:, k]`` the weights of the
    k-th derivative at ``z`` on the nodes ``x``.
    """
    n = len(x)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def fd_matrix(nodes: np.ndarray, order: int, accuracy: int = 4) -> np.ndarray:
    """Dense differentiation matrix for the ``order``-th derivative.

    Centered stencils in the interior, shifted one-sided stencils near the
    ends (widened to keep the requested accuracy).
    """
    n = len(nodes)
    centered = 2 * ((order + 1) // 2) - 1 + accuracy
    one_sided = order + accuracy
    D = np.zeros((n, n))
    for i in range(n):
        half = centered // 2
        lo, hi = i - half, i + half + 1
        if lo < 0 or hi > n:
            width = min(one_sided, n)
            lo = 0 if lo < 0 else n - width
            hi = lo + width
        D[i, lo:hi] = fd_weights(nodes[i], nodes[lo:hi], order)[:, order]
    return D


def _vertical_weights(n: int, h: float) -> np.ndarray:
    if n >= 8:
        w = np.ones(n)
        w[:4] = w[-4:][::-1] = [3 / 8, 7 / 6, 23 / 24, 1.0]
        return w * h
    # closed Newton-Cotes on few nodes
    t = np.arange(n, dtype=float)
    V = np.vander(t, increasing=True).T
    moments = np.array([(n - 1) ** (k + 1) / (k + 1) for k in range(n)])
    return np.linalg.solve(V, moments) * h


@dataclass(frozen=True)
class StripGrid:
    """Horizontally periodic strip of given depth.

    ``n_horizontal`` nodes per horizontal direction on ``[0, 2*pi)`` and
    ``n_vertical`` nodes on ``[-depth, 0]`` (both ends included).
    """

    n_horizontal: int = 64
    n_vertical: int = 32
    depth: float = 1.0
    dim: int = 2
    fd_accuracy: int = 4

    def __post_init__(self):
        if self.n_horizontal < 8 or self.n_horizontal % 2:
            raise GridError("n_horizontal must be even and >= 8")
        if self.n_vertical < 4:
            raise GridError("n_vertical must be >= 4")
        if not self.depth > 0:
            raise GridError("depth must be positive")
        if self.dim not in (2, 3):
            raise GridError("dim must be 2 or 3")
        if self.fd_accuracy not in (2, 4, 6, 8):
            raise GridError("fd_accuracy must be 2, 4, 6 or 8")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_horizontal,) * (self.dim - 1) + (self.n_vertical,)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dy_horizontal(self) -> float:
        return 2 * np.pi / self.n_horizontal

    @property
    def dy_vertical(self) -> float:
        return self.depth / (self.n_vertical - 1)

    @property
    def min_spacing(self) -> float:
        return min(self.dy_horizontal, self.dy_vertical)

    @cached_property
    def y_horizontal(self) -> np.ndarray:
        return np.arange(self.n_horizontal) * self.dy_horizontal

    @cached_property
    def y_vertical(self) -> np.ndarray:
        return np.linspace(-self.depth, 0.0, self.n_vertical)

    @cached_property
    def coords(self) -> np.ndarray:
        """Reference coordinates, shape ``(dim,) + shape``."""
        axes = [self.y_horizontal] * (self.dim - 1) + [self.y_vertical]
        return np.array(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return np.fft.fftfreq(self.n_horizontal, 1.0 / self.n_horizontal)

    @cached_property
    def quad_weights(self) -> np.ndarray:
        wv = _vertical_weights(self.n_vertical, self.dy_vertical)
        wh = np.full(self.n_horizontal, self.dy_horizontal)
        w = wv
        for _ in range(self.dim - 1):
            w = np.multiply.outer(wh, w)
        return w

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        w = np.ones(self.shape[:-1])
        return w * self.dy_horizontal ** (self.dim - 1)

    def volume(self) -> float:
        return (2 * np.pi) ** (self.dim - 1) * self.depth

    def fd(self, order: int) -> np.ndarray:
        return _fd_cache(self.n_vertical, self.depth, order, self.fd_accuracy)

    def diff(self, values: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
        """Derivative of order ``order`` along reference axis ``axis``.

        ``axis`` counts from the first grid axis; leading component axes of
        ``values`` are carried along.
        """
        if order == 0:
            return values
        lead = values.ndim - self.dim
        ax = lead + axis
        if axis < self.dim - 1:
            k = self.wavenumbers
            mult = (1j * k) ** order
            if order % 2:
                mult = mult.copy()
                mult[self.n_horizontal // 2] = 0.0
            shape = [1] * values.ndim
            shape[ax] = -1
            out = np.fft.ifft(np.fft.fft(values, axis=ax) * mult.reshape(shape), axis=ax)
            return out.real
        D = self.fd(order)
        return np.moveaxis(np.tensordot(D, values, axes=([1], [ax])), 0, ax)

    def top(self, values: np.ndarray) -> np.ndarray:
        return values[..., -1]

    def bottom(self, values: np.ndarray) -> np.ndarray:
        return values[..., 0]


_FD_CACHE: dict = {}


def _fd_cache(n: int, depth: float, order: int, accuracy: int = 4) -> np.ndarray:
    key = (n, depth, order, accuracy)
    if key not in _FD_CACHE:
        _FD_CACHE[key] = fd_matrix(np.linspace(-depth, 0.0, n), order, accuracy)
    return _FD_CACHE[key]


@dataclass(frozen=True)
class Field:
    """Samples of a rank-0/1/2 tensor field on a grid (immutable snapshot)."""

    grid: StripGrid
    values: np.ndarray
    rank: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = (self.grid.dim,) * self.rank + self.grid.shape
        if vals.shape != expected:
            raise GridError(f"field shape {vals.shape} != expected {expected}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def scalar(cls, grid: StripGrid, values) -> "Field":
        return cls(grid, np.broadcast_to(np.asarray(values, float), grid.shape).copy(), 0)

    @classmethod
    def zeros(cls, grid: StripGrid, rank: int = 0) -> "Field":
        return cls(grid, np.zeros((grid.dim,) * rank + grid.shape), rank)

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.values)
        if bad.any():
            raise NonFiniteFieldError(tuple(int(i) for i in np.argwhere(bad)[0]))

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + other.values, self.rank)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - other.values, self.rank)

    def __mul__(self, c: float) -> "Field":
        return Field(self.grid, self.values * c, self.rank)

    __rmul__ = __mul__


@dataclass(frozen=True)
class WeightSpec:
    """Polynomial weight ``w(x) = (1 + |x|^2)^mu`` evaluated at Eulerian x."""

    mu: float = 2.0

    def __post_init__(self):
        if self.mu < 2:
            raise ValueError("weight exponent mu must be >= 2")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (1.0 + np.sum(x * x, axis=0)) ** self.mu


def integrate(f: Field | np.ndarray, grid: StripGrid | None = None,
              region: Region = "interior", measure: np.ndarray | None = None) -> float:
    """Quadrature of a scalar field over the interior or the top boundary.

    ``measure`` is the geometric density (``sqrt(det g)`` in the interior,
    surface element on the top); ``None`` means the flat metric.
    """
    if isinstance(f, Field):
        grid, vals = f.grid, f.values
        if f.rank != 0:
            raise GridError("integrate expects a scalar field")
    else:
        vals = np.asarray(f, float)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise NonFiniteFieldError(tuple(int(i) for i in np.argwhere(bad)[0]))
    if region == "interior":
        if vals.shape != grid.shape:
            raise GridError("interior integrand must live on the full grid")
        w = grid.quad_weights
    elif region == "top":
        if vals.shape == grid.shape:
            vals = grid.top(vals)
        w = grid.boundary_weights
    else:
        raise GridError(f"unknown region {region!r}")
    if measure is not None:
        w = w * (grid.top(measure) if region == "top" and measure.shape == grid.shape else measure)
    return float(np.sum(w * vals))


def restrict_to_boundary(f: Field) -> np.ndarray:
    """Values of a rank-0/1 field at the top-boundary nodes."""
    if f.rank > 1:
        raise GridError("restrict_to_boundary supports rank 0 and 1")
    return f.grid.top(f.values).copy()


def gradient(values: np.ndarray, grid: StripGrid, inv_jac: np.ndarray | None = None) -> np.ndarray:
    """Eulerian gradient; new index goes first: ``out[i, ...] = d_i values[...]``.

    ``inv_jac[a, i] = dy^a/dx^i``; ``None`` means the identity map.
    """
    ref = np.array([grid.diff(values, a) for a in range(grid.dim)])
    if inv_jac is None:
        return ref
    lead = values.ndim - grid.dim
    sl = (slice(None), slice(None)) + (None,) * lead + (Ellipsis,)
    return np.einsum("ai...,a...->i...", inv_jac[sl], ref)


def derivative_tensors(values: np.ndarray, grid: StripGrid, order: int,
                       inv_jac: np.ndarray | None = None) -> list[np.ndarray]:
    """``[f, grad f, grad^2 f, ...]`` up to ``order`` (repeated chain rule)."""
    out = [values]
    for _ in range(order):
        out.append(gradient(out[-1], grid, inv_jac))
    return out


Space = Literal["L2", "H", "L2w", "Hw", "bL2", "bL2w"]


def norm(f: Field, space: Space = "L2", s: int = 0, weight: WeightSpec | None = None,
         inv_jac: np.ndarray | None = None, positions: np.ndarray | None = None,
         measure: np.ndarray | None = None, surface_measure: np.ndarray | None = None) -> float:
    """L2 / H^s / weighted / boundary norms of a field.

    The H^s norm is ``sqrt(sum_{j<=s} ||grad^j f||^2)`` with full tensor
    contraction.  Weighted variants multiply the density by ``w(x)``;
    ``positions`` (Eulerian, shape ``(dim,)+grid.shape``) default to the
    reference coordinates.
    """
    grid = f.grid
    f.check_finite()
    if space in ("H", "Hw"):
        if s > MAX_SOBOLEV_ORDER:
            raise GridError(f"Sobolev order {s} exceeds supported maximum {MAX_SOBOLEV_ORDER}")
        if s > grid.n_vertical - 2:
            raise GridError(f"Sobolev order {s} too large for {grid.n_vertical} vertical nodes")
    elif s != 0:
        raise GridError(f"space {space} takes no derivative order")
    weighted = space.endswith("w")
    if weighted:
        weight = weight or WeightSpec()
        x = grid.coords if positions is None else positions
        wv = weight(x)
    else:
        wv = 1.0
    if space in ("bL2", "bL2w"):
        sq = np.sum(grid.top(f.values) ** 2, axis=tuple(range(f.rank)))
        dens = grid.top(wv) if weighted else 1.0
        meas = None if surface_measure is None else surface_measure
        return math.sqrt(max(integrate(sq * dens, grid, "top", meas), 0.0))
    total = 0.0
    for d in derivative_tensors(f.values, grid, s, inv_jac):
        sq = np.sum(d ** 2, axis=tuple(range(d.ndim - grid.dim)))
        total += integrate(sq * wv, grid, "interior", measure)
    return math.sqrt(max(total, 0.0))


# -- serialization -----------------------------------------------------------

_BYTE_ORDER = "<f8"


def save_field(f: Field, path, fmt: Literal["csv", "bin"] = "csv") -> None:
    """Write a field as CSV (header + one row per node) or flat little-endian binary.

    Header: ``# rank=<r> dim=<d> shape=<n1>x<n2>[x<n3>] depth=<h> order=row-major``.
    Components are row-major over the tensor indices; nodes row-major over
    grid axes (vertical fastest).
    """
    g = f.grid
    header = (f"rank={f.rank} dim={g.dim} shape={'x'.join(map(str, g.shape))} "
              f"depth={g.depth!r} accuracy={g.fd_accuracy} order=row-major")
    flat = f.values.reshape(g.dim ** f.rank, -1).T
    if fmt == "csv":
        buf = io.StringIO()
        np.savetxt(buf, flat, delimiter=",", fmt="%.17g", header=header)
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    elif fmt == "bin":
        hb = header.encode()
        with open(path, "wb") as fh:
            fh.write(len(hb).to_bytes(4, "little"))
            fh.write(hb)
            fh.write(np.ascontiguousarray(f.values, dtype=_BYTE_ORDER).tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _parse_header(text: str) -> tuple[StripGrid, int]:
    kv = dict(tok.split("=", 1) for tok in text.strip().lstrip("#").split())
    shape = tuple(int(s) for s in kv["shape"].split("x"))
    dim = int(kv["dim"])
    grid = StripGrid(shape[0], shape[-1], float(kv["depth"]), dim, int(kv.get("accuracy", 4)))
    return grid, int(kv["rank"])


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        head = fh.read(1)
    if head == b"#":
        with open(path) as fh:
            grid, rank = _parse_header(fh.readline())
        flat = np.loadtxt(path, delimiter=",", ndmin=2)
        vals = flat.T.reshape((grid.dim,) * rank + grid.shape)
        return Field(grid, vals, rank)
    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(4), "little")
        grid, rank = _parse_header(fh.read(n).decode())
        vals = np.frombuffer(fh.read(), dtype=_BYTE_ORDER)
    return Field(grid, vals.reshape((grid.dim,) * rank + grid.shape).copy(), rank)
