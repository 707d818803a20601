"""Symbolic commutators of material and spatial derivatives and the wave-equation sources.

Terms are exact rational multiples of products of factors.  Factors are

* ``("v", k, I, c)``  -- ``d_I D_t^k v^c``
* ``("h", k, I)``     -- ``d_I D_t^k h``
* ``("f", k, I)``     -- ``d_I D_t^k f`` for a generic scalar ``f``
* ``("g", c)``        -- component ``c`` of the unit vector ``e_n``
* ``("e", m, p)``     -- ``e^{(m)}(h) ** p``

Index labels are integers; a label occurring twice in a term is summed over.
Free labels are ``0, 1, ...``; summation labels are allocated from ``DUMMY0``.
With ``closure=True`` every ``D_t^k v`` (k >= 1) is eliminated through
``D_t v = -d h - e_n``; material derivatives of ``h`` are kept.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Literal

import numpy as np

MAX_ORDER = 6
DUMMY0 = 1000

Factor = tuple
Term = tuple  # (Fraction, tuple[Factor, ...])


class CommutatorError(ValueError):
    pass


class HistoryError(ValueError):
    pass


_fresh = itertools.count(10 ** 6)


def _new_label() -> int:
    return next(_fresh)


# -- factor helpers ------------------------------------------------------------------

def _labels(f: Factor) -> list[int]:
    kind = f[0]
    if kind == "v":
        return list(f[2]) + [f[3]]
    if kind in ("h", "f"):
        return list(f[2])
    if kind == "g":
        return [f[1]]
    return []


def _relabel_factor(f: Factor, m: dict[int, int]) -> Factor:
    kind = f[0]
    if kind == "v":
        return ("v", f[1], tuple(sorted(m.get(i, i) for i in f[2])), m.get(f[3], f[3]))
    if kind in ("h", "f"):
        return (kind, f[1], tuple(sorted(m.get(i, i) for i in f[2])))
    if kind == "g":
        return ("g", m.get(f[1], f[1]))
    return f


def _merge_eos(factors: Iterable[Factor]) -> tuple[list[Factor], bool]:
    """Combine ``e^{(m)}`` powers; report whether the term vanished (never)."""
    powers: dict[int, int] = defaultdict(int)
    rest = []
    for f in factors:
        if f[0] == "e":
            powers[f[1]] += f[2]
        else:
            rest.append(f)
    for m in sorted(powers):
        if powers[m]:
            rest.append(("e", m, powers[m]))
    return rest, False


def _fresh_dummies(factors: Iterable[Factor], free: set[int]) -> list[Factor]:
    """Rename summation labels to fresh ones (used when splicing templates)."""
    counts: dict[int, int] = defaultdict(int)
    factors = list(factors)
    for f in factors:
        for i in _labels(f):
            counts[i] += 1
    m = {i: _new_label() for i, c in counts.items() if c >= 2 and i not in free}
    return [_relabel_factor(f, m) for f in factors]


# -- canonical form ------------------------------------------------------------------

def _structure_key(f: Factor):
    kind = f[0]
    if kind == "v":
        return (0, f[1], len(f[2]))
    if kind == "h":
        return (1, f[1], len(f[2]))
    if kind == "f":
        return (2, f[1], len(f[2]))
    if kind == "g":
        return (3,)
    return (4, f[1], f[2])


def _sortable(f: Factor):
    return (_structure_key(f), tuple(_labels(f)))


@lru_cache(maxsize=200_000)
def canonical(factors: tuple) -> tuple:
    """Canonical representative under renaming of summation labels and factor order."""
    counts: dict[int, int] = defaultdict(int)
    for f in factors:
        for i in _labels(f):
            counts[i] += 1
    dummies = sorted(i for i, c in counts.items() if c >= 2)
    if not dummies:
        return tuple(sorted(factors, key=_sortable))
    best = None
    names = [DUMMY0 + j for j in range(len(dummies))]
    if len(dummies) > 7:
        raise CommutatorError("too many summation indices for canonicalization")
    for perm in itertools.permutations(names):
        m = dict(zip(dummies, perm))
        cand = tuple(sorted((_relabel_factor(f, m) for f in factors), key=_sortable))
        key = tuple(_sortable(f) for f in cand)
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1]


def collect(terms: Iterable[Term]) -> list[Term]:
    acc: dict[tuple, Fraction] = defaultdict(Fraction)
    for c, fs in terms:
        if c == 0:
            continue
        merged, _ = _merge_eos(fs)
        acc[canonical(tuple(merged))] += c
    return [(c, fs) for fs, c in sorted(acc.items(), key=lambda kv: _term_sort_key(kv[0])) if c != 0]


def _term_sort_key(fs):
    return (len(fs), tuple(_sortable(f) for f in fs))


# -- differentiation ---------------------------------------------------------------------

@dataclass(frozen=True)
class Rules:
    closure: bool = False


def _mul(c: Fraction, before: tuple, expansion: list[Term], after: tuple) -> list[Term]:
    return [(c * ce, before + fs + after) for ce, fs in expansion]


def d_factor(f: Factor, i: int, rules: Rules) -> list[Term]:
    kind = f[0]
    if kind == "v":
        return _v_factor(f[1], f[2] + (i,), f[3], rules)
    if kind in ("h", "f"):
        return [(Fraction(1), ((kind, f[1], tuple(sorted(f[2] + (i,)))),))]
    if kind == "g":
        return []
    m, p = f[1], f[2]
    fs = [("e", m + 1, 1), ("h", 0, (i,))]
    if p != 1:
        fs.insert(0, ("e", m, p - 1))
    return [(Fraction(p), tuple(fs))]


def d_term(term: Term, i: int, rules: Rules) -> list[Term]:
    c, fs = term
    out: list[Term] = []
    for j, f in enumerate(fs):
        out += _mul(c, fs[:j], d_factor(f, i, rules), fs[j + 1:])
    return out


def d_terms(terms: list[Term], i: int, rules: Rules) -> list[Term]:
    out: list[Term] = []
    for t in terms:
        out += d_term(t, i, rules)
    return out


def dt_factor(f: Factor, rules: Rules) -> list[Term]:
    kind = f[0]
    if kind == "g":
        return []
    if kind == "e":
        m, p = f[1], f[2]
        fs = [("e", m + 1, 1), ("h", 1, ())]
        if p != 1:
            fs.insert(0, ("e", m, p - 1))
        return [(Fraction(p), tuple(fs))]
    idx = f[2]
    if not idx:
        if kind == "v":
            return _v_factor(f[1] + 1, (), f[3], rules)
        return [(Fraction(1), ((kind, f[1] + 1, ()),))]
    # D_t d_i X = d_i D_t X - (d_i v^j) d_j X
    i, rest = idx[0], idx[1:]
    inner = (kind, f[1], rest, f[3]) if kind == "v" else (kind, f[1], rest)
    out = d_terms(dt_factor(inner, rules), i, rules)
    j = _new_label()
    shifted = (kind, f[1], tuple(sorted(rest + (j,))), f[3]) if kind == "v" else \
        (kind, f[1], tuple(sorted(rest + (j,))))
    for ce, fs in _v_factor(0, (i,), j, rules):
        out.append((-ce, fs + (shifted,)))
    return out


def dt_term(term: Term, rules: Rules) -> list[Term]:
    c, fs = term
    out: list[Term] = []
    for j, f in enumerate(fs):
        out += _mul(c, fs[:j], dt_factor(f, rules), fs[j + 1:])
    return out


def dt_terms(terms: list[Term], rules: Rules) -> list[Term]:
    out: list[Term] = []
    for t in terms:
        out += dt_term(t, rules)
    return collect(out)


@lru_cache(maxsize=None)
def _v_template(k: int, n: int) -> tuple:
    """``d_{0..n-1} D_t^k v^{n}`` with ``D_t v`` eliminated (labels 0..n free)."""
    rules = Rules(closure=True)
    comp = n
    terms: list[Term] = [(Fraction(-1), (("h", 0, (comp,)),))]
    if n == 0 and k == 1:
        terms.append((Fraction(-1), (("g", comp),)))
    for _ in range(k - 1):
        terms = dt_terms(terms, rules)
    for i in range(n):
        terms = collect(d_terms(terms, i, rules))
    return tuple(terms)


def _v_factor(k: int, idx: tuple, comp: int, rules: Rules) -> list[Term]:
    if k == 0 or not rules.closure:
        return [(Fraction(1), (("v", k, tuple(sorted(idx)), comp),))]
    n = len(idx)
    m = {a: lab for a, lab in enumerate(idx)}
    m[n] = comp
    free = set(range(n + 1))
    out = []
    for c, fs in _v_template(k, n):
        fs = _fresh_dummies(fs, free)
        out.append((c, tuple(_relabel_factor(f, m) for f in fs)))
    return out


# -- public expansion API ------------------------------------------------------------------

Identity = Literal["Dt_partial_r", "partial_Dtk", "laplacian_Dt"]


@dataclass(frozen=True)
class ExpansionTerm:
    """Summary of a term: coefficient, factor symbols ``(field, a, b)`` and contraction.

    ``a`` counts spatial derivatives and ``b`` material derivatives.  The bare
    operator slot in commutator identities is reported as field ``"."``.
    ``indexed`` keeps the exact index-level form.
    """

    coefficient: Fraction
    factors: tuple
    contraction: Literal["symmetric-dot", "trace-dot"]
    indexed: tuple = field(default=(), compare=False)

    def __str__(self) -> str:
        return f"{self.coefficient} * " + " ".join(f"(d^{a} Dt^{b} {fld})" for fld, a, b in self.factors)


def _summary(term: Term, free: int) -> ExpansionTerm:
    c, fs = term
    syms = []
    for f in fs:
        if f[0] in ("v", "h"):
            syms.append((f[0], len(f[2]), f[1]))
        elif f[0] == "f":
            syms.append((".", len(f[2]), f[1]))
        elif f[0] == "e":
            syms.append((f"e{f[1]}^{f[2]}", 0, 0))
        else:
            syms.append(("g", 0, 0))
    return ExpansionTerm(c, tuple(syms), "symmetric-dot" if free else "trace-dot", (term,))


def _check_order(order: int):
    if order < 1:
        raise CommutatorError("order must be positive")
    if order > MAX_ORDER:
        raise CommutatorError(f"order {order} above cap {MAX_ORDER}")


def dt_partial_closed_form(r: int) -> list[ExpansionTerm]:
    """``[D_t, d^r] = sum_s -C(r, s+1) (d^{1+s} v) ~. d^{r-s}``."""
    _check_order(r)
    return [ExpansionTerm(Fraction(-math.comb(r, s + 1)), (("v", 1 + s, 0), (".", r - s, 0)), "symmetric-dot")
            for s in range(r)]


def symmetric_dot_indexed(r: int) -> list[Term]:
    """Index-level form of the closed-form expansion, symmetrized over the free labels."""
    out: list[Term] = []
    for s in range(r):
        c = Fraction(-math.comb(r, s + 1), math.factorial(r))
        for perm in itertools.permutations(range(r)):
            k = _new_label()
            vf = ("v", 0, tuple(sorted(perm[:1 + s])), k)
            ff = ("f", 0, tuple(sorted((k,) + perm[1 + s:])))
            out.append((c, (vf, ff)))
    return collect(out)


def commutator_indexed(identity: Identity, order: int, closure: bool = False) -> list[Term]:
    """Raw engine expansion of a commutator acting on the generic scalar ``f``."""
    _check_order(order)
    rules = Rules(closure)
    if identity == "Dt_partial_r":
        base = [(Fraction(1), (("f", 0, tuple(range(order))),))]
        lhs = dt_terms(base, rules)
        return collect(lhs + [(Fraction(-1), (("f", 1, tuple(range(order))),))])
    if identity == "partial_Dtk":
        terms = [(Fraction(1), (("f", 0, (0,)),))]
        for _ in range(order):
            terms = dt_terms(terms, rules)
        return collect([(Fraction(1), (("f", order, (0,)),))] + [(-c, fs) for c, fs in terms])
    if identity == "laplacian_Dt":
        j = DUMMY0
        terms = [(Fraction(1), (("f", 0, (j, j)),))]
        for _ in range(order):
            terms = dt_terms(terms, rules)
        return collect([(Fraction(1), (("f", order, (j, j)),))] + [(-c, fs) for c, fs in terms])
    raise CommutatorError(f"unknown identity {identity!r}")


def expand(identity: Identity, order: int) -> list[ExpansionTerm]:
    if identity == "Dt_partial_r":
        return dt_partial_closed_form(order)
    free = 1 if identity == "partial_Dtk" else 0
    return [_summary(t, free) for t in commutator_indexed(identity, order)]


def symmetrize(terms: list[Term], nfree: int) -> list[Term]:
    out: list[Term] = []
    scale = Fraction(1, math.factorial(nfree))
    for perm in itertools.permutations(range(nfree)):
        m = dict(enumerate(perm))
        for c, fs in terms:
            out.append((c * scale, tuple(_relabel_factor(f, m) for f in fs)))
    return collect(out)


def format_term(term: Term) -> str:
    c, fs = term
    names = {}

    def lab(i):
        if i < DUMMY0:
            return f"i{i}"
        if i not in names:
            names[i] = f"j{len(names)}"
        return names[i]

    parts = []
    for f in fs:
        kind = f[0]
        if kind in ("v", "h", "f"):
            d = "".join(f"d_{lab(i)} " for i in f[2])
            dt = f"Dt^{f[1]} " if f[1] else ""
            comp = f"^{lab(f[3])}" if kind == "v" else ""
            parts.append(f"({d}{dt}{kind}{comp})".replace(" )", ")"))
        elif kind == "g":
            parts.append(f"(e_n^{lab(f[1])})")
        else:
            parts.append(f"e{f[1]}^{f[2]}" if f[2] != 1 else f"e{f[1]}")
    return f"{c} * " + " ".join(parts)


def format_terms(terms: list[Term]) -> str:
    return "\n".join(format_term(t) for t in terms)


# -- wave-equation sources ----------------------------------------------------------------

def _transpose_product() -> list[Term]:
    a, b = DUMMY0, DUMMY0 + 1
    return [(Fraction(1), (("v", 0, (a,), b), ("v", 0, (b,), a)))]


@lru_cache(maxsize=None)
def dt_h_terms(k: int) -> tuple:
    """``D_t^k h`` in terms of ``d^a v`` and ``d^b D_t^g h`` with ``g < k`` (``k >= 2``).

    Starts from ``D_t h = -(div v) / e'(h)``.
    """
    if k < 1:
        raise CommutatorError("k must be at least 1")
    j = DUMMY0
    terms = [(Fraction(-1), (("v", 0, (j,), j), ("e", 1, -1)))]
    rules = Rules(closure=True)
    for _ in range(k - 1):
        terms = dt_terms(terms, rules)
    return tuple(terms)


@lru_cache(maxsize=None)
def dt_v_terms(k: int) -> tuple:
    """``D_t^k v^0`` with the closure applied (free component label 0)."""
    if k == 0:
        return ((Fraction(1), (("v", 0, (), 0),)),)
    return tuple(collect(_v_factor(k, (), 0, Rules(closure=True))))


@lru_cache(maxsize=None)
def f_terms(r: int, closure: bool = True) -> tuple:
    """``f_r = D_t^{r-1}((d_i v^j)(d_j v^i)) + [D_t^{r-1}, Delta] h``."""
    _check_order(r)
    rules = Rules(closure)
    a = _transpose_product()
    j = DUMMY0 + 5
    lap = [(Fraction(1), (("h", 0, (j, j)),))]
    for _ in range(r - 1):
        a = dt_terms(a, rules)
        lap = dt_terms(lap, rules)
    return tuple(collect(a + lap + [(Fraction(-1), (("h", r - 1, (j, j)),))]))


@lru_cache(maxsize=None)
def g_terms(r: int) -> tuple:
    """``g_r = e'(h) D_t^{r+1} h - D_t^{r+1} e(h)`` (Faa di Bruno remainder)."""
    _check_order(r)
    terms = [(Fraction(1), (("e", 0, 1),))]
    rules = Rules(closure=True)
    for _ in range(r + 1):
        terms = dt_terms(terms, rules)
    return tuple(collect([(Fraction(1), (("e", 1, 1), ("h", r + 1, ())))] + [(-c, fs) for c, fs in terms]))


# -- structural invariants ----------------------------------------------------------------

def derivative_weight(fs: tuple) -> int:
    """Total number of spatial plus material derivatives over ``v``/``h`` factors."""
    return sum(len(f[2]) + f[1] for f in fs if f[0] in ("v", "h", "f"))


def check_f_structure(r: int, terms: Iterable[Term] | None = None) -> list[str]:
    """Violations of the derivative counting and the high-order caps for ``f_r``."""
    terms = f_terms(r) if terms is None else terms
    problems = []
    for c, fs in terms:
        w = derivative_weight(fs)
        if w != r + 1:
            problems.append(f"weight {w} != {r + 1}: {format_term((c, fs))}")
        vs = [len(f[2]) for f in fs if f[0] == "v"]
        hs = [(len(f[2]), f[1]) for f in fs if f[0] == "h"]
        if any(f[0] == "v" and f[1] > 0 for f in fs):
            problems.append(f"material derivative of v left: {format_term((c, fs))}")
        if any(a < 1 for a in vs) or any(b + g < 1 for b, g in hs):
            problems.append(f"underived factor: {format_term((c, fs))}")
        if r >= 6:
            if any(a > r - 2 for a in vs) or any(b + g > r for b, g in hs):
                problems.append(f"cap exceeded: {format_term((c, fs))}")
            high = sum(a == r - 2 for a in vs) + sum(b + g >= r - 2 for b, g in hs)
            if high > 1:
                problems.append(f"two top-order factors: {format_term((c, fs))}")
            if any(b + g >= r - 1 and g < 1 for b, g in hs):
                problems.append(f"top-order h factor without D_t: {format_term((c, fs))}")
    return problems


def check_g_structure(r: int, terms: Iterable[Term] | None = None) -> list[str]:
    terms = g_terms(r) if terms is None else terms
    problems = []
    for c, fs in terms:
        eos = [f for f in fs if f[0] == "e"]
        hs = [f for f in fs if f[0] == "h"]
        if len(eos) != 1 or eos[0][2] != 1:
            problems.append(f"not a single e^(m) factor: {format_term((c, fs))}")
            continue
        m = eos[0][1]
        orders = sorted(f[1] for f in hs)
        if any(f[2] for f in hs):
            problems.append(f"spatial derivative in g term: {format_term((c, fs))}")
        if len(orders) != m or sum(orders) != r + 1 or not 2 <= m <= r + 1:
            problems.append(f"bad index set {orders} for m={m}")
        if orders and (orders[0] < 1 or orders[-1] > r):
            problems.append(f"material order out of range: {orders}")
    return problems


# -- numerical evaluation --------------------------------------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


class FieldProvider:
    """Supplies arrays for factors; subclasses define the underlying fields."""

    def __init__(self, grid, inv_jac=None):
        self.grid = grid
        self.inv_jac = inv_jac
        self._cache: dict = {}

    def base(self, kind: str, k: int) -> np.ndarray:
        raise NotImplementedError

    def eos_factor(self, m: int, p: int) -> np.ndarray:
        raise NotImplementedError

    def tensor(self, kind: str, k: int, nderiv: int) -> np.ndarray:
        from .mesh import gradient
        key = (kind, k, nderiv)
        if key not in self._cache:
            if nderiv == 0:
                self._cache[key] = self.base(kind, k)
            else:
                self._cache[key] = gradient(self.tensor(kind, k, nderiv - 1), self.grid, self.inv_jac)
        return self._cache[key]

    def array(self, f: Factor) -> np.ndarray:
        kind = f[0]
        if kind in ("v", "h", "f"):
            return self.tensor(kind, f[1], len(f[2]))
        if kind == "g":
            dim = self.grid.dim
            return np.eye(dim)[dim - 1].reshape((dim,) + (1,) * dim) * np.ones(self.grid.shape)
        return self.eos_factor(f[1], f[2])


def evaluate_terms(terms: Iterable[Term], provider: FieldProvider, nfree: int = 0) -> np.ndarray:
    grid = provider.grid
    out = np.zeros((grid.dim,) * nfree + grid.shape)
    for c, fs in terms:
        letters: dict[int, str] = {}

        def L(i):
            if i not in letters:
                letters[i] = _LETTERS[len(letters)]
            return letters[i]

        for i in range(nfree):
            L(i)
        subs, ops = [], []
        for f in fs:
            labs = _labels(f)
            subs.append("".join(L(i) for i in labs) + "...")
            ops.append(provider.array(f))
        spec = ",".join(subs) + "->" + "".join(L(i) for i in range(nfree)) + "..."
        out = out + float(c) * np.einsum(spec, *ops, optimize=True) if ops else out + float(c)
    return out


class MaterialState(FieldProvider):
    """``(v, h)`` at one time with material derivatives rebuilt from the closure."""

    def __init__(self, grid, v: np.ndarray, h: np.ndarray, eos, inv_jac=None, max_depth: int = MAX_ORDER + 2):
        super().__init__(grid, inv_jac)
        self.v = np.asarray(v, float)
        self.h = np.asarray(h, float)
        self.eos = eos
        self.max_depth = max_depth

    def base(self, kind: str, k: int) -> np.ndarray:
        if k > self.max_depth:
            raise HistoryError(f"material derivative order {k} exceeds history depth {self.max_depth}")
        if kind == "h":
            if k == 0:
                return self.h
            return evaluate_terms(dt_h_terms(k), self)
        if kind == "v":
            if k == 0:
                return self.v
            return evaluate_terms(dt_v_terms(k), self, nfree=1)
        raise HistoryError(f"no field {kind!r} in a material state")

    def eos_factor(self, m: int, p: int) -> np.ndarray:
        return self.eos.de(self.h, m) ** p

    def dt_h(self, k: int) -> np.ndarray:
        return self.tensor("h", k, 0)

    def dt_v(self, k: int) -> np.ndarray:
        return self.tensor("v", k, 0)


@dataclass
class SourceAssembly:
    r: int
    f: np.ndarray
    g: np.ndarray
    f_norm: float
    g_norm: float
    f_norm_weighted: float
    g_norm_weighted: float
    terms_f: tuple
    terms_g: tuple


def assemble_sources(r: int, state: MaterialState, lmap=None, weight=None) -> SourceAssembly:
    from .mesh import WeightSpec
    grid = state.grid
    if r + 1 > state.max_depth:
        raise HistoryError(f"sources of order {r} need history depth {r + 1}")
    ft, gt = f_terms(r), g_terms(r)
    f = evaluate_terms(ft, state)
    g = evaluate_terms(gt, state)
    w = grid.quad_weights * (lmap.det if lmap is not None else 1.0)
    x = lmap.positions if lmap is not None else grid.coords
    ww = w * (weight or WeightSpec())(x)
    return SourceAssembly(r, f, g, float(np.sqrt(np.sum(w * f * f))), float(np.sqrt(np.sum(w * g * g))),
                          float(np.sqrt(np.sum(ww * f * f))), float(np.sqrt(np.sum(ww * g * g))), ft, gt)


def wave_residual(r: int, state: MaterialState) -> np.ndarray:
    """``e'(h) D_t^{r+1} h - Delta D_t^{r-1} h - f_r - g_r`` evaluated numerically."""
    src = assemble_sources(r, state)
    lap = np.einsum("ii...->...", state.tensor("h", r - 1, 2))
    return state.eos.de(state.h, 1) * state.dt_h(r + 1) - lap - src.f - src.g


# -- finite-difference oracle ----------------------------------------------------------------

class AnalyticFlow:
    """Flow map ``x = Phi(t, y)`` and a scalar ``F(t, y)`` given as sympy expressions.

    In Lagrangian coordinates ``D_t`` is ``d/dt`` at fixed ``y``, so ``D_t^k v``
    and ``D_t^k f`` are exact time derivatives of the expressions.
    """

    def __init__(self, grid, phi, f, t, ys):
        import sympy as sp
        self.grid = grid
        self.t = t
        self._phi = [sp.lambdify((t, *ys), e, "numpy") for e in phi]
        self._dphi = {k: [sp.lambdify((t, *ys), sp.diff(e, t, k), "numpy") for e in phi] for k in range(1, 6)}
        self._df = {k: sp.lambdify((t, *ys), sp.diff(f, t, k), "numpy") for k in range(0, 6)}

    def _eval(self, fn, tv):
        y = self.grid.coords
        return np.broadcast_to(np.asarray(fn(tv, *y), float), self.grid.shape).copy()

    def lmap(self, tv):
        from .geometry import LagrangianMap
        x = np.array([self._eval(fn, tv) for fn in self._phi])
        return LagrangianMap.from_positions(self.grid, x)

    def dt_v(self, tv, k):
        return np.array([self._eval(fn, tv) for fn in self._dphi[k + 1]])

    def dt_f(self, tv, k):
        return self._eval(self._df[k], tv)


class _FlowProvider(FieldProvider):
    def __init__(self, flow: AnalyticFlow, tv: float):
        super().__init__(flow.grid, flow.lmap(tv).inverse_jacobian)
        self.flow, self.tv = flow, tv

    def base(self, kind, k):
        return self.flow.dt_v(self.tv, k) if kind == "v" else self.flow.dt_f(self.tv, k)


def _spatial(identity: str, order: int, arr: np.ndarray, grid, inv_jac) -> np.ndarray:
    from .mesh import gradient
    if identity == "laplacian_Dt":
        return np.einsum("ii...->...", gradient(gradient(arr, grid, inv_jac), grid, inv_jac))
    n = order if identity == "Dt_partial_r" else 1
    for _ in range(n):
        arr = gradient(arr, grid, inv_jac)
    return arr


def _time_stencil(k: int):
    from .mesh import fd_weights
    p = (k + 1) // 2
    nodes = np.arange(-p, p + 1, dtype=float)
    return nodes, fd_weights(0.0, nodes, k)[:, k]


def commutator_lhs(identity: str, order: int, flow: AnalyticFlow, t0: float, dt: float) -> np.ndarray:
    """Commutator applied to ``f`` with material derivatives taken by time differencing."""
    grid = flow.grid
    k = 1 if identity == "Dt_partial_r" else order
    nodes, w = _time_stencil(k)
    acc = 0.0
    for s, wk in zip(nodes, w):
        tv = t0 + s * dt
        acc = acc + wk / dt ** k * _spatial(identity, order, flow.dt_f(tv, 0), grid, flow.lmap(tv).inverse_jacobian)
    inv0 = flow.lmap(t0).inverse_jacobian
    outer = _spatial(identity, order, flow.dt_f(t0, k), grid, inv0)
    if identity == "Dt_partial_r":
        return acc - outer               # D_t d^r f - d^r D_t f
    return outer - acc                   # d D_t^k f - D_t^k d f (and the Laplacian analogue)


@dataclass
class VerificationReport:
    identity: str
    order: int
    dts: list
    residuals: list
    richardson_ratios: list


def verify_expansion(identity: Identity, order: int, flow: AnalyticFlow, t0: float = 0.3,
                     dt: float = 0.02, levels: int = 4, terms: list[Term] | None = None) -> VerificationReport:
    """Compare the engine expansion with the time-differenced commutator.

    ``residual(dt) = A + B dt^2`` where ``A`` is the (dt-independent) spatial
    error; successive differences of residuals should shrink by 4 per halving.
    """
    if terms is None:
        terms = symmetric_dot_indexed(order) if identity == "Dt_partial_r" else commutator_indexed(identity, order)
    nfree = order if identity == "Dt_partial_r" else (1 if identity == "partial_Dtk" else 0)
    rhs = evaluate_terms(terms, _FlowProvider(flow, t0), nfree=nfree)
    dts, res, fields = [], [], []
    for lvl in range(levels):
        h = dt / 2 ** lvl
        diff = commutator_lhs(identity, order, flow, t0, h) - rhs
        dts.append(h)
        res.append(float(np.max(np.abs(diff))))
        fields.append(diff)
    incs = [float(np.max(np.abs(fields[i] - fields[i + 1]))) for i in range(levels - 1)]
    ratios = [incs[i] / incs[i + 1] if incs[i + 1] > 0 else float("inf") for i in range(len(incs) - 1)]
    return VerificationReport(identity, order, dts, res, ratios)


def random_flow(grid, seed: int = 0, amplitude: float = 0.08) -> AnalyticFlow:
    """Random band-limited smooth flow map and scalar for oracle checks."""
    import sympy as sp
    rng = np.random.default_rng(seed)
    t = sp.Symbol("t")
    ys = sp.symbols(" ".join(f"y{a + 1}" for a in range(grid.dim)))
    depth_factor = (ys[-1] + grid.depth) / grid.depth
    phi = []
    for a in range(grid.dim):
        disp = 0
        for _ in range(2):
            k = [int(rng.integers(1, 3)) for _ in range(grid.dim - 1)]
            arg = sum(kk * y for kk, y in zip(k, ys[:-1])) + float(rng.uniform(0, 6.28))
            disp += float(rng.normal()) * sp.sin(arg + float(rng.uniform(0.5, 1.5)) * t) * depth_factor
        phi.append(ys[a] + amplitude * disp)
    f = 0
    for _ in range(3):
        k = [int(rng.integers(1, 3)) for _ in range(grid.dim - 1)]
        arg = sum(kk * y for kk, y in zip(k, ys[:-1])) + float(rng.uniform(0, 6.28))
        f += float(rng.normal()) * sp.cos(arg - float(rng.uniform(0.5, 1.5)) * t) * sp.exp(float(rng.uniform(0, 1)) * ys[-1])
    return AnalyticFlow(grid, phi, f, t, ys)
