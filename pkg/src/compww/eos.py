"""Barotropic equation-of-state family parametrized by the sound speed kappa."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np


class EOSError(ValueError):
    pass


@dataclass(frozen=True)
class EquationOfState:
    """``e(h) = log rho(h)`` with ``h(rho) = int_1^rho p'(l)/l dl`` and ``p'(1) = kappa``.

    ``kind='linear'`` gives ``e = h/kappa``; ``kind='gamma-law'`` gives
    ``p = kappa (rho^gamma - 1)/gamma``.
    """

    kind: Literal["linear", "gamma-law"]
    kappa: float
    gamma: float = 2.0
    h_range: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        if self.kind not in ("linear", "gamma-law"):
            raise EOSError(f"unknown EOS kind {self.kind!r}")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise EOSError("kappa must be positive")
        if self.kind == "gamma-law" and not self.gamma > 1:
            raise EOSError("gamma must exceed 1")
        lo, hi = self.h_range
        if not lo < hi:
            raise EOSError("h_range must be an increasing interval")

    # -- enthalpy side ---------------------------------------------------
    def _base(self, h):
        """``1 + (gamma-1) h / kappa``, guarded to stay positive."""
        b = 1.0 + (self.gamma - 1.0) * np.asarray(h, float) / self.kappa
        if np.any(b <= 0):
            raise EOSError("h outside admissible range: 1 + (gamma-1) h/kappa <= 0")
        return b

    def e(self, h):
        if self.kind == "linear":
            return np.asarray(h, float) / self.kappa
        return np.log(self._base(h)) / (self.gamma - 1.0)

    def de(self, h, k: int = 1):
        """``k``-th derivative ``e^{(k)}(h)``."""
        if k == 0:
            return self.e(h)
        h = np.asarray(h, float)
        if self.kind == "linear":
            return np.full_like(h, 1.0 / self.kappa) if k == 1 else np.zeros_like(h)
        gm = self.gamma - 1.0
        denom = self.kappa * self._base(h)
        return (-1) ** (k - 1) * math.factorial(k - 1) * gm ** (k - 1) / denom ** k

    def rho(self, h):
        return np.exp(self.e(h))

    def p(self, rho):
        rho = np.asarray(rho, float)
        if self.kind == "linear":
            return self.kappa * (rho - 1.0)
        return self.kappa * (rho ** self.gamma - 1.0) / self.gamma

    def dp(self, rho):
        rho = np.asarray(rho, float)
        if self.kind == "linear":
            return np.full_like(rho, self.kappa)
        return self.kappa * rho ** (self.gamma - 1.0)

    def Q(self, rho):
        """``Q(rho) = int_1^rho p(l) l^-2 dl``."""
        rho = np.asarray(rho, float)
        if self.kind == "linear":
            return self.kappa * (np.log(rho) + 1.0 / rho - 1.0)
        gm = self.gamma - 1.0
        return self.kappa / self.gamma * ((rho ** gm - 1.0) / gm + 1.0 / rho - 1.0)


def make_eos(kind: str = "linear", kappa: float = 100.0, gamma: float | None = None,
             h_range: tuple[float, float] | None = None) -> EquationOfState:
    kwargs = {}
    if gamma is not None:
        kwargs["gamma"] = float(gamma)
    if h_range is not None:
        kwargs["h_range"] = (float(h_range[0]), float(h_range[1]))
    elif kind == "gamma-law" and kwargs.get("gamma", 2.0) > 1:
        # shrink the default range to where the density stays positive
        floor = -0.99 * float(kappa) / (kwargs.get("gamma", 2.0) - 1.0)
        kwargs["h_range"] = (max(-2.0, floor), 2.0)
    eos = EquationOfState(kind, float(kappa), **kwargs)
    if eos.kind == "gamma-law":
        eos._base(np.array(eos.h_range))
    return eos


@dataclass(frozen=True)
class StructuralReport:
    ratio_to_de: list[float]       # sup |e^(k)| / |e'|
    ratio_to_de_power: list[float] # sup |e^(k)| / |e'|^k
    sup_abs: list[float]           # sup |e^(k)|
    c0: float
    passed: bool


def verify_structural_conditions(eos: EquationOfState, h_range=None, r: int = 3,
                                 c0: float | None = None, samples: int = 10_000) -> StructuralReport:
    """Sample ``|e^(k)|`` for ``k <= r+1`` on the range and compare with ``c0``.

    Without an explicit ``c0`` the constant is taken as 1.1 times the largest
    measured ratio (``|e^(k)|/|e'|^k`` and ``|e^(k)|``).
    """
    lo, hi = h_range if h_range is not None else eos.h_range
    h = np.linspace(lo, hi, samples)
    d1 = np.abs(eos.de(h, 1))
    ratio, ratio_pow, sup = [], [], []
    for k in range(1, r + 2):
        dk = np.abs(eos.de(h, k))
        ratio.append(float(np.max(dk / d1)))
        ratio_pow.append(float(np.max(dk / d1 ** k)))
        sup.append(float(np.max(dk)))
    measured = max(max(ratio_pow), max(sup))
    if c0 is None:
        c0 = 1.1 * measured
    passed = all(x <= c0 for x in ratio_pow) and all(x <= c0 for x in sup)
    return StructuralReport(ratio, ratio_pow, sup, float(c0), bool(passed))
