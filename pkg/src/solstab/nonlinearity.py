"""User-pluggable nonlinearity beta(s) with derivatives and H1/H2 checks.

Built-in families (all real on s >= 0, derivatives analytic):

* ``power``          beta(s) = s^q, integer q >= 1 (q = 1 is the cubic NLS and
                     deliberately violates the flatness condition beta'(0) = 0)
* ``cubic_quintic``  beta(s) = s - gamma s^2
* ``quintic_septic`` beta(s) = s^2 - gamma s^3
* ``saturable``      beta(s) = s^2 / (1 + sigma s)

A generic callable can be wrapped as well; its derivatives fall back to
central finite differences with order-dependent steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class DerivativeOrderError(ValueError):
    """Requested derivative order exceeds what the evaluator supports."""


@dataclass
class Nonlinearity:
    name: str
    params: dict
    evaluator: Callable[[np.ndarray, int], np.ndarray]
    max_order: int = 12
    analytic: bool = True

    def __call__(self, s, j: int = 0):
        return self.eval(s, j)

    def eval(self, s, j: int = 0):
        if j > self.max_order:
            raise DerivativeOrderError(
                f"derivative order {j} exceeds max_order {self.max_order}")
        s = np.asarray(s, dtype=float)
        out = self.evaluator(s, j)
        return out if out.shape else float(out)

    def antiderivative(self, s):
        """G(s) = int_0^s beta(sigma) dsigma, used by the energy functional."""
        s = np.asarray(s, dtype=float)
        out = _antiderivative(self.name, self.params, s, self.evaluator)
        return out if out.shape else float(out)

    def is_zero(self) -> bool:
        return self.name == "zero"


def beta_eval(nl: Nonlinearity, s, j: int = 0):
    """beta^{(j)}(s); thin functional wrapper around Nonlinearity.eval."""
    return nl.eval(s, j)


def _poly_eval(coeffs: dict, s: np.ndarray, j: int) -> np.ndarray:
    # coeffs: {power: coefficient}; derivative shifts powers down
    out = np.zeros_like(s)
    for p, c in coeffs.items():
        if p >= j:
            out += c * math.perm(p, j) * s ** (p - j)
    return out


def _saturable_eval(sigma: float, s: np.ndarray, j: int) -> np.ndarray:
    # s^2/(1+sigma*s) = (1/sigma^2) [ (1+sigma*s) - 2 + (1+sigma*s)^-1 ]
    u = 1.0 + sigma * s
    if j == 0:
        return s**2 / u
    if j == 1:
        return (1.0 / sigma) * (1.0 - u**-2)
    return (1.0 / sigma**2) * (-sigma) ** j * math.factorial(j) * u ** (-(j + 1))


def _sqrt_saturable_eval(sigma: float, s: np.ndarray, j: int) -> np.ndarray:
    """Derivatives of s^2 (1+sigma s)^(-1/2) by the product rule.

    Quintic-like at small amplitude, effective growth exponent p = 4 at large
    amplitude (subcritical), smooth on s >= 0.
    """
    u = 1.0 + sigma * s
    out = np.zeros_like(np.asarray(s, dtype=float))
    # d^a s^2 * d^(j-a) u^(-1/2), a = 0..min(2, j)
    for a in range(min(2, j) + 1):
        b = j - a
        s_part = {0: s**2, 1: 2.0 * s, 2: 2.0 * np.ones_like(s)}[a]
        # d^b u^(-1/2) = (-1/2)(-3/2)...(-1/2-b+1) sigma^b u^(-1/2-b)
        coeff = 1.0
        for i in range(b):
            coeff *= (-0.5 - i) * sigma
        out = out + math.comb(j, a) * s_part * coeff * u ** (-0.5 - b)
    return out


def _fd_step(j: int, scale: float) -> float:
    # balances truncation against roundoff amplification eps/h^j
    return max(np.finfo(float).eps ** (1.0 / (j + 2)), 1e-7) * max(1.0, scale)


def _finite_difference(fun: Callable, s: np.ndarray, j: int) -> np.ndarray:
    if j == 0:
        return np.asarray(fun(s), dtype=float)
    h = _fd_step(j, float(np.max(np.abs(s))) if s.size else 1.0)
    # central differences, recursively
    lo = _finite_difference(fun, s - h, j - 1)
    hi = _finite_difference(fun, s + h, j - 1)
    return (hi - lo) / (2.0 * h)


def _antiderivative(name, params, s, evaluator):
    if name == "power":
        q = params["q"]
        return s ** (q + 1) / (q + 1)
    if name == "cubic_quintic":
        g = params["gamma"]
        return s**2 / 2 - g * s**3 / 3
    if name == "quintic_septic":
        g = params["gamma"]
        return s**3 / 3 - g * s**4 / 4
    if name == "saturable":
        sig = params["sigma"]
        u = 1.0 + sig * s
        # int s'^2/(1+sig s') = (1/sig^3)[u^2/2 - 2u + log u] from u(0)=1
        return (u**2 / 2 - 2 * u + np.log(u) - (0.5 - 2.0)) / sig**3
    if name == "sqrt_saturable":
        sig = params["sigma"]
        u = 1.0 + sig * s
        return ((2.0 / 5.0) * u**2.5 - (4.0 / 3.0) * u**1.5 + 2.0 * np.sqrt(u)
                - 16.0 / 15.0) / sig**3
    if name == "poly":
        out = np.zeros_like(s)
        for k, c in params["coeffs"].items():
            out += c * s ** (k + 1) / (k + 1)
        return out
    if name == "zero":
        return np.zeros_like(s)
    # generic: composite trapezoid on [0, s] per sample
    out = np.zeros_like(s)
    flat = np.atleast_1d(s)
    res = np.zeros_like(flat)
    for i, si in enumerate(flat):
        m = 257
        xs = np.linspace(0.0, si, m)
        res[i] = np.trapezoid(evaluator(xs, 0), xs)
    out = res.reshape(s.shape)
    return out


def make_nonlinearity(name: str, **params) -> Nonlinearity:
    """Construct a built-in nonlinearity by name, or wrap func=callable."""
    if name == "zero":
        return Nonlinearity("zero", {}, lambda s, j: np.zeros_like(s), max_order=64)
    if name == "power":
        q = int(params.get("q", 1))
        if q < 1:
            raise ValueError("power family needs integer q >= 1")
        return Nonlinearity("power", {"q": q},
                            lambda s, j, q=q: _poly_eval({q: 1.0}, s, j), max_order=64)
    if name == "cubic_quintic":
        g = float(params.get("gamma", 0.2))
        return Nonlinearity("cubic_quintic", {"gamma": g},
                            lambda s, j, g=g: _poly_eval({1: 1.0, 2: -g}, s, j), max_order=64)
    if name == "quintic_septic":
        g = float(params.get("gamma", 0.1))
        return Nonlinearity("quintic_septic", {"gamma": g},
                            lambda s, j, g=g: _poly_eval({2: 1.0, 3: -g}, s, j), max_order=64)
    if name == "saturable":
        sig = float(params.get("sigma", 1.0))
        if sig <= 0:
            raise ValueError("saturable family needs sigma > 0")
        return Nonlinearity("saturable", {"sigma": sig},
                            lambda s, j, sig=sig: _saturable_eval(sig, s, j), max_order=64)
    if name == "sqrt_saturable":
        sig = float(params.get("sigma", 1.0))
        if sig <= 0:
            raise ValueError("sqrt_saturable family needs sigma > 0")
        return Nonlinearity("sqrt_saturable", {"sigma": sig},
                            lambda s, j, sig=sig: _sqrt_saturable_eval(sig, s, j),
                            max_order=64)
    if name == "poly":
        coeffs = {int(k): float(v) for k, v in dict(params.get("coeffs", {})).items()}
        if not coeffs or min(coeffs) < 1:
            raise ValueError("poly family needs integer powers >= 1")
        return Nonlinearity("poly", {"coeffs": coeffs},
                            lambda s, j, c=coeffs: _poly_eval(c, s, j), max_order=64)
    if name == "custom":
        fun = params["func"]
        max_order = int(params.get("max_order", 8))
        return Nonlinearity("custom", {k: v for k, v in params.items() if k != "func"},
                            lambda s, j, fun=fun: _finite_difference(fun, s, j),
                            max_order=max_order, analytic=False)
    raise ValueError(f"unknown nonlinearity {name!r}")


@dataclass
class H1H2Verdict:
    beta0: float
    dbeta0: float
    h1_pass: bool
    fitted_exponents: dict            # {k: fitted slope of |d^k/dv^k beta(v^2)|}
    h2_pass: bool
    p: float

    @property
    def passed(self) -> bool:
        return self.h1_pass and self.h2_pass

    def as_dict(self) -> dict:
        return {
            "beta0": self.beta0, "dbeta0": self.dbeta0, "h1_pass": self.h1_pass,
            "fitted_exponents": {str(k): v for k, v in self.fitted_exponents.items()},
            "h2_pass": self.h2_pass, "p": self.p, "pass": self.passed,
        }


def check_H1_H2(nl: Nonlinearity, p: float, n_samples: int = 64) -> H1H2Verdict:
    """Mechanical check of the flatness-at-zero and growth hypotheses.

    Flatness: |beta(0)| and |beta'(0)| below 1e-10.  Growth: log-log fit of
    |d^k/dv^k beta(v^2)| over v in [1, 100] for k = 0, 1 must have slope at
    most p - k - 1 + 0.1 (the 0.1 absorbs the implied constants).
    """
    if p <= 1:
        raise ValueError("growth exponent p must exceed 1")
    beta0 = float(nl.eval(0.0, 0))
    dbeta0 = float(nl.eval(0.0, 1))
    h1 = abs(beta0) <= 1e-10 and abs(dbeta0) <= 1e-10

    v = np.logspace(0.0, 2.0, n_samples)
    fits = {}
    ok = True
    for k in (0, 1):
        if k == 0:
            vals = np.abs(nl.eval(v**2, 0))
        else:
            vals = np.abs(2.0 * v * nl.eval(v**2, 1))
        mask = vals > 1e-300
        if mask.sum() < 8:
            fits[k] = -np.inf      # identically ~0 grows slower than anything
            continue
        slope = np.polyfit(np.log(v[mask]), np.log(vals[mask]), 1)[0]
        fits[k] = float(slope)
        if slope > p - k - 1 + 0.1:
            ok = False
    return H1H2Verdict(beta0=beta0, dbeta0=dbeta0, h1_pass=h1,
                       fitted_exponents=fits, h2_pass=ok, p=float(p))
