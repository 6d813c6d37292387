"""Invariants, the d(mu) Lyapunov function, and constrained coercivity.

Conventions: Q(f) = (1/2) int |f|^2, M(f) = (1/2) Im int conj(f) f_x,
E(f) = int (|f_x|^2/2 - G(|f|^2)/2) with G the antiderivative of beta, so
that E'(u) = -u'' - beta(|u|^2) u and the standing wave solves
E'(phi) + omega Q'(phi) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from solstab.evensector import even_sector
from solstab.fields import Field, Grid, derivative
from solstab.groundstate import Branch, GroundState
from solstab.nonlinearity import Nonlinearity


@dataclass
class Invariants:
    Q: float
    M: float
    E: float

    def as_tuple(self):
        return (self.Q, self.M, self.E)


def invariants(u: Field, nl: Nonlinearity) -> Invariants:
    grid = u.grid
    v = u.values
    ux = derivative(u, 1).values
    Q = 0.5 * grid.h * float(np.sum(np.abs(v) ** 2))
    M = 0.5 * grid.h * float(np.imag(np.sum(np.conj(v) * ux)))
    E = grid.h * float(np.sum(0.5 * np.abs(ux) ** 2
                              - 0.5 * nl.antiderivative(np.abs(v) ** 2)))
    return Invariants(Q=Q, M=M, E=E)


def energy_gradient(u: Field, nl: Nonlinearity) -> Field:
    """E'(u) = -u'' - beta(|u|^2) u (real-pairing gradient)."""
    return Field(u.grid, -derivative(u, 2).values
                 - nl.eval(np.abs(u.values) ** 2, 0) * u.values)


def boost_identities(u: Field, v: float, nl: Nonlinearity) -> dict:
    """Galilei-boost bookkeeping M(e^{ivx/2}u) = M(u) + (v/2) Q(u), etc.

    Verified once on synthetic non-even data; the even sector has M = 0 and
    the identities are unused afterwards.
    """
    grid = u.grid
    base = invariants(u, nl)
    boosted = Field(grid, np.exp(0.5j * v * grid.x) * u.values)
    got = invariants(boosted, nl)
    return {
        "M_identity_error": abs(got.M - (base.M + 0.5 * v * base.Q)),
        "E_identity_error": abs(got.E - (base.E + 0.25 * v**2 * base.Q + v * base.M)),
        "Q_identity_error": abs(got.Q - base.Q),
    }


@dataclass
class DFunction:
    mu: np.ndarray
    d: np.ndarray
    dprime: np.ndarray            # centered differences (interior)
    dsecond: np.ndarray
    q_of_mu: np.ndarray           # Q(phi_mu), the d' = q identity partner
    identity_error: float         # max relative |d' - q| at interior nodes
    stable: bool


def d_function(branch: Branch, nl: Nonlinearity) -> DFunction:
    """d(mu) = E(phi_mu) + mu Q(phi_mu) with difference derivatives.

    Verifies d'(mu) = Q(phi_mu) at interior mesh points; a mesh too coarse
    for a stable d'' sets stable=False.
    """
    if branch.omegas.size < 5:
        raise ValueError("d-function needs at least 5 branch points")
    mu = branch.omegas
    d = np.empty(mu.size)
    q = np.empty(mu.size)
    for i, gs in enumerate(branch.states):
        inv = invariants(gs.phi, nl)
        q[i] = inv.Q
        d[i] = inv.E + mu[i] * inv.Q
    dprime = np.gradient(d, mu)
    dsecond = np.gradient(dprime, mu)
    interior = slice(1, -1)
    scale = np.maximum(np.abs(q[interior]), 1e-12)
    err = float(np.max(np.abs(dprime[interior] - q[interior]) / scale))
    # stability of d'': compare halved-stencil estimate on interior points
    stable = True
    if mu.size >= 7:
        coarse = np.gradient(np.gradient(d[::2], mu[::2]), mu[::2])
        fine_at = dsecond[::2]
        ref = np.max(np.abs(dsecond)) + 1e-12
        stable = bool(np.max(np.abs(coarse - fine_at)) <= 0.2 * ref + 1e-8)
    return DFunction(mu=mu, d=d, dprime=dprime, dsecond=dsecond, q_of_mu=q,
                     identity_error=err, stable=stable)


@dataclass
class CoercivityReport:
    lplus_neg_count: int
    lplus_min: float
    lminus_min: float
    lminus_kernel_residual: float
    constrained_min: float        # Rayleigh quotient vs H^1 norm, constrained
    hypothesis_ok: bool           # exactly one L+ negative direction

    def as_dict(self) -> dict:
        return {"lplus_neg_count": self.lplus_neg_count,
                "lplus_min": self.lplus_min, "lminus_min": self.lminus_min,
                "lminus_kernel_residual": self.lminus_kernel_residual,
                "coercivity_min": self.constrained_min,
                "pass": self.hypothesis_ok}


def coercivity(gs: GroundState, nl: Nonlinearity,
               neg_tol: float = 1e-8) -> CoercivityReport:
    """Constrained Hessian study on the even sector.

    The real-direction block is L+, the imaginary block L- (with kernel phi);
    the constrained minimum is the smallest eigenvalue of the pencil
    (P L+ P, P B P) with B = 1 - dxx (H^1 Gram) and P the projector off
    Q'(phi) = phi.  The momentum constraint is trivial on even fields.
    """
    grid = gs.grid
    es = even_sector(grid)
    phi_h = es.restrict(gs.phi.values.real)
    s = phi_h**2
    pot_plus = -nl.eval(s, 0) - 2.0 * nl.eval(s, 1) * s
    pot_minus = -nl.eval(s, 0)
    Lp = es.weight_sym(es.schrodinger(gs.omega, pot_plus))
    Lm = es.weight_sym(es.schrodinger(gs.omega, pot_minus))

    evp = np.linalg.eigvalsh(0.5 * (Lp + Lp.T))
    neg = int(np.sum(evp < -max(neg_tol, 1e-10 * np.max(np.abs(evp)))))
    evm, vecm = np.linalg.eigh(0.5 * (Lm + Lm.T))
    phi_w = es.sqw * phi_h
    phi_unit = phi_w / np.linalg.norm(phi_w)
    kernel_res = float(np.linalg.norm(Lm @ phi_unit))

    # constrained quotient: min <L+ r, r>/<B r, r> over r with <phi, r> = 0
    m = es.m
    B = es.weight_sym(es.schrodinger(1.0, np.zeros(m)))   # 1 - dxx
    B = 0.5 * (B + B.T)
    P = np.eye(m) - np.outer(phi_unit, phi_unit)
    A = P @ (0.5 * (Lp + Lp.T)) @ P
    Bc = P @ B @ P + np.outer(phi_unit, phi_unit)   # regularize the fixed dir
    w = scipy.linalg.eigh(A + np.outer(phi_unit, phi_unit) * np.max(np.abs(evp)),
                          Bc, eigvals_only=True)
    constrained_min = float(w[0])
    return CoercivityReport(
        lplus_neg_count=neg, lplus_min=float(evp[0]), lminus_min=float(evm[0]),
        lminus_kernel_residual=kernel_res, constrained_min=constrained_min,
        hypothesis_ok=bool(neg == 1))
