"""Continuous-spectrum projections, resolvent boundary values, LAP diagnostics.

All dense objects live in quadrature-weighted even-sector coordinates (see
evensector).  Two numerical routes to the spectral measure are kept separate
on purpose: eigenpair partition sums (fast, used for P_c, P_+-, propagators)
and direct shifted solves (epsilon ladders, contour quadrature) which
cross-check them.

On a periodic grid the resolvent at continuum energies only mimics the line
problem while epsilon stays at or above the local level spacing
2 sqrt(lambda - omega) pi / L; every continuum-energy ladder here is floored
there and extrapolation runs over rungs above the floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from solstab.fields import Field, Grid, Spinor, seeded_even_spinor, sigma_apply, weighted_norm
from solstab.linop import (EigenData, IllConditionedError, LinearizedOperator,
                           internal_mode, kernel_spinors)


@dataclass
class Projections:
    op: LinearizedOperator
    Pc: np.ndarray
    Pp: np.ndarray
    Pm: np.ndarray
    split_defect: float               # ||Pp + Pm - Pc||_2
    contour_error: Optional[float] = None

    def apply(self, which: str, s: Spinor) -> Spinor:
        M = {"c": self.Pc, "+": self.Pp, "-": self.Pm}[which]
        return self.op.from_w(M @ self.op.to_w(s))


def _discrete_system(op: LinearizedOperator):
    """Right vectors of the discrete spectrum and their adjoint duals."""
    if op.is_free:
        return [], []
    gs = op.gs
    s3Phi, dPhi = kernel_spinors(gs, op.nl)
    Phi = sigma_apply(3, s3Phi)
    s3dPhi = sigma_apply(3, dPhi)
    basis = [s3Phi, dPhi]
    duals = [Phi, s3dPhi]
    mode = internal_mode(op)
    if mode is not None:
        xi = mode.xi
        basis += [xi, sigma_apply(1, xi)]
        duals += [sigma_apply(3, xi), sigma_apply(3, sigma_apply(1, xi))]
    return basis, duals


def build_projections(op: LinearizedOperator, cross_check: bool = True,
                      n_check: int = 5, seed: int = 7,
                      cond_limit: float = 1e8) -> Projections:
    """P_c as the complement of the discrete biorthogonal projector; P_+- by
    partitioning continuum eigenpairs by the sign of Re(lambda).

    The discrete projector uses the analytically known vectors (sigma3 Phi,
    dPhi, xi, sigma1 xi) and their adjoint duals; an ill-conditioned dual Gram
    (e.g. dQ/domega ~ 0) raises IllConditionedError.
    """
    eg = op.eigendata()
    n2 = eg.right.shape[0]

    basis, duals = _discrete_system(op)
    if basis:
        B = np.column_stack([op.to_w(b) for b in basis])
        D = np.column_stack([op.to_w(d) for d in duals])
        G = np.conj(D).T @ B
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > cond_limit:
            raise IllConditionedError(
                f"discrete dual Gram condition {cond:.2e} exceeds {cond_limit:.0e}")
        Pd = B @ np.linalg.solve(G, np.conj(D).T)
    else:
        Pd = np.zeros((n2, n2), dtype=complex)

    Pc = np.eye(n2) - Pd

    idx_cont = eg.continuum()
    if idx_cont.size and not np.all(eg.pair_ok[idx_cont]):
        raise IllConditionedError("continuum eigenpair biorthogonalization failed")
    pos = [j for j in idx_cont if eg.vals[j].real > 0]
    neg = [j for j in idx_cont if eg.vals[j].real < 0]
    Pp = _pair_sum(eg, pos, n2)
    Pm = _pair_sum(eg, neg, n2)

    defect = float(np.linalg.norm(Pp + Pm - Pc, 2))
    proj = Projections(op=op, Pc=Pc, Pp=Pp, Pm=Pm, split_defect=defect)
    if cross_check:
        proj.contour_error = _contour_check(op, proj, n_check, seed)
    return proj


def _pair_sum(eg: EigenData, idx, n2) -> np.ndarray:
    P = np.zeros((n2, n2), dtype=complex)
    if idx:
        R = eg.right[:, idx]
        L = eg.left[:, idx]
        P = R @ np.conj(L).T
    return P


def _gl_segment(z0: complex, z1: complex, n: int):
    """Gauss-Legendre nodes/weights on the segment [z0, z1] in the plane."""
    xs, ws = np.polynomial.legendre.leggauss(n)
    mid, half = (z0 + z1) / 2.0, (z1 - z0) / 2.0
    return mid + half * xs, half * ws


def _band_projector_contour(op: LinearizedOperator, lo: float, hi: float,
                            U: np.ndarray, height: float = 1.0,
                            n_side: int = 60, n_cross: int = 100) -> np.ndarray:
    """(2 pi i)^-1 closed contour integral of R(z) U around [lo, hi].

    Rectangle with the right side crossing the continuum; the caller places
    `hi` between ring eigenvalues and the crossing side gets denser nodes.
    """
    H = op.matrix_w()
    n2 = H.shape[0]
    Y = height
    segs = [
        (complex(hi, -Y), complex(hi, +Y), n_cross),   # right (crosses spectrum)
        (complex(hi, +Y), complex(lo, +Y), n_side),    # top
        (complex(lo, +Y), complex(lo, -Y), n_side // 2),
        (complex(lo, -Y), complex(hi, -Y), n_side),    # bottom
    ]
    acc = np.zeros_like(U, dtype=complex)
    eye = np.eye(n2)
    for z0, z1, nn in segs:
        zs, ws = _gl_segment(z0, z1, nn)
        for z, w in zip(zs, ws):
            acc += w * np.linalg.solve(H - z * eye, U)
    return acc / (2.0j * np.pi)


def _midpoint_above(op: LinearizedOperator, target: float) -> float:
    """A real energy near `target` centered between ring eigenvalues."""
    eg = op.eigendata()
    vals = np.sort(eg.vals.real[eg.classes == "continuum"])
    vals = vals[vals > op.omega / 2]
    if vals.size < 2:
        return target
    j = int(np.searchsorted(vals, target))
    j = min(max(j, 1), vals.size - 1)
    return float(0.5 * (vals[j - 1] + vals[j]))


def _contour_check(op: LinearizedOperator, proj: Projections,
                   n_check: int, seed: int) -> float:
    """Lemma-style contour definition of P_+ tested on random even spinors."""
    rng = np.random.default_rng(seed)
    U = np.column_stack([op.to_w(seeded_even_spinor(op.grid, rng))
                         for _ in range(n_check)])
    lam_mode = 0.0
    mode = None if op.is_free else internal_mode(op)
    if mode is not None:
        lam_mode = mode.lam
    lo = 0.5 * (op.omega + lam_mode)          # inside the gap, above the mode
    hi = _midpoint_above(op, op.omega + 40.0 * op.omega)
    got = _band_projector_contour(op, lo, hi, U)
    want = proj.Pp @ U
    # truncation: modes beyond hi are genuinely absent from the contour
    eg = op.eigendata()
    far = [j for j in eg.continuum() if eg.vals[j].real > hi]
    if far:
        want = want - _pair_sum(eg, far, eg.right.shape[0]) @ U
    return float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300))


# ---------------------------------------------------------------------------
# resolvent boundary values


def level_spacing(op: LinearizedOperator, lam: float) -> float:
    gap = max(abs(lam) - op.omega, 1e-6)
    return 2.0 * np.sqrt(gap) * np.pi / op.grid.L


@dataclass
class ResolventSample:
    lam: float
    side: int
    eps_values: list
    solutions: list               # Spinor per rung
    extrapolated: Spinor
    residual: float               # weighted-norm gap between last rungs
    converged: bool
    in_gap: bool


def _wnorm(s: Spinor, tau: float = -2.0) -> float:
    return weighted_norm(s, k=0, tau=tau)


def resolvent_boundary(op: LinearizedOperator, lam: float, u: Spinor,
                       side: int = +1, eps_ladder=(1e-2, 5e-3, 2.5e-3),
                       tau: float = 2.0, projected: bool = False,
                       residual_tol: float = 0.05) -> ResolventSample:
    """Boundary value R(lam + i*side*0) u in the weighted norm L^{2,-tau}.

    Gap energies (|lam| < omega) are solved directly; continuum energies run
    an epsilon ladder floored at the ring level spacing and Richardson
    extrapolate.  Extrapolation residual above residual_tol (relative, in
    L^{2,-tau}) flags the sample as non-convergent.
    """
    H = op.matrix_w()
    n2 = H.shape[0]
    uw = op.to_w(u)
    if projected:
        from_w = op.from_w
        eg = op.eigendata()
        proj = getattr(op, "_proj_cache", None)
        if proj is None:
            proj = build_projections(op, cross_check=False)
            op._proj_cache = proj
        uw = proj.Pc @ uw

    in_gap = abs(lam) < op.omega * (1 - 1e-9)
    eye = np.eye(n2)
    if in_gap:
        v = np.linalg.solve(H - lam * eye, uw)
        sol = op.from_w(v)
        return ResolventSample(lam=lam, side=side, eps_values=[0.0],
                               solutions=[sol], extrapolated=sol, residual=0.0,
                               converged=True, in_gap=True)

    floor = level_spacing(op, lam)
    mults = (3.0, 2.0, 1.0)
    eps_eff = [max(e * op.omega, m * floor) for e, m in zip(sorted(eps_ladder, reverse=True), mults)]
    sols, vws = [], []
    for eps in eps_eff:
        v = np.linalg.solve(H - (lam + 1j * side * eps) * eye, uw)
        vws.append(v)
        sols.append(op.from_w(v))
    extr_w = _richardson(eps_eff, vws)
    extr = op.from_w(extr_w)
    # residual: gap between the 2-point and 3-point extrapolants
    two = _richardson(eps_eff[1:], vws[1:])
    res = _wnorm(op.from_w(extr_w - two), -tau) / max(_wnorm(extr, -tau), 1e-300)
    return ResolventSample(lam=lam, side=side, eps_values=eps_eff, solutions=sols,
                           extrapolated=extr, residual=float(res),
                           converged=res <= residual_tol, in_gap=False)


def _richardson(eps, vecs):
    """Polynomial extrapolation to eps = 0 (Lagrange weights at 0)."""
    eps = np.asarray(eps, dtype=float)
    out = np.zeros_like(vecs[0])
    for i in range(len(eps)):
        w = 1.0
        for j in range(len(eps)):
            if j != i:
                w *= (0.0 - eps[j]) / (eps[i] - eps[j])
        out = out + w * vecs[i]
    return out


def gap_resolvent_pc(op: LinearizedOperator, lam: float, u: Spinor) -> Spinor:
    """(H - lam)^-1 P_c u within the continuous subspace, |lam| < omega.

    Valid at any gap energy including 0 and +-lambda(omega) because the
    discrete directions are projected out on both sides.
    """
    if abs(lam) >= op.omega:
        raise ValueError("gap resolvent requires |lam| < omega")
    proj = getattr(op, "_proj_cache", None)
    if proj is None:
        proj = build_projections(op, cross_check=False)
        op._proj_cache = proj
    eg = op.eigendata()
    idx = eg.continuum()
    uw = op.to_w(u)
    coeff = np.conj(eg.left[:, idx]).T @ uw
    vw = eg.right[:, idx] @ (coeff / (eg.vals[idx] - lam))
    return op.from_w(vw)


def continuum_resolvent_pc(op: LinearizedOperator, lam: float, u: Spinor,
                           side: int = +1,
                           eps_ladder=(1e-2, 5e-3, 2.5e-3)) -> ResolventSample:
    """R(lam + i side 0) P_c u for |lam| > omega, epsilon-floored ladder."""
    return resolvent_boundary(op, lam, u, side=side, eps_ladder=eps_ladder,
                              projected=True)


# ---------------------------------------------------------------------------
# estimate (4.3): weighted boundedness of P+ - P- - Pc sigma3


@dataclass
class C43Report:
    c_est: float
    ratios: list
    refinement_change: Optional[float] = None


def verify_43(op: LinearizedOperator, proj: Projections, M: float = 2.0,
              Nw: float = 2.0, samples: int = 12, seed: int = 11) -> C43Report:
    """C_est = max_f ||<x>^M (P+ - P- - Pc sigma3) f|| / ||<x>^-Nw f||."""
    es = op.es
    m = es.m
    S3 = np.diag(np.concatenate([np.ones(m), -np.ones(m)]))
    K = proj.Pp - proj.Pm - proj.Pc @ S3
    wplus = np.concatenate([es.x, es.x])
    wM = (1.0 + wplus**2) ** (M / 2.0)
    wN = (1.0 + wplus**2) ** (-Nw / 2.0)
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(samples):
        f = seeded_even_spinor(op.grid, rng)
        fw = op.to_w(f)
        num = np.linalg.norm(wM * (K @ fw))
        den = np.linalg.norm(wN * fw)
        ratios.append(float(num / max(den, 1e-300)))
    return C43Report(c_est=float(np.max(ratios)), ratios=ratios)


# ---------------------------------------------------------------------------
# limiting absorption scan


@dataclass
class LapScan:
    lams: np.ndarray
    opnorms: np.ndarray
    weighted: np.ndarray          # <lam>^(1/2) * opnorm
    sup_const: float
    fit_exponent: float


def lap_scan(op: LinearizedOperator, proj: Projections, tau: float = 2.0,
             lam_mesh=None, power_iters: int = 30, seed: int = 3) -> LapScan:
    """sup over the mesh of <lam>^(1/2) ||R^+(lam) Pc : L^{2,tau} -> L^{2,-tau}||.

    Norms by seeded power iteration on M^H M; the fit exponent comes from the
    upper half of the mesh where <lam> ~ lam - omega.
    """
    if tau <= 1.5:
        raise ValueError("LAP weights need tau > 3/2")
    om = op.omega
    if lam_mesh is None:
        lam_mesh = om + np.geomspace(0.5 * om, 39.0 * om, 14)
    lam_mesh = np.asarray(lam_mesh, dtype=float)
    H = op.matrix_w()
    n2 = H.shape[0]
    es = op.es
    wplus = np.concatenate([es.x, es.x])
    wtau = (1.0 + wplus**2) ** (-tau / 2.0)
    eye = np.eye(n2)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n2) + 1j * rng.standard_normal(n2)

    norms = []
    for lam in lam_mesh:
        floor = level_spacing(op, lam)
        rungs = [3 * floor, 2 * floor, floor]
        mats = []
        for eps in rungs:
            R = np.linalg.solve(H - (lam + 1j * eps) * eye, proj.Pc)
            mats.append(wtau[:, None] * R * wtau[None, :])
        Mw = _richardson(rungs, mats)
        v = v0.copy()
        for _ in range(power_iters):
            v = np.conj(Mw).T @ (Mw @ v)
            v /= np.linalg.norm(v)
        norms.append(float(np.linalg.norm(Mw @ v)))  # ||M v|| at the top singular vector
    norms = np.asarray(norms)
    bracket = np.sqrt(1.0 + lam_mesh**2)
    weighted = np.sqrt(bracket) * norms
    upper = lam_mesh >= max(8.0, 5.0 * om)
    if upper.sum() >= 3:
        fit = np.polyfit(np.log(bracket[upper]), np.log(norms[upper]), 1)[0]
    else:
        fit = np.polyfit(np.log(bracket), np.log(norms), 1)[0]
    return LapScan(lams=lam_mesh, opnorms=norms, weighted=weighted,
                   sup_const=float(np.max(weighted)), fit_exponent=float(fit))


# ---------------------------------------------------------------------------
# Stone formula reconstruction


@dataclass
class StoneReport:
    error: float
    tail_estimate: float
    n_nodes: int
    converged: bool


def stone_formula_check(op: LinearizedOperator, proj: Projections, u: Spinor,
                        lam_max: Optional[float] = None,
                        eps_ladder_rel=(2e-2, 1e-2, 5e-3),
                        edge_offset_rel: float = 0.15,
                        nodes_per_width: float = 2.5,
                        max_nodes: int = 30000) -> StoneReport:
    """|| (2 pi i)^-1 int (R^+ - R^-) u dlam  -  Pc u || / ||u||.

    Integrates both branches of the essential spectrum in the variable
    s = sqrt(|lam| - (omega - delta)), with the window opened delta into the
    gap so the k = 0 ring mode sits strictly inside; the epsilon ladder is
    Richardson-extrapolated at fixed window.
    """
    om = op.omega
    if lam_max is None:
        lam_max = 40.0 * om
    delta = edge_offset_rel * om
    eg = op.eigendata()
    gap_vals = [v.real for j, v in enumerate(eg.vals)
                if eg.classes[j] in ("internal", "zero")]
    if any(abs(v) > om - 1.2 * delta for v in gap_vals):
        raise ValueError("edge offset window contains discrete spectrum")

    eps_eff = [e * om for e in sorted(eps_ladder_rel, reverse=True)]
    eps_min = eps_eff[-1]
    s_max = np.sqrt(lam_max - (om - delta))
    s_floor = np.sqrt(delta)

    # adaptive marching mesh: ds ~ (local Lorentzian width in s) / nodes_per_width
    ss = [0.0]
    while ss[-1] < s_max:
        width = eps_min / (2.0 * max(ss[-1], s_floor))
        ss.append(ss[-1] + min(width / nodes_per_width, s_max / 50.0))
        if len(ss) > max_nodes:
            break
    ss = np.asarray(ss)
    n_nodes = len(ss)

    H = op.matrix_w()
    n2 = H.shape[0]
    eye = np.eye(n2)
    uw = op.to_w(u)
    u_real = bool(np.max(np.abs(np.concatenate(
        [u.up.values.imag, u.lo.values.imag]))) < 1e-14)

    recon_rungs = []
    for eps in eps_eff:
        acc = np.zeros(n2, dtype=complex)
        for sign in (+1, -1):
            lam0 = sign * (om - delta)
            lams = lam0 + sign * ss**2
            jac = 2.0 * ss
            vals = np.zeros((n_nodes, n2), dtype=complex)
            for i, lam in enumerate(lams):
                vp = np.linalg.solve(H - (lam + 1j * eps) * eye, uw)
                if u_real:
                    vm = np.conj(np.linalg.solve(H - (lam + 1j * eps) * eye, np.conj(uw)))
                else:
                    vm = np.linalg.solve(H - (lam - 1j * eps) * eye, uw)
                vals[i] = vp - vm
            acc += sign * np.trapezoid(vals * jac[:, None], ss, axis=0)
        recon_rungs.append(acc / (2.0j * np.pi))
    recon = _richardson(eps_eff, recon_rungs)

    target = proj.Pc @ uw
    # tail: continuum modes beyond the window are missing from the integral
    far = [j for j in eg.continuum() if abs(eg.vals[j].real) > lam_max]
    tail = 0.0
    if far:
        tail = float(np.linalg.norm(_pair_sum(eg, far, n2) @ uw))
        target = target - _pair_sum(eg, far, n2) @ uw
    err = float(np.linalg.norm(recon - target) / max(np.linalg.norm(uw), 1e-300))
    return StoneReport(error=err, tail_estimate=tail, n_nodes=n_nodes,
                       converged=n_nodes < max_nodes)
