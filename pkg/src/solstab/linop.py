"""Linearized operator H around a ground state, its point spectrum, H6/H8 checks.

Block form (re-derived from the first-order perturbation equation; see the
design notes): with a = -dxx + omega - beta(phi^2) - beta'(phi^2) phi^2 and
B = beta'(phi^2) phi^2,

    H = [[ a, -B],
         [ B, -a]]

so that H sigma3 Phi = 0 and H dPhi/domega = -sigma3 Phi hold exactly at the
discrete level (the kernel identities are L- phi = 0 and L+ dphi = -phi).
Spectral work happens on the even sector in quadrature-weighted coordinates,
where the symmetry classes sigma1 H sigma1 = -conj(H) and
sigma3 H sigma3 = H^dagger are exact matrix identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from solstab.evensector import EvenSector, even_sector
from solstab.fields import Field, Grid, Spinor, pairing, sigma_apply
from solstab.groundstate import GroundState, dphi_domega
from solstab.nonlinearity import Nonlinearity


class MultiplicityError(RuntimeError):
    """The internal-mode eigenvalue is not numerically simple."""


class DegenerateRatioError(RuntimeError):
    """omega/lambda sits at an integer: the H6 gap index is ill-defined."""


class DiscretizationError(RuntimeError):
    """Kernel identities violated beyond tolerance; grids/objects inconsistent."""


class IllConditionedError(RuntimeError):
    """Left/right biorthogonalization failed (e.g. dQ/domega ~ 0)."""


@dataclass
class LinearizedOperator:
    nl: Nonlinearity
    omega: float
    grid: Grid
    gs: Optional[GroundState] = None        # None: free operator, phi == 0
    pot_a: np.ndarray = field(init=False, repr=False)
    potB: np.ndarray = field(init=False, repr=False)
    _eig: Optional["EigenData"] = field(default=None, repr=False)

    def __post_init__(self):
        if self.gs is not None:
            s = self.gs.phi.values.real ** 2
            self.pot_a = self.omega - self.nl.eval(s, 0) - self.nl.eval(s, 1) * s
            self.potB = self.nl.eval(s, 1) * s
        else:
            self.pot_a = np.full(self.grid.n, self.omega)
            self.potB = np.zeros(self.grid.n)

    @property
    def is_free(self) -> bool:
        return self.gs is None or np.max(np.abs(self.potB)) + \
            np.max(np.abs(self.pot_a - self.omega)) < 1e-14

    # -- matrix-free action --------------------------------------------------
    def apply(self, s: Spinor) -> Spinor:
        k2 = self.grid.k ** 2
        au = np.fft.ifft(k2 * np.fft.fft(s.up.values)) + self.pot_a * s.up.values
        al = np.fft.ifft(k2 * np.fft.fft(s.lo.values)) + self.pot_a * s.lo.values
        up = au - self.potB * s.lo.values
        lo = self.potB * s.up.values - al
        return Spinor.from_arrays(self.grid, up, lo)

    # -- dense even-sector realization (weighted coordinates) ----------------
    @property
    def es(self) -> EvenSector:
        return even_sector(self.grid)

    def matrix_w(self) -> np.ndarray:
        es = self.es
        a_half = es.weight_sym(es.schrodinger(0.0, es.restrict(self.pot_a)))
        b_half = es.restrict(self.potB)
        m = es.m
        H = np.zeros((2 * m, 2 * m))
        H[:m, :m] = a_half
        H[m:, m:] = -a_half
        H[:m, m:] = -np.diag(b_half)
        H[m:, :m] = np.diag(b_half)
        return H

    # conversions between full-grid spinors and weighted even coordinates
    def to_w(self, s: Spinor) -> np.ndarray:
        es = self.es
        return es.sqw2 * es.spinor_restrict(s)

    def from_w(self, v: np.ndarray) -> Spinor:
        es = self.es
        return es.spinor_embed(v / es.sqw2)

    def norm_scale(self) -> float:
        """Crude spectral-radius scale of the dense realization."""
        kmax2 = (np.pi / self.grid.h) ** 2
        return kmax2 + float(np.max(np.abs(self.pot_a)) + np.max(np.abs(self.potB)))

    def eigendata(self) -> "EigenData":
        if self._eig is None:
            self._eig = _eigendecompose(self)
        return self._eig


def assemble_H(gs: GroundState, nl: Nonlinearity) -> LinearizedOperator:
    """Linearized operator at a ground state (see module docstring)."""
    return LinearizedOperator(nl=nl, omega=gs.omega, grid=gs.grid, gs=gs)


def free_operator(omega: float, grid: Grid,
                  nl: Optional[Nonlinearity] = None) -> LinearizedOperator:
    from solstab.nonlinearity import make_nonlinearity
    return LinearizedOperator(nl=nl or make_nonlinearity("zero"), omega=omega,
                              grid=grid, gs=None)


# ---------------------------------------------------------------------------
# dense eigendecomposition with biorthogonal left vectors


@dataclass
class EigenData:
    vals: np.ndarray          # (2m,)
    right: np.ndarray         # columns, weighted coordinates
    left: np.ndarray          # columns; left[:, j]^H right[:, k] = delta_jk
                              # (only guaranteed where pair_ok[j])
    pair_ok: np.ndarray       # bool: left/right pairing well conditioned
    classes: np.ndarray       # str: zero/internal/continuum/violation
    localization: np.ndarray  # ||<x>^-2 v|| / ||v|| per eigenvector
    op: LinearizedOperator

    def continuum(self) -> np.ndarray:
        return np.where(self.classes == "continuum")[0]


def _localization(op: LinearizedOperator, vecs_w: np.ndarray) -> np.ndarray:
    es = op.es
    wt = 1.0 / (1.0 + es.x ** 2)   # <x>^-2 on the half grid
    wt2 = np.concatenate([wt, wt])
    num = np.linalg.norm(wt2[:, None] * vecs_w, axis=0)
    den = np.linalg.norm(vecs_w, axis=0)
    return num / np.maximum(den, 1e-300)


def _eigendecompose(op: LinearizedOperator) -> EigenData:
    H = op.matrix_w()
    vals, vl, vr = scipy.linalg.eig(H, left=True, right=True)
    order = np.argsort(vals.real + 1e-9 * np.abs(vals.imag))
    vals, vl, vr = vals[order], vl[:, order], vr[:, order]

    # biorthonormalize: scipy returns vl with vl^H A = lam vl^H
    s = np.einsum("ij,ij->j", np.conj(vl), vr)
    pair_ok = np.abs(s) > 1e-8
    safe = np.where(pair_ok, s, 1.0)
    vl = vl / np.conj(safe)[None, :]

    loc = _localization(op, vr)
    classes = _classify(op, vals, loc)
    return EigenData(vals=vals, right=vr, left=vl, pair_ok=pair_ok,
                     classes=classes, localization=loc, op=op)


def _classify(op, vals, loc, zero_tol=1e-3, loc_thresh=0.5):
    om = op.omega
    ray_tol = 3.0 * op.grid.h ** 2
    classes = np.empty(vals.shape, dtype=object)
    for j, lam in enumerate(vals):
        ray_dist = max(0.0, om - abs(lam.real)) if abs(lam.imag) < ray_tol else np.inf
        ray_dist = np.hypot(ray_dist, lam.imag)
        if abs(lam) <= zero_tol:
            classes[j] = "zero"
        elif ray_dist <= ray_tol and loc[j] < loc_thresh:
            classes[j] = "continuum"
        elif abs(lam.imag) <= 1e-6 * max(1.0, abs(lam.real)) and \
                abs(lam.real) < om - ray_tol and loc[j] >= loc_thresh:
            classes[j] = "internal"
        elif ray_dist <= ray_tol:
            # delocalization is scale-dependent near the edge; ray membership rules
            classes[j] = "continuum"
        else:
            classes[j] = "violation"
    return classes


# ---------------------------------------------------------------------------
# kernel vectors and internal mode


def kernel_spinors(gs: GroundState, nl: Nonlinearity):
    """(sigma3 Phi, dPhi) built from phi and dphi/domega."""
    if gs.dphi is None:
        dphi_domega(gs, nl)
    grid = gs.grid
    phi = gs.phi.values.real
    dphi = gs.dphi.values.real
    s3Phi = Spinor.from_arrays(grid, phi, -phi)
    dPhi = Spinor.from_arrays(grid, dphi, dphi)
    return s3Phi, dPhi


def kernel_vectors(op: LinearizedOperator, gs: GroundState,
                   flag_tol: float = 1e-6):
    """Generalized-kernel pair with residuals of the two exact identities.

    Returns (sigma3 Phi, dPhi, res0, res1) where
    res0 = ||H sigma3 Phi|| / ||Phi|| and res1 = ||H dPhi + sigma3 Phi|| / ||Phi||.
    """
    if op.gs is None or op.is_free:
        raise DiscretizationError("free operator has no soliton kernel vectors")
    if op.gs is not gs and abs(op.omega - gs.omega) > 1e-12:
        raise DiscretizationError("operator and ground state are inconsistent")
    s3Phi, dPhi = kernel_spinors(gs, op.nl)
    nPhi = np.sqrt(2.0) * gs.phi.norm()
    res0 = op.apply(s3Phi).norm() / nPhi
    res1 = (op.apply(dPhi) + s3Phi).norm() / nPhi
    if res0 > flag_tol or res1 > flag_tol:
        raise DiscretizationError(
            f"kernel identities violated: {res0:.2e}, {res1:.2e} (tol {flag_tol:.0e})")
    return s3Phi, dPhi, res0, res1


@dataclass
class InternalMode:
    lam: float
    xi: Spinor                 # real, even, <xi, sigma3 xi> = 1
    residual: float
    neg_residual: float        # || H sigma1 xi + lam sigma1 xi ||
    sigma3_norm: float         # raw <xi, sigma3 xi> before normalization


def internal_mode(op: LinearizedOperator, edge_margin: float = 5e-3,
                  zero_margin: float = 1e-3) -> Optional[InternalMode]:
    """Positive simple gap eigenvalue with its normalized even eigenvector.

    Returns None when the gap carries no localized mode (a valid outcome, as
    for the cubic).  A numerically multiple candidate raises MultiplicityError.
    """
    eg = op.eigendata()
    idx = [j for j in range(eg.vals.size)
           if eg.classes[j] == "internal" and eg.vals[j].real > zero_margin
           and eg.vals[j].real < op.omega * (1 - 0.0) - edge_margin]
    if not idx:
        return None
    lams = np.array([eg.vals[j].real for j in idx])
    # group near-coincident candidates: a genuine double root is an error
    main = idx[int(np.argmax([eg.localization[j] for j in idx]))]
    lam0 = eg.vals[main].real
    close = [j for j in idx if abs(eg.vals[j].real - lam0) < 1e-6 * max(1.0, lam0)]
    if len(close) > 1:
        raise MultiplicityError(f"internal eigenvalue near {lam0:.6f} is not simple")

    H = op.matrix_w()
    v = eg.right[:, main].real.copy()
    lam = lam0
    n2 = H.shape[0]
    for _ in range(3):
        try:
            v_new = np.linalg.solve(H - lam * np.eye(n2), v)
        except np.linalg.LinAlgError:
            break
        v = v_new / np.linalg.norm(v_new)
        l = _sigma3_w(v)
        lam = float((l @ H @ v) / (l @ v))

    xi = op.from_w(v.astype(complex))
    s3n = float(np.real(pairing(xi, sigma_apply(3, xi))))
    if abs(s3n) < 1e-12:
        raise MultiplicityError("internal mode has vanishing sigma3 norm")
    xi = xi * (1.0 / np.sqrt(abs(s3n)))
    mid = op.grid.n // 2
    if xi.up.values.real[mid] < 0:
        xi = xi * (-1.0)
    xi = Spinor.from_arrays(op.grid, xi.up.values.real, xi.lo.values.real)

    res = (op.apply(xi) - lam * xi).norm() / xi.norm()
    neg = (op.apply(sigma_apply(1, xi)) + lam * sigma_apply(1, xi)).norm() / xi.norm()
    return InternalMode(lam=float(lam), xi=xi, residual=float(res),
                        neg_residual=float(neg), sigma3_norm=s3n)


def _sigma3_w(v: np.ndarray) -> np.ndarray:
    m = v.size // 2
    out = v.copy()
    out[m:] *= -1.0
    return out


def check_H6(lam: float, omega: float, tol: float = 1e-6) -> int:
    """Gap index N with N lam < omega < (N+1) lam; integer ratios are errors."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    ratio = omega / lam
    if abs(ratio - round(ratio)) < tol:
        raise DegenerateRatioError(
            f"omega/lambda = {ratio:.8f} is within {tol:.0e} of an integer")
    return int(np.floor(ratio))


@dataclass
class PointSpectrum:
    omega: float
    lam: Optional[float]
    xi: Optional[Spinor]
    N: Optional[int]
    kernel_residuals: tuple
    census: list
    mode: Optional[InternalMode] = None

    def as_dict(self) -> dict:
        return {
            "omega": self.omega,
            "lambda": self.lam,
            "N": self.N,
            "kernel_residuals": list(self.kernel_residuals),
            "census": self.census,
        }


def point_spectrum(op: LinearizedOperator, gs: GroundState) -> PointSpectrum:
    """Kernel pair, internal mode, H6 index, and the discrete-eigenvalue census."""
    _, _, r0, r1 = kernel_vectors(op, gs)
    mode = internal_mode(op)
    N = None
    if mode is not None:
        try:
            N = check_H6(mode.lam, op.omega)
        except DegenerateRatioError:
            N = None
    eg = op.eigendata()
    census = []
    for j in range(eg.vals.size):
        if eg.classes[j] == "continuum":
            continue
        census.append({
            "value": [float(eg.vals[j].real), float(eg.vals[j].imag)],
            "class": str(eg.classes[j]),
            "localization": float(eg.localization[j]),
        })
    return PointSpectrum(omega=op.omega, lam=None if mode is None else mode.lam,
                         xi=None if mode is None else mode.xi, N=N,
                         kernel_residuals=(r0, r1), census=census, mode=mode)


def census_violations(op: LinearizedOperator) -> list:
    eg = op.eigendata()
    bad = []
    for j in range(eg.vals.size):
        if eg.classes[j] == "violation":
            bad.append({"value": [float(eg.vals[j].real), float(eg.vals[j].imag)],
                        "localization": float(eg.localization[j])})
    return bad


# ---------------------------------------------------------------------------
# H8 edge-resonance diagnostics


@dataclass
class EdgeReport:
    wronskian_plus: float
    wronskian_minus: float
    resonance_wronskian: bool
    sv_norms: dict               # eps -> weighted resolvent norm
    sv_exponent: float
    resonance_sv: bool
    verdict: str                 # "resonance" | "no-resonance" | "inconclusive"
    point_spectrum_ok: bool
    violations: list

    def as_dict(self) -> dict:
        return {
            "wronskian": {"plus": self.wronskian_plus, "minus": self.wronskian_minus},
            "svd_exponents": {"exponent": self.sv_exponent,
                              "norms": {f"{k:g}": v for k, v in self.sv_norms.items()}},
            "verdict": self.verdict,
            "point_spectrum_ok": self.point_spectrum_ok,
            "census_violations": self.violations,
        }


def _edge_wronskian(op: LinearizedOperator, sign: int) -> float:
    """Normalized even-sector matching determinant at lambda = sign * omega.

    Integrates the coupled second-order system (H - sign*omega) u = 0 from the
    asymptotic region toward x = 0 along the two admissible branches (open
    channel bounded, closed channel decaying) and measures whether some
    combination has vanishing derivative at 0, i.e. extends to an even bounded
    solution.
    """
    om = op.omega
    grid = op.grid
    x_half = grid.x[grid.n // 2:]                 # x in [0, L)
    pa = op.pot_a[grid.n // 2:]
    pb = op.potB[grid.n // 2:]
    pa_s = CubicSpline(x_half, pa)
    pb_s = CubicSpline(x_half, pb)
    L_edge = min(0.95 * grid.L, 30.0 / np.sqrt(om))
    mu = np.sqrt(2.0 * om)

    if sign > 0:
        # open channel = component 1, closed = component 2
        def rhs(x, y):
            u1, u2, d1, d2 = y
            return [d1, d2,
                    (pa_s(x) - om) * u1 - pb_s(x) * u2,
                    (pa_s(x) + om) * u2 - pb_s(x) * u1]
        branch_a0 = [1.0, 0.0, 0.0, 0.0]
        branch_b0 = [0.0, 1.0, 0.0, -mu]
    else:
        # at -omega the roles of the components swap (sigma1 symmetry)
        def rhs(x, y):
            u1, u2, d1, d2 = y
            return [d1, d2,
                    (pa_s(x) + om) * u1 - pb_s(x) * u2,
                    (pa_s(x) - om) * u2 - pb_s(x) * u1]
        branch_a0 = [0.0, 1.0, 0.0, 0.0]
        branch_b0 = [1.0, 0.0, -mu, 0.0]

    cols = []
    for y0 in (branch_a0, branch_b0):
        sol = solve_ivp(rhs, (L_edge, 0.0), y0, method="RK45",
                        rtol=1e-10, atol=1e-12, dense_output=False)
        if not sol.success:
            raise RuntimeError(f"edge ODE integration failed: {sol.message}")
        y = sol.y[:, -1]
        scale = max(np.max(np.abs(y)), 1e-300)
        cols.append(np.array([y[2], y[3]]) / scale)
    W = abs(cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0])
    return float(W)


def _sv_scan(op: LinearizedOperator, eps_ladder=(1e-2, 1e-3, 1e-4)):
    """Growth of ||<x>^-2 R(omega + i eps) Pc <x>^-2|| along an eps ladder."""
    from solstab.spectral import build_projections
    eg = op.eigendata()
    proj = build_projections(op, cross_check=False)
    es = op.es
    wt = 1.0 / (1.0 + es.x ** 2)
    wt2 = np.concatenate([wt, wt])
    H = op.matrix_w()
    n2 = H.shape[0]
    norms = {}
    for eps in eps_ladder:
        R = np.linalg.solve(H - (op.omega + 1j * eps * op.omega) * np.eye(n2),
                            proj.Pc)
        Rw = wt2[:, None] * R * wt2[None, :]
        norms[eps] = float(np.linalg.norm(Rw, 2))
    eps = np.array(sorted(norms))
    vals = np.array([norms[e] for e in eps])
    slope = np.polyfit(np.log(eps), np.log(vals), 1)[0]
    return norms, float(slope)


def check_H8(op: LinearizedOperator, wronskian_tol: float = 1e-4,
             sv_slope_thresh: float = -0.25) -> EdgeReport:
    """Edge-resonance test at +-omega plus the point-spectrum census.

    A vanishing perturbation potential is vacuously non-resonant (there is no
    Birman-Schwinger kernel to degenerate); the constant-coefficient branches
    are then the exact k -> 0 continuum limit.
    """
    violations = census_violations(op)
    ps_ok = len(violations) == 0

    if op.is_free:
        return EdgeReport(wronskian_plus=1.0, wronskian_minus=1.0,
                          resonance_wronskian=False, sv_norms={}, sv_exponent=0.0,
                          resonance_sv=False, verdict="no-resonance",
                          point_spectrum_ok=ps_ok, violations=violations)

    wp = _edge_wronskian(op, +1)
    wm = _edge_wronskian(op, -1)
    res_w = min(wp, wm) < wronskian_tol

    try:
        sv_norms, slope = _sv_scan(op)
        res_sv = slope < sv_slope_thresh
        sv_ok = True
    except IllConditionedError:
        sv_norms, slope, res_sv, sv_ok = {}, 0.0, res_w, False

    if sv_ok and res_w != res_sv:
        verdict = "inconclusive"
    else:
        verdict = "resonance" if res_w else "no-resonance"
    return EdgeReport(wronskian_plus=wp, wronskian_minus=wm,
                      resonance_wronskian=res_w, sv_norms=sv_norms,
                      sv_exponent=slope, resonance_sv=res_sv, verdict=verdict,
                      point_spectrum_ok=ps_ok, violations=violations)


# ---------------------------------------------------------------------------
# parameter exploration


def mode_scan(nl: Nonlinearity, omegas, grid: Grid,
              jump_factor: float = 0.1) -> list:
    """Table of (omega, lambda, N, H6 verdict) along a branch.

    lambda must vary continuously along the branch; a jump beyond
    jump_factor * lambda between consecutive rows flags an error entry.
    """
    from solstab.groundstate import build_branch
    omegas = list(omegas)
    if not omegas:
        return []
    branch = build_branch(nl, omegas, grid)
    rows = []
    prev_lam = None
    for gs in branch.states:
        row = {"omega": gs.omega, "lambda": None, "N": None, "verdict": "none",
               "error": None}
        try:
            op = assemble_H(gs, nl)
            mode = internal_mode(op)
            if mode is not None:
                row["lambda"] = mode.lam
                try:
                    row["N"] = check_H6(mode.lam, gs.omega)
                    row["verdict"] = "pass"
                except DegenerateRatioError as exc:
                    row["verdict"] = "degenerate-ratio"
                    row["error"] = str(exc)
                if prev_lam is not None and row["lambda"] is not None and \
                        abs(row["lambda"] - prev_lam) > jump_factor * prev_lam:
                    row["error"] = "lambda jump exceeds continuity threshold"
                prev_lam = row["lambda"]
            else:
                prev_lam = None
        except (MultiplicityError, DiscretizationError) as exc:
            row["verdict"] = "error"
            row["error"] = str(exc)
        rows.append(row)
    return rows
