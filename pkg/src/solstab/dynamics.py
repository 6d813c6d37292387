"""Nonlinear evolution, modulation decomposition, and stability diagnostics.

The propagator is Strang splitting: half kinetic (exact modal phases), full
nonlinear phase rotation (|u| is pointwise invariant, so mass is conserved to
roundoff), half kinetic.  Energy drift is the a-posteriori accuracy monitor.

Decomposition: u = e^{i theta} (phi_omega + r), with (omega, theta) fixed by
int Re(r) phi = 0 and int Im(r) dphi = 0 (the generalized-kernel duals of the
linearization), then z = <R, sigma3 xi> and h = r - z xi1 - zbar xi2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from solstab.fields import Field, Grid, Spinor, weighted_norm
from solstab.groundstate import Branch, GroundState, dphi_domega
from solstab.linop import InternalMode
from solstab.nonlinearity import Nonlinearity


class ConservationError(RuntimeError):
    """Invariant drift beyond the configured tolerance."""


class DecompositionError(RuntimeError):
    """Newton for the modulation parameters did not converge."""


class H4DegenerateError(RuntimeError):
    """d||phi||^2/domega vanishes: modulation rates are ill-defined."""


# ---------------------------------------------------------------------------
# invariants (also used by the lyapunov module)


def mass(grid: Grid, u: np.ndarray) -> float:
    return 0.5 * grid.h * float(np.sum(np.abs(u) ** 2))


def energy(grid: Grid, u: np.ndarray, nl: Nonlinearity) -> float:
    ux = np.fft.ifft(1j * grid.k * np.fft.fft(u))
    dens = 0.5 * np.abs(ux) ** 2 - 0.5 * nl.antiderivative(np.abs(u) ** 2)
    return grid.h * float(np.sum(dens))


# ---------------------------------------------------------------------------
# split-step propagation


@dataclass
class EvolutionConfig:
    grid: Grid
    nl: Nonlinearity
    dt: float
    T: float
    snapshot_stride: int = 10
    conservation_tol: float = 1e-8
    check_every: int = 2000
    order: int = 2                # 2 = Strang; 4 = triple-jump composition

    def __post_init__(self):
        n_steps = self.T / self.dt
        if abs(n_steps - round(n_steps)) > 1e-9:
            self.T = round(n_steps) * self.dt
        if self.order not in (2, 4):
            raise ValueError("splitting order must be 2 or 4")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def stage_coefficients(self):
        if self.order == 2:
            return [1.0], [0.5, 0.5]
        w1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
        w0 = 1.0 - 2.0 * w1
        return [w1, w0, w1], [w1 / 2, (w1 + w0) / 2, (w0 + w1) / 2, w1 / 2]


def evolve(u0: Field, cfg: EvolutionConfig,
           on_snapshot: Optional[Callable[[float, np.ndarray], None]] = None,
           abort_on_drift: bool = True) -> dict:
    """Strang split-step evolution of i u_t + u_xx + beta(|u|^2) u = 0.

    Calls on_snapshot(t, u) every snapshot_stride steps (and at t = 0, T).
    Returns the final field and the worst observed Q and E drifts.
    """
    grid, nl = cfg.grid, cfg.nl
    if grid.even and not u0.is_even(1e-10):
        raise ValueError("initial data must be even on an even-flagged grid")
    v = u0.values.copy().astype(complex)
    dt = cfg.dt
    dcoef, ccoef = cfg.stage_coefficients()
    k2 = grid.k**2

    kin_cache = {}

    def kin(c):
        if c not in kin_cache:
            kin_cache[c] = np.exp(-1j * k2 * dt * c)
        return kin_cache[c]

    Q0, E0 = mass(grid, v), energy(grid, v, nl)
    scaleQ = max(abs(Q0), 1e-300)
    # near-critical solitons can have |E| << omega Q; drift is measured
    # against the larger energy scale of the solution
    kinE = 0.5 * grid.h * float(np.sum(np.abs(np.fft.ifft(1j * grid.k * np.fft.fft(v))) ** 2))
    scaleE = max(abs(E0), kinE, 1e-12 * max(Q0, 1.0))
    worstQ = worstE = 0.0

    if on_snapshot is not None:
        on_snapshot(0.0, v.copy())
    n_steps = cfg.n_steps

    pending = 0.0     # kinetic phase owed before the next nonlinear stage
    for step in range(1, n_steps + 1):
        for j, dj in enumerate(dcoef):
            c = ccoef[j] + (pending if j == 0 else 0.0)
            pending = 0.0
            v = np.fft.ifft(kin(c) * np.fft.fft(v))
            v *= np.exp(1j * dj * dt * nl.eval(np.abs(v) ** 2, 0))
        pending = ccoef[-1]
        emit = (step % cfg.snapshot_stride == 0) or step == n_steps
        check = (step % cfg.check_every == 0) or step == n_steps
        if emit or check:
            v = np.fft.ifft(kin(pending) * np.fft.fft(v))
            pending = 0.0
            if check:
                dQ = abs(mass(grid, v) - Q0) / scaleQ
                dE = abs(energy(grid, v, nl) - E0) / scaleE
                worstQ, worstE = max(worstQ, dQ), max(worstE, dE)
                if abort_on_drift and (dQ > cfg.conservation_tol or dE > cfg.conservation_tol):
                    raise ConservationError(
                        f"invariant drift Q={dQ:.2e} E={dE:.2e} at t={step*dt:.2f} "
                        f"exceeds {cfg.conservation_tol:.0e}")
            if emit and on_snapshot is not None:
                on_snapshot(step * dt, v.copy())
    if pending:
        v = np.fft.ifft(kin(pending) * np.fft.fft(v))
    return {"u": Field(grid, v), "drift_Q": worstQ, "drift_E": worstE}


# ---------------------------------------------------------------------------
# modulation decomposition


class SolitonFamily:
    """Cubic-Hermite interpolation of the branch (phi, dphi/domega) in omega.

    The interpolant keeps the family C^1 between mesh points so the
    decomposition Newton has a smooth Jacobian; the O(step^4) interpolation
    bias only re-parameterizes the working family.
    """

    def __init__(self, branch: Branch, nl: Nonlinearity):
        self.omegas = branch.omegas
        self.nl = nl
        for gs in branch.states:
            if gs.dphi is None:
                dphi_domega(gs, nl)
        self.P = np.stack([gs.phi.values.real for gs in branch.states])
        self.DP = np.stack([gs.dphi.values.real for gs in branch.states])

    def eval(self, om: float):
        """(phi, dphi, d2phi) at omega by Hermite interpolation."""
        oms = self.omegas
        if len(oms) == 1:
            return self.P[0], self.DP[0], np.zeros_like(self.P[0])
        i = int(np.clip(np.searchsorted(oms, om) - 1, 0, len(oms) - 2))
        w0, w1 = oms[i], oms[i + 1]
        d = w1 - w0
        s = (om - w0) / d
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        phi = h00 * self.P[i] + h10 * d * self.DP[i] \
            + h01 * self.P[i + 1] + h11 * d * self.DP[i + 1]
        dh00 = (6 * s**2 - 6 * s) / d
        dh10 = (3 * s**2 - 4 * s + 1)
        dh01 = (-6 * s**2 + 6 * s) / d
        dh11 = (3 * s**2 - 2 * s)
        dphi = dh00 * self.P[i] + dh10 * self.DP[i] * 1.0 \
            + dh01 * self.P[i + 1] + dh11 * self.DP[i + 1]
        d2h00 = (12 * s - 6) / d**2
        d2h10 = (6 * s - 4) / d
        d2h01 = (-12 * s + 6) / d**2
        d2h11 = (6 * s - 2) / d
        d2phi = d2h00 * self.P[i] + d2h10 * self.DP[i] \
            + d2h01 * self.P[i + 1] + d2h11 * self.DP[i + 1]
        return phi, dphi, d2phi


@dataclass
class SpectralFrame:
    """Frozen discrete-spectrum data interpolated to the dynamics grid."""
    branch: Branch
    nl: Nonlinearity
    mode_of: Callable[[float], tuple]   # omega -> (lam, xi1, xi2) on the grid
    grid: Grid
    family: SolitonFamily = None

    def __post_init__(self):
        if self.family is None:
            self.family = SolitonFamily(self.branch, self.nl)

    def soliton(self, omega: float):
        """Nearest exact branch state (for Q-scale bookkeeping)."""
        gs = self.branch.state(omega)
        if gs.dphi is None:
            dphi_domega(gs, self.nl)
        return gs


def make_frame(branch: Branch, nl: Nonlinearity, grid: Grid,
               modes: Optional[dict] = None) -> SpectralFrame:
    """modes: {omega: InternalMode-on-spectrum-grid} interpolated spectrally."""
    from solstab.groundstate import _spectral_resample

    table = {}
    if modes:
        for om, mode in modes.items():
            if mode is None:
                continue
            x1 = mode.xi.up.values.real
            x2 = mode.xi.lo.values.real
            if mode.xi.grid.n != grid.n:
                x1 = _spectral_resample(mode.xi.grid, grid, x1)
                x2 = _spectral_resample(mode.xi.grid, grid, x2)
            table[round(om, 10)] = (mode.lam, x1, x2)

    def mode_of(omega: float):
        if not table:
            return None
        oms = np.array(sorted(table))
        j = int(np.argmin(np.abs(oms - omega)))
        if len(oms) == 1 or abs(oms[j] - omega) < 1e-12:
            return table[round(oms[j], 10)]
        # linear interpolation between the two nearest tabulated modes
        if oms[j] > omega and j > 0:
            j -= 1
        j2 = min(j + 1, len(oms) - 1)
        if j2 == j:
            return table[round(oms[j], 10)]
        t = (omega - oms[j]) / (oms[j2] - oms[j])
        l1, a1, b1 = table[round(oms[j], 10)]
        l2, a2, b2 = table[round(oms[j2], 10)]
        return ((1 - t) * l1 + t * l2, (1 - t) * a1 + t * a2, (1 - t) * b1 + t * b2)

    return SpectralFrame(branch=branch, nl=nl, mode_of=mode_of, grid=grid)


@dataclass
class Decomposition:
    omega: float
    theta: float                  # total phase at this snapshot
    z: complex
    h: np.ndarray                 # first radiation component
    r: np.ndarray                 # full perturbation, r = u e^{-i theta} - phi
    residuals: tuple              # the two orthogonality residuals
    orth: tuple                   # all four discrete pairings of f


def decompose(u: Field, frame: SpectralFrame, omega0: Optional[float] = None,
              theta0: float = 0.0, max_steps: int = 30,
              tol: float = 1e-12, radius: float = 1.0,
              trust: float = 0.15) -> Decomposition:
    """Newton on (omega, theta) for the kernel-dual orthogonality conditions.

    Conditions: <Re r, phi> = 0 and <Im r, dphi> = 0 with
    r = e^{-i theta} u - phi_omega; then z from the sigma3 xi pairing and
    h = r - z xi1 - zbar xi2.
    """
    grid = u.grid
    h_w = grid.h
    uv = u.values
    br = frame.branch
    fam = frame.family
    if omega0 is None:
        omega0 = br.omegas[len(br.omegas) // 2]
        theta0 = float(np.angle(h_w * np.sum(uv * fam.eval(omega0)[0])))
    om, th = float(omega0), float(theta0)

    def residual(om, th):
        phi, dphi, d2phi = fam.eval(om)
        r = np.exp(-1j * th) * uv - phi
        c1 = h_w * np.sum(r.real * phi)
        c2 = h_w * np.sum(r.imag * dphi)
        return np.array([c1, c2]), r, (phi, dphi, d2phi)

    qscale = float(h_w * np.sum(fam.eval(om)[0] ** 2))
    om_start = om
    for it in range(max_steps):
        c, r, (phi, dphi, d2phi) = residual(om, th)
        if np.max(np.abs(c)) <= tol * max(1.0, qscale):
            break
        halfD = h_w * np.sum(phi * dphi)
        J = np.array([
            # d(c1)/dom, d(c1)/dth
            [h_w * np.sum(r.real * dphi) - halfD, h_w * np.sum(r.imag * phi)],
            # d(c2)/dom, d(c2)/dth
            [h_w * np.sum(r.imag * d2phi),
             -h_w * np.sum((phi + r.real) * dphi)],
        ])
        # Levenberg guard: near-singular Jacobians occur transiently when the
        # radiation's dphi-overlap crosses D/2; damp instead of exploding
        jn = np.linalg.norm(J)
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        if abs(det) < 0.05 * jn**2:
            JtJ = J.T @ J + (0.1 * jn) ** 2 * np.eye(2)
            step = np.linalg.solve(JtJ, -J.T @ c)
        else:
            step = np.linalg.solve(J, -c)
        lim = max(1.0, abs(step[0]) / 0.02, abs(step[1]) / 0.2)
        om += step[0] / lim
        th += step[1] / lim
        if abs(om - om_start) > trust or \
                om <= br.omegas[0] - 0.05 or om >= br.omegas[-1] + 0.05:
            raise DecompositionError(
                f"omega left the trust window at {om:.4f}")
    else:
        raise DecompositionError(
            f"no convergence in {max_steps} steps (last residuals {c})")

    phi, dphi, _ = fam.eval(om)
    r = np.exp(-1j * th) * uv - phi
    rnorm = np.sqrt(h_w * np.sum(np.abs(r) ** 2))
    if rnorm > radius * np.sqrt(qscale):
        raise DecompositionError(
            f"perturbation norm {rnorm:.3f} outside the orbital neighborhood")

    md = frame.mode_of(om)
    if md is None:
        z = 0.0 + 0.0j
        hfield = r.copy()
        orth = (0.0, 0.0, 0.0, 0.0)
    else:
        lam, x1, x2 = md
        # z = <R, sigma3 xi> = int (r xi1 - rbar xi2)
        z = h_w * (np.sum(r * x1) - np.sum(np.conj(r) * x2))
        hfield = r - z * x1 - np.conj(z) * x2
        hb = np.conj(hfield)
        orth = (
            abs(h_w * np.sum((hfield + hb) * phi)),                      # <f, Phi>
            abs(h_w * np.sum((hfield - hb) * dphi)),                     # <f, s3 dPhi>
            abs(h_w * (np.sum(hfield * x1) - np.sum(hb * x2))),          # <f, s3 xi>
            abs(h_w * (np.sum(hfield * x2) - np.sum(hb * x1))),          # <f, s3 s1 xi>
        )
    c, _, _ = residual(om, th)
    return Decomposition(omega=om, theta=th, z=complex(z), h=hfield, r=r,
                         residuals=(float(c[0]), float(c[1])), orth=orth)


def reconstruct(dec: Decomposition, frame: SpectralFrame) -> Field:
    phi = frame.family.eval(dec.omega)[0]
    md = frame.mode_of(dec.omega)
    r = dec.h.copy()
    if md is not None:
        _, x1, x2 = md
        r = r + dec.z * x1 + np.conj(dec.z) * x2
    return Field(frame.grid, np.exp(1j * dec.theta) * (phi + r))


# ---------------------------------------------------------------------------
# modulation rates (2.4)


def modulation_rates(dec: Decomposition, frame: SpectralFrame,
                     d2phi: Optional[np.ndarray] = None,
                     dxi: Optional[tuple] = None) -> tuple:
    """(omega_dot, gamma_dot, z_dot) predicted from the modulation system.

    Solves the exact 2x2 system obtained by pairing the R-equation with the
    adjoint kernel {Phi, sigma3 dPhi} (constraint-differentiated left sides),
    then evaluates the z-ODE pairing with sigma3 xi.  The nonlinear remainder
    is evaluated exactly on the grid, no Taylor truncation.
    """
    from solstab.normalform import nonlinear_remainder

    grid = frame.grid
    hw = grid.h
    phi, dphi, d2phi_fam = frame.family.eval(dec.omega)
    if d2phi is None:
        d2phi = d2phi_fam
    D = 2.0 * hw * float(np.sum(phi * dphi))
    if abs(D) < 1e-6 * hw * np.sum(phi**2):
        raise H4DegenerateError(f"d||phi||^2/domega = {D:.2e} too small")

    r = dec.r
    Ncal = nonlinear_remainder(frame.nl, phi, r)

    # pair with Phi: i odot [D + <f-part..>] terms; exact scalars:
    reN_dphi = hw * float(np.sum(Ncal.real * dphi))
    imN_phi = hw * float(np.sum(Ncal.imag * phi))
    re_r_dphi = hw * float(np.sum(r.real * dphi))
    im_r_phi = hw * float(np.sum(r.imag * phi))

    # Equation (I):  <iR_t, Phi> = -i odot <R, dPhi>
    #   -i odot (2 re_r_dphi) = gdot <R, s3 Phi> - i odot D + <NL, Phi>
    #   with <R, s3 Phi> = 2i im_r_phi, <NL, Phi> = -2i imN_phi
    # Equation (II): <iR_t, s3 dPhi> = -i odot <R, s3 d2Phi>
    #   -i odot (2i im_r_d2phi) = gdot <R, dPhi> + gdot D + <NL, s3 dPhi>
    #   with <R, dPhi> = 2 re_r_dphi, <NL, s3 dPhi> = -2 reN_dphi
    im_r_d2phi = hw * float(np.sum(r.imag * d2phi))
    A = np.array([
        [D - 2.0 * re_r_dphi, -2.0 * im_r_phi],
        [-2.0 * im_r_d2phi, D + 2.0 * re_r_dphi],
    ])
    b = np.array([-2.0 * imN_phi, -2.0 * reN_dphi])
    try:
        odot, gdot = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise H4DegenerateError("singular modulation system") from exc

    md = frame.mode_of(dec.omega)
    zdot = 0.0 + 0.0j
    if md is not None:
        lam, x1, x2 = md
        rb = np.conj(r)
        pair_s3xi = lambda a: hw * (np.sum(a * x1) - np.sum(np.conj(a) * x2))
        # i zdot = lam z + gdot <R, xi> + gdot <s3 Phi, s3 xi> - i odot <dPhi, s3 xi>
        #          + <NL, s3 xi> + i odot <R, s3 dxi>
        z = dec.z
        R_xi = hw * (np.sum(r * x1) + np.sum(rb * x2))
        eA = hw * float(np.sum(phi * (x1 + x2)))
        eDs = hw * float(np.sum(dphi * (x1 - x2)))
        NL_pair = hw * (np.sum(-Ncal * x1) - np.sum(np.conj(Ncal) * x2))
        drift = 0.0
        if dxi is not None:
            dx1, dx2 = dxi
            drift = hw * ((np.sum(r * dx1) - np.sum(rb * dx2)))
        rhs = lam * z + gdot * R_xi + gdot * eA - 1j * odot * eDs + NL_pair \
            + 1j * odot * drift
        zdot = -1j * rhs
    return float(odot), float(gdot), complex(zdot)


# ---------------------------------------------------------------------------
# orbital distance


def orbital_distance(u: Field, branch: Branch, nl: Nonlinearity,
                     refine: bool = True) -> float:
    """inf over (gamma, omega-mesh) of ||u - e^{i gamma} phi_omega||_{H^1}.

    gamma is minimized in closed form through the H^1 pairing; omega by mesh
    search with one quadratic refinement.
    """
    grid = u.grid
    k2 = grid.k**2
    uh = np.fft.fft(u.values)

    def dist2_at(gs: GroundState) -> float:
        phih = np.fft.fft(gs.phi.values.real)
        cross = np.sum((1.0 + k2) * uh * np.conj(phih)) / grid.n * grid.h
        nu = np.sum((1.0 + k2) * np.abs(uh) ** 2) / grid.n * grid.h
        np_ = np.sum((1.0 + k2) * np.abs(phih) ** 2) / grid.n * grid.h
        return float(nu + np_ - 2.0 * np.abs(cross))

    vals = [dist2_at(gs) for gs in branch.states]
    j = int(np.argmin(vals))
    best = vals[j]
    if refine and 0 < j < len(vals) - 1:
        # quadratic fit through the three neighbors
        w = branch.omegas[j - 1:j + 2]
        v = np.array(vals[j - 1:j + 2])
        denom = (v[0] - 2 * v[1] + v[2])
        if denom > 0:
            om_star = w[1] - 0.5 * (w[2] - w[0]) / 2 * (v[2] - v[0]) / denom
            vmin = v[1] - (v[2] - v[0]) ** 2 / (8 * denom)
            best = min(best, max(vmin, 0.0))
    return float(np.sqrt(max(best, 0.0)))


# ---------------------------------------------------------------------------
# track container and the evolve+decompose driver


@dataclass
class ModulationTrack:
    t: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray                 # theta(t) - int omega dt, unwrapped
    theta: np.ndarray
    z: np.ndarray
    f_h1: np.ndarray                  # H^1 norm of h
    f_h1w2: np.ndarray                # H^{1,-2} norm of h
    f_linf: np.ndarray
    f_w110: np.ndarray                # W^{1,10} proxy of h
    orb_dist: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    drift_Q: float
    drift_E: float
    wrap_mass: np.ndarray             # |u| mass near |x| = L (wrap monitor)
    h_snapshots: list                 # sparse (t, theta, h-array) for scattering

    def as_columns(self) -> dict:
        return {
            "t": self.t, "omega": self.omega, "gamma": self.gamma,
            "re_z": self.z.real, "im_z": self.z.imag, "abs_z": np.abs(self.z),
            "f_h1": self.f_h1, "f_h1w2": self.f_h1w2,
            "orb_dist": self.orb_dist, "Q": self.Q, "E": self.E,
        }


def run_track(u0: Field, cfg: EvolutionConfig, frame: SpectralFrame,
              keep_fields_at: Optional[np.ndarray] = None,
              abort_on_drift: bool = True) -> ModulationTrack:
    """Evolve and decompose every snapshot; Theta accumulated by trapezoid."""
    grid = cfg.grid
    nl = cfg.nl
    rows = []
    hsnaps = []
    keep = np.sort(keep_fields_at) if keep_fields_at is not None else np.array([])
    kept = 0
    state = {"om": None, "th": 0.0, "fail": 0}
    wrap_sel = np.abs(grid.x) > 0.9 * grid.L

    def on_snap(t, u):
        nonlocal kept
        f = Field(grid, u.copy())
        dec = decompose(f, frame, omega0=state["om"], theta0=state["th"])
        state["om"], state["th"] = dec.omega, dec.theta
        wrap = grid.h * float(np.sum(np.abs(u[wrap_sel]) ** 2))
        hfield = Field(grid, dec.h)
        dist = orbital_distance(f, frame.branch, nl)
        rows.append((t, dec.omega, dec.theta, dec.z,
                     weighted_norm(hfield, 1, 0.0), weighted_norm(hfield, 1, -2.0),
                     float(np.max(np.abs(dec.h))), _w110(hfield),
                     dist, mass(grid, u), energy(grid, u, nl), wrap))
        if kept < keep.size and t >= keep[kept] - 1e-12:
            hsnaps.append((t, dec.theta, dec.h.copy()))
            kept += 1

    out = evolve(u0, cfg, on_snapshot=on_snap, abort_on_drift=abort_on_drift)
    cols = list(zip(*rows))
    t = np.array(cols[0])
    theta = np.unwrap(np.array(cols[2]))
    omega = np.array(cols[1])
    # gamma(t) = theta(t) - int_0^t omega ds (trapezoid)
    integ = np.concatenate([[0.0], np.cumsum(0.5 * (omega[1:] + omega[:-1]) * np.diff(t))])
    return ModulationTrack(
        t=t, omega=omega, gamma=theta - integ, theta=theta,
        z=np.array(cols[3]), f_h1=np.array(cols[4]), f_h1w2=np.array(cols[5]),
        f_linf=np.array(cols[6]), f_w110=np.array(cols[7]),
        orb_dist=np.array(cols[8]), Q=np.array(cols[9]), E=np.array(cols[10]),
        drift_Q=out["drift_Q"], drift_E=out["drift_E"],
        wrap_mass=np.array(cols[11]), h_snapshots=hsnaps)


def _w110(f: Field) -> float:
    from solstab.fields import derivative
    h = f.grid.h
    fx = derivative(f, 1)
    n10 = (h * np.sum(np.abs(f.values) ** 10)) ** 0.1
    nx10 = (h * np.sum(np.abs(fx.values) ** 10)) ** 0.1
    return float(np.hypot(n10, nx10))


# ---------------------------------------------------------------------------
# Theorem 4.1 diagnostics


@dataclass
class NormReport:
    z_l2N2: float                 # (int |z|^{2N+2})^{1/(2N+2)} full-horizon
    z_sat: float                  # relative growth of int |z|^{2N+2} from T/2 to T
    h_linf_h1: float
    h_l5_w110: float
    h_l4_linf: float
    h_l2_h1w2: float
    saturating: bool

    def as_dict(self) -> dict:
        return {"z_L2N2": self.z_l2N2, "z_saturation": self.z_sat,
                "h_Linf_H1": self.h_linf_h1, "h_L5_W110": self.h_l5_w110,
                "h_L4_Linf": self.h_l4_linf, "h_L2_H1w2": self.h_l2_h1w2,
                "saturating": self.saturating}


def diagnostics(track: ModulationTrack, N: int, sat_tol: float = 0.05) -> NormReport:
    """Running Theorem-norms of the track with a saturation verdict."""
    t = track.t
    alpha = 2 * N + 2

    def run_int(y, p):
        return np.concatenate([[0.0], np.cumsum(0.5 * (y[1:]**p + y[:-1]**p) * np.diff(t))])

    Iz = run_int(np.abs(track.z), alpha)
    I5 = run_int(track.f_w110, 5)
    I4 = run_int(track.f_linf, 4)
    I2 = run_int(track.f_h1w2, 2)
    half = int(np.searchsorted(t, t[-1] / 2.0))
    z_sat = (Iz[-1] - Iz[half]) / max(Iz[-1], 1e-300)
    return NormReport(
        z_l2N2=float(Iz[-1] ** (1 / alpha)), z_sat=float(z_sat),
        h_linf_h1=float(np.max(track.f_h1)),
        h_l5_w110=float(I5[-1] ** 0.2),
        h_l4_linf=float(I4[-1] ** 0.25),
        h_l2_h1w2=float(np.sqrt(I2[-1])),
        saturating=bool(z_sat <= sat_tol))


def saturation_of_samples(t: np.ndarray, zabs: np.ndarray, N: int,
                          sat_tol: float = 0.05) -> bool:
    """Saturation verdict for synthetic |z(t)| samples."""
    alpha = 2 * N + 2
    I = np.concatenate([[0.0], np.cumsum(0.5 * (zabs[1:]**alpha + zabs[:-1]**alpha)
                                         * np.diff(t))])
    half = int(np.searchsorted(t, t[-1] / 2.0))
    return bool((I[-1] - I[half]) / max(I[-1], 1e-300) <= sat_tol)


# ---------------------------------------------------------------------------
# FGR decay fit


@dataclass
class DecayFit:
    gamma_dyn: float
    exponent: float
    conclusive: bool
    decay_factor: float

    def as_dict(self) -> dict:
        return {"gamma_dyn": self.gamma_dyn, "exponent": self.exponent,
                "conclusive": self.conclusive, "decay_factor": self.decay_factor}


def envelope(t: np.ndarray, zabs: np.ndarray, lam: float) -> tuple:
    """Moving-median envelope of |z| over ~2 internal-mode periods."""
    if lam <= 0:
        return t, zabs
    period = 2 * np.pi / lam
    dt = np.median(np.diff(t))
    w = max(3, int(2 * period / max(dt, 1e-12)))
    w += (w + 1) % 2
    pad = w // 2
    padded = np.concatenate([zabs[:pad][::-1], zabs, zabs[-pad:][::-1]])
    med = np.array([np.median(padded[i:i + w]) for i in range(len(zabs))])
    return t, med


def fgr_decay_fit(track_t: np.ndarray, track_z: np.ndarray, N: int,
                  lam: float = 0.0, min_decay: float = 2.0) -> DecayFit:
    """Fit d|z|^2/dt = -2 Gamma |z|^{2N+2} and the late-time envelope slope.

    Requires |z| to decay by at least min_decay over the record, otherwise the
    fit is flagged inconclusive.
    """
    t, env = envelope(track_t, np.abs(track_z), lam)
    start = env[:max(3, len(env) // 20)].mean()
    end = env[-max(3, len(env) // 20):].mean()
    factor = start / max(end, 1e-300)
    conclusive = factor >= min_decay

    y = env**2
    dydt = np.gradient(y, t)
    x = -(env ** (2 * N + 2))
    sel = np.abs(x) > 1e-300
    denom = float(np.sum(x[sel] ** 2))
    coef = float(np.sum(x[sel] * dydt[sel])) / denom if denom > 0 else 0.0
    gamma_dyn = coef / 2.0

    # envelope log-slope over the final decade of t
    t0 = t[-1] / 10.0
    sel2 = t >= max(t0, t[1])
    slope = 0.0
    if sel2.sum() > 4:
        slope = float(np.polyfit(np.log(t[sel2]), np.log(np.maximum(env[sel2], 1e-300)), 1)[0])
    return DecayFit(gamma_dyn=gamma_dyn, exponent=slope, conclusive=bool(conclusive),
                    decay_factor=float(factor))


# ---------------------------------------------------------------------------
# scattering extraction


@dataclass
class ScatterResult:
    times: np.ndarray
    cauchy: np.ndarray            # ||pullback(T_{i+1}) - pullback(T_i)||_{H^1}
    h_inf: np.ndarray
    final_defect: float
    decreasing: bool

    def as_dict(self) -> dict:
        return {"times": self.times.tolist(), "cauchy": self.cauchy.tolist(),
                "final_defect": self.final_defect, "decreasing": self.decreasing}


def extract_scattering(grid: Grid, snapshots: list) -> ScatterResult:
    """Free-flow pullbacks of e^{i Theta} h(T) at geometric times.

    snapshots: list of (t, Theta(t), h-array).  The pullback inverts
    e^{i t d^2/dx^2} spectrally; h_inf is the last pullback and the Cauchy
    curve must trend downward for a scattering verdict.
    """
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    k2 = grid.k**2
    pulls = []
    ts = []
    for (t, theta, h) in snapshots:
        ph = np.fft.fft(np.exp(1j * theta) * h)
        pulls.append(np.fft.ifft(np.exp(1j * k2 * t) * ph))
        ts.append(t)
    ts = np.array(ts)
    cauchy = []
    for a, b in zip(pulls[:-1], pulls[1:]):
        d = Field(grid, b - a)
        cauchy.append(weighted_norm(d, 1, 0.0))
    cauchy = np.array(cauchy)
    ncmp = max(1, len(cauchy) // 3)
    early = cauchy[:ncmp].mean()
    late = cauchy[-ncmp:].mean()
    return ScatterResult(times=ts, cauchy=cauchy, h_inf=pulls[-1],
                         final_defect=float(cauchy[-1]),
                         decreasing=bool(late <= early * (1 + 1e-9)))
