"""Ground-state solver for u'' - omega u + beta(u^2) u = 0 and the Q(omega) branch.

The Newton linearization is exactly L+ = -dxx + omega - beta(phi^2)
- 2 beta'(phi^2) phi^2 restricted to the even sector; it is solved densely on a
coarse mesh (n <= 1024) and the solution is spectrally interpolated and
re-polished matrix-free on the target grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from solstab.evensector import even_sector
from solstab.fields import Field, Grid, make_grid
from solstab.nonlinearity import Nonlinearity

RESIDUAL_REL_TOL = 1e-9


class NonconvergenceError(RuntimeError):
    """Newton failed to reach the residual target."""


class BifurcationError(RuntimeError):
    """Iterates left the positive cone; not on the ground-state branch."""


class SingularOperatorError(RuntimeError):
    """L+ (even sector) is numerically singular, e.g. at a fold point."""


@dataclass
class GroundState:
    omega: float
    phi: Field                    # positive, even, real
    dphi: Optional[Field] = None  # d phi / d omega, filled lazily
    residual: float = 0.0         # ||phi'' - omega phi + beta(phi^2) phi||_2
    decay_rate: float = 0.0       # fitted a in phi ~ e^{-a|x|}
    newton_steps: int = 0

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    def q_norm(self) -> float:
        """Q(omega) = ||phi||_L2^2."""
        return float(self.phi.norm() ** 2)


def _ode_residual(es, nl: Nonlinearity, omega: float, phi_h: np.ndarray) -> np.ndarray:
    return es.d2 @ phi_h - omega * phi_h + nl.eval(phi_h**2, 0) * phi_h


def _lplus_diag(nl: Nonlinearity, omega: float, phi_h: np.ndarray) -> np.ndarray:
    s = phi_h**2
    return omega - nl.eval(s, 0) - 2.0 * nl.eval(s, 1) * s


def lplus_apply(nl: Nonlinearity, omega: float, phi: Field, v: Field) -> Field:
    """Matrix-free L+ v on the full grid."""
    from solstab.fields import derivative
    s = phi.values.real**2
    pot = omega - nl.eval(s, 0) - 2.0 * nl.eval(s, 1) * s
    return Field(v.grid, -derivative(v, 2).values + pot * v.values)


def _fit_decay(grid: Grid, vals: np.ndarray) -> float:
    x = grid.x
    sel = (x >= 0.35 * grid.L) & (x <= 0.75 * grid.L) & (np.abs(vals) > 1e-300)
    if sel.sum() < 8:
        return 0.0
    slope = np.polyfit(x[sel], np.log(np.abs(vals[sel])), 1)[0]
    return float(-slope)


def _sech_guess(es, nl: Nonlinearity, omega: float) -> np.ndarray:
    # amplitude/width pre-fit keeps Newton inside its basin for families
    # whose profile deviates from the cubic sech
    best, best_r = None, np.inf
    for b in np.linspace(0.5, 1.6, 12):
        base = 1.0 / np.cosh(b * np.sqrt(omega) * es.x)
        for a in np.sqrt(2.0 * omega) * np.linspace(0.3, 3.0, 41):
            r = np.linalg.norm(_ode_residual(es, nl, omega, a * base))
            if r < best_r:
                best, best_r = a * base, r
    return best


def _newton_even(es, nl, omega, phi_h, max_steps=50, tol_rel=1e-13):
    scale = np.linalg.norm(phi_h) or 1.0
    steps = 0
    res = _ode_residual(es, nl, omega, phi_h)
    rnorm = np.linalg.norm(res)
    for _ in range(max_steps):
        if rnorm <= tol_rel * max(np.linalg.norm(phi_h), scale):
            return phi_h, rnorm, steps
        J = -es.d2.copy()
        idx = np.arange(es.m)
        J[idx, idx] += _lplus_diag(nl, omega, phi_h)
        try:
            delta = np.linalg.solve(J, res)
        except np.linalg.LinAlgError as exc:
            raise SingularOperatorError("even-sector L+ is singular") from exc
        damping = 1.0
        while damping >= 1.0 / 64:
            cand = phi_h + damping * delta
            if np.min(cand) < -1e-10 * np.max(np.abs(cand)):
                damping /= 2.0
                continue
            cand_res = _ode_residual(es, nl, omega, cand)
            cand_rnorm = np.linalg.norm(cand_res)
            if cand_rnorm < rnorm or rnorm < 1e-14 * scale:
                phi_h, res, rnorm = cand, cand_res, cand_rnorm
                break
            damping /= 2.0
        else:
            if np.min(phi_h + delta) < 0:
                raise BifurcationError(
                    "Newton iterate changed sign; left the ground-state branch")
            raise NonconvergenceError(
                f"Newton stalled at residual {rnorm:.3e} after {steps} steps")
        steps += 1
    raise NonconvergenceError(f"no convergence in {max_steps} Newton steps")


def _refine_full(grid: Grid, nl, omega, phi_vals, tol, max_outer=4):
    """Matrix-free Newton polish at full resolution (preconditioned GMRES).

    The coarse solution is usually spectrally converged already, so this stops
    as soon as the residual target holds or the defect correction stops
    paying (FFT roundoff floor).
    """
    k2 = grid.k**2
    n = grid.n
    phi = phi_vals.copy()

    def residual(p):
        d2p = np.fft.ifft(-(k2) * np.fft.fft(p)).real
        return d2p - omega * p + nl.eval(p**2, 0) * p

    precon_symbol = 1.0 / (k2 + omega)
    rn = np.linalg.norm(residual(phi))
    target = tol * max(np.linalg.norm(phi), 1.0)
    for _ in range(max_outer):
        if rn <= target:
            break
        s = phi**2
        pot = omega - nl.eval(s, 0) - 2.0 * nl.eval(s, 1) * s

        def lplus(v):
            return np.fft.ifft(k2 * np.fft.fft(v)).real + pot * v

        def prec(v):
            return np.fft.ifft(precon_symbol * np.fft.fft(v)).real

        A = spla.LinearOperator((n, n), matvec=lplus, dtype=float)
        M = spla.LinearOperator((n, n), matvec=prec, dtype=float)
        delta, _ = spla.lgmres(A, residual(phi), M=M, rtol=1e-8, atol=0.0, maxiter=100)
        cand = phi - delta
        cand_rn = np.linalg.norm(residual(cand))
        if cand_rn >= rn:
            break
        phi, rn = cand, cand_rn
    return phi


def solve_ground_state(nl: Nonlinearity, omega: float, grid: Grid,
                       guess: Optional[Field] = None,
                       coarse_n: int = 1024) -> GroundState:
    """Damped-Newton ground state at frequency omega on an even grid.

    The default initial guess is sqrt(2 omega) sech(sqrt(omega) x) rescaled by
    a fitted amplitude.  Sign-changing iterates are rejected rather than
    projected, so leaving the branch surfaces as BifurcationError.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    if not grid.even:
        raise ValueError("ground states require an even-flagged grid")

    nc = min(grid.n, coarse_n)
    cgrid = grid if nc == grid.n else make_grid(grid.L, nc)
    es = even_sector(cgrid)

    if guess is not None:
        if guess.grid.n == grid.n:
            start = even_sector(grid).restrict(guess.values.real)
            if grid.n != nc:
                start = _spectral_resample_half(grid, cgrid, guess.values.real)
        else:
            start = even_sector(guess.grid).restrict(guess.values.real)
            if guess.grid.n != nc:
                start = _spectral_resample_half(guess.grid, cgrid, guess.values.real)
    else:
        start = _sech_guess(es, nl, omega)

    phi_h, rnorm, steps = _newton_even(es, nl, omega, start)

    full_vals = es.embed(phi_h)
    if grid.n != cgrid.n:
        full_vals = _spectral_resample(cgrid, grid, full_vals)
        full_vals = _refine_full(grid, nl, omega, full_vals, tol=1e-12)

    phi = Field(grid, full_vals)
    res_field = _full_residual(grid, nl, omega, full_vals)
    rfull = float(np.linalg.norm(res_field) * np.sqrt(grid.h))
    pn = phi.norm()
    if pn < 1e-6 or np.max(full_vals) < 1e-6:
        raise BifurcationError(
            "Newton collapsed to the trivial solution (no ground state here?)")
    if rfull > RESIDUAL_REL_TOL * pn:
        raise NonconvergenceError(f"full-grid residual {rfull:.2e} above {RESIDUAL_REL_TOL:.0e} * ||phi||")
    gs = GroundState(omega=float(omega), phi=phi, residual=rfull,
                     decay_rate=_fit_decay(grid, full_vals), newton_steps=steps)
    return gs


def _full_residual(grid, nl, omega, p):
    d2p = np.fft.ifft(-(grid.k**2) * np.fft.fft(p)).real
    return d2p - omega * p + nl.eval(p**2, 0) * p


def _spectral_resample(src: Grid, dst: Grid, vals: np.ndarray) -> np.ndarray:
    """Zero-padded FFT interpolation between grids of equal L."""
    if src.L != dst.L:
        raise ValueError("resampling requires equal half-widths")
    ft = np.fft.fft(vals)
    out = np.zeros(dst.n, dtype=complex)
    m = min(src.n, dst.n) // 2
    out[:m] = ft[:m]
    out[-m:] = ft[-m:]
    out *= dst.n / src.n
    res = np.fft.ifft(out)
    return res.real if np.isrealobj(vals) else res


def _spectral_resample_half(src: Grid, dst: Grid, vals: np.ndarray) -> np.ndarray:
    return even_sector(dst).restrict(_spectral_resample(src, dst, vals))


def dphi_domega(gs: GroundState, nl: Nonlinearity) -> Field:
    """d phi/d omega by solving L+ v = -phi on the even sector."""
    grid = gs.grid
    nc = min(grid.n, 1024)
    cgrid = grid if nc == grid.n else make_grid(grid.L, nc)
    es = even_sector(cgrid)
    phi_h = es.restrict(gs.phi.values.real) if nc == grid.n else \
        _spectral_resample_half(grid, cgrid, gs.phi.values.real)

    J = -es.d2.copy()
    idx = np.arange(es.m)
    J[idx, idx] += _lplus_diag(nl, gs.omega, phi_h)
    try:
        v_h = np.linalg.solve(J, -phi_h)
    except np.linalg.LinAlgError as exc:
        raise SingularOperatorError("L+ singular on the even sector (fold point?)") from exc
    cond_probe = np.linalg.norm(J @ v_h + phi_h) / max(np.linalg.norm(phi_h), 1e-300)
    if cond_probe > 1e-6:
        raise SingularOperatorError(f"L+ solve lost accuracy (residual {cond_probe:.1e})")

    vals = es.embed(v_h)
    if grid.n != cgrid.n:
        vals = _spectral_resample(cgrid, grid, vals)
        # one matrix-free defect-correction pass at full resolution
        k2 = grid.k**2
        s = gs.phi.values.real**2
        pot = gs.omega - nl.eval(s, 0) - 2.0 * nl.eval(s, 1) * s

        def lplus(u):
            return np.fft.ifft(k2 * np.fft.fft(u)).real + pot * u

        A = spla.LinearOperator((grid.n, grid.n), matvec=lplus, dtype=float)
        M = spla.LinearOperator((grid.n, grid.n),
                                matvec=lambda u: np.fft.ifft(np.fft.fft(u) / (k2 + gs.omega)).real,
                                dtype=float)
        defect = lplus(vals) + gs.phi.values.real
        corr, info = spla.lgmres(A, defect, M=M, rtol=1e-12, atol=0.0, maxiter=200)
        if info == 0:
            vals = vals - corr

    v = Field(grid, vals)
    gs.dphi = v
    return v


def dphi_fd_error(gs: GroundState, nl: Nonlinearity, v: Field,
                  fd_delta: float = 1e-4) -> float:
    """Relative L2 gap between v and the centered difference of the branch."""
    gsp = solve_ground_state(nl, gs.omega + fd_delta, gs.grid, guess=gs.phi)
    gsm = solve_ground_state(nl, gs.omega - fd_delta, gs.grid, guess=gs.phi)
    fd = (gsp.phi.values.real - gsm.phi.values.real) / (2.0 * fd_delta)
    return float(np.linalg.norm(fd - v.values.real)
                 / max(np.linalg.norm(v.values.real), 1e-300))


@dataclass
class Branch:
    omegas: np.ndarray
    states: list
    Q: np.ndarray                 # ||phi||_L2^2 per mesh point

    def state(self, omega: float) -> GroundState:
        i = int(np.argmin(np.abs(self.omegas - omega)))
        return self.states[i]

    def dq_centered(self) -> np.ndarray:
        return np.gradient(self.Q, self.omegas)


def build_branch(nl: Nonlinearity, omegas, grid: Grid,
                 continuation_step: float = 0.02) -> Branch:
    """Continuation in omega; each previous solution seeds the next solve."""
    omegas = np.asarray(sorted(float(w) for w in omegas))
    if omegas.size and np.any(np.diff(omegas) <= 0):
        raise ValueError("omega mesh must be strictly increasing")
    states = []
    prev = None
    for w in omegas:
        if prev is None:
            states.append(solve_ground_state(nl, w, grid))
        else:
            w0 = prev.omega
            guess = prev.phi
            nsub = max(1, int(np.ceil(abs(w - w0) / continuation_step)))
            for j in range(1, nsub + 1):
                wj = w0 + (w - w0) * j / nsub
                inter = solve_ground_state(nl, wj, grid, guess=guess)
                guess = inter.phi
            states.append(inter)
        prev = states[-1]
    Q = np.array([s.q_norm() for s in states])
    return Branch(omegas=omegas, states=states, Q=Q)


@dataclass
class SlopeVerdict:
    omegas: np.ndarray
    dq_fd: np.ndarray             # centered difference of Q
    dq_pairing: np.ndarray        # 2 <phi, dphi/domega>
    agree: np.ndarray
    positive: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.positive) and np.all(self.agree))

    def as_dict(self) -> dict:
        return {
            "omegas": self.omegas.tolist(),
            "dq_fd": self.dq_fd.tolist(),
            "dq_pairing": self.dq_pairing.tolist(),
            "pass": self.passed,
        }


def slope_condition(branch: Branch, nl: Nonlinearity,
                    agree_rtol: float = 1e-3) -> SlopeVerdict:
    """dQ/domega at interior mesh points, two ways, with an H4 verdict.

    Both routes must be positive and agree to agree_rtol relative (measured
    against the larger |dQ/domega| and floored at machine scale so the
    critical dQ/domega = 0 case reports FAIL through the sign, not the
    agreement test).
    """
    if branch.omegas.size < 3:
        raise ValueError("slope condition needs at least 3 branch points")
    interior = slice(1, -1)
    omg = branch.omegas[interior]
    dq_fd = branch.dq_centered()[interior]
    dq_pair = []
    for s in branch.states[1:-1]:
        v = s.dphi if s.dphi is not None else dphi_domega(s, nl)
        dq_pair.append(2.0 * s.grid.h * float(np.sum(s.phi.values.real * v.values.real)))
    dq_pair = np.asarray(dq_pair)
    scale = np.maximum(np.maximum(np.abs(dq_fd), np.abs(dq_pair)), 1e-8 * np.max(branch.Q))
    agree = np.abs(dq_fd - dq_pair) <= np.maximum(agree_rtol * scale, 1e-10)
    # noise-level slopes must not pass on the accidental sign of roundoff
    floor = 1e-7 * np.max(branch.Q)
    positive = (dq_fd > floor) & (dq_pair > floor)
    return SlopeVerdict(omegas=omg, dq_fd=dq_fd, dq_pairing=dq_pair,
                        agree=agree, positive=positive)
