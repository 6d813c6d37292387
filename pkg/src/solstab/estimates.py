"""Measured constants of the linear estimates: dispersive decay, Strichartz,
Kato smoothing, and the weighted resolvent-decay bound.

Everything is a truncated, grid-level measurement: propagators act through
the dense eigendecomposition (exact modal phases) on the continuum modes, a
Chebyshev expansion cross-validates the propagator matrix-free, horizons are
capped by the wrap guard T_max = 0.8 L / (2 sqrt(Lambda_ref - omega)), and
every report carries a refinement hook (same seeds, doubled grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import jv

from solstab.fields import Field, Grid, Spinor, seeded_even_spinor
from solstab.linop import LinearizedOperator
from solstab.spectral import build_projections, continuum_resolvent_pc


@dataclass
class ConstantReport:
    name: str
    constant: float
    exponent: Optional[float] = None
    samples: int = 0
    meta: dict = field(default_factory=dict)
    refinement_change: Optional[float] = None

    def as_dict(self) -> dict:
        return {"name": self.name, "constant": self.constant,
                "exponent": self.exponent, "samples": self.samples,
                "meta": self.meta, "refinement_change": self.refinement_change}


# ---------------------------------------------------------------------------
# propagator


def _eig_continuum(op: LinearizedOperator):
    eg = op.eigendata()
    idx = eg.continuum()
    return eg, idx


def linear_propagate(op: LinearizedOperator, f: Spinor, t: float) -> Spinor:
    """e^{-itH} P_c f through the dense eigendecomposition."""
    eg, idx = _eig_continuum(op)
    fw = op.to_w(f)
    coef = eg.left[:, idx].conj().T @ fw
    out = eg.right[:, idx] @ (np.exp(-1j * eg.vals[idx] * t) * coef)
    return op.from_w(out)


class Propagator:
    """Caches eigen-coordinates of a batch of samples for many times."""

    def __init__(self, op: LinearizedOperator):
        self.op = op
        self.eg, self.idx = _eig_continuum(op)

    def coords(self, f: Spinor) -> np.ndarray:
        return self.eg.left[:, self.idx].conj().T @ self.op.to_w(f)

    def at(self, coef: np.ndarray, t: float) -> Spinor:
        out = self.eg.right[:, self.idx] @ (np.exp(-1j * self.eg.vals[self.idx] * t) * coef)
        return self.op.from_w(out)


def chebyshev_propagate(op: LinearizedOperator, f: Spinor, t: float,
                        margin: float = 1.02, tail_tol: float = 1e-10) -> Spinor:
    """e^{-itH} f by Chebyshev expansion of the phase on [-rho, rho].

    Matrix-free; valid because the discrete spectrum is real (up to the
    census tolerances).  P_c is NOT applied here; compose with projections
    when the continuous part is wanted.
    """
    rho = op.norm_scale() * margin
    tau = rho * t
    K = int(tau + 40 + 15 * np.log1p(tau))
    u_prev = f                        # T_0(A) f
    a = 1.0 / rho

    def apply_scaled(s: Spinor) -> Spinor:
        return a * op.apply(s)

    u_curr = apply_scaled(f)          # T_1(A) f
    out = jv(0, tau) * u_prev + 2.0 * (-1j) * jv(1, tau) * u_curr
    for k in range(2, K + 1):
        u_next = 2.0 * apply_scaled(u_curr) - u_prev
        ck = 2.0 * (-1j) ** k * jv(k, tau)
        out = out + ck * u_next
        u_prev, u_curr = u_curr, u_next
        if k > tau and abs(jv(k, tau)) < tail_tol and abs(jv(k - 1, tau)) < tail_tol:
            break
    return out


# ---------------------------------------------------------------------------
# norms and samples


def _wkinf(s: Spinor, k: int) -> float:
    from solstab.fields import derivative
    vals = [float(max(np.max(np.abs(s.up.values)), np.max(np.abs(s.lo.values))))]
    if k >= 1:
        vals.append(float(max(np.max(np.abs(derivative(s.up, 1).values)),
                              np.max(np.abs(derivative(s.lo, 1).values)))))
    return max(vals)


def _hk(s: Spinor, k: int, tau: float = 0.0) -> float:
    from solstab.fields import weighted_norm
    return weighted_norm(s, k, tau)


def _lp(s: Spinor, p: float) -> float:
    h = s.grid.h
    dens = np.abs(s.up.values) ** 2 + np.abs(s.lo.values) ** 2
    return float((h * np.sum(dens ** (p / 2.0))) ** (1.0 / p))


def wrap_time(op: LinearizedOperator, lam_ref: float) -> float:
    v = 2.0 * np.sqrt(max(lam_ref - op.omega, 1e-6))
    return 0.8 * op.grid.L / v


def bandlimit(s: Spinor, k_cut: float, zero_mean: bool = False,
              notch: float = 0.35) -> Spinor:
    """Smoothly suppress |k| > k_cut (and optionally the threshold content).

    Super-Gaussian masks avoid the spatial ringing of hard cutoffs; wrap
    guards are only honest when the probe's group velocities are capped.
    """
    grid = s.grid
    mask = np.exp(-((grid.k / k_cut) ** 8))
    if zero_mean:
        mask *= 1.0 - np.exp(-((grid.k / notch) ** 2))
    up = np.fft.ifft(mask * np.fft.fft(s.up.values))
    lo = np.fft.ifft(mask * np.fft.fft(s.lo.values))
    out = Spinor.from_arrays(grid, up, lo)
    nrm = out.norm()
    return out * (1.0 / nrm) if nrm > 0 else out


def sample_set(op: LinearizedOperator, n_random: int, seed: int,
               n_edge: int = 5, width: float = 4.0,
               k_cut: Optional[float] = None, zero_mean: bool = False):
    """Seeded localized spinors plus adversarial near-edge wave packets."""
    grid = op.grid
    rng = np.random.default_rng(seed)
    out = [seeded_even_spinor(grid, rng, envelope_width=width)
           for _ in range(n_random)]
    for j in range(n_edge):
        k0 = 0.15 + 0.2 * j
        env = np.exp(-((grid.x / (6.0 + j)) ** 2)) * np.cos(k0 * grid.x)
        s = Spinor.from_arrays(grid, env, 0.3 * env)
        out.append(s * (1.0 / s.norm()))
    if k_cut is not None:
        out = [bandlimit(s, k_cut, zero_mean) for s in out]
    return out


# ---------------------------------------------------------------------------
# measurements


def dispersive_fit(op: LinearizedOperator, p: float, t_mesh=None,
                   samples: int = 8, seed: int = 23,
                   lam_ref: Optional[float] = None,
                   probe_width: float = 1.2,
                   k_cut: Optional[float] = None) -> ConstantReport:
    """Fit of log ||e^{-itH} Pc f||_p against log t on localized samples.

    p = inf is proxied by the grid maximum.  Probes are narrow, bandlimited
    (so the wrap guard caps their real group velocities), and the fit opens
    at ~3 width^2 where the self-similar regime holds; boundary mass above
    1e-6 truncates and flags.
    """
    lam_ref = lam_ref or 4.0 * op.omega
    if k_cut is None:
        k_cut = np.sqrt(max(lam_ref - op.omega, 0.25))
    # the smooth mask passes content to ~1.3 k_cut; guard with that velocity
    tmax = 0.8 * op.grid.L / (2.6 * k_cut)
    eff_width = max(probe_width, 2.0 / k_cut)
    if t_mesh is None:
        t_mesh = np.geomspace(min(3.0 * eff_width**2, 0.4 * tmax), tmax, 12)
    t_mesh = np.asarray([t for t in t_mesh if t <= tmax])
    prop = Propagator(op)
    sel_edge = np.abs(op.grid.x) > 0.9 * op.grid.L
    exps, prefs = [], []
    wrap_flag = False
    # wisps of discrete-mode subtraction carry ~1e-7 edge mass without
    # touching the measured norms; flag at the spec level, truncate only
    # when the contamination could matter.  The decay exponent is a
    # narrow-probe property, so the wide adversarial packets stay out here.
    for f in sample_set(op, samples, seed, width=probe_width, k_cut=k_cut,
                        n_edge=0):
        coef = prop.coords(f)
        norms, used_t = [], []
        for t in t_mesh:
            ut = prop.at(coef, t)
            edge_mass = op.grid.h * float(
                np.sum(np.abs(ut.up.values[sel_edge]) ** 2
                       + np.abs(ut.lo.values[sel_edge]) ** 2))
            if edge_mass > 1e-6:
                wrap_flag = True
            if edge_mass > 1e-4:
                break
            norms.append(_lp(ut, p) if np.isfinite(p) else
                         float(max(np.max(np.abs(ut.up.values)),
                                   np.max(np.abs(ut.lo.values)))))
            used_t.append(t)
        if len(used_t) >= 4:
            c = np.polyfit(np.log(used_t), np.log(np.maximum(norms, 1e-300)), 1)
            exps.append(c[0])
            prefs.append(np.exp(c[1]))
    if not exps:
        return ConstantReport(name=f"disp-p{p:g}", constant=float("nan"),
                              exponent=None, samples=0,
                              meta={"t_max": float(tmax), "wrap_flag": True})
    return ConstantReport(name=f"disp-p{p:g}", constant=float(np.max(prefs)),
                          exponent=float(np.mean(exps)), samples=len(exps),
                          meta={"t_max": float(tmax), "wrap_flag": wrap_flag})


def strichartz_measure(op: LinearizedOperator, samples: int = 10, seed: int = 29,
                       k: int = 1, lam_ref: Optional[float] = None,
                       n_t: int = 48) -> ConstantReport:
    """Max ratio of the homogeneous Strichartz inequality, k in {0, 1}.

    The left side is ||.||_{L^4_t W^{k,inf}} + L^inf_t H^k on [0, T_max].
    """
    lam_ref = lam_ref or 4.0 * op.omega
    tmax = wrap_time(op, lam_ref)
    ts = np.linspace(0.0, tmax, n_t)
    prop = Propagator(op)
    worst = 0.0
    count = 0
    for f in sample_set(op, samples, seed):
        coef = prop.coords(f)
        w4, hsup = [], 0.0
        for t in ts:
            ut = prop.at(coef, t)
            w4.append(_wkinf(ut, k) ** 4)
            hsup = max(hsup, _hk(ut, k))
        l4 = np.trapezoid(w4, ts) ** 0.25
        denom = _hk(prop.at(coef, 0.0), k)
        if denom < 1e-12 * f.norm():
            continue   # f essentially outside the continuous subspace
        worst = max(worst, max(l4, hsup) / denom)
        count += 1
    return ConstantReport(name=f"3.1a-k{k}", constant=float(worst), samples=count,
                          meta={"t_max": float(tmax)})


def strichartz_inhomogeneous(op: LinearizedOperator, samples: int = 6,
                             seed: int = 31, k: int = 1,
                             lam_ref: Optional[float] = None,
                             n_t: int = 64) -> ConstantReport:
    """Duhamel variant: ||int_0^t e^{-i(t-s)H} Pc g ds|| vs the dual norms."""
    lam_ref = lam_ref or 4.0 * op.omega
    tmax = wrap_time(op, lam_ref)
    ts = np.linspace(0.0, tmax, n_t)
    prop = Propagator(op)
    rng = np.random.default_rng(seed)
    grid = op.grid
    worst = 0.0
    for _ in range(samples):
        G = seeded_even_spinor(grid, rng)
        Om = rng.uniform(0.2, 2.0) * op.omega
        at = np.cos(Om * ts) * np.exp(-ts / (0.5 * tmax))
        coefG = prop.coords(G)
        # Duhamel(t) = e^{-itH} int_0^t a(s) e^{isH} ds applied to G (diagonal)
        lamv = prop.eg.vals[prop.idx]
        phase = np.exp(1j * np.outer(ts, lamv))
        integ = np.zeros_like(phase[0])
        w4, hsup = [], 0.0
        duh_coef = []
        for i, t in enumerate(ts):
            if i > 0:
                integ = integ + 0.5 * (ts[i] - ts[i - 1]) * (
                    at[i] * phase[i] + at[i - 1] * phase[i - 1]) * coefG
            duh = prop.op.from_w(prop.eg.right[:, prop.idx]
                                 @ (np.exp(-1j * lamv * t) * integ))
            w4.append(_wkinf(duh, k) ** 4)
            hsup = max(hsup, _hk(duh, k))
        lhs = max(np.trapezoid(w4, ts) ** 0.25, hsup)
        # dual norm: min of the two pure decompositions
        gk1 = np.trapezoid(np.abs(at) ** (4.0 / 3.0), ts) ** 0.75 * _w_k1(G, k)
        gl1 = np.trapezoid(np.abs(at), ts) * _hk(G, k)
        worst = max(worst, lhs / min(gk1, gl1))
    return ConstantReport(name=f"3.1b-k{k}", constant=float(worst), samples=samples,
                          meta={"t_max": float(tmax)})


def _w_k1(s: Spinor, k: int) -> float:
    from solstab.fields import derivative
    h = s.grid.h
    tot = h * float(np.sum(np.abs(s.up.values) + np.abs(s.lo.values)))
    if k >= 1:
        tot += h * float(np.sum(np.abs(derivative(s.up, 1).values)
                                + np.abs(derivative(s.lo, 1).values)))
    return tot


def smoothing_measure(op: LinearizedOperator, variant: str, tau: float = 2.0,
                      samples: int = 8, seed: int = 37, k: int = 1,
                      lam_ref: Optional[float] = None,
                      n_t: int = 64) -> ConstantReport:
    """Kato-smoothing family: variants homog (a), dual (b), retarded, mixed."""
    lam_ref = lam_ref or 4.0 * op.omega
    tmax = wrap_time(op, lam_ref)
    ts = np.linspace(0.0, tmax, n_t)
    prop = Propagator(op)
    rng = np.random.default_rng(seed)
    grid = op.grid
    worst = 0.0
    count = 0
    for j in range(samples):
        F = seeded_even_spinor(grid, rng)
        coef = prop.coords(F)
        if variant == "homog":
            vals = [_hk(prop.at(coef, t), k, -tau) ** 2 for t in ts]
            lhs = np.sqrt(np.trapezoid(vals, ts))
            rhs = _hk(prop.at(coef, 0.0), k)
        elif variant == "dual":
            Om = rng.uniform(0.2, 2.0) * op.omega
            at = np.cos(Om * ts) * np.exp(-ts / (0.5 * tmax))
            lamv = prop.eg.vals[prop.idx]
            acc = np.zeros_like(coef)
            for i in range(1, len(ts)):
                dt = ts[i] - ts[i - 1]
                acc += 0.5 * dt * (at[i] * np.exp(1j * lamv * ts[i])
                                   + at[i - 1] * np.exp(1j * lamv * ts[i - 1])) * coef
            out = prop.op.from_w(prop.eg.right[:, prop.idx] @ acc)
            lhs = _hk(out, k)
            rhs = np.sqrt(np.trapezoid(
                [abs(at[i]) ** 2 * _hk(F, k, tau) ** 2 for i in range(len(ts))], ts))
        elif variant in ("retarded", "mixed"):
            Om = rng.uniform(0.2, 2.0) * op.omega
            at = np.cos(Om * ts) * np.exp(-ts / (0.5 * tmax))
            lamv = prop.eg.vals[prop.idx]
            phase = np.exp(1j * np.outer(ts, lamv))
            integ = np.zeros_like(coef)
            series = []
            w4, hsup = [], 0.0
            for i, t in enumerate(ts):
                if i > 0:
                    integ = integ + 0.5 * (ts[i] - ts[i - 1]) * (
                        at[i] * phase[i] + at[i - 1] * phase[i - 1]) * coef
                duh = prop.op.from_w(prop.eg.right[:, prop.idx]
                                     @ (np.exp(-1j * lamv * t) * integ))
                if variant == "retarded":
                    series.append(_hk(duh, k, -tau) ** 2)
                else:
                    w4.append(_wkinf(duh, k) ** 4)
                    hsup = max(hsup, _hk(duh, k, 0.0))
            if variant == "retarded":
                lhs = np.sqrt(np.trapezoid(series, ts))
            else:
                lhs = max(np.trapezoid(w4, ts) ** 0.25, hsup)
            rhs = np.sqrt(np.trapezoid(
                [abs(at[i]) ** 2 * _hk(F, k, tau) ** 2 for i in range(len(ts))], ts))
        else:
            raise ValueError(f"unknown smoothing variant {variant!r}")
        if rhs > 1e-12:
            worst = max(worst, lhs / rhs)
            count += 1
    tag = {"homog": "3.3a", "dual": "3.3b", "retarded": "3.4", "mixed": "3.5"}[variant]
    return ConstantReport(name=f"{tag}-k{k}", constant=float(worst), samples=count,
                          meta={"t_max": float(tmax), "tau": tau})


def weighted_decay_413(op: LinearizedOperator, lam_energy: Optional[float] = None,
                       gamma_w: float = 2.0, samples: int = 5, seed: int = 41,
                       n_t: int = 12, probe_width: float = 1.2,
                       eps0: float = 0.5) -> ConstantReport:
    """Decay fit of ||<x>^-g e^{-itH} R(Lam + i eps0) Pc g||_2.

    On a ring a true +i0 boundary value produces an energy-Lambda wave train
    as long as the domain, so the local-decay regime never opens; a fixed
    moderate eps0 keeps the train at ~group-velocity/eps0 and the fit window
    runs from train clearance to the wrap guard.  Probes are bandlimited and
    zero-mean (the threshold channel would otherwise floor the free-case
    decay at t^(-1/2); the estimate prices the Lambda-localized content).
    """
    lam_energy = lam_energy or 2.0 * op.omega
    if lam_energy <= op.omega + 0.1:
        raise ValueError("probe energy must exceed omega + 0.1")
    v = 2.0 * np.sqrt(lam_energy - op.omega)
    k_cut = 2.5 * np.sqrt(lam_energy - op.omega)
    tmax = 0.8 * op.grid.L / (2.2 * k_cut)
    t0 = max(min((2.0 / eps0 + 8.0) / v, 0.6 * tmax), 0.4 * tmax)
    ts = np.geomspace(max(1.0, t0), tmax, n_t)
    prop = Propagator(op)
    rng = np.random.default_rng(seed)
    H = op.matrix_w()
    n2 = H.shape[0]
    eye = np.eye(n2)
    exps, consts = [], []
    for _ in range(samples):
        raw = seeded_even_spinor(op.grid, rng, envelope_width=probe_width)
        gsample = bandlimit(raw, k_cut, zero_mean=True)
        w = np.linalg.solve(H - (lam_energy + 1j * eps0) * eye, op.to_w(gsample))
        coef = prop.coords(op.from_w(w))
        norms = [_hk(prop.at(coef, t), 0, -gamma_w) for t in ts]
        c = np.polyfit(np.log(ts), np.log(np.maximum(norms, 1e-300)), 1)
        exps.append(c[0])
        consts.append(np.exp(c[1]) / max(_hk(gsample, 0, gamma_w), 1e-300))
    return ConstantReport(name="4.13", constant=float(np.max(consts)),
                          exponent=float(np.mean(exps)), samples=samples,
                          meta={"t_max": float(tmax), "Lambda": float(lam_energy),
                                "eps0": eps0, "window_start": float(t0)})


def constants_suite(op: LinearizedOperator, seed: int = 97) -> dict:
    """The full keyed report set the CLI emits as constants.json."""
    out = {}
    rep = dispersive_fit(op, np.inf, seed=seed)
    out["disp-1"] = rep.as_dict()
    out["disp-p2"] = dispersive_fit(op, 2.0, seed=seed + 1).as_dict()
    for k in (0, 1):
        out[f"3.1a-k{k}"] = strichartz_measure(op, seed=seed + 2, k=k).as_dict()
        out[f"3.1b-k{k}"] = strichartz_inhomogeneous(op, seed=seed + 3, k=k).as_dict()
    for variant in ("homog", "dual", "retarded", "mixed"):
        tag = {"homog": "3.3a", "dual": "3.3b", "retarded": "3.4", "mixed": "3.5"}[variant]
        out[tag] = smoothing_measure(op, variant, seed=seed + 4).as_dict()
    out["4.13"] = weighted_decay_413(op, seed=seed + 5).as_dict()
    return out
