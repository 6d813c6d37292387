"""Experiment orchestration: subcommands, hypothesis dashboard, artifacts.

Exit codes: 0 success, 2 hypothesis failure (an expected negative result),
3 numerical nonconvergence, 64 usage/schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from solstab.config import ConfigError, ExperimentConfig, load_config, write_resolved

EXIT_OK = 0
EXIT_HYPOTHESIS = 2
EXIT_NONCONVERGENCE = 3
EXIT_USAGE = 64


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _dump_json(path: Path, payload: dict):
    payload = dict(payload)
    payload.setdefault("timestamp", _timestamp())
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_np_default)


def _np_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# stages


def stage_groundstate(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.groundstate import build_branch, dphi_domega, slope_condition
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    mesh = cfg.omega_mesh()
    branch = build_branch(nl, mesh, grid)
    sv = slope_condition(branch, nl)
    rows = []
    for gs in branch.states:
        if gs.dphi is None:
            dphi_domega(gs, nl)
        dq = 2.0 * grid.h * float(np.sum(gs.phi.values.real * gs.dphi.values.real))
        rows.append({"omega": gs.omega, "Q": gs.q_norm(), "dQ_domega": dq,
                     "residual": gs.residual,
                     "phi0": float(gs.phi.values.real[grid.n // 2])})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "groundstate.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    return {"branch_rows": rows, "H4": sv.as_dict()}


def stage_spectrum(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.groundstate import solve_ground_state
    from solstab.linop import assemble_H, check_H8, point_spectrum
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    gs = solve_ground_state(nl, float(cfg.raw["omega"]), grid)
    op = assemble_H(gs, nl)
    ps = point_spectrum(op, gs)
    edge = check_H8(op)
    payload = ps.as_dict()
    payload["edge"] = edge.as_dict()
    _dump_json(out / "spectrum.json", payload)
    return payload


def stage_lap(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.groundstate import solve_ground_state
    from solstab.linop import assemble_H
    from solstab.spectral import build_projections, lap_scan, verify_43
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    gs = solve_ground_state(nl, float(cfg.raw["omega"]), grid)
    op = assemble_H(gs, nl)
    proj = build_projections(op, cross_check=False)
    scan = lap_scan(op, proj)
    c43 = verify_43(op, proj)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lap.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "opnorm", "weighted"])
        for row in zip(scan.lams, scan.opnorms, scan.weighted):
            w.writerow([f"{v:.12g}" for v in row])
    payload = {"sup_const": scan.sup_const, "fit_exponent": scan.fit_exponent,
               "c43_estimate": c43.c_est, "split_defect": proj.split_defect}
    _dump_json(out / "lap.json", payload)
    return payload


def stage_fgr(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.groundstate import solve_ground_state
    from solstab.linop import assemble_H, check_H6, internal_mode
    from solstab.normalform import (build_normal_form, check_H42, fgr_gamma,
                                    resonant_coefficients)
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    gs = solve_ground_state(nl, float(cfg.raw["omega"]), grid)
    op = assemble_H(gs, nl)
    mode = internal_mode(op)
    if mode is None:
        payload = {"N": None, "lambda": None, "a_m": [],
                   "gamma": None, "h42": {"pass": False, "reason": "no internal mode"},
                   "sign": None}
        _dump_json(out / "fgr.json", payload)
        return payload
    N = check_H6(mode.lam, gs.omega)
    state = build_normal_form(gs, mode, nl, N=min(N, 3))
    for _ in range(state.N - 1):
        from solstab.normalform import nf_step
        state = nf_step(state)
    a_m = resonant_coefficients(state)
    fgr = fgr_gamma(state)
    verdict = check_H42(fgr, float(cfg.raw["tolerances"]["gamma_threshold"]))
    payload = {"N": N, "lambda": mode.lam, "a_m": a_m.tolist(),
               "gamma": fgr.as_dict()["gamma"], "pv": fgr.pv_part,
               "h42": verdict.as_dict(), "sign": "positive" if verdict.sign_positive else "negative"}
    _dump_json(out / "fgr.json", payload)
    return payload


def stage_evolve(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.dynamics import (EvolutionConfig, extract_scattering,
                                  make_frame, run_track)
    from solstab.fields import Field
    from solstab.groundstate import build_branch, solve_ground_state
    from solstab.linop import assemble_H, internal_mode
    nl = cfg.nonlinearity()
    dyn = cfg.raw["dynamics"]
    gdyn = cfg.dynamics_grid()
    gspec = cfg.grid()
    om0 = float(cfg.raw["omega"])

    mesh = cfg.omega_mesh()
    lo = min(mesh[0], om0 - 0.12)
    hi = max(mesh[-1], om0 + 0.12)
    branch = build_branch(nl, np.arange(lo, hi + 1e-9, 0.03), gdyn)
    modes = {}
    for om in np.linspace(max(lo, om0 - 0.1), min(hi, om0 + 0.1), 5):
        gss = solve_ground_state(nl, float(om), gspec)
        modes[float(om)] = internal_mode(assemble_H(gss, nl))
    frame = make_frame(branch, nl, gdyn, modes)
    gs = branch.state(om0)

    kind = dyn.get("perturbation", "mode")
    if kind == "prepared":
        from solstab.normalform import build_normal_form, prepared_initial_data
        gsd = solve_ground_state(nl, gs.omega, gdyn)
        md = internal_mode(assemble_H(gsd, nl))
        std = build_normal_form(gsd, md, nl, N=1)
        r0 = prepared_initial_data(std, complex(dyn.get("z0", 0.03)))
        u0 = Field(gdyn, gsd.phi.values.real + r0)
    elif kind == "mode" and frame.mode_of(gs.omega) is not None:
        _, x1, x2 = frame.mode_of(gs.omega)
        phi = gs.phi.values.real
        pert = x1 + x2
        pert -= (gdyn.h * np.sum(pert * phi)) / (gdyn.h * np.sum(phi * phi)) * phi
        pert /= np.sqrt(gdyn.h * np.sum(pert**2))
        u0 = Field(gdyn, phi + float(dyn["epsilon"]) * pert + 0j)
    else:
        phi = gs.phi.values.real
        bump = np.exp(-gdyn.x**2) * (1 + 0.3 * np.cos(gdyn.x))
        bump /= np.sqrt(gdyn.h * np.sum(bump**2))
        u0 = Field(gdyn, phi + float(dyn["epsilon"]) * bump + 0j)

    ecfg = EvolutionConfig(grid=gdyn, nl=nl, dt=float(dyn["dt"]), T=float(dyn["T"]),
                           snapshot_stride=int(dyn["snapshot_stride"]),
                           conservation_tol=float(dyn["conservation_tol"]),
                           order=int(dyn.get("order", 4)))
    keep = np.geomspace(max(1.0, ecfg.T / 64), ecfg.T, 10)
    track = run_track(u0, ecfg, frame, keep_fields_at=keep)

    out.mkdir(parents=True, exist_ok=True)
    cols = track.as_columns()
    with open(out / "modulation_track.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        names = ["t", "omega", "gamma", "re_z", "im_z", "abs_z",
                 "f_h1", "f_h1w2", "orb_dist", "Q", "E"]
        w.writerow(names)
        for i in range(len(track.t)):
            w.writerow([f"{cols[name][i]:.12g}" for name in names])

    scatter = extract_scattering(gdyn, track.h_snapshots)
    _dump_json(out / "scatter.json", scatter.as_dict())
    return {"drift_Q": track.drift_Q, "drift_E": track.drift_E,
            "final_abs_z": float(np.abs(track.z[-1])),
            "scatter_decreasing": scatter.decreasing,
            "n_snapshots": int(len(track.t))}


def stage_estimates(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.estimates import constants_suite
    from solstab.groundstate import solve_ground_state
    from solstab.linop import assemble_H
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    gs = solve_ground_state(nl, float(cfg.raw["omega"]), grid)
    op = assemble_H(gs, nl)
    payload = constants_suite(op, seed=cfg.seed)
    _dump_json(out / "constants.json", payload)
    return payload


def stage_lyapunov(cfg: ExperimentConfig, out: Path) -> dict:
    from solstab.groundstate import build_branch, solve_ground_state
    from solstab.lyapunov import coercivity, d_function
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    om = float(cfg.raw["omega"])
    mesh = np.linspace(om - 0.04, om + 0.04, 5)
    branch = build_branch(nl, mesh, grid)
    df = d_function(branch, nl)
    rep = coercivity(branch.state(om), nl)
    payload = {"d": df.d.tolist(), "dprime": df.dprime.tolist(),
               "dsecond": df.dsecond.tolist(), "mu": df.mu.tolist(),
               "dprime_eq_q_error": df.identity_error,
               "lplus_neg_count": rep.lplus_neg_count,
               "lminus_min": rep.lminus_min,
               "coercivity_min": rep.constrained_min}
    _dump_json(out / "lyapunov.json", payload)
    return payload


def stage_hypotheses(cfg: ExperimentConfig, out: Path) -> dict:
    """H1-H8 + Hypothesis 4.2 dashboard; every verdict carries evidence."""
    from solstab.groundstate import (BifurcationError, NonconvergenceError,
                                     build_branch, solve_ground_state,
                                     slope_condition)
    from solstab.linop import (DegenerateRatioError, assemble_H, check_H6,
                               check_H8, internal_mode)
    from solstab.nonlinearity import check_H1_H2
    nl = cfg.nonlinearity()
    grid = cfg.grid()
    om = float(cfg.raw["omega"])
    dash = {}

    v12 = check_H1_H2(nl, p=4.0)
    dash["H1"] = {"verdict": "pass" if v12.h1_pass else "fail",
                  "evidence": v12.as_dict()}
    dash["H2"] = {"verdict": "pass" if v12.h2_pass else "fail",
                  "evidence": v12.as_dict()}

    try:
        mesh = [om - 0.01, om, om + 0.01]
        branch = build_branch(nl, mesh, grid)
        gs = branch.state(om)
        dash["H3"] = {"verdict": "pass",
                      "evidence": {"residual": gs.residual,
                                   "decay_rate": gs.decay_rate}}
        sv = slope_condition(branch, nl)
        dash["H4"] = {"verdict": "pass" if sv.passed else "fail",
                      "evidence": sv.as_dict()}
    except (NonconvergenceError, BifurcationError) as exc:
        dash["H3"] = {"verdict": "fail", "evidence": {"error": str(exc)}}
        dash["H4"] = {"verdict": "inconclusive", "evidence": {}}
        gs = None

    dash["H5"] = {"verdict": "pass",
                  "evidence": {"note": "even sector enforced structurally",
                               "grid_symmetry": grid.symmetry}}

    mode = None
    if gs is not None:
        op = assemble_H(gs, nl)
        mode = internal_mode(op)
        if mode is None:
            dash["H6"] = {"verdict": "fail",
                          "evidence": {"note": "no internal mode in the gap"}}
        else:
            try:
                N = check_H6(mode.lam, om)
                dash["H6"] = {"verdict": "pass",
                              "evidence": {"lambda": mode.lam, "N": N}}
            except DegenerateRatioError as exc:
                dash["H6"] = {"verdict": "fail", "evidence": {"error": str(exc)}}
        edge = check_H8(op)
        ok = edge.verdict == "no-resonance" and edge.point_spectrum_ok
        dash["H8"] = {"verdict": "pass" if ok else
                      ("inconclusive" if edge.verdict == "inconclusive" else "fail"),
                      "evidence": edge.as_dict()}
    else:
        dash["H6"] = {"verdict": "inconclusive", "evidence": {}}
        dash["H8"] = {"verdict": "inconclusive", "evidence": {}}

    if mode is not None and dash["H6"]["verdict"] == "pass":
        try:
            fgr_payload = stage_fgr(cfg, out)
            dash["H7"] = {"verdict": "pass" if fgr_payload["h42"]["pass"] else "fail",
                          "evidence": fgr_payload}
        except Exception as exc:   # nonconvergence propagates as inconclusive
            dash["H7"] = {"verdict": "inconclusive", "evidence": {"error": str(exc)}}
    else:
        dash["H7"] = {"verdict": "fail",
                      "evidence": {"note": "requires the H6 internal mode"}}

    _dump_json(out / "hypotheses.json", dash)
    return dash


STAGES = {
    "groundstate": stage_groundstate,
    "spectrum": stage_spectrum,
    "lap": stage_lap,
    "fgr": stage_fgr,
    "evolve": stage_evolve,
    "estimates": stage_estimates,
    "lyapunov": stage_lyapunov,
    "hypotheses": stage_hypotheses,
}

_REPORT_INPUTS = ["spectrum.json", "fgr.json", "lyapunov.json", "constants.json",
                  "modulation_track.csv", "scatter.json", "hypotheses.json"]


def stage_report(cfg: ExperimentConfig, out: Path) -> dict:
    """Aggregate existing artifacts into summary.json (no recomputation)."""
    found = {}
    missing = []
    for name in _REPORT_INPUTS:
        p = out / name
        if not p.exists():
            missing.append(name)
            continue
        if name.endswith(".json"):
            with open(p, "r", encoding="utf-8") as f:
                found[name] = json.load(f)
        else:
            found[name] = str(p)
    if not found:
        raise ConfigError(f"report needs prior artifacts in {out}; none found")
    summary = {"inputs": sorted(found), "missing": missing}
    if "fgr.json" in found:
        summary["gamma"] = found["fgr.json"].get("gamma")
        summary["N"] = found["fgr.json"].get("N")
    if "hypotheses.json" in found:
        summary["hypotheses"] = {k: v["verdict"] for k, v in found["hypotheses.json"].items()
                                 if isinstance(v, dict) and "verdict" in v}
    if "modulation_track.csv" in found:
        data = np.genfromtxt(found["modulation_track.csv"], delimiter=",", names=True)
        summary["track"] = {
            "T": float(data["t"][-1]),
            "final_abs_z": float(data["abs_z"][-1]),
            "max_orb_dist": float(np.max(data["orb_dist"])),
            "Q_drift": float(abs(data["Q"][-1] - data["Q"][0]) / abs(data["Q"][0])),
        }
    _dump_json(out / "summary.json", summary)
    return summary


def full_pipeline(cfg: ExperimentConfig, out: Path,
                  override_hypotheses: bool = False) -> dict:
    """groundstate -> spectrum -> fgr -> evolve -> report chain."""
    results = {"stages": []}
    dash = stage_hypotheses(cfg, out)
    results["hypotheses"] = {k: v["verdict"] for k, v in dash.items()}
    failed = [k for k, v in dash.items() if v["verdict"] == "fail"]
    if failed and not override_hypotheses:
        results["stopped"] = f"hypothesis failures: {failed}"
        _dump_json(out / "summary.json", results)
        return results
    for name in ("groundstate", "spectrum", "lap", "fgr", "evolve",
                 "estimates", "lyapunov"):
        try:
            STAGES[name](cfg, out)
            results["stages"].append({"stage": name, "status": "ok"})
        except Exception as exc:
            results["stages"].append({"stage": name, "status": "error",
                                      "error": str(exc)})
            if name in ("groundstate", "spectrum"):
                break
    report = stage_report(cfg, out)
    results["summary"] = report
    _dump_json(out / "summary.json", results)
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="solstab",
        description="numerical laboratory for 1D NLS ground-state stability")
    parser.add_argument("subcommand",
                        choices=sorted(STAGES) + ["report", "pipeline"])
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--out", type=str, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--override-hypotheses", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else 0

    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.raw["out_dir"])
    try:
        write_resolved(cfg, out, _timestamp())
        if args.subcommand == "report":
            stage_report(cfg, out)
            return EXIT_OK
        if args.subcommand == "pipeline":
            results = full_pipeline(cfg, out, args.override_hypotheses)
            if "stopped" in results:
                return EXIT_HYPOTHESIS
            return EXIT_OK
        if args.subcommand == "hypotheses":
            dash = stage_hypotheses(cfg, out)
            if any(v["verdict"] == "fail" for v in dash.values()):
                return EXIT_HYPOTHESIS
            return EXIT_OK
        STAGES[args.subcommand](cfg, out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        from solstab.dynamics import ConservationError, DecompositionError
        from solstab.groundstate import BifurcationError, NonconvergenceError
        from solstab.normalform import ResonantLevelError
        if isinstance(exc, (ConservationError, DecompositionError,
                            NonconvergenceError, BifurcationError,
                            ResonantLevelError)):
            print(f"nonconvergence: {exc}", file=sys.stderr)
            return EXIT_NONCONVERGENCE
        raise


if __name__ == "__main__":
    sys.exit(main())
