"""Command line runner: flow runs, verification suites, snapshot inspection.

Exit codes: 0 success, 2 invariant failure, 3 solver failure, 4 config error.
Artifacts of ``run``: manifest.json, timeseries.csv (fixed column order),
geometry.json and snapshots/*.json under the configured output directory.
The output root may be overridden with the KAHLERFLOW_OUTPUT_ROOT variable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import estimates, flow, functionals
from . import geometry as geo
from .config import ConfigError, RunConfig, load_config, parse_config

CSV_COLUMNS = [
    "t", "c", "a", "W", "I", "J", "nu", "lambda1", "futaki",
    "sup_u", "sup_grad_u", "sup_lap_u", "sup_scal", "diam", "density_min",
    "c2_residual", "c3_norm", "ke_residual", "soliton_residual",
]

YAU_TOL = 1e-6
MOMENT_TOL = 1e-8
EIGEN_TOL = 1e-6


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _json_dump(path: Path, doc):
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def monotonicity_excess(times, values, dt, sense: str, floor: float = 1e-12):
    """Worst violation of monotonicity beyond ten times the local error estimate.

    The per-interval tolerance is 10 * (dt^2 / interval) * |second difference|
    plus a roundoff floor; the second difference estimates the curvature of
    the sampled curve, so the product scales like the integrator's local
    error accumulated over the interval.
    """
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(v) < 3:
        return 0.0
    inc = np.diff(v)
    if sense == "nonincreasing":
        viol = inc
    elif sense == "nondecreasing":
        viol = -inc
    else:
        raise ValueError("sense must be 'nonincreasing' or 'nondecreasing'")
    curv = np.abs(np.diff(v, 2))
    tol = np.empty_like(inc)
    dt_snap = np.diff(t)
    tol[1:] = 10.0 * (dt ** 2 / np.maximum(dt_snap[1:], dt)) * curv + floor
    tol[0] = tol[1] if len(tol) > 1 else floor
    return float(np.max(viol - tol))


def snapshot_document(state: flow.FlowState) -> dict:
    return {
        "format_version": 1,
        "t": state.t,
        "phi": state.phi.tolist(),
        "u": state.u.tolist(),
        "c": state.c,
        "a": state.a,
        "residuals": {
            "normalization": state.normalization_defect(),
            "ke": state.ke_residual(),
            "soliton": flow.soliton_residual(state),
        },
    }


def _timeseries_rows(run_result: flow.FlowRun):
    rows = []
    for snap, fr, mr in zip(run_result.snapshots, run_result.functional_records,
                            run_result.monitor_records):
        a, W = snap.a, fr.W
        rows.append({
            "t": snap.t, "c": snap.c, "a": a, "W": W,
            "I": fr.I, "J": fr.J, "nu": fr.nu, "lambda1": fr.lambda1,
            "futaki": fr.futaki,
            "sup_u": mr.sup_u, "sup_grad_u": mr.sup_grad_u,
            "sup_lap_u": mr.sup_lap_u, "sup_scal": mr.sup_scal,
            "diam": mr.diam, "density_min": mr.density_min,
            "c2_residual": mr.c2_residual, "c3_norm": mr.c3_norm,
            "ke_residual": snap.ke_residual(),
            "soliton_residual": flow.soliton_residual(snap),
        })
    return rows


def run_invariant_checks(config: RunConfig, run_result: flow.FlowRun, rows):
    """Run-level invariant suite rows for the manifest."""
    checks = []

    def add(name, residual, tolerance):
        checks.append({
            "name": name,
            "residual": float(residual),
            "tolerance": float(tolerance),
            "passed": bool(residual <= tolerance),
        })

    snaps = run_result.snapshots
    add("normalization_defect",
        max(s.normalization_defect() for s in snaps), config.tol_normalization)
    if rows:
        ts = [r["t"] for r in rows]
        add("a_nonincreasing",
            monotonicity_excess(ts, [r["a"] for r in rows], config.dt, "nonincreasing"), 0.0)
        add("nu_nonincreasing",
            monotonicity_excess(ts, [r["nu"] for r in rows], config.dt, "nonincreasing"), 0.0)
        add("W_nondecreasing",
            monotonicity_excess(ts, [r["W"] for r in rows], config.dt, "nondecreasing"), 0.0)
        add("entropy_identity_W_a_n",
            max(abs(r["W"] + r["a"] + config.n) for r in rows), config.tol_invariant)
        add("density_positive", -min(r["density_min"] for r in rows), 0.0)
        add("yau_c2_residual", -min(r["c2_residual"] for r in rows), YAU_TOL)
        add("eigenvalue_bound", max(0.0, 2.0 - min(r["lambda1"] for r in rows)), EIGEN_TOL)
    if run_result.monitor_records:
        worst = 0.0
        for s in snaps:
            _, resid = estimates.theta_moment_chain(s)
            worst = max(worst, -min(resid))
        add("theta_moment_chain", worst, MOMENT_TOL)
    add("volume_conservation",
        max(abs(s.metric.integrate(np.ones(config.N)) / s.geom.V - 1.0) for s in snaps),
        1e-10)
    return checks


def execute(config: RunConfig, output_root: str = None) -> int:
    """Run the flow per config and persist artifacts; return the exit code."""
    root = Path(output_root or os.environ.get("KAHLERFLOW_OUTPUT_ROOT", "."))
    outdir = root / config.output_dir
    snapdir = outdir / "snapshots"
    snapdir.mkdir(parents=True, exist_ok=True)

    geom = geo.fubini_study(config.n, config.N)
    (outdir / "geometry.json").write_text(geom.to_json() + "\n")

    manifest = {
        "format_version": 1,
        "config": config.to_document(),
        "status": "running",
        "snapshots": [],
    }
    _json_dump(outdir / "manifest.json", manifest)

    try:
        result = flow.run(config, geom=geom)
    except flow.StabilityError as exc:
        partial = exc.partial
        snap_files = _persist_snapshots(snapdir, partial.snapshots if partial else [])
        manifest.update(status="solver_failure", error=str(exc), snapshots=snap_files)
        _json_dump(outdir / "manifest.json", manifest)
        _json_dump(outdir / "failure.json",
                   {"error": str(exc), "kind": "stability", "exit_code": 3})
        return 3
    except geo.SolverError as exc:
        manifest.update(status="solver_failure", error=str(exc))
        _json_dump(outdir / "manifest.json", manifest)
        _json_dump(outdir / "failure.json",
                   {"error": str(exc), "kind": "solver", "exit_code": 3})
        return 3

    snap_files = _persist_snapshots(snapdir, result.snapshots)
    rows = _timeseries_rows(result) if result.functional_records else []
    if rows:
        lines = [",".join(CSV_COLUMNS)]
        for r in rows:
            lines.append(",".join(_fmt(r[c]) for c in CSV_COLUMNS))
        (outdir / "timeseries.csv").write_text("\n".join(lines) + "\n")

    checks = run_invariant_checks(config, result, rows)
    ok = all(c["passed"] for c in checks)
    manifest.update(
        status="completed",
        termination=result.termination,
        error=result.error,
        snapshots=snap_files,
        invariants=checks,
        empirical_density_floor=(min(r["density_min"] for r in rows) if rows else None),
        nu_nonincreasing=bool(rows and monotonicity_excess(
            [r["t"] for r in rows], [r["nu"] for r in rows], config.dt, "nonincreasing") <= 0.0),
        W_nondecreasing=bool(rows and monotonicity_excess(
            [r["t"] for r in rows], [r["W"] for r in rows], config.dt, "nondecreasing") <= 0.0),
    )
    _json_dump(outdir / "manifest.json", manifest)
    if not ok:
        _json_dump(outdir / "failure.json", {
            "error": "invariant suite failed",
            "kind": "invariant",
            "failed": [c["name"] for c in checks if not c["passed"]],
            "exit_code": 2,
        })
        return 2
    return 0


def _persist_snapshots(snapdir: Path, snapshots):
    files = []
    for i, snap in enumerate(snapshots):
        name = f"snap_{i:06d}.json"
        _json_dump(snapdir / name, snapshot_document(snap))
        files.append(f"snapshots/{name}")
    return files


def inspect_snapshot(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    phi = np.asarray(doc["phi"])
    u = np.asarray(doc["u"])
    return {
        "t": doc["t"],
        "c": doc["c"],
        "a": doc["a"],
        "sup_phi": float(np.max(np.abs(phi))),
        "sup_u": float(np.max(np.abs(u))),
        "residuals": doc["residuals"],
        "grid_size": len(phi),
    }


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

def _check(name, residual, tolerance):
    return {"name": name, "residual": float(residual), "tolerance": float(tolerance),
            "passed": bool(residual <= tolerance)}


def _suite_tensor(seed: int):
    from . import tensor as tk

    rng = np.random.default_rng(seed)
    checks = []
    flat = tk.flat_patch(2)
    z0 = np.zeros(2, dtype=complex)
    checks.append(_check("flat_chern_zero",
                         np.max(np.abs(tk.chern_coefficients(flat, z0))), 1e-12))
    fs = tk.fubini_study_patch(1)
    for zv, label in ((0.0, "origin"), (0.3 + 0.1j, "generic")):
        z = np.array([zv])
        r2 = abs(zv) ** 2
        C = tk.chern_coefficients(fs, z)
        checks.append(_check(f"fs_cp1_chern_{label}",
                             abs(C[0, 0, 0, 0] - 2.0 / (1 + r2) ** 2), 1e-10))
        checks.append(_check(f"fs_cp1_scalar_{label}",
                             abs(tk.scalar_curvature(fs, z) - 2.0), 1e-10))
        _, lam1 = tk.bisectional_and_lambda1(fs, z)
        checks.append(_check(f"fs_cp1_lambda1_{label}", abs(lam1 - 0.5), 1e-10))
    for trial in range(3):
        patch = tk.random_kahler_patch(2, rng, amplitude=0.02)
        z = 0.1 * (rng.standard_normal(2) + 1j * rng.standard_normal(2))
        C = tk.chern_coefficients(patch, z)
        R = tk.riemann_coefficients(patch, z, C=C)
        s1 = np.max(np.abs(np.conj(R) - np.transpose(R, (1, 0, 3, 2))))
        s2 = np.max(np.abs(R - np.transpose(R, (2, 3, 0, 1))))
        s3 = np.max(np.abs(R - np.transpose(R, (0, 3, 2, 1))))
        checks.append(_check(f"riemann_symmetries_{trial}", max(s1, s2, s3), 1e-8))
        W = patch.coeff(z)
        consistency = np.max(np.abs(
            2.0 * R + np.einsum('jkhl,hm->jklm', C, W)))
        checks.append(_check(f"chern_riemann_consistency_{trial}", consistency, 1e-10))
        Rm = tk.curvature_operator(patch, z)
        checks.append(_check(f"rm_reality_{trial}",
                             np.max(np.abs(np.conj(Rm) - np.transpose(Rm, (1, 0, 3, 2)))), 1e-10))
    patch = tk.random_kahler_patch(2, rng, amplitude=0.02)
    z = np.array([0.05 - 0.02j, 0.01 + 0.03j])
    nf = tk.geodesic_normal_form(patch, z, order=2, rng=rng)
    Rp = tk.frame_transform_riemann(
        tk.riemann_coefficients(patch, z), nf.frame)
    checks.append(_check("normal_form_h2_riemann",
                         np.max(np.abs(nf.H2 + 2.0 * Rp)), 1e-9))
    vres = tk.volume_density_expansion_check(patch, z, radius=0.05)
    vres_half = tk.volume_density_expansion_check(patch, z, radius=0.025)
    checks.append(_check("volume_density_ratio_bounded",
                         vres_half / (vres + 1e-12), 4.0))
    return checks


def _suite_functional(seed: int):
    rng = np.random.default_rng(seed)
    checks = []
    for n in (1, 2):
        geom = geo.fubini_study(n, 96)
        worst_forms, worst_ineq = 0.0, 0.0
        for _ in range(10):
            phi = geo.random_admissible_potential(geom, rng, amplitude=0.2)
            (Im, Id), (Jp, Js) = functionals.aubin_I_J(geom, phi, return_forms=True)
            worst_forms = max(worst_forms, abs(Im - Id), abs(Jp - Js))
            worst_ineq = max(worst_ineq, -Im, Im - (n + 1) * Jp)
        checks.append(_check(f"aubin_dual_forms_n{n}", worst_forms, 1e-8))
        checks.append(_check(f"aubin_inequality_n{n}", worst_ineq, 1e-10))
        md0 = geom.reference_metric
        worst_boch = 0.0
        for _ in range(5):
            phi = geo.random_admissible_potential(geom, rng, amplitude=0.2)
            md = geo.metric_from_potential(geom, phi)
            u = geo.random_admissible_potential(geom, rng, amplitude=0.3)
            h = 0.5 * geo.random_admissible_potential(geom, rng, amplitude=0.3)
            worst_boch = max(worst_boch, functionals.bochner_kodaira_residual(md, u, h))
        checks.append(_check(f"bochner_kodaira_n{n}", worst_boch, 1e-7))
        lam = functionals.first_eigenvalue(md0, np.zeros(geom.N))
        checks.append(_check(f"first_eigenvalue_reference_n{n}", abs(lam - 2.0), 1e-6))
        worst_poinc, worst_lam = 0.0, 0.0
        for _ in range(5):
            phi = geo.random_admissible_potential(geom, rng, amplitude=0.2)
            md = geo.metric_from_potential(geom, phi)
            h = geo.ricci_potential(geom, md)
            worst_lam = max(worst_lam, 2.0 - functionals.first_eigenvalue(md, h))
            test = geo.random_admissible_potential(geom, rng, amplitude=0.4)
            worst_poinc = max(worst_poinc, -functionals.poincare_residual(md, h, test))
        checks.append(_check(f"eigenvalue_bound_n{n}", worst_lam, 1e-6))
        checks.append(_check(f"poincare_nonnegative_n{n}", worst_poinc, 1e-8))
    return checks


def _suite_flow(seed: int):
    rng = np.random.default_rng(seed)
    checks = []
    geom = geo.fubini_study(1, 96)
    st0 = flow.flow_state(geom, np.zeros(geom.N))
    checks.append(_check("stationary_reference", st0.ke_residual(), 1e-10))
    phi0 = geo.random_admissible_potential(geom, rng, amplitude=0.15, margin=0.5)
    st = flow.flow_state(geom, phi0)
    checks.append(_check("normalization_closed_form", st.normalization_defect(), 1e-12))
    a, W = flow.ricci_potential_constants(st)
    checks.append(_check("entropy_identity", abs(W + a + geom.n), 1e-8))
    for _ in range(60):
        st = flow.step(st, 0.01)
    r1 = flow.evolution_identity_residual(st, flow.step(st, 0.02))
    r2 = flow.evolution_identity_residual(st, flow.step(st, 0.01))
    r3 = flow.evolution_identity_residual(st, flow.step(st, 0.005))
    order = np.polyfit(np.log([0.02, 0.01, 0.005]), np.log([r1, r2, r3]), 1)[0]
    checks.append(_check("evolution_identity_order", abs(order - 2.0), 0.6))
    pot, hist = flow.newton_ke_solve(geom, phi0, return_info=True)
    md = geo.metric_from_potential(geom, pot.values)
    checks.append(_check("newton_residual",
                         np.max(np.abs(md.logf + pot.values - geom.h_ref)), 1e-10))
    checks.append(_check("newton_einstein", geo.einstein_residual(md), 1e-8))
    return checks


def _suite_estimates(seed: int):
    rng = np.random.default_rng(seed)
    checks = []
    geom = geo.fubini_study(1, 96)
    worst_yau, worst_third = 0.0, 0.0
    for _ in range(10):
        phi = geo.random_admissible_potential(geom, rng, amplitude=0.2)
        worst_yau = max(worst_yau, -estimates.yau_c2_residual(geom, phi))
        worst_third = max(worst_third, -estimates.yau_third_order_residual(geom, phi))
    checks.append(_check("yau_c2_residual", worst_yau, YAU_TOL))
    checks.append(_check("yau_third_order", worst_third, YAU_TOL))
    st = flow.flow_state(geom, geo.random_admissible_potential(geom, rng, amplitude=0.2))
    _, resid = estimates.theta_moment_chain(st)
    checks.append(_check("theta_moments", -min(resid), MOMENT_TOL))
    checks.append(_check("density_crosscheck", estimates.density_log_crosscheck(st), 1e-10))
    md0 = geom.reference_metric
    checks.append(_check("reference_diameter", abs(geo.diameter(md0) - np.pi), 1e-10))
    checks.append(_check("reference_c3_zero", estimates.c3_norm(geom, md0), 1e-12))
    per = estimates.perelman_monitor(flow.flow_state(geom, np.zeros(geom.N)))
    checks.append(_check("reference_monitor_scal", abs(per["sup_scal"] - 2.0), 1e-10))
    return checks


_SUITES = {
    "tensor": _suite_tensor,
    "functional": _suite_functional,
    "flow": _suite_flow,
    "estimates": _suite_estimates,
}


def verify(suite: str, seed: int = 0) -> dict:
    """Run a deterministic verification suite and return the report."""
    if suite == "all":
        names = list(_SUITES)
    elif suite in _SUITES:
        names = [suite]
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from "
                          f"{', '.join([*_SUITES, 'all'])}")
    checks = []
    for name in names:
        for c in _SUITES[name](seed):
            c["suite"] = name
            checks.append(c)
    return {
        "format_version": 1,
        "suite": suite,
        "seed": seed,
        "checks": checks,
        "all_passed": all(c["passed"] for c in checks),
    }


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kahlerflow",
                                     description="Kahler-Ricci flow laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate a flow per a JSON config")
    p_run.add_argument("config", help="path to the config document")
    p_run.add_argument("--output-root", default=None)

    p_ver = sub.add_parser("verify", help="run a verification suite")
    p_ver.add_argument("suite", choices=[*_SUITES, "all"])
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--report", default=None, help="write the JSON report here")

    p_ins = sub.add_parser("inspect", help="summarize a snapshot file")
    p_ins.add_argument("snapshot")

    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            config = load_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 4
        return execute(config, output_root=args.output_root)

    if args.command == "verify":
        report = verify(args.suite, seed=args.seed)
        text = json.dumps(report, sort_keys=True, indent=2) + "\n"
        if args.report:
            Path(args.report).write_text(text)
        sys.stdout.write(text)
        return 0 if report["all_passed"] else 2

    if args.command == "inspect":
        try:
            summary = inspect_snapshot(args.snapshot)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"inspect error: {exc}", file=sys.stderr)
            return 4
        sys.stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        return 0

    return 4


if __name__ == "__main__":
    sys.exit(main())
