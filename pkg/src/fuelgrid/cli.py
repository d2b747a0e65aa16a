"""Batch front-end: fuelgrid <mode> --config <path> [--out <dir>] [--seed N] [--threads N].

Modes: ``solve`` writes value/policy dumps and diagnostics, ``simulate``
writes path data and the objective estimate, ``verify`` runs the verification
suite on the configured instance (nonzero exit on any failure), ``bench``
runs the built-in gallery plus a grid-refinement study.

One JSON config per run; identical config and seed reproduce the artifacts
byte for byte (a timestamp lives only in report metadata).  The config schema
is documented in docs/config_schema.md.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .controls import ConstantPolicy, TimeGrid
from .gallery import fuel_follower, gallery
from .payoff import estimate_objective, payoff_tail_indicator, payoff_tail_stoptime, value_trace, trace_to_csv
from .problem import FiniteFuel, ProblemConfigError, load_problem, validate_problem
from .simulate import bundle_to_binary, bundle_to_csv, simulate_paths
from .solver import (
    LatticeFeedbackPolicy,
    build_lattice,
    policy_snapshot_read,
    policy_snapshot_write,
    policy_to_csv,
    solve_backward,
    value_snapshot_write,
    value_to_csv,
)
from .verify import (
    InstanceTooLarge,
    SuiteEntry,
    SuiteReport,
    brute_force_value,
    check_dpp,
    check_reference_invariance,
    check_supermartingale,
    check_truncation_continuity,
    one_step_residual,
    random_policy_field,
)

__all__ = ["main", "run"]


class ConfigError(ValueError):
    pass


def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from exc


def _need(cfg: dict, key: str, where: str = ""):
    if key not in cfg:
        raise ConfigError(f"missing config field '{where}{key}'")
    return cfg[key]


def _problem_from_config(cfg: dict):
    problem = _need(cfg, "problem")
    try:
        if isinstance(problem, str):
            return load_problem(Path(problem))
        return load_problem(problem)
    except ProblemConfigError as exc:
        raise ConfigError(f"problem section: {exc}") from exc


def _lattice_from_config(spec, cfg: dict):
    lc = _need(cfg, "lattice")
    return build_lattice(
        spec,
        [tuple(b) for b in _need(lc, "state_bounds", "lattice.")],
        list(_need(lc, "state_points", "lattice.")),
        int(_need(lc, "n_steps", "lattice.")),
        x0=lc.get("x0"),
        z0=float(lc.get("z0", 0.0)),
        auto_shrink_dt=bool(lc.get("auto_shrink_dt", False)),
    )


def _policy_from_config(spec, cfg: dict, lattice, transitions, tolerances):
    pc = cfg.get("policy", {"kind": "extracted"})
    kind = _need(pc, "kind", "policy.")
    if kind == "extracted":
        field_, pol_field = solve_backward(spec, lattice, transitions,
                                           tol_slice=tolerances["tol_slice"])
        return LatticeFeedbackPolicy(spec, pol_field), field_
    if kind == "zero":
        return ConstantPolicy(d=spec.d), None
    if kind == "constant":
        return ConstantPolicy(d=spec.d, action_index=int(pc.get("action", 0)),
                              stop_step=pc.get("stop_step")), None
    if kind == "stop_at":
        return ConstantPolicy(d=spec.d, stop_step=int(_need(pc, "step", "policy."))), None
    if kind == "file":
        pol_field = policy_snapshot_read(_need(pc, "path", "policy."), lattice)
        return LatticeFeedbackPolicy(spec, pol_field), None
    raise ConfigError(f"unknown policy kind '{kind}'")


def _tolerances(cfg: dict) -> dict:
    tol = {"tol_slice": 1e-10, "tol_tie": 1e-12, "tol_node": 1e-12,
           "tol_dpp": 1e-9, "se_mult": 3.0, "ks_level": 0.01}
    tol.update(cfg.get("tolerances", {}))
    return tol


def _write_json(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["meta"] = {"generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                       **payload.get("meta", {})}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _mode_solve(cfg, out: Path, seed: int, threads: int) -> int:
    spec = _problem_from_config(cfg)
    tol = _tolerances(cfg)
    lattice, transitions = _lattice_from_config(spec, cfg)
    field_, pol = solve_backward(spec, lattice, transitions, tol_slice=tol["tol_slice"])
    resid = one_step_residual(spec, field_, lattice, transitions)
    value_to_csv(field_, out / "value.csv")
    policy_to_csv(pol, out / "policy.csv")
    value_snapshot_write(field_, out / "value.bin")
    policy_snapshot_write(pol, out / "policy.bin")
    _write_json(out / "solve_report.json", {
        "root_value": field_.root_value(),
        "one_step_residual": resid,
        "diagnostics": {**transitions.diagnostics, **field_.diagnostics},
        "spec_hash": field_.spec_hash,
    })
    print(f"solved: root value {field_.root_value():.10g}, one-step residual {resid:.3g}")
    return 0


def _mode_simulate(cfg, out: Path, seed: int, threads: int) -> int:
    spec = _problem_from_config(cfg)
    tol = _tolerances(cfg)
    lattice, transitions = _lattice_from_config(spec, cfg)
    sc = cfg.get("simulate", {})
    policy, field_ = _policy_from_config(spec, cfg, lattice, transitions, tol)
    lc = cfg["lattice"]
    x0 = lc.get("x0") or [0.0] * spec.d
    z0 = float(lc.get("z0", 0.0))
    bundle = simulate_paths(
        spec, policy, x0, z0, lattice.grid,
        int(sc.get("n_paths", 10000)), seed,
        antithetic=bool(sc.get("antithetic", False)),
        noise_construction=sc.get("noise_construction", "increments"),
        threads=threads)
    est, se = estimate_objective(spec, bundle)
    bundle_to_csv(bundle, out / "paths.csv")
    bundle_to_binary(bundle, out / "paths.bin")
    if field_ is not None:
        trace = value_trace(spec, bundle, field_)
        trace_to_csv(trace, bundle, out / "mtrace.csv")
    _write_json(out / "estimate.json", {
        "objective": est, "std_error": se,
        "n_paths": bundle.n_paths, "seed": seed,
    })
    print(f"simulated {bundle.n_paths} paths: objective {est:.6g} +- {se:.3g}")
    return 0


def _mode_verify(cfg, out: Path, seed: int, threads: int) -> int:
    spec = _problem_from_config(cfg)
    tol = _tolerances(cfg)
    vc = cfg.get("verify", {})
    lattice, transitions = _lattice_from_config(spec, cfg)
    field_, pol = solve_backward(spec, lattice, transitions, tol_slice=tol["tol_slice"])
    name = cfg.get("name", "instance")
    entries: list[SuiteEntry] = []

    def timed(check_name, fn, tolerance, compare="abs<="):
        t0 = time.perf_counter()
        stat = float(fn())
        dt = time.perf_counter() - t0
        ok = abs(stat) <= tolerance if compare == "abs<=" else stat <= tolerance
        entries.append(SuiteEntry(check_name, name, stat, tolerance, ok, dt))

    report = validate_problem(spec, samples=int(vc.get("validation_samples", 256)), seed=seed)
    entries.append(SuiteEntry("problem_validation", name,
                              0.0 if report.passed else 1.0, 0.5, report.passed, 0.0,
                              "; ".join(f"{c.name}:{c.status}" for c in report.checks)))

    timed("one_step_residual", lambda: one_step_residual(spec, field_, lattice, transitions),
          tol["tol_node"])

    guard = int(vc.get("oracle_guard", 200_000))
    try:
        t0 = time.perf_counter()
        bf = brute_force_value(spec, lattice, transitions, guard=guard)
        entries.append(SuiteEntry("oracle_equivalence", name, abs(bf - field_.root_value()),
                                  tol["tol_node"], abs(bf - field_.root_value()) <= tol["tol_node"],
                                  time.perf_counter() - t0))
    except InstanceTooLarge:
        pass  # instance beyond enumeration scale; covered by sampled recursion check

    u = int(vc.get("dpp_step", min(1, lattice.grid.n_steps)))
    t0 = time.perf_counter()
    dpp = check_dpp(spec, field_, lattice, transitions, u, guard=guard, seed=seed)
    dpp_tol = tol["tol_dpp"] if dpp.exact else 1e-6
    ok = abs(dpp.residual) <= dpp_tol if dpp.exact else dpp.residual >= -dpp_tol
    entries.append(SuiteEntry("recursion_at_step", name, dpp.residual, dpp_tol, ok,
                              time.perf_counter() - t0,
                              "exact" if dpp.exact else "sampled, one-sided"))

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 3], dtype=np.uint64)))
    pols = [random_policy_field(spec, lattice, rng)
            for _ in range(int(vc.get("n_random_policies", 20)))]
    t0 = time.perf_counter()
    sm = check_supermartingale(spec, field_, lattice, transitions, pols, optimal_policy=pol)
    entries.append(SuiteEntry("supermartingale", name, sm.max_violation, tol["tol_node"],
                              sm.max_violation <= tol["tol_node"], time.perf_counter() - t0))
    entries.append(SuiteEntry("martingale_at_optimum", name, sm.max_equality_gap,
                              tol["tol_node"], sm.max_equality_gap <= tol["tol_node"], 0.0))

    mc_paths = int(vc.get("mc_paths", 4000))
    policy = LatticeFeedbackPolicy(spec, pol)
    lc = cfg["lattice"]
    x0 = lc.get("x0") or [0.0] * spec.d
    z0 = float(lc.get("z0", 0.0))
    bundle = simulate_paths(spec, policy, x0, z0, lattice.grid, mc_paths, seed,
                            threads=threads)

    def payoff_identity():
        worst = 0.0
        for i in range(bundle.n_paths):
            pv = bundle.path(i)
            worst = max(worst, abs(payoff_tail_stoptime(spec, pv, 0)
                                   - payoff_tail_indicator(spec, pv, 0)))
        return worst

    timed("payoff_forms_identity", payoff_identity, tol["tol_node"])

    est, se = estimate_objective(spec, bundle)
    h = float(lattice.spacings.max())
    consistency_tol = tol["se_mult"] * se + float(vc.get("consistency_C", 2.0)) * (
        h + lattice.grid.dt)
    entries.append(SuiteEntry("mc_lattice_consistency", name,
                              abs(est - field_.root_value()), consistency_tol,
                              abs(est - field_.root_value()) <= consistency_tol, 0.0,
                              f"mc {est:.6g} +- {se:.2g}, lattice {field_.root_value():.6g}"))

    from .problem import batched_spec
    sig0 = np.asarray(batched_spec(spec).diffusion(spec.start_t, np.asarray(x0, dtype=float),
                                                   spec.action_set[0]), dtype=float)
    if np.any(sig0 != 0.0):
        n_inv = int(vc.get("invariance_paths", 20000))
        steps = lattice.grid.n_steps
        pow2 = 1 << (steps - 1).bit_length()
        grid_inv = TimeGrid(lattice.grid.t0, lattice.grid.tN, pow2)
        t0 = time.perf_counter()
        inv = check_reference_invariance(spec, policy, x0, z0, grid_inv, n_inv,
                                         (seed + 1, seed + 2),
                                         ks_level=tol["ks_level"], se_mult=tol["se_mult"])
        entries.append(SuiteEntry("reference_invariance", name,
                                  abs(inv.j1 - inv.j2), tol["se_mult"] * max(inv.combined_se, 1e-300),
                                  inv.passed, time.perf_counter() - t0,
                                  f"KS max {max(inv.ks_stats.values()):.4g} crit {inv.ks_critical:.4g}"))

    if isinstance(spec.fuel_mode, FiniteFuel) and spec.fuel_mode.cap > 0:
        t0 = time.perf_counter()
        x_mid = np.asarray(x0, dtype=float)
        shift = 0.01 * np.ones(spec.d)
        res = check_truncation_continuity(
            spec, spec.start_t,
            [((x_mid, z0), (x_mid + shift, min(z0 + 0.01, spec.fuel_mode.cap)))],
            [policy], delta=0.1, n_steps=lattice.grid.n_steps,
            n_paths=int(vc.get("mc_paths", 4000)), seed=seed)
        entries.append(SuiteEntry("truncation_continuity", name, res["max_abs_diff"],
                                  float(vc.get("continuity_budget", 1.0)),
                                  res["max_abs_diff"] <= float(vc.get("continuity_budget", 1.0)),
                                  time.perf_counter() - t0, "diagnostic"))

    suite = SuiteReport(tuple(entries))
    (out / "verify_report.json").write_text(suite.to_json() + "\n")
    print(suite.table())
    print("suite:", "PASS" if suite.passed else "FAIL")
    return 0 if suite.passed else 1


def _mode_bench(cfg, out: Path, seed: int, threads: int) -> int:
    results = []
    timings = {}
    for inst in gallery():
        spec, lattice, transitions = inst.build()
        t0 = time.perf_counter()
        field_, pol = solve_backward(spec, lattice, transitions)
        solve_s = time.perf_counter() - t0
        resid = one_step_residual(spec, field_, lattice, transitions)
        policy = LatticeFeedbackPolicy(spec, pol)
        bundle = simulate_paths(spec, policy, inst.x0, inst.z0, lattice.grid,
                                inst.mc_paths, seed, threads=threads)
        est, se = estimate_objective(spec, bundle)
        value_to_csv(field_, out / f"value_{inst.name}.csv")
        policy_to_csv(pol, out / f"policy_{inst.name}.csv")
        trace = value_trace(spec, bundle, field_)
        timings[inst.name] = solve_s
        results.append({
            "name": inst.name, "root_value": field_.root_value(),
            "one_step_residual": resid,
            "mc_objective": est, "mc_std_error": se,
            "mc_gap": abs(est - field_.root_value()),
            "clamped_evaluations": trace.clamped_evaluations,
        })
        print(f"{inst.name:16s} root {field_.root_value():+.6f}  resid {resid:.2e}  "
              f"mc {est:+.6f} +- {se:.4f}  ({solve_s:.2f}s)")

    rows = []
    prev_root = None
    for level in range(3):
        inst = fuel_follower(level)
        spec, lattice, transitions = inst.build()
        field_, _ = solve_backward(spec, lattice, transitions)
        root = field_.root_value()
        rows.append({"level": level, "h": float(lattice.spacings[0]),
                     "dt": lattice.grid.dt, "root_value": root,
                     "difference": None if prev_root is None else abs(root - prev_root)})
        prev_root = root
    with open(out / "refinement.csv", "w", newline="") as fh:
        import csv
        w = csv.writer(fh)
        w.writerow(["level", "h", "dt", "root_value", "difference_to_previous"])
        for r in rows:
            w.writerow([r["level"], repr(r["h"]), repr(r["dt"]), repr(r["root_value"]),
                        "" if r["difference"] is None else repr(r["difference"])])
    print("refinement study:")
    for r in rows:
        d = "" if r["difference"] is None else f" |dv| {r['difference']:.6f}"
        print(f"  level {r['level']}: h={r['h']:.5f} dt={r['dt']:.6f} "
              f"v={r['root_value']:.6f}{d}")
    _write_json(out / "bench_report.json", {"instances": results, "refinement": rows,
                                             "meta": {"solve_seconds": timings}})
    return 0


_MODES = {"solve": _mode_solve, "simulate": _mode_simulate,
          "verify": _mode_verify, "bench": _mode_bench}


def run(mode: str, config_path: str | None, out_dir: str, seed: int, threads: int) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {} if config_path is None else _load_config(config_path)
    if mode != "bench" and not cfg:
        raise ConfigError("this mode needs a --config file")
    return _MODES[mode](cfg, out, seed, threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fuelgrid",
        description="Solve, simulate, and verify controlled-diffusion instances "
                    "with singular controls, stopping, exit, and fuel constraints.")
    parser.add_argument("mode", choices=sorted(_MODES))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        return run(args.mode, args.config, args.out, args.seed, args.threads)
    except (ConfigError, ProblemConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InstanceTooLarge as exc:
        print(f"instance too large: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
