"""Command-line surface: fixed points, risk experiments, AMP traces, self-checks.

Every CSV this module emits starts with a ``schema_version`` column so the
format can evolve without silently breaking downstream parsers, and every
float is printed with 17 significant digits so reruns under the same config
and seed are byte-identical.  Wall-clock timings are reported on the human
side (stdout or stderr) only, never inside the CSV body, for the same reason.
"""

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._svg import write_line_plot
from .estimators import (
    model_average,
    solve_individual_lasso,
    solve_second_step,
    solve_stacked_lasso,
)
from .glamp import (
    run_individual_glamp,
    run_induced_second_step_amp,
    run_stack_glamp,
)
from .model import ConfigError, apply_sweep_value, generate_environment, parse_config
from .prox import JointPenalty, MultiEnvProxProblem, eta_multi
from .risk import (
    empirical_risk,
    predict_risk_average,
    predict_risk_second_step,
    predict_risk_stack,
    settings_fingerprint,
)
from .state_evo import (
    FixedPointError,
    MCSettings,
    check_contraction,
    estimate_eta_bar_moments,
    evaluate_H_map,
    evaluate_H_rt,
    mean_se,
    solve_individual_fixed_point,
    solve_second_step_fixed_point,
    solve_stack_fixed_point,
    statics_from_config,
)

SCHEMA_VERSION = "1"
RESULT_HEADER = (
    "schema_version", "experiment", "sweep_param", "sweep_value", "estimator",
    "mse_theory", "mse_theory_se", "mse_empirical", "mse_empirical_se",
    "r_design", "r_mc", "seed", "error",
)
TRACE_HEADER = ("schema_version", "t", "quantity", "environment", "value")
RISK_FUNCTIONAL = "mse-vs-beta1"


# ============================================================
# small shared plumbing
# ============================================================


def _fmt(value) -> str:
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def _write_csv(fh, header, rows) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])


def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _say(args, text) -> None:
    """Human-readable progress; kept off stdout when the CSV goes there."""
    target = sys.stderr if args.out is None else sys.stdout
    print(text, file=target)


def _fail(exc) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _load(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = parse_config(raw)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    reps = config.replicates
    if getattr(args, "mc", None) is not None:
        reps = dataclasses.replace(reps, mc=args.mc)
    if getattr(args, "design_reps", None) is not None:
        reps = dataclasses.replace(reps, design=args.design_reps)
    config = dataclasses.replace(config, replicates=reps)
    raw["_overrides"] = {"seed": config.seed, "mc": reps.mc,
                         "design": reps.design}
    return config, settings_fingerprint(raw)


def _map_indexed(fn, count, threads):
    """fn over range(count), in index order regardless of thread count."""
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


# ============================================================
# theory and simulation halves of one sweep point
# ============================================================


def _average_weights(statics) -> np.ndarray:
    total = statics.pi.sum()
    if total <= 0:
        raise ValueError("averaging needs a positive total environment weight")
    return statics.pi / total


def _theory_mse(config, statics, mc):
    kind = config.estimator.kind
    if kind == "stack":
        fp = solve_stack_fixed_point(statics, mc)
        return predict_risk_stack(fp, statics, RISK_FUNCTIONAL, mc)
    if kind == "average":
        fps = [solve_individual_fixed_point(statics.single(e), mc)
               for e in range(statics.n_env)]
        return predict_risk_average(fps, _average_weights(statics), statics,
                                    RISK_FUNCTIONAL, mc)
    fp = solve_stack_fixed_point(statics, mc)
    penalty = config.estimator.make_penalty()
    fp2 = solve_second_step_fixed_point(fp, statics, penalty, mc)
    return predict_risk_second_step(fp, fp2, statics, penalty,
                                    RISK_FUNCTIONAL, mc)


def _require(record, what):
    if not record.converged:
        raise FixedPointError(
            f"{what} solver stopped before reaching tolerance "
            f"(kkt residual {record.kkt_residual:.3e})")
    return record.beta_hat


def _fit_replicate(config, replicate):
    envs = [generate_environment(spec, config.seed, e, replicate=replicate)
            for e, spec in enumerate(config.environments)]
    kind = config.estimator.kind
    if kind == "stack":
        return _require(solve_stacked_lasso(envs), "stacked lasso")
    if kind == "average":
        parts = [_require(solve_individual_lasso(env), "individual lasso")
                 for env in envs]
        weights = np.array([env.pi for env in envs], dtype=float)
        return model_average(parts, weights / weights.sum())
    first = _require(solve_stacked_lasso(envs), "stacked lasso")
    penalty = config.estimator.make_penalty()
    return _require(solve_second_step(envs[0], first, penalty), "second step")


def _empirical_mse(config, threads):
    estimates = _map_indexed(lambda r: _fit_replicate(config, r),
                             config.replicates.design, threads)
    statics = statics_from_config(config)
    return empirical_risk(estimates, statics.beta[0], RISK_FUNCTIONAL)


def _experiment_rows(config, experiment_id, args, theory, empirical):
    rows = []
    timings = []
    for value in config.sweep.values:
        start = time.perf_counter()
        point = apply_sweep_value(config, value)
        mc = MCSettings(replicates=point.replicates.mc, seed=point.seed)
        th = th_se = emp = emp_se = math.nan
        error = ""
        try:
            statics = statics_from_config(point)
            if theory:
                th, th_se = _theory_mse(point, statics, mc)
            if empirical:
                emp, emp_se = _empirical_mse(point, args.threads)
        except (FixedPointError, ValueError, FloatingPointError) as exc:
            error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        wall = time.perf_counter() - start
        timings.append(wall)
        rows.append((SCHEMA_VERSION, experiment_id, config.sweep.param,
                     float(value), config.estimator.kind, th, th_se,
                     emp, emp_se,
                     config.replicates.design if empirical else 0,
                     config.replicates.mc if theory else 0,
                     config.seed, error))
        _say(args, f"{config.sweep.param}={value:g} "
                   f"mse_theory={th:.6g} mse_empirical={emp:.6g} "
                   f"({wall:.1f}s)"
                   + (f" [failed: {error}]" if error else ""))
    return rows, timings


def _read_result_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


def _render_result_svg(csv_path, svg_path):
    """Plot theory and simulation curves from the CSV alone."""
    rows = _read_result_csv(csv_path)
    if not rows:
        return
    xs = [float(r["sweep_value"]) for r in rows]
    series = []
    for label, col in (("theory", "mse_theory"), ("empirical", "mse_empirical")):
        ys = [float(r[col]) for r in rows]
        errs = [float(r[col + "_se"]) for r in rows]
        if any(math.isfinite(y) for y in ys):
            series.append((label, xs, ys, errs))
    write_line_plot(svg_path, series, xlabel=rows[0]["sweep_param"],
                    ylabel="mse", title=rows[0]["estimator"])


def _emit_results(config, experiment_id, args, theory, empirical) -> int:
    rows, timings = _experiment_rows(config, experiment_id, args,
                                     theory, empirical)
    fh, close = _open_out(args.out)
    try:
        _write_csv(fh, RESULT_HEADER, rows)
    finally:
        if close:
            fh.close()
    if args.svg:
        svg_path = str(args.out)
        svg_path = svg_path[:-4] + ".svg" if svg_path.endswith(".csv") \
            else svg_path + ".svg"
        _render_result_svg(args.out, svg_path)
        _say(args, f"wrote {svg_path}")
    if timings:
        _say(args, f"total wall time {sum(timings):.1f}s over "
                   f"{len(timings)} sweep point(s)")
    failed = sum(1 for row in rows if row[-1])
    if rows and failed == len(rows):
        _fail(FixedPointError("every sweep point failed; see the error column"))
        return 1
    return 0


# ============================================================
# subcommands
# ============================================================


def _vec(arr) -> str:
    return "[" + ", ".join("%.6g" % float(v) for v in np.atleast_1d(arr)) + "]"


def _fp_payload(fp) -> dict:
    out = {}
    for key, value in dataclasses.asdict(fp).items():
        if isinstance(value, np.ndarray):
            out[key] = value.tolist()
        elif isinstance(value, dict):
            out[key] = {k: np.asarray(v).tolist() for k, v in value.items()}
        else:
            out[key] = value
    return out


def cmd_fixed_point(args) -> int:
    config, _ = _load(args)
    point = apply_sweep_value(config, config.sweep.values[0]) \
        if config.sweep.values else config
    statics = statics_from_config(point)
    mc = MCSettings(replicates=point.replicates.mc, seed=point.seed)
    kind = point.estimator.kind
    payload = {"estimator": kind, "seed": point.seed, "mc": mc.replicates}

    if kind == "average":
        fps = [solve_individual_fixed_point(statics.single(e), mc)
               for e in range(statics.n_env)]
        payload["individual"] = [_fp_payload(fp) for fp in fps]
        for e, fp in enumerate(fps):
            print(f"environment {e}: tau*={fp.tau_ind:.6g} "
                  f"theta*={fp.theta_ind:.6g} delta_bar={fp.delta_ind:.6g} "
                  f"(residual {fp.residual:.3e})")
    else:
        fp = solve_stack_fixed_point(statics, mc)
        payload["stack"] = _fp_payload(fp)
        print(f"stack fixed point (residual {fp.residual:.3e})")
        print(f"  tau*      = {_vec(fp.tau)}  se {_vec(fp.mc_se['tau'])}")
        print(f"  varpi*    = {_vec(fp.varpi)}")
        print(f"  theta*    = {fp.theta:.6g}")
        print(f"  delta_bar = {_vec(fp.delta_bar)}  "
              f"se {_vec(fp.mc_se['delta_bar'])}")
        report = check_contraction(fp, statics)
        for name, margin in sorted(report.margins.items()):
            print(f"  margin {name} = {float(np.min(margin)):.6g}")
        if kind in ("second-step-joint", "second-step-adaptive"):
            penalty = point.estimator.make_penalty()
            fp2 = solve_second_step_fixed_point(fp, statics, penalty, mc)
            payload["second_step"] = _fp_payload(fp2)
            print(f"second-step fixed point (residual {fp2.residual:.3e})")
            print(f"  tau_rt*   = {fp2.tau_rt:.6g}")
            print(f"  zeta*     = {fp2.zeta:.6g}"
                  + ("  (clamped)" if fp2.zeta_clamped else ""))
            print(f"  theta_rt* = {fp2.theta_rt:.6g}")
            print(f"  gamma_ro* = {fp2.gamma_ro:.6g}  "
                  f"gamma_rt* = {fp2.gamma_rt:.6g}")

    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_predict(args) -> int:
    config, experiment_id = _load(args)
    return _emit_results(config, experiment_id, args,
                         theory=True, empirical=False)


def cmd_simulate(args) -> int:
    config, experiment_id = _load(args)
    return _emit_results(config, experiment_id, args,
                         theory=False, empirical=True)


def cmd_experiment(args) -> int:
    config, experiment_id = _load(args)
    return _emit_results(config, experiment_id, args,
                         theory=True, empirical=True)


def _trace_rows(trace):
    return [(SCHEMA_VERSION, t, quantity, env, value)
            for t, quantity, env, value in trace.rows]


def cmd_amp(args) -> int:
    config, _ = _load(args)
    point = apply_sweep_value(config, config.sweep.values[0]) \
        if config.sweep.values else config
    statics = statics_from_config(point)
    mc = MCSettings(replicates=point.replicates.mc, seed=point.seed)
    envs = [generate_environment(spec, point.seed, e, replicate=0)
            for e, spec in enumerate(point.environments)]
    onsager = args.onsager != "off"
    kind = point.estimator.kind

    status = 0
    try:
        if kind == "average":
            fp = solve_individual_fixed_point(statics.single(0), mc)
            target = _require(solve_individual_lasso(envs[0]),
                              "individual lasso")
            run = run_individual_glamp(envs[0], fp, horizon=args.steps,
                                       seed=point.seed, onsager=onsager,
                                       target=target)
        elif kind == "stack":
            fp = solve_stack_fixed_point(statics, mc)
            target = _require(solve_stacked_lasso(envs), "stacked lasso")
            run = run_stack_glamp(envs, fp, horizon=args.steps,
                                  seed=point.seed, onsager=onsager,
                                  target=target)
        else:
            fp = solve_stack_fixed_point(statics, mc)
            first = _require(solve_stacked_lasso(envs), "stacked lasso")
            penalty = point.estimator.make_penalty()
            fp2 = solve_second_step_fixed_point(fp, statics, penalty, mc)
            target = _require(solve_second_step(envs[0], first, penalty),
                              "second step")
            run = run_induced_second_step_amp(envs[0], first, fp, fp2,
                                              horizon=args.steps,
                                              seed=point.seed,
                                              penalty=penalty,
                                              onsager=onsager, target=target)
        trace = run.trace
    except FixedPointError as exc:
        trace = getattr(exc, "trace", None)
        _fail(exc)
        status = 1
        if trace is None:
            return status

    fh, close = _open_out(args.out)
    try:
        _write_csv(fh, TRACE_HEADER, _trace_rows(trace))
    finally:
        if close:
            fh.close()
    if status == 0:
        steps, dist = trace.series("target_dist")
        _say(args, f"final (1/p)||iterate - direct||^2 = {dist[-1]:.3e} "
                   f"at step {int(steps[-1])}")
    return status


# ============================================================
# selfcheck
# ============================================================


def _check_prox_oracles(rng, mc_unused):
    problems = 0
    for _ in range(20):
        p = int(rng.integers(3, 7))
        n_env = int(rng.integers(1, 4))
        varpi = rng.uniform(0.2, 1.0, n_env)
        varpi /= varpi.sum()
        sigmas = []
        for _ in range(n_env):
            a = rng.normal(size=(p, p))
            sigmas.append(a @ a.T / p + 0.3 * np.eye(p))
        problem = MultiEnvProxProblem(
            varpi=varpi, sigma=sigmas,
            beta=[rng.normal(size=p) for _ in range(n_env)],
            v=[rng.normal(size=p) for _ in range(n_env)],
            theta=float(rng.uniform(0.5, 1.5)),
            lam=rng.uniform(0.5, 1.5, p))
        res = eta_multi(problem)
        if not res.converged or res.kkt_residual > 1e-8:
            raise AssertionError(
                f"prox KKT residual {res.kkt_residual:.3e} on a random "
                f"instance (p={p}, E={n_env})")
        problems += 1
    # Isotropic case against the closed form, independent of the solver.
    p, n_env = 200, 2
    varpi = np.array([0.6, 0.4])
    betas = [rng.normal(size=p) for _ in range(n_env)]
    vs = [rng.normal(size=p) for _ in range(n_env)]
    lam = rng.uniform(0.5, 1.5, p)
    res = eta_multi(MultiEnvProxProblem(
        varpi=varpi, sigma=[np.eye(p)] * n_env, beta=betas, v=vs,
        theta=0.8, lam=lam))
    center = sum(w * (v + b) for w, v, b in zip(varpi, vs, betas))
    expected = np.sign(center) * np.maximum(np.abs(center) - 0.8 * lam, 0.0)
    gap = float(np.max(np.abs(res.b - expected)))
    if gap > 1e-10:
        raise AssertionError(f"isotropic closed form off by {gap:.3e}")
    return f"{problems} random KKT instances, isotropic gap {gap:.1e}"


def _small_config(seed):
    return parse_config({
        "environments": [
            {"n": 160, "p": 80, "pi": 0.5},
            {"n": 120, "p": 80, "pi": 0.5},
        ],
        "seed": seed,
    })


def _check_stein_identity(config, mc, flip_sign):
    statics = statics_from_config(config)
    fp = solve_stack_fixed_point(statics, mc)
    bundle = estimate_eta_bar_moments(fp.tau, fp.varpi, fp.theta, statics, mc)
    trace_mean, trace_se = mean_se(bundle.delta_bar)
    stein = -bundle.delta_stein if flip_sign else bundle.delta_stein
    stein_mean, stein_se = mean_se(stein)
    gap = np.abs(trace_mean - stein_mean)
    budget = 3.0 * np.hypot(trace_se, stein_se)
    if np.any(gap > budget):
        raise AssertionError(
            f"support-trace and Gaussian-product dof estimates disagree: "
            f"gap {_vec(gap)} exceeds {_vec(budget)}")
    return f"max gap {float(gap.max()):.2e} within {_vec(budget)}"


def _check_h_fixed_point(config, mc):
    # The identity H(1) = 1 holds at the exact fixed point; a Monte Carlo
    # solve carries its residual into the gap, hence the residual term in
    # the budget.
    statics = statics_from_config(config)
    fp = solve_stack_fixed_point(statics, mc)
    est = evaluate_H_map(np.ones(statics.n_env), fp, statics, mc)
    gap = np.abs(est.value - 1.0)
    budget = 3.0 * est.se + 2.0 * fp.residual
    if np.any(gap > budget):
        raise AssertionError(f"H(1) = {_vec(est.value)} is not 1 "
                             f"within {_vec(budget)}")
    fp2 = solve_second_step_fixed_point(fp, statics, JointPenalty(0.5), mc)
    est_rt = evaluate_H_rt(1.0, fp, fp2, statics, JointPenalty(0.5), mc)
    gap_rt = abs(float(est_rt.value) - 1.0)
    if gap_rt > 3.0 * float(est_rt.se) + 2.0 * fp2.residual:
        raise AssertionError(f"H_rt(1) = {float(est_rt.value):.6g} is not 1")
    return f"H(1) gap {float(gap.max()):.1e}, H_rt(1) gap {gap_rt:.1e}"


def _check_trivial_fixed_point(seed, mc):
    config = parse_config({
        "environments": [
            {"n": 120, "p": 60, "pi": 1.0, "noise_var": 2.0,
             "signal": {"kind": "iid-gaussian", "sigma_beta2": 0.0},
             "lambda": 50.0},
        ],
        "seed": seed,
    })
    statics = statics_from_config(config)
    fp = solve_stack_fixed_point(statics, MCSettings(replicates=mc.replicates,
                                                     seed=mc.seed))
    if not (np.all(fp.delta_bar == 0.0) and fp.theta == 1.0):
        raise AssertionError("null-signal system did not collapse exactly")
    expected = math.sqrt(2.0)
    if abs(float(fp.tau[0]) - expected) > 1e-12:
        raise AssertionError(
            f"null-signal tau* = {float(fp.tau[0]):.12g}, "
            f"expected sqrt(noise) = {expected:.12g}")
    return f"tau*={float(fp.tau[0]):.6g}, delta_bar=0, theta=1"


def cmd_selfcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    mc = MCSettings(replicates=args.mc or 150, seed=seed)
    config = _small_config(seed)
    checks = [
        ("prox-kkt-and-closed-form",
         lambda: _check_prox_oracles(np.random.default_rng(seed + 1), mc)),
        ("stein-dof-identity",
         lambda: _check_stein_identity(config, mc, args.flip_delta_sign)),
        ("coupling-map-fixed-point", lambda: _check_h_fixed_point(config, mc)),
        ("null-signal-fixed-point",
         lambda: _check_trivial_fixed_point(seed, mc)),
    ]
    failures = []
    for name, run in checks:
        start = time.perf_counter()
        try:
            detail = run()
            print(f"[pass] {name}: {detail} "
                  f"({time.perf_counter() - start:.1f}s)")
        except (AssertionError, FixedPointError, ValueError) as exc:
            failures.append(name)
            print(f"[FAIL] {name}: {exc}")
    if failures:
        print(f"{len(failures)} of {len(checks)} checks failed: "
              + ", ".join(failures))
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


# ============================================================
# argument parsing
# ============================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlamp",
        description="Fixed points, risk curves, and message-passing runs "
                    "for multi-environment Lasso transfer learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="JSON experiment configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--mc", type=int, default=None, metavar="R",
                       help="override Monte Carlo replicates")
        p.add_argument("--out", default=None,
                       help="output path (default: CSV to stdout)")

    def sweepish(p):
        common(p)
        p.add_argument("--design-reps", type=int, default=None, metavar="R",
                       help="override simulated dataset replicates")
        p.add_argument("--svg", action="store_true",
                       help="also render <out>.svg from the CSV (needs --out)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for simulation replicates")

    p = sub.add_parser("fixed-point",
                       help="solve and print the configured fixed point(s)")
    common(p)
    p.set_defaults(func=cmd_fixed_point)

    p = sub.add_parser("predict", help="theory risk curve over the sweep")
    sweepish(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="simulated risk curve over the sweep")
    sweepish(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment",
                       help="theory and simulation, one CSV row per sweep point")
    sweepish(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("amp", help="message-passing iterate trace")
    common(p)
    p.add_argument("--steps", type=int, default=25,
                   help="number of iterations (default 25)")
    p.add_argument("--onsager", choices=("on", "off"), default="on",
                   help="'off' drops the memory correction (demo only)")
    p.set_defaults(func=cmd_amp)

    p = sub.add_parser("selfcheck", help="fast invariant suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mc", type=int, default=None, metavar="R")
    p.add_argument("--flip-delta-sign", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "svg", False) and args.out is None:
        parser.error("--svg needs --out")  # exits with status 2
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail(exc)
        return 2
    except OSError as exc:
        _fail(exc)
        return 2
    except FixedPointError as exc:
        _fail(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
