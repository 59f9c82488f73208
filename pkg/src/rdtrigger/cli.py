"""Command-line entry point: ``sim {params,run,compare,verify,kernels,show}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .kernels import KernelError, AssumptionViolation, write_kernels_csv
from .trigger_params import InfeasibleParameters
from .triggering import SCHEMES, SchemeError
from . import harness

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MONITOR = 0, 2, 3, 4


def _params_table(prep: harness.Prepared, scheme: str) -> str:
    tp, margin = harness.trigger_params_for(prep, scheme)
    ks = prep.kernels
    rows = [
        ("alpha1", tp.alpha1, "4 int (eps k'' + eps k(1) k + lam k)^2"),
        ("alpha2", tp.alpha2, "4 (eps q k(1) + eps k'(1))^2"),
        ("alpha3", tp.alpha3, "4 (lam k_b / 2 + int k p1)^2"),
        ("beta1", tp.beta1, "alpha1 / (gamma (1 - sigma))"),
        ("beta2", tp.beta2, "alpha2 / (gamma (1 - sigma))"),
        ("beta3", tp.beta3, "alpha3 / (gamma (1 - sigma))"),
        ("rho", tp.rho, "eps kappa1 B / 2"),
        ("rho1", tp.rho1, "4 eps^2 k(1)^2"),
        ("a", tp.a, "1 + rho1 + eta"),
        ("tau", tp.tau, "(1/a) ln(1 + sigma a / ((1-sigma)(a + gamma rho)))"),
        ("B", tp.B, "feasibility constant"),
        ("kappa1", tp.kappa1, "design"),
        ("kappa2", tp.kappa2, "free constant (25% rule when B is suggested)"),
        ("kappa3", tp.kappa3, "free constant (25% rule when B is suggested)"),
        ("margin", margin, "B-inequality margin (> 0 feasible)"),
        ("k(1)", ks.k1, "gain at the actuated end"),
        ("|k|", ks.norms["k_norm"], "L2 norm of the gain"),
        ("|p1|", ks.norms["p1_norm"], "L2 norm of the injection gain"),
        ("p10", ks.p10, "boundary injection gain"),
        ("L_tilde", ks.norms["L_tilde"], "1 + (int int L^2)^(1/2)"),
        ("L_check", ks.norms["L_check"], "(int L(1,y)^2)^(1/2)"),
        ("|g|", ks.norms["g_norm"], "L2 norm of g"),
        ("Omega1", ks.norms["Omega1"], "1 + (int int Q^2)^(1/2)"),
        ("Omega2", ks.norms["Omega2"], "max|Q(x,x)| + (int int Q_x^2)^(1/2)"),
    ]
    head = f"# scenario {prep.scenario.name}, trigger design for {scheme}"
    return "\n".join([head, f"{'name':<8s} {'value':>14s}  source"] +
                     [f"{n:<8s} {v:>14.6g}  {s}" for n, v, s in rows])


def cmd_params(args) -> int:
    sc = harness.load_scenario(args.config)
    prep = harness.prepare(sc)
    if args.scheme:
        schemes = [args.scheme]
    else:
        schemes = [sc.scheme.name] + (["stc"] if sc.scheme.stc_trigger and sc.scheme.name != "stc" else [])
    for s in schemes:
        print(_params_table(prep, s))
        _, margin = harness.trigger_params_for(prep, s)
        if margin <= 0:
            print(f"# B-inequality NOT satisfied for {s} (margin {margin:.4g}); "
                  "scenario opts out of enforcement")
    return EXIT_OK


def _out_dir(args, sc, scheme) -> Path | None:
    if args.out:
        return Path(args.out)
    if sc.outputs.directory:
        return Path(sc.outputs.directory) / scheme
    return None


def cmd_run(args) -> int:
    sc = harness.load_scenario(args.config)
    if args.horizon is not None:
        sc = harness.scenario_from_dict({**sc.to_dict(), "grid": {**sc.to_dict()["grid"],
                                                                 "horizon": args.horizon}})
    scheme = args.scheme or sc.scheme.name
    run = harness.run_scenario(sc, scheme)
    sys.stdout.write(harness.report_text(run))
    out = _out_dir(args, sc, scheme)
    if out is not None:
        for p in harness.write_outputs(run, out):
            print(f"wrote {p}")
    return EXIT_OK if run.passed else EXIT_MONITOR


def cmd_compare(args) -> int:
    sc = harness.load_scenario(args.config)
    if args.horizon is not None:
        sc = harness.scenario_from_dict({**sc.to_dict(), "grid": {**sc.to_dict()["grid"],
                                                                 "horizon": args.horizon}})
    cmp = harness.compare_schemes(sc)
    print(harness.format_comparison(cmp))
    ok = True
    for s, run in cmp["runs"].items():
        for r in run.reports:
            if not r.passed:
                ok = False
                print(f"{s}: {r.row()}")
        if args.out:
            harness.write_outputs(run, Path(args.out) / s)
    return EXIT_OK if ok else EXIT_MONITOR


def cmd_verify(args) -> int:
    res, meta = harness.load_trace(args.trace, args.meta)
    reps = harness.verify_trace(res, meta)
    for r in reps:
        print(r.row())
    return EXIT_OK if all(r.passed for r in reps) else EXIT_MONITOR


def cmd_kernels(args) -> int:
    sc = harness.load_scenario(args.config)
    prep = harness.prepare(sc)
    out = Path(args.out)
    write_kernels_csv(prep.kernels, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_show(args) -> int:
    if args.name is None:
        for n in harness.BUILTINS:
            print(n)
        return EXIT_OK
    print(harness.load_scenario(args.name).to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("params", help="print derived trigger constants")
    p.add_argument("config", help="JSON file or built-in scenario name")
    p.add_argument("--scheme", choices=SCHEMES)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("run", help="simulate one scheme and check monitors")
    p.add_argument("config")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--out", help="output directory for trace/events/report")
    p.add_argument("--horizon", type=float, help="override grid.horizon")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run all three schemes on one scenario")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--horizon", type=float)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="re-check monitors on a stored trace.csv")
    p.add_argument("trace")
    p.add_argument("--meta", help="metadata JSON (default: trace.meta.json beside the trace)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("kernels", help="export kernel tables")
    p.add_argument("config")
    p.add_argument("--out", default="kernels.csv")
    p.set_defaults(func=cmd_kernels)

    p = sub.add_parser("show", help="list built-in scenarios or print one as JSON")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_show)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ScenarioError, SchemeError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleParameters, AssumptionViolation) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except KernelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
