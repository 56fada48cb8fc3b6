"""Command-line front end.

Exit codes: 0 success, 1 non-convergence (or a failed subproblem), 2 usage or
validation error.  Text output uses 6 significant digits; CSV files carry
full precision.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .acpf import solve_centralized_pf
from .apps.dispatch import (DispatchError, build_tdced, build_tdopf_dc, build_tdse, centralized_qp,
                            compute_lmps, run_tdced, run_tdopf_dc, run_tdse, weighted_residuals)
from .apps.pf import build_tdpf, run_ca, run_tdpf, run_vsa, run_vsa_centralized, run_vsa_frozen
from .hgd import (HgdConfig, InsufficientDataError, SubproblemError, Variant,
                  composite_map_spectral_radius, estimate_rate)
from .kkt import SolverError
from .model import CaseError, bundled_case_path, check_case, load_case
from .runtime import APPS, CoordTimeoutError, RuntimeProtocolError, serve_dso, serve_tso

VARIANTS = ("basic", "modified", "modified-dist", "modified-trans")


class UsageError(Exception):
    pass


def g6(v) -> str:
    return f"{float(v):.6g}"


def _variant(name: str | None, default: Variant = Variant.BASIC) -> Variant:
    if name is None:
        return default
    return Variant.MODIFIED_DIST if name == "modified" else Variant(name)


def _load(arg: str):
    p = Path(arg)
    if not p.exists():
        try:
            p = bundled_case_path(p.stem)
        except (FileNotFoundError, KeyError, ValueError):
            raise UsageError(f"case file {arg!r} not found") from None
        if not p.exists():
            raise UsageError(f"case file {arg!r} not found")
    return load_case(p)


def _cfg(args, variant: Variant | None = None) -> HgdConfig:
    return HgdConfig(epsilon=args.eps, max_iter=args.max_iter,
                     variant=variant or _variant(args.variant))


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_trace(args, trace) -> None:
    if args.trace_out:
        Path(args.trace_out).write_text(trace.to_csv_deterministic())


def _trace_summary(trace) -> str:
    last = trace.residuals[-1] if trace.n_iter else float("nan")
    state = "converged" if trace.converged else "NOT converged"
    return f"{state} after {trace.n_iter} iterations (variant {trace.variant.value}, final residual {g6(last)})"


# -- commands -----------------------------------------------------------------------------------

def cmd_validate(args) -> int:
    case = _load(args.case)
    problems = check_case(case)
    if problems:
        for v in problems:
            print(v, file=sys.stderr)
        return 2
    print(f"{case.name}: valid; {len(case.master_ids)} master, {len(case.boundary)} boundary, "
          f"{len(case.slave_ids)} slave buses; DSOs {list(case.dsos)}")
    return 0


def cmd_pf(args) -> int:
    case = _load(args.case)
    state, trace = run_tdpf(case, _variant(args.variant), _cfg(args), args.response or "equivalent")
    ref = solve_centralized_pf(case)
    dv = max(abs(state.voltage(b) - ref.voltage(b)) for b in ref.ids)
    print(_trace_summary(trace))
    print(f"max |dV| vs centralized: {g6(dv)} p.u.")
    for b in case.boundary:
        print(f"  boundary {b}: |V| {g6(abs(state.voltage(b)))}  angle {g6(np.angle(state.voltage(b)))}")
    _write_trace(args, trace)
    _write_csv(args.report_out, ["bus", "vm", "va"],
               [[b, float(state.v_mag[state.index(b)]), float(state.v_ang[state.index(b)])] for b in state.ids])
    return 0 if trace.converged else 1


def cmd_ca(args) -> int:
    case = _load(args.case)
    report = run_ca(case, _cfg(args), _variant(args.variant), response_mode=args.response or "equivalent")
    rows = report.rows()
    for r in rows:
        line = f"branch {r['branch']}: {r['status']} (baseline {r['baseline_status']})"
        if r["violations"]:
            line += f"; violations {r['violations']}"
        if r["missed_by_baseline"]:
            line += f"; missed by baseline {r['missed_by_baseline']}"
        if r["false_alarms"]:
            line += f"; baseline false alarms {r['false_alarms']}"
        print(line)
    if rows:
        header = list(rows[0])
        for path in (args.report_out, args.trace_out):
            _write_csv(path, header, [[r[h] for h in header] for r in rows])
    return 1 if any(e.status == "diverged" for e in report.entries) else 0


def cmd_vsa(args) -> int:
    case = _load(args.case)
    if not args.step0 > args.min_step > 0:
        raise UsageError("need --step0 > --min-step > 0")
    # continuation defaults to the corrected variant: loading pushes basic toward divergence
    v = _variant(args.variant, Variant.MODIFIED_DIST)
    res = run_vsa(case, _cfg(args, v), args.step0, args.min_step, v,
                  response_mode=args.response or "sensitivity")
    central = run_vsa_centralized(case, args.step0, args.min_step)
    frozen = run_vsa_frozen(case, args.step0, args.min_step)
    print(f"loading margin (coordinated): {g6(res.margin)}")
    print(f"loading margin (centralized): {g6(central.margin)}")
    print(f"loading margin (slave frozen): {g6(frozen.margin)}  difference {g6(frozen.margin - res.margin)}")
    for path in (args.report_out, args.trace_out):
        _write_csv(path, ["lambda", "step", "ok"], [[lam, st, int(ok)] for lam, st, ok in res.history])
    return 0


def _qp_report(case, sol, trace, prob, args, with_prices: bool) -> int:
    print(_trace_summary(trace))
    qp, pt = centralized_qp(prob)
    print(f"objective {g6(sol.objective)}  QP objective {g6(sol.problem.objective(sol.point.z))} "
          f"(centralized {g6(qp.objective(pt.z))})  global KKT residual {g6(trace.global_kkt_residual)}")
    rows = []
    if with_prices:
        lmps = compute_lmps(sol)
        for b, lam in zip(lmps.boundary, lmps.lambda_mb):
            print(f"  lambda_MB at boundary {b}: {g6(lam)}")
        rows = [[r["bus"], r["lmp"]] for r in lmps.rows()]
        _write_csv(args.report_out, ["bus", "lmp"], rows)
    _write_trace(args, trace)
    return 0 if trace.converged else 1


def cmd_ed(args) -> int:
    case = _load(args.case)
    v = _variant(args.variant)
    sol, _, trace = run_tdced(case, v, _cfg(args, v))
    return _qp_report(case, sol, trace, build_tdced(case), args, True)


def cmd_opf(args) -> int:
    case = _load(args.case)
    v = _variant(args.variant)
    sol, _, trace = run_tdopf_dc(case, v, _cfg(args, v))
    rc = _qp_report(case, sol, trace, build_tdopf_dc(case), args, True)
    l_bs = np.abs(sol.y.l).max(initial=0.0)
    print(f"max |l_BS| {g6(l_bs)}")
    return rc


def cmd_se(args) -> int:
    case = _load(args.case)
    v = _variant(args.variant)
    sol, trace = run_tdse(case, v, _cfg(args, v))
    print(_trace_summary(trace))
    print(f"objective {g6(sol.objective)}  global KKT residual {g6(trace.global_kkt_residual)}")
    worst = max(weighted_residuals(case, sol.estimate), key=lambda t: abs(t[1]))
    print(f"largest weighted residual: measurement {worst[0]} ({g6(worst[1])})")
    _write_trace(args, trace)
    _write_csv(args.report_out, ["bus", "angle"], [[b, sol.estimate[b]] for b in sorted(sol.estimate)])
    return 0 if trace.converged else 1


def cmd_diag(args) -> int:
    case = _load(args.case)
    builders = {"pf": build_tdpf, "ed": build_tdced, "opf": build_tdopf_dc, "se": build_tdse}
    runners = {"pf": lambda c, cfg: run_tdpf(c, Variant.BASIC, cfg),
               "ed": lambda c, cfg: run_tdced(c, Variant.BASIC, cfg)[::2],
               "opf": lambda c, cfg: run_tdopf_dc(c, Variant.BASIC, cfg)[::2],
               "se": lambda c, cfg: run_tdse(c, Variant.BASIC, cfg)}
    cfg = _cfg(args, Variant.BASIC)
    _, trace = runners[args.app](case, cfg)
    diag = composite_map_spectral_radius(builders[args.app](case), trace.final_state)
    try:
        rate = g6(estimate_rate(trace))
    except InsufficientDataError as exc:
        rate = f"n/a ({exc})"
    print(_trace_summary(trace))
    print(f"spectral radius {g6(diag.rho)}  empirical rate {rate}"
          + ("" if diag.reliable else "  (active set changed while probing)"))
    _write_trace(args, trace)
    return 0 if trace.converged else 1


def cmd_serve_tso(args) -> int:
    if not args.listen:
        raise UsageError("serve-tso needs --listen HOST:PORT")
    case = _load(args.case)
    sol, trace = serve_tso(case, args.app, args.listen, _cfg(args), args.timeout)
    print(_trace_summary(trace))
    print(f"messages exchanged: {trace.messages}")
    _write_trace(args, trace)
    return 0 if trace.converged else 1


def cmd_serve_dso(args) -> int:
    if not args.connect or args.dso_index is None:
        raise UsageError("serve-dso needs --connect HOST:PORT and --dso-index N")
    case = _load(args.case)
    agent = serve_dso(case, args.app, args.dso_index, args.connect, args.response or "equivalent",
                      args.timeout)
    print(f"DSO {args.dso_index}: answered {agent.rounds} rounds")
    return 0


COMMANDS = {
    "validate": cmd_validate, "pf": cmd_pf, "ca": cmd_ca, "vsa": cmd_vsa, "ed": cmd_ed, "opf": cmd_opf,
    "se": cmd_se, "diag": cmd_diag, "serve-tso": cmd_serve_tso, "serve-dso": cmd_serve_dso,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tdcoord", description="Transmission-distribution coordination")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--case", required=True, help="case file (or bundled case name)")
        p.add_argument("--variant", choices=VARIANTS, help="default basic (modified-dist for vsa)")
        p.add_argument("--eps", type=float, default=1e-6)
        p.add_argument("--max-iter", type=int, default=50)
        p.add_argument("--trace-out")
        p.add_argument("--report-out")
        p.add_argument("--response", choices=("equivalent", "sensitivity"),
                       help="distribution-response provider for power flow (default equivalent; "
                            "sensitivity for vsa)")
        if name in ("diag", "serve-tso", "serve-dso"):
            p.add_argument("--app", choices=APPS, default="pf")
        if name == "vsa":
            p.add_argument("--step0", type=float, default=0.5)
            p.add_argument("--min-step", type=float, default=1 / 64)
        if name.startswith("serve"):
            p.add_argument("--listen")
            p.add_argument("--connect")
            p.add_argument("--dso-index", type=int)
            p.add_argument("--timeout", type=float, default=30.0)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        if args.eps <= 0 or args.max_iter < 1:
            raise UsageError("--eps must be positive and --max-iter at least 1")
        return COMMANDS[args.command](args)
    except (UsageError, CaseError, DispatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SubproblemError, SolverError, CoordTimeoutError, RuntimeProtocolError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
