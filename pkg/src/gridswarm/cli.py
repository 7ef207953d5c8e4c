"""Command-line entry point: ``gridswarm run|validate|sweep|infer-demo``.

Errors exit non-zero and print one machine-readable line on stderr::

    gridswarm: error: {"type": "ParseError", "message": "..."}
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, analysis, powerflow
from .errors import GridSwarmError, NotConverged, ParseError
from .scenario import MODE_ALIASES, load_scenario, parse_feeder, resolve

log = logging.getLogger("gridswarm")


def _range(text):
    try:
        a, b, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected start:stop:step") from exc
    if step <= 0 or b < a:
        raise argparse.ArgumentTypeError("need start <= stop and step > 0")
    n = int(np.floor((b - a) / step + 1e-9)) + 1
    return [round(a + k * step, 12) for k in range(n)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridswarm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write timeseries.csv + summary.json")
    r.add_argument("scenario")
    r.add_argument("--out", default=None, help="output directory (default: print summary only)")
    r.add_argument("--mode", choices=["none", "q", "qp"], default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--duration", type=float, default=None)
    r.add_argument("--trace", action="store_true", help="also write messages.ndjson")
    r.add_argument("--debug", action="store_true", help="assert message timing honesty")

    v = sub.add_parser("validate", help="parse a feeder and print power-flow residuals")
    v.add_argument("feeder")

    s = sub.add_parser("sweep", help="open-loop voltage extremes versus DER penetration")
    s.add_argument("scenario")
    s.add_argument("--penetration", type=_range, default=_range("0:1.5:0.1"),
                   help="start:stop:step as a fraction of total load (default 0:1.5:0.1)")

    d = sub.add_parser("infer-demo", help="compare inferred and true voltages")
    d.add_argument("scenario")
    d.add_argument("--reading", choices=["difference", "verbatim", "l_increment"], default=None)
    return p


def cmd_run(args, out):
    from .engine import run

    cfg = load_scenario(args.scenario)
    changes = {}
    if args.mode is not None:
        changes["control_mode"] = MODE_ALIASES[args.mode]
    for key in ("seed", "workers", "duration"):
        val = getattr(args, key)
        if val is not None:
            changes[key] = val
    if changes:
        cfg = cfg.replace(**changes)
    out_dir = args.out or cfg.outputs.get("dir")
    result = run(cfg, debug=args.debug, trace=args.trace, out_dir=out_dir)
    report = analysis.steady_state_report(result)
    out.write(json.dumps(report, sort_keys=True, default=float) + "\n")
    return 0


def cmd_validate(args, out):
    path = resolve(args.feeder)
    feeder = parse_feeder(path)
    net = feeder.network
    p, q = feeder.injections(0.0)
    sol = powerflow.solve(net, p, q)
    res = powerflow.residuals(net, sol)
    out.write(f"feeder {feeder.name or path.name}: {net.n} buses, {net.n - 1} lines, "
              f"{len(feeder.ders)} DERs, {len(feeder.loads)} loads, {len(feeder.meters)} meters\n")
    out.write(f"power flow: converged={sol.converged} iterations={sol.iterations}\n")
    out.write(f"{'equation':<28}{'max |residual|':>16}\n")
    names = {"a": "real power balance", "b": "reactive power balance",
             "c": "voltage drop", "d": "current definition"}
    for key in sorted(res):
        out.write(f"{names.get(key, key):<28}{np.abs(res[key]).max():>16.3e}\n")
    out.write(f"v_min {sol.v.min():.6f}  v_max {sol.v.max():.6f}  losses {sol.p_loss.sum():.6g}\n")
    k = net.n - 1
    i = int(net.parent[k]) if k > 0 else 0
    out.write("spot checks (common-path sums):\n")
    for a, b in ((k, k), (k, i), (i, k)):
        out.write(f"  R[{a},{b}] = {net.common_path(a, b, 'r'):.6g}  "
                  f"X[{a},{b}] = {net.common_path(a, b, 'x'):.6g}\n")
    return 0 if sol.converged and sol.max_residual < powerflow.DEFAULT_TOL else 1


def cmd_sweep(args, out):
    cfg = load_scenario(args.scenario)
    rows = analysis.penetration_sweep(cfg, args.penetration)
    out.write(f"{'penetration':>12}{'v_max':>10}{'v_min':>10}{'xi':>10}\n")
    for r in rows:
        out.write(f"{r.penetration:>12.3f}{r.v_max:>10.5f}{r.v_min:>10.5f}{r.xi:>10.5f}\n")
    k = analysis.knee(rows)
    out.write(f"knee: {'none' if k is None else f'{k:.3f}'}\n")
    return 0


def cmd_infer_demo(args, out):
    cfg = load_scenario(args.scenario)
    rows, inf = analysis.inference_demo(cfg, reading=args.reading)
    out.write(f"{'bus':>5}{'anchors':>12}{'true':>10}{'inferred':>10}{'err %':>8}\n")
    for j, vt, ve, err in rows:
        i, l = inf.anchors[j]
        out.write(f"{j:>5}{f'{i},{l}':>12}{vt:>10.5f}{ve:>10.5f}{100 * err:>8.3f}\n")
    worst = max((r[3] for r in rows), default=0.0)
    out.write(f"max error {100 * worst:.3f}% over {len(rows)} buses (reading: {inf.reading})\n")
    return 0


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "sweep": cmd_sweep,
            "infer-demo": cmd_infer_demo}


def main(argv=None, out=None) -> int:
    level = os.environ.get("GRIDSWARM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except (GridSwarmError, FileNotFoundError, ValueError) as exc:
        info = {"type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, NotConverged) and exc.step is not None:
            info["step"] = exc.step
        if isinstance(exc, ParseError) and exc.line is not None:
            info["line"], info["column"] = exc.line, exc.column
        sys.stderr.write("gridswarm: error: " + json.dumps(info) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
