"""Command-line driver.

Exit codes: 0 ok, 2 usage error, 3 numerical failure, 4 certificate violation.
Errors are reported as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .controller import PolynomialController
from .exceptions import HJManifoldError, UsageError
from .pipeline import Pipeline, RunConfig

OUT_ENV = "HJMANIFOLD_OUT"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("problem", nargs="?", default=None, help="registry problem (default exp2d)")
    common.add_argument("--config", help="JSON file with run parameters")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-k", "--k", type=int, dest="k")
    common.add_argument("--xi-count", type=int, dest="xi_count")
    common.add_argument("--radius", type=float)
    common.add_argument("--xi", type=float, nargs="+", action="append",
                        help="explicit xi; a single 0 means the origin in any dimension")
    common.add_argument("--sphere", choices=("random", "equispaced"))
    common.add_argument("--h", type=float, dest="h")
    common.add_argument("--fine-h", type=float, dest="fine_h")
    common.add_argument("--delta", type=float)
    common.add_argument("--t-min", type=float, dest="t_min")
    common.add_argument("--domain-t-min", type=float, dest="domain_t_min")
    common.add_argument("--comparator-delta", type=float, dest="comparator_delta")
    common.add_argument("--rk45-tol", type=float, dest="rk45_tol")
    common.add_argument("--k-neg", type=int, dest="k_neg")
    common.add_argument("--t-neg", type=float, dest="t_neg")
    common.add_argument("--degree", type=int)
    common.add_argument("--per-curve", type=int, dest="per_curve")
    common.add_argument("--no-constrain-origin", action="store_const", const=False, dest="constrain_origin")
    common.add_argument("--t-final", type=float, dest="t_final")

    parser = argparse.ArgumentParser(prog="hjmanifold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="linear analysis and certificate report")
    sub.add_parser("local", parents=[common], help="local manifold curves")
    sub.add_parser("extend", parents=[common], help="backward extension and projection domain")
    sub.add_parser("compare", parents=[common], help="SV vs RK45 vs negative-time iteration")
    sub.add_parser("fit", parents=[common], help="polynomial costate fit")
    sim = sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    sim.add_argument("--controller", help="controller JSON from `fit` (fitted on the fly if omitted)")
    sim.add_argument("--x0", type=float, nargs="+", action="append")
    sub.add_parser("repro", parents=[common], help="run every stage with the example settings")
    return parser


_CONFIG_KEYS = ("seed", "threads", "k", "xi_count", "radius", "sphere", "h", "fine_h", "delta", "t_min",
                "domain_t_min", "comparator_delta", "rk45_tol", "k_neg", "t_neg", "degree", "per_curve",
                "constrain_origin", "t_final")


def _config(args) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    overrides["problem"] = args.problem
    if args.xi:
        xi = [list(v) for v in args.xi]
        if len(xi) == 1 and xi[0] == [0.0]:
            xi = None
            overrides["radius"] = 0.0
            overrides["xi_count"] = overrides.get("xi_count") or 1
        overrides["xi"] = xi
    if getattr(args, "x0", None):
        overrides["x0"] = [list(v) for v in args.x0]
    return RunConfig.from_sources(args.config, **overrides)


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "out")


# -- commands -----------------------------------------------------------------


def cmd_analyze(pipe: Pipeline, out: Path) -> dict:
    report = pipe.analyze()
    io.write_json(out / "analyze.json", report)
    cert = report.get("certificate", {})
    return {"P": report["transform"]["P"], "eig_B": report["transform"]["eig_B"],
            **{k: cert[k] for k in ("rho", "alpha", "beta", "contraction", "C_x", "C_y") if k in cert}}


def cmd_local(pipe: Pipeline, out: Path) -> dict:
    local = pipe.local
    files = []
    for i, c in enumerate(local.curves):
        name = f"curve_{i:04d}.csv"
        io.write_local_curve(out / "local" / name, c)
        files.append(name)
    manifest = {"k": local.k, "curves": files, "seed": pipe.config.seed,
                "certificate": None if local.certificate is None else local.certificate.to_dict()}
    io.write_json(out / "local" / "manifest.json", manifest)
    return {"curves": len(files), "max_abs_H": float(max(np.max(np.abs(c.H)) for c in local.curves))}


def cmd_extend(pipe: Pipeline, out: Path) -> dict:
    from .extension import project_domain

    manifold = pipe.extended
    io.write_manifold(out / "extend" / "curves", manifold)
    summary = {"curves": len(manifold.curves), "t_min": [c.t_min for c in manifold.curves]}
    if pipe.problem.d == 2:
        dom = project_domain(manifold)
        io.write_domain(out / "extend" / "domain.csv", dom)
        io.domain_svg(out / "extend" / "domain.svg", [dom], ["sv"], "projection domain")
        summary["area"] = dom.area
    io.write_json(out / "extend" / "summary.json", summary)
    return {"curves": summary["curves"], "area": summary.get("area")}


def cmd_compare(pipe: Pipeline, out: Path) -> dict:
    d = pipe.problem.d
    fig1 = pipe.fig1()
    plot = io.SvgPlot(title="|H| along the extended curve", xlabel="t", ylabel="log10 |H|")
    for name, (t, x, p, H) in fig1["series"].items():
        io.write_csv(out / "compare" / f"fig1_{name}.csv", io.state_header(d), np.column_stack([t, x, p, H]))
        with np.errstate(divide="ignore", invalid="ignore"):
            plot.line(t, np.log10(np.abs(H)), label=name)
    plot.save(out / "compare" / "fig1.svg")
    result = {"fig1": fig1["summary"]}
    if d == 2:
        doms = pipe.domains()
        for name, dom in doms["domains"].items():
            io.write_domain(out / "compare" / f"domain_{name}.csv", dom)
        io.domain_svg(out / "compare" / "fig2.svg", list(doms["domains"].values()), list(doms["domains"]))
        result["fig2"] = {
            name: {"area": dom.area, "alpha": dom.alpha, "n_points": dom.n_points,
                   "delta": doms["manifolds"][name].delta,
                   "t_min": [c.t_min for c in doms["manifolds"][name].curves]}
            for name, dom in doms["domains"].items()
        }
    io.write_json(out / "compare" / "compare.json", result)
    summary = dict(fig1["summary"])
    if "fig2" in result:
        summary["areas"] = {k: v["area"] for k, v in result["fig2"].items()}
    return summary


def cmd_fit(pipe: Pipeline, out: Path) -> dict:
    ctrl = pipe.controller
    s = pipe.samples
    dd = pipe.problem.d
    io.write_csv(out / "fit" / "samples.csv", ["curve", "t"] + [f"x{i + 1}" for i in range(dd)]
                 + [f"p{i + 1}" for i in range(dd)] + ["H"], np.column_stack([s.curve, s.t, s.x, s.p, s.H]))
    io.write_json(out / "fit" / "controller.json", ctrl.to_dict())
    return {"samples": len(s), "rms_residual": ctrl.rms_residual, "max_residual": ctrl.max_residual}


def cmd_simulate(pipe: Pipeline, out: Path, controller_path=None) -> dict:
    ctrl = None
    if controller_path is not None:
        ctrl = PolynomialController.from_dict(io.read_json(controller_path))
    results = pipe.simulate(ctrl)
    plot = io.SvgPlot(title="closed-loop trajectories", xlabel="x1", ylabel="x2")
    summary = []
    for i, (x0, res) in enumerate(zip(pipe.config.x0, results)):
        io.write_closed_loop(out / "simulate" / f"closed_loop_{i}.csv", res)
        plot.line(res.x[:, 0], res.x[:, 1] if res.x.shape[1] > 1 else res.t, label=f"x0={x0}")
        summary.append({"x0": x0, "status": res.status, "final_norm": res.final_norm,
                        "settles_below_0.05": res.settles_below(0.05)})
    plot.save(out / "simulate" / "fig3.svg")
    io.write_json(out / "simulate" / "simulate.json", {"runs": summary})
    return {"runs": summary}


def _file_digests(out: Path) -> dict:
    top = out / "manifest.json"
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p != top}


def cmd_repro(pipe: Pipeline, out: Path) -> dict:
    stages = (("analyze", cmd_analyze), ("local", cmd_local), ("extend", cmd_extend),
              ("compare", cmd_compare), ("fit", cmd_fit), ("simulate", cmd_simulate))
    summary, timings = {}, {}
    for name, cmd in stages:
        start = time.perf_counter()
        summary[name] = cmd(pipe, out)
        timings[name] = time.perf_counter() - start
    # wall-clock times go to stdout only, never into the artifacts
    summary["timings"] = timings
    manifest = {"config": pipe.config.to_dict(), "seed": pipe.config.seed, "files": _file_digests(out)}
    io.write_json(out / "manifest.json", manifest)
    return summary


COMMANDS = {"analyze": cmd_analyze, "local": cmd_local, "extend": cmd_extend, "compare": cmd_compare,
            "fit": cmd_fit, "repro": cmd_repro}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        config = _config(args)
        pipe = Pipeline(config)
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            summary = cmd_simulate(pipe, out, args.controller)
        else:
            summary = COMMANDS[args.command](pipe, out)
    except HJManifoldError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    print(json.dumps(io._jsonable(summary), sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
