"""Command-line interface.

Subcommands ``eval``, ``norms``, ``sweep``, ``ball``, ``solve``,
``figure`` and ``verify``; see ``cdgreen <command> --help``.

Exit codes: 0 success (and all verdicts consistent), 1 some verdict
inconsistent, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (
    CDGreenError,
    CoefficientEvaluationError,
    ConfigurationError,
    CutoffDomainError,
    MeshBudgetError,
)
from .fdsolver import Strategy, Which, build_mesh, discrete_norms, solve_green
from .fundamental import eval_jet, hat_coords
from .parametrix import Variant, Want, eval_parametrix
from .quadrature import norm_suite
from .studies import (
    StudyConfig,
    ball_study,
    figure_export,
    judge,
    sweep,
    transverse_scaling,
    verify,
)

EXIT_OK, EXIT_INCONSISTENT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

_CONFIG_ERRORS = (ConfigurationError, MeshBudgetError, CoefficientEvaluationError, CutoffDomainError)


def _point(text):
    try:
        p = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x1,x2,x3, got {text!r}") from None
    if len(p) != 3:
        raise argparse.ArgumentTypeError(f"expected three coordinates, got {text!r}")
    return p


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _config(args) -> StudyConfig:
    overrides = {"out_dir": args.out, "threads": args.threads, "tol": args.tol}
    if args.no_timing:
        overrides["timing"] = False
    if args.config:
        return StudyConfig.from_file(args.config, **overrides)
    return StudyConfig(**{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_eval(args, cfg):
    eps = args.eps if args.eps is not None else cfg.eps_list[0]
    x = np.asarray(args.x or cfg.x[0])
    xi = np.asarray(args.xi)
    spec = cfg.problem(eps)
    if args.variant == "kernel":
        q = float(spec.q_at(x))
        j = eval_jet(hat_coords(x, xi, eps), q, eps)
        _print_json({"kind": "fundamental", "eps": eps, "q": q, "x": x, "xi": xi,
                     **{k: float(v) for k, v in vars(j).items()}})
        return EXIT_OK
    r = eval_parametrix(x, xi, spec, Variant(args.variant), Want.ALL)
    _print_json({"kind": "parametrix", "variant": args.variant, "eps": eps, "x": x, "xi": xi, "value": r.value,
                 "d_xi": r.d_xi, "d2_xi": r.d2_xi, "d_x": r.d_x})
    return EXIT_OK


def cmd_norms(args, cfg):
    eps = args.eps if args.eps is not None else cfg.eps_list[0]
    x = np.asarray(args.x or cfg.x[0])
    rhos = sorted({rs.resolve(eps) for rs in cfg.rho_list})
    timer = None if cfg.timing else (lambda: 0.0)
    rep = norm_suite(x, cfg.problem(eps), Variant(cfg.variant), rhos, cfg.tol, timer=timer)
    print("quantity,eps,rho,value,error_est,cells,wall_ms")
    for row in rep.rows():
        print(",".join("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)) for v in row))
    return EXIT_OK if all(rep.ok(*key) for key in rep.entries) else EXIT_NUMERICAL


def cmd_sweep(args, cfg):
    res = sweep(cfg)
    for q, f in res.fits.items():
        print(f"{q:16s} {f.model.value:14s} R2={f.r2:.4f} band={f.band:.3f} leading={f.leading:.4g} -> {judge(f)}")
    for p in res.files:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_ball(args, cfg):
    res = ball_study(cfg, args.eps, args.x)
    b = res.breakpoint_fit
    if b is not None:
        print(f"eps={res.eps:g} breakpoint={b.breakpoint:.4g} (= {b.breakpoint / res.eps:.3g} eps) "
              f"c_linear={b.c_linear:.4g} c_sqrt={b.c_sqrt:.4g} R2={b.r2:.4f}")
    for p in res.files:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_solve(args, cfg):
    eps = args.eps if args.eps is not None else cfg.fd_eps_list[0]
    source = np.asarray(args.x or cfg.x[0])
    spec = cfg.problem(eps)
    which = Which(args.which)
    mesh = build_mesh(spec, source, args.n or cfg.mesh_n, Strategy(args.mesh), which)
    gf = solve_green(spec, mesh, source, which)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"fd_{which.value}_eps{eps:g}"
    gf.export_vtk(f"{stem}.vtk")
    gf.save(f"{stem}.bin")
    rep = discrete_norms(gf, [rs.resolve(eps) for rs in cfg.rho_list])
    _print_json({"eps": eps, "which": which.value, "shape": mesh.shape, "solver": gf.solver,
                 "iterations": gf.iterations, "residual": gf.residual, "min_value": gf.min_value(),
                 "norms": {f"{q}" if rho is None else f"{q}@{rho:g}": r.value for (q, rho), r in rep.entries.items()},
                 "files": [f"{stem}.vtk", f"{stem}.bin"]})
    return EXIT_OK


def cmd_figure(args, cfg):
    if args.field:
        cfg = replace(cfg, figure_field=args.field)
    res = figure_export(cfg, args.eps, args.x)
    for b in res.boxes:
        if b["empty"]:
            print(f"level {b['level']:g}: empty")
        else:
            print(f"level {b['level']:>5g}: downstream={b['downstream']:.4f} upstream={b['upstream']:.4f} "
                  f"transverse={b['transverse2']:.4f}")
    if args.scaling:
        _print_json(transverse_scaling(cfg))
    for p in res.files:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_verify(args, cfg):
    res = verify(cfg, reuse=not args.fresh, run_fd=not args.no_fd)
    width = max((len(r.display) for r in res.rows), default=10)
    for r in res.rows:
        r2 = "" if r.r2 is None else f"R2={r.r2:.4f}"
        print(f"{r.display:{width}s}  {r.model:32s} {r2:11s} {r.verdict}")
    for p in res.files:
        print(f"wrote {p}")
    return res.exit_code


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdgreen", description="Green's function studies for 3-D convection-diffusion.")
    p.add_argument("--config", help="study config file (key = value)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--threads", type=int, help="worker processes for independent (eps, x) tasks")
    p.add_argument("--tol", type=float, help="relative quadrature tolerance")
    p.add_argument("--no-timing", action="store_true", help="record wall_ms = 0 so tables are reproducible")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", help="evaluate the kernel or a parametrix at one point")
    e.add_argument("--xi", type=_point, required=True)
    e.add_argument("--x", type=_point)
    e.add_argument("--eps", type=float)
    e.add_argument("--variant", default="bar_cube", choices=["kernel"] + [v.value for v in Variant])
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("norms", help="one norm suite")
    n.add_argument("--x", type=_point)
    n.add_argument("--eps", type=float)
    n.set_defaults(func=cmd_norms)

    s = sub.add_parser("sweep", help="norm sweep over eps_list and x with scaling fits")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("ball", help="ball-radius study at fixed eps")
    b.add_argument("--x", type=_point)
    b.add_argument("--eps", type=float)
    b.set_defaults(func=cmd_ball)

    d = sub.add_parser("solve", help="finite-difference Green's function")
    d.add_argument("--x", type=_point, help="source point")
    d.add_argument("--eps", type=float)
    d.add_argument("--n", type=int, help="intervals per axis")
    d.add_argument("--which", default="adjoint", choices=[w.value for w in Which])
    d.add_argument("--mesh", default="layer", choices=[m.value for m in Strategy])
    d.set_defaults(func=cmd_solve)

    f = sub.add_parser("figure", help="export the field near the source and its level-set boxes")
    f.add_argument("--x", type=_point)
    f.add_argument("--eps", type=float)
    f.add_argument("--field", choices=["parametrix", "fd"])
    f.add_argument("--scaling", action="store_true", help="also measure transverse widths over figure_eps_list")
    f.set_defaults(func=cmd_figure)

    v = sub.add_parser("verify", help="verdict table (runs missing studies)")
    v.add_argument("--fresh", action="store_true", help="ignore tables already in the output directory")
    v.add_argument("--no-fd", action="store_true", help="skip the finite-difference cross-check")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CDGreenError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
