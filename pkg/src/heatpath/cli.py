"""Command-line entry point: ``heatpath <subcommand> ...``.

Every run prints (or writes to ``--output``) one JSON report carrying
``schema: 1`` and the fully resolved configuration.  Exit status is 0 on
success, 1 when the run's verdict failed and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import dirlim, presets
from .bundles import parse_bundle
from .errors import HeatPathError
from .geometry import Sphere, parse_manifold
from .kernels import (
    default_profile,
    duhamel_residual,
    galerkin_semigroup_kernel,
    heat_bound_check,
    heat_related_check,
    hsu_constant,
    make_kernel,
    spectral_heat_kernel,
)
from .pathint import path_integral_limit

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# small parsers and registries
# ---------------------------------------------------------------------------

def _parse_point(text):
    text = text.strip()
    if text.startswith("["):
        vals = json.loads(text)
    else:
        vals = [float(v) for v in text.split(",")]
    return np.atleast_1d(np.asarray(vals, float))


def _parse_range(text):
    lo, hi = (int(v) for v in text.split(":"))
    if hi < lo:
        raise ValueError("empty refinement range")
    return list(range(lo, hi + 1))


def _resolve_threads(flag):
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("HEATPATH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _power(alpha):
    return lambda x: (np.abs(x) + 1.0) ** alpha


FUNCTIONS = {
    "one": lambda x: np.ones_like(np.asarray(x, float)),
    "cos": np.cos,
    "one_over_x": lambda x: 1.0 / x,
    "one_over_x_plus_x2": lambda x: 1.0 / x + x**2,
    "one_over_x2": lambda x: 1.0 / x**2,
    "gaussian": lambda y: np.exp(-np.asarray(y) ** 2 / 2),
    "inv_one_plus_abs": lambda y: 1.0 / (1.0 + np.abs(y)),
    "indicator": lambda y: (np.abs(y) <= 1.0).astype(float),
}


def _function(name):
    if name.startswith("power:"):
        return _power(float(name.split(":", 1)[1]))
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown function {name!r}; choose from {sorted(FUNCTIONS)} or power:<alpha>") from None


def _eigenvalues(name):
    if name == "inverse-squares":
        return lambda n: 1.0 / np.arange(1, n + 1) ** 2
    if name == "zero":
        return lambda n: np.zeros(n)
    if name.startswith("list:"):
        vals = np.array([float(v) for v in name[5:].split(",")])
        return lambda n: vals[:n]
    raise ValueError(f"unknown eigenvalue family {name!r}")


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        if obj.imag == 0:
            return _clean(float(obj.real))
        return {"re": _clean(float(obj.real)), "im": _clean(float(obj.imag))}
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def load_schema():
    text = resources.files("heatpath").joinpath("schema/report.schema.json").read_text()
    return json.loads(text)


def validate_report(report):
    jsonschema.validate(report, load_schema())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_renint(a, cfg):
    mode = a.mode
    defaults = {
        "window-average": "geometric:1:2",
        "principal-value": "geometric:0.5:0.5",
        "determinant": "geometric:625:2",
        "fourier": "geometric:1:2",
    }
    sched_text = a.schedule or defaults[mode]
    max_steps = a.max_steps or (5 if mode == "determinant" else 64)
    sched = dirlim.RefinementSchedule.parse(sched_text, max_steps)
    cfg.options.update(mode=mode, schedule=sched_text, max_steps=max_steps, tol=a.tol,
                       divergence_threshold=a.divergence_threshold)
    if mode == "window-average":
        f = _function(a.f or "one")
        cfg.options["f"] = a.f or "one"
        res = dirlim.window_average_integral(f, sched, a.tol, workers=cfg.options["threads"],
                                             divergence_threshold=a.divergence_threshold)
    elif mode == "principal-value":
        f = _function(a.f or "one_over_x")
        cfg.options["f"] = a.f or "one_over_x"
        res = dirlim.principal_value(f, sched, a.tol, workers=cfg.options["threads"],
                                     divergence_threshold=a.divergence_threshold)
    elif mode == "determinant":
        eig = _eigenvalues(a.eigs)
        cfg.options["eigs"] = a.eigs
        ints = dirlim.RefinementSchedule(tuple(int(round(v)) for v in sched.indices), sched.direction)
        res = dirlim.determinant_limit(eig, ints, a.tol, workers=cfg.options["threads"])
    else:
        f = _function(a.f or "gaussian")
        lo, hi, n = a.xs.split(":")
        xs = np.linspace(float(lo), float(hi), int(n))
        cfg.options.update(f=a.f or "gaussian", xs=a.xs)
        res = dirlim.fourier_limit(f, sched, xs, tol=a.tol, workers=cfg.options["threads"])
    body = res.to_dict()
    extrapolated_ok = res.extrapolation_error is not None and res.extrapolation_error <= a.tol
    ok = res.converged or extrapolated_ok or res.divergence_flag in ("+infinity", "-infinity")
    report = {"mode": mode, "schedule": sched_text, **body,
              "extrapolation_error": res.extrapolation_error,
              "classification": dirlim.limit_verdict(res) if np.size(res.limit) == 1 else None,
              "verdict": "pass" if ok else "fail"}
    return report, None


def _pairs(M, N, max_pairs, seed):
    g = M.quadrature_grid(N).nodes
    xs = np.repeat(g, len(g), axis=0)
    ys = np.tile(g, (len(g), 1))
    if max_pairs and len(xs) > max_pairs:
        idx = np.sort(np.random.default_rng(seed).choice(len(xs), max_pairs, replace=False))
        xs, ys = xs[idx], ys[idx]
    return xs, ys


def cmd_check(a, cfg):
    M = parse_manifold(a.manifold)
    B = parse_bundle(a.bundle, M)
    tg = np.geomspace(a.t_max, a.t_min, a.t_count)
    cfg.options.update(mode=a.mode, manifold=M.spec, bundle=B.spec, kernel=a.kernel, kernel2=a.kernel2,
                       t_grid=tg.tolist(), grid=a.grid, pairs=a.pairs)
    if a.mode == "hsu":
        c, per_t = hsu_constant(M, tg, a.pairs, cfg.seed)
        rows = [{"t": float(t), "min_ratio": v} for t, v in zip(tg, per_t)]
        return {"mode": "hsu", "constant": c, "rows": rows, "verdict": "pass" if c > 0 else "fail"}, None
    q = make_kernel(a.kernel, B, shift=a.shift)
    if a.mode == "duhamel":
        x = _parse_point(a.x)
        ys = np.atleast_2d(np.asarray(json.loads(a.ys), float)) if a.ys else \
            M.quadrature_grid(a.grid).nodes
        ys = ys.reshape(-1, M.chart_dim)
        if q.support is not None:
            ys = ys[M.distance(x, ys) < default_profile(M).eta]
        pot = B.potential if not B.potential.is_zero else None
        rows = []
        for t in tg:
            ratio, mx = duhamel_residual(q, M, pot, float(t), x, ys)
            rows.append({"t": float(t), "max_ratio": mx, "ratios": ratio.tolist()})
        slope = float(np.polyfit(np.log(tg), np.log([r["max_ratio"] for r in rows]), 1)[0]) if len(tg) > 1 else None
        return {"mode": "duhamel", "rows": rows, "t_slope": slope, "verdict": "pass"}, None
    xs, ys = _pairs(M, a.grid, a.pairs, cfg.seed)
    if a.mode == "heat-bound":
        rep = heat_bound_check(q, M, tg, xs, ys, tuple(a.B))
    else:
        q2 = make_kernel(a.kernel2, B, shift=a.shift)
        rep = heat_related_check(q, q2, M, tg, xs, ys, tuple(a.B))
    return {"mode": a.mode, **rep.to_dict()}, None


def _default_shift(kernel, B):
    M = B.manifold
    v = B.potential.constant
    if B.rank != 1 or v is None:
        return None
    c = float(np.real(v[0, 0]))
    if kernel == "gauss":
        c += M.scalar_curvature() / 3.0
    return c


def cmd_heat_kernel(a, cfg):
    M = parse_manifold(a.manifold)
    B = parse_bundle(a.bundle, M)
    x, y = M.point(_parse_point(a.x)), M.point(_parse_point(a.y))
    ladder = _parse_range(a.refinements)
    cfg.options.update(manifold=M.spec, bundle=B.spec, kernel=a.kernel, t=a.t, x=x.tolist(), y=y.tolist(),
                       refinements=a.refinements, grid=a.grid, mode=a.mode, samples=a.samples,
                       oracle=a.oracle, tol=a.tol)
    oracle = None
    if a.oracle == "spectral":
        shift = a.oracle_shift if a.oracle_shift is not None else _default_shift(a.kernel, B)
        if shift is None:
            raise ValueError("spectral oracle needs a line bundle with constant potential")
        cfg.options["oracle_shift"] = shift
        oracle = np.array([[float(spectral_heat_kernel(M, shift, a.t, y, x))]])
    elif a.oracle == "galerkin":
        oracle = galerkin_semigroup_kernel(B, a.t, y[None], x[None])[0]
    rep = path_integral_limit(a.kernel, B, a.t, x, y, ladder, N0=a.grid, oracle=oracle, tol=a.tol,
                              mode=a.mode, samples=a.samples, seed=cfg.seed)
    body = rep.to_dict()
    ok = rep.verdict == "converged" and (oracle is None or rep.terminal_relative_error <= a.tol)
    body["report_verdict"] = body.pop("verdict")
    body["experiment"] = body.pop("config")
    report = {**body, "verdict": "pass" if ok else "fail"}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mesh", "value", "oracle_error"])
    for row in rep.rows:
        w.writerow([row["mesh"], float(np.linalg.norm(row["value"], 2)),
                    "" if row["oracle_error"] is None else row["oracle_error"]])
    return report, buf.getvalue()


def cmd_oracle(a, cfg):
    M = parse_manifold(a.manifold)
    B = parse_bundle(a.bundle, M)
    x, y = M.point(_parse_point(a.x)), M.point(_parse_point(a.y))
    cfg.options.update(kind=a.kind, manifold=M.spec, bundle=B.spec, t=a.t, x=x.tolist(), y=y.tolist(),
                       shift=a.shift)
    if a.kind == "spectral":
        val, L = spectral_heat_kernel(M, a.shift, a.t, x, y, return_L=True)
        return {"kind": "spectral", "value": float(val), "modes": int(L), "verdict": "pass"}, None
    val, N = galerkin_semigroup_kernel(B, a.t, x[None], y[None], return_N=True)
    return {"kind": "galerkin", "value": _clean(val[0]), "modes": int(N), "verdict": "pass"}, None


def cmd_accept(a, cfg):
    chosen = presets.select(a.filter)
    cfg.options.update(filter=a.filter)
    if not chosen:
        raise LookupError(f"no preset matches {a.filter!r}")
    rows = []
    for p in chosen:
        r = p.run()
        print(f"{r.id:4s} {r.verdict.upper():4s} {r.headline}", file=sys.stderr)
        rows.append({"id": r.id, "verdict": r.verdict, "headline": r.headline, "description": p.description})
    ok = all(r["verdict"] == "pass" for r in rows)
    return {"rows": rows, "verdict": "pass" if ok else "fail"}, None


# ---------------------------------------------------------------------------
# parser and driver
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: HEATPATH_THREADS or all cores)")
    common.add_argument("--output", default=None, help="write the JSON report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--csv", default=None, help="also write a CSV of rows to this path")

    p = argparse.ArgumentParser(prog="heatpath", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("renint", parents=[common], help="renormalized integrals")
    r.add_argument("mode", choices=("window-average", "principal-value", "determinant", "fourier"))
    r.add_argument("--f", default=None, help="integrand name, or power:<alpha> for (|x|+1)^alpha")
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--max-steps", type=int, default=None)
    r.add_argument("--schedule", default=None, help="<geometric|linear>:<start>:<factor-or-step>")
    r.add_argument("--divergence-threshold", type=float, default=1e12,
                   help="magnitude past which a net is flagged as diverging")
    r.add_argument("--eigs", default="inverse-squares")
    r.add_argument("--xs", default="-3:3:61", help="frequency grid lo:hi:n")

    c = sub.add_parser("check", parents=[common], help="kernel bound and residual checks")
    c.add_argument("mode", choices=("heat-bound", "heat-related", "duhamel", "hsu"))
    c.add_argument("--manifold", default="s1:1")
    c.add_argument("--bundle", default="line")
    c.add_argument("--kernel", choices=("gauss", "k1", "k2", "k3", "k4", "spectral"), default="k4")
    c.add_argument("--kernel2", choices=("gauss", "k1", "k2", "k3", "k4", "spectral"), default="k3")
    c.add_argument("--shift", type=float, default=0.0)
    c.add_argument("--t-min", type=float, default=2.0**-8)
    c.add_argument("--t-max", type=float, default=0.5)
    c.add_argument("--t-count", type=int, default=8)
    c.add_argument("--grid", type=int, default=32)
    c.add_argument("--pairs", type=int, default=1000)
    c.add_argument("--B", type=float, nargs="+", default=[1.0, 2.0])
    c.add_argument("--x", default="0")
    c.add_argument("--ys", default=None, help="JSON list of y points for duhamel")

    h = sub.add_parser("heat-kernel", parents=[common], help="path-integral heat kernel convergence run")
    h.add_argument("--manifold", default="s1:1")
    h.add_argument("--bundle", default="line")
    h.add_argument("--kernel", choices=("k1", "k2", "k3", "k4", "gauss", "theorem"), default="k4")
    h.add_argument("--t", type=float, default=0.5)
    h.add_argument("--x", default="0")
    h.add_argument("--y", default="1")
    h.add_argument("--refinements", default="1:6")
    h.add_argument("--grid", type=int, default=64)
    h.add_argument("--mode", choices=("chain", "mc"), default="chain")
    h.add_argument("--samples", type=int, default=100_000)
    h.add_argument("--oracle", choices=("spectral", "galerkin", "none"), default="none")
    h.add_argument("--oracle-shift", type=float, default=None)
    h.add_argument("--tol", type=float, default=1e-3)

    o = sub.add_parser("oracle", parents=[common], help="exact kernel values")
    o.add_argument("kind", choices=("spectral", "galerkin"))
    o.add_argument("--manifold", default="s1:1")
    o.add_argument("--bundle", default="line")
    o.add_argument("--t", type=float, required=True)
    o.add_argument("--x", default="0")
    o.add_argument("--y", default="0")
    o.add_argument("--shift", type=float, default=0.0)

    a = sub.add_parser("accept", parents=[common], help="run the acceptance manifest")
    a.add_argument("--filter", default="A*", help="glob over preset ids")
    return p


COMMANDS = {
    "renint": cmd_renint,
    "check": cmd_check,
    "heat-kernel": cmd_heat_kernel,
    "oracle": cmd_oracle,
    "accept": cmd_accept,
}


def run(config: presets.RunConfig, args) -> int:
    """Execute one configured run; returns the process exit status."""
    try:
        report, table = COMMANDS[config.command](args, config)
    except LookupError as exc:
        print(f"heatpath: {exc}", file=sys.stderr)
        return 2
    except (HeatPathError, ValueError) as exc:
        print(f"heatpath: error: {exc}", file=sys.stderr)
        return 1
    report = _clean({"schema": SCHEMA_VERSION, "command": config.command, "config": config.to_dict(), **report})
    validate_report(report)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if config.format == "csv" and table is not None:
        text = table
    if config.output:
        with open(config.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.csv and table is not None:
        with open(args.csv, "w") as fh:
            fh.write(table)
    return 0 if report["verdict"] == "pass" else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = _resolve_threads(args.threads)
    cfg = presets.RunConfig(args.command, {"threads": threads}, args.seed, args.output, args.format)
    return run(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
