"""Command line entry point (``otc``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..cost_kernel import ConfigError, CostError, cost_from_config, domain_from_config, load_toml
from .campaign import SCHEMA_VERSION, bundled_config, dumps, run_campaign

log = logging.getLogger("otc")


def _vector(text):
    try:
        return np.array([float(t) for t in text.replace(" ", "").split(",") if t], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _load_cost(args):
    cfg = load_toml(args.cost)
    cost, U, V = cost_from_config(cfg, fd_step=getattr(args, "fd_step", None))
    if U is None:
        raise ConfigError("domain", "this command needs [domain] (or domain.source/target)")
    return cfg, cost, U, V


def _emit(args, payload):
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    text = dumps(payload)
    if getattr(args, "json", None):
        Path(args.json).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_check_curvature(args):
    from ..curvature import classify
    _, cost, U, V = _load_cost(args)
    rep = classify(cost, U, V, samples=args.samples, tol=args.tol, seed=args.seed)
    _emit(args, {"command": "check-curvature", "seed": args.seed, **rep.to_dict()})
    return 0


def cmd_check_dasm(args):
    from .probes import dasm_check, time_convex_dasm_check
    _, cost, U, V = _load_cost(args)
    fn = time_convex_dasm_check if args.time_convex else dasm_check
    r = fn(cost, U, V, configs=args.configs, t_grid=args.t_grid, seed=args.seed, tol=args.tol,
           expect_violation=args.expect_violation)
    _emit(args, {"command": "check-dasm", "seed": args.seed, **r.to_dict()})
    if args.csv and r.witness:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "f"])
            w.writerows(r.witness["profile"]["samples"])
    return 0 if r.passed else 1


def cmd_chart(args):
    from ..geometry import check_c_convexity, make_chart
    _, cost, U, V = _load_cost(args)
    ch = make_chart(cost, U, args.ytilde)
    out = {"command": "chart", "ytilde": args.ytilde.tolist(), "affine": ch.affine}
    if args.emit_image_hull:
        out["image_hull"] = ch.image_hull().to_dict()
    if args.points:
        pts = np.array([_vector(p) for p in args.points])
        out["forward"] = ch.forward(pts).tolist()
    if args.convexity:
        out["convexity"] = check_c_convexity(cost, U, V, side="x", seed=args.seed).to_dict()
    _emit(args, out)
    return 0


def cmd_solve(args):
    from ..potential import read_atoms_csv, solve_semidiscrete, write_atoms_csv
    cfg, cost, U, V = _load_cost(args)
    if args.source:
        src = load_toml(args.source)
        U = domain_from_config(src.get("domain", src), "domain")
    atoms, masses, _ = read_atoms_csv(args.atoms)
    if masses is None:
        masses = np.full(len(atoms), U.volume() / len(atoms))
    u = solve_semidiscrete(cost, None, atoms, masses, tol=args.tol, source=U, seed=args.seed,
                           method=args.method)
    out = args.out or str(Path(args.atoms).with_suffix(".solved.csv"))
    write_atoms_csv(out, u.atoms, u.meta["masses"], u.weights)
    _emit(args, {"command": "solve", "potential": out, "method": u.meta["method"],
                 "trace": u.meta["trace"], "timing": {"elapsed_s": u.meta["elapsed"]}})
    return 0


def _potential(args, cost, U):
    from ..potential import SemidiscretePotential, read_atoms_csv
    atoms, _, w = read_atoms_csv(args.potential)
    if w is None:
        raise ConfigError("potential", f"{args.potential} has no weight column")
    return SemidiscretePotential(cost, atoms, w, domain=U)


def cmd_alexandrov(args):
    from ..cost_kernel import compute_constants
    from ..estimates import (alexandrov_upper, build_c_cone, c_cone_ma_lower, extract_section,
                             renormalize_section, section_estimate)
    from ..geometry import make_chart
    _, cost, U, V = _load_cost(args)
    u = _potential(args, cost, U)
    chart = make_chart(cost, U, args.ytilde)
    anchor = chart.forward(args.anchor[None])[0] if args.anchor is not None else \
        chart.forward(U.sample(1, args.seed))[0]
    level = args.level
    if args.above_anchor:
        level += float(chart.modify(u)(anchor[None])[0])
    sec = extract_section(u, chart, anchor, level, resolution=args.resolution)
    K = compute_constants(cost, U, V, 1000)
    out = {"command": "alexandrov", "seed": args.seed, "section": sec.to_dict(),
           "constants": K.to_dict()}
    cone = build_c_cone(sec, V=None)
    out["cone"] = cone.meta
    out["cone_lower"] = c_cone_ma_lower(cone, K.epsilon_c, args.c_guard)
    out["section_estimate"] = section_estimate(sec, args.lam, K.gamma_plus, K.gamma_minus, rng=args.seed)
    try:
        rs, J = renormalize_section(sec)
        out["alexandrov_upper"] = alexandrov_upper(rs, args.t, rng=args.seed)
        out["alexandrov_upper"]["john_method"] = J.method
    except (ValueError, CostError) as exc:
        out["alexandrov_upper"] = {"error": str(exc)}
    _emit(args, out)
    return 0


def cmd_probe_contact(args):
    from .probes import contact_set_probe, subdifferential_agreement
    _, cost, U, V = _load_cost(args)
    u = _potential(args, cost, U)
    r = contact_set_probe(u, args.gap_tol, args.pair_samples, V=V, seed=args.seed)
    _emit(args, {"command": "probe-contact", "seed": args.seed, **r.to_dict(),
                 "subdifferential_agreement": subdifferential_agreement(u, r)})
    return 0 if r.passed else 1


def cmd_run_campaign(args):
    path = Path(args.config)
    if not path.exists():
        bundled = bundled_config(args.config)
        if not bundled.is_file():
            raise ConfigError("config", f"no such file or bundled config: {args.config}")
        path = bundled
    code, reports = run_campaign(path, out_dir=args.out, seed=args.seed, stream=sys.stdout)
    print(f"{sum(r['passed'] for r in reports)}/{len(reports)} checks passed; exit {code}")
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="otc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, json_out=True):
        sp.add_argument("--cost", required=True, help="TOML file with [cost] and [domain] tables")
        sp.add_argument("--fd-step", type=float, default=None, help="override the FD step")
        sp.add_argument("--seed", type=int, default=0)
        if json_out:
            sp.add_argument("--json", help="write the JSON report here (default stdout)")

    sp = sub.add_parser("check-curvature", help="sample cross-curvature and classify the cost")
    common(sp)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(func=cmd_check_curvature)

    sp = sub.add_parser("check-dasm", help="maximum principle along c*-segments")
    common(sp)
    sp.add_argument("--configs", type=int, default=10_000)
    sp.add_argument("--t-grid", type=int, default=32)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--time-convex", action="store_true")
    sp.add_argument("--expect-violation", action="store_true")
    sp.add_argument("--csv", help="write the witness profile (t, f) here")
    sp.set_defaults(func=cmd_check_dasm)

    sp = sub.add_parser("chart", help="cost-exponential chart around ytilde")
    common(sp)
    sp.add_argument("--ytilde", type=_vector, required=True)
    sp.add_argument("--emit-image-hull", action="store_true")
    sp.add_argument("--convexity", action="store_true", help="also run the c-convexity check")
    sp.add_argument("--points", nargs="*", help="source points to map, e.g. 0.1,0.2")
    sp.set_defaults(func=cmd_chart)

    sp = sub.add_parser("solve", help="semidiscrete transport from the source domain")
    common(sp)
    sp.add_argument("--source", help="TOML file with a [domain] table (default: domain.source)")
    sp.add_argument("--atoms", required=True, help="CSV with y1..yn[,mass]")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--method", choices=["auto", "exact", "mc"], default="auto")
    sp.add_argument("--out", help="output CSV (atoms, mass, weight)")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("alexandrov", help="section, c-cone and Alexandrov-type estimates")
    common(sp)
    sp.add_argument("--potential", required=True, help="CSV with y1..yn,mass,weight")
    sp.add_argument("--ytilde", type=_vector, required=True)
    sp.add_argument("--level", type=float, required=True)
    sp.add_argument("--anchor", type=_vector, default=None, help="source point inside the section")
    sp.add_argument("--above-anchor", action="store_true", help="level is relative to u~(anchor)")
    sp.add_argument("--t", type=float, default=0.5)
    sp.add_argument("--lam", type=float, default=0.5)
    sp.add_argument("--c-guard", type=float, default=10.0)
    sp.add_argument("--resolution", type=int, default=None)
    sp.set_defaults(func=cmd_alexandrov)

    sp = sub.add_parser("probe-contact", help="injectivity and contact-set probe")
    common(sp)
    sp.add_argument("--potential", required=True)
    sp.add_argument("--gap-tol", type=float, default=None)
    sp.add_argument("--pair-samples", type=int, default=200)
    sp.set_defaults(func=cmd_probe_contact)

    sp = sub.add_parser("run-campaign", help="run a campaign config (path or bundled name)")
    sp.add_argument("config")
    sp.add_argument("--out", default=None, help="report directory")
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed and OTC_SEED")
    sp.set_defaults(func=cmd_run_campaign)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"otc: config error: {exc}", file=sys.stderr)
        return 2
    except (CostError, ValueError, OSError) as exc:
        print(f"otc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
