"""Command line: ``solutegrain run|validate|analyze|shape-features``.

Exit codes: 0 success, 1 error, 2 validation failure.

Environment:
  SOLUTEGRAIN_THREADS        worker threads for numba and BLAS (default: library choice)
  SOLUTEGRAIN_DETERMINISTIC  if set to 1/yes/true, force a single thread so every
                             output byte depends only on (config, seed)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

log = logging.getLogger("solutegrain")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
_THREAD_VARS = ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def deterministic_mode(env=None):
    env = os.environ if env is None else env
    return env.get("SOLUTEGRAIN_DETERMINISTIC", "").strip().lower() in ("1", "yes", "true", "on")


def configure_threads(env=None):
    """Translate the package's env vars into library thread settings.

    Has to run before numba or numpy's BLAS start their pools, so the
    CLI calls it before importing the simulation modules.
    """
    env = os.environ if env is None else env
    n = env.get("SOLUTEGRAIN_THREADS")
    if deterministic_mode(env):
        n = "1"
    if n:
        if not n.isdigit() or int(n) < 1:
            raise ValueError(f"SOLUTEGRAIN_THREADS must be a positive integer, got {n!r}")
        for v in _THREAD_VARS:
            env[v] = n
    return int(n) if n else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    from .config import load_config, replace
    from .engine import Simulation

    cfg = load_config(args.config)
    over = {}
    if args.steps is not None:
        over["time"] = dict(steps=args.steps)
    if args.out:
        over["output"] = dict(directory=args.out)
    if args.seed is not None:
        over["run"] = dict(seed=args.seed)
    if over:
        cfg = replace(cfg, **over)
    sim = Simulation(cfg)
    if args.resume:
        ck = Path(cfg.output.directory) / "checkpoint.npz"
        sim.load_checkpoint(ck)
        sim.run(steps=max(cfg.time.steps - sim.step_index, 0), resume=True)
    else:
        sim.run()
    print(f"wrote {cfg.output.directory} ({sim.step_index} steps, digest {sim.digest()[:16]})")
    return EXIT_OK


def cmd_validate(args):
    from .validation import CASES, QUICK

    names = list(CASES) if args.case == "all" else [args.case]
    for n in names:
        if n not in CASES:
            raise KeyError(f"unknown case {n!r}; choose from {', '.join(CASES)} or all")
    ok = True
    for n in names:
        kw = dict(QUICK.get(n, {})) if args.quick else {}
        res = CASES[n](**kw)
        print(res.report())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def _load_run(d, axis):
    import numpy as np

    from .io import read_csv, read_profiles

    d = Path(d)
    meta = json.loads((d / "meta.json").read_text())
    if (d / "moments.csv").exists():
        m = read_csv(d / "moments.csv")
        sel = m["axis"] == axis
        times, var = m["time"][sel], m["variance"][sel]
    elif (d / "profiles.csv").exists():
        p = read_profiles(d / "profiles.csv")[axis]
        times, var = p.times, p.variances
    else:
        raise FileNotFoundError(f"{d} has neither moments.csv nor profiles.csv")
    s = read_csv(d / "series.csv")
    name = d.name
    if (d / "config.ini").exists():
        from .config import load_config

        name = load_config(d / "config.ini").run.name
    return dict(dir=str(d), name=name, times=np.asarray(times), var=np.asarray(var), meta=meta,
                u_fluid=s["u_fluid_x"], u_particle=s["u_particle_x"])


def cmd_analyze(args):
    import numpy as np

    from .analysis import correlation_matrix, dispersion_coefficient, slip_velocity
    from .io import read_csv, write_matrix_csv, write_report

    runs = [_load_run(d, args.axis) for d in args.dumps]
    window = "auto"
    if args.window:
        window = tuple(float(v) for v in args.window.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # repeats of one shape share a name; average their variance curves
    groups = {}
    for r in runs:
        groups.setdefault(r["name"], []).append(r)
    d_alpha = {}
    text = []
    for name, rs in groups.items():
        n = min(len(r["times"]) for r in rs)
        t = rs[0]["times"][:n]
        var = np.mean([r["var"][:n] for r in rs], axis=0)
        U = float(np.mean([slip_velocity(r["u_fluid"], r["u_particle"]) for r in rs]))
        R = args.radius or float(np.mean([r["meta"]["particle_radius"] for r in rs]))
        phi = float(np.mean([r["meta"]["phi_solid"] for r in rs]))
        rep = dispersion_coefficient(t, var, R, U, phi, window)
        rep.extra.update(name=name, repeats=len(rs))
        d_alpha[name] = rep.D_alpha
        write_report(out / f"dispersion_{name}.txt", rep.as_text())
        text.append(rep.as_text())
    print("\n".join(text), end="")

    if args.features:
        f = read_csv(args.features)
        names = [str(v) for v in f["name"]]
        keep = [i for i, n in enumerate(names) if n in d_alpha]
        if len(keep) >= 2:
            table = {c: f[c][keep] for c in f if c != "name" and f[c].dtype.kind == "f"}
            table["D_alpha"] = np.array([d_alpha[names[i]] for i in keep])
            cols, m = correlation_matrix(table)
            write_matrix_csv(out / "correlation.csv", cols, m)
            print(f"wrote {out / 'correlation.csv'}")
        else:
            log.warning("correlation matrix needs at least two shapes with both features and runs")
    return EXIT_OK


def cmd_shape_features(args):
    import csv

    from .metaball import load_particle_file
    from .shape_metrics import ShapeFeatures, compute_features

    shapes = load_particle_file(args.particles)
    w = csv.writer(sys.stdout if args.out is None else open(args.out, "w", newline=""))
    w.writerow(("name",) + ShapeFeatures.COLUMNS)
    stem = Path(args.particles).stem
    for k, s in enumerate(shapes):
        if args.unit != 1.0:
            s = s.scaled(1.0 / args.unit)
        feat = compute_features(s, args.resolution, args.orientations).as_dict()
        name = stem if len(shapes) == 1 else f"{stem}_{k}"
        w.writerow([name] + [f"{feat[c]:.10g}" for c in ShapeFeatures.COLUMNS])
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for failed validation
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="solutegrain", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a simulation from an INI config")
    r.add_argument("config")
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (overrides [output] directory)")
    r.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.npz")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="run a built-in oracle case")
    v.add_argument("case", help="case name or 'all'")
    v.add_argument("--quick", action="store_true", help="reduced sizes for a smoke check")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("analyze", help="dispersion fit over run directories")
    a.add_argument("dumps", nargs="+", help="run output directories")
    a.add_argument("--axis", default="z")
    a.add_argument("--window", help="fit window 't0,t1' in seconds (default: automatic)")
    a.add_argument("--radius", type=float, help="particle radius R (default: volume-equivalent radius)")
    a.add_argument("--features", help="CSV from shape-features; adds a Spearman matrix with D_alpha")
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("shape-features", help="shape descriptors, one CSV row per particle")
    s.add_argument("particles")
    s.add_argument("--unit", type=float, default=1.0, help="length unit of the output (e.g. dx)")
    s.add_argument("--resolution", type=float, help="meshing/silhouette grid spacing in output units")
    s.add_argument("--orientations", type=int, default=256)
    s.add_argument("--out")
    s.set_defaults(func=cmd_shape_features)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure maps to exit code 1
        bundle = getattr(e, "bundle", None)
        print(f"error: {e}", file=sys.stderr)
        if bundle:
            print(json.dumps(bundle, indent=1, default=str), file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
