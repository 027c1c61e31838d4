"""Shape sweep of the shaken-particle dispersion case.

    python scripts/oscillator_sweep.py [out_dir] [--seeds 3] [--scale 0.5] [--steps 2000]

For every shape below: compute its descriptors, run the oscillator once per
seed, then fit D_alpha over the pooled repeats and correlate it with the
descriptors (Spearman) through ``solutegrain analyze``.
"""
import argparse
import csv
from pathlib import Path

from solutegrain import cli
from solutegrain.engine import Simulation
from solutegrain.metaball import parse_particle_file
from solutegrain.scenarios import oscillator_config
from solutegrain.shape_metrics import ShapeFeatures, compute_features

# outer-surface control points "x y z k", records separated by ';'
SHAPES = {
    "sphere": "sphere 1.0",
    "dumbbell": "2;-0.6 0 0 0.5;0.6 0 0 0.5",
    "triangle": "3;0.7 0 0 0.35;-0.35 0.6 0 0.35;-0.35 -0.6 0 0.35",
    "rod": "3;-1 0 0 0.3;0 0 0 0.3;1 0 0 0.3",
    "tetra": "4;0.5 0.5 0.5 0.25;0.5 -0.5 -0.5 0.25;-0.5 0.5 -0.5 0.25;-0.5 -0.5 0.5 0.25",
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("out", nargs="?", default="runs/sweep")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--scale", type=float, default=0.5)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--walkers", type=int, default=250_000)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + ShapeFeatures.COLUMNS)
        for name, spec in SHAPES.items():
            shape = parse_particle_file(spec.replace(";", "\n"))[0]
            feat = compute_features(shape).as_dict()
            w.writerow([name] + [f"{feat[c]:.10g}" for c in ShapeFeatures.COLUMNS])

    dirs = []
    for name, spec in SHAPES.items():
        for seed in range(args.seeds):
            d = out / f"{name}-{seed}"
            cfg = oscillator_config(scale=args.scale, walkers=args.walkers, steps=args.steps, tau=0.6, seed=seed,
                                    shape=spec, directory=str(d))
            cfg.run.name = name
            print(f"running {d}")
            Simulation(cfg).run()
            dirs.append(str(d))
    return cli.main(["analyze", *dirs, "--features", str(out / "features.csv"), "--out", str(out / "analysis")])


if __name__ == "__main__":
    raise SystemExit(main())
