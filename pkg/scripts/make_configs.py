"""Write the stock scenario configs as INI files (default: scripts/configs/)."""
import sys
from pathlib import Path

from solutegrain.config import dump_config
from solutegrain.scenarios import advection_config, diffusion_config, oscillator_config, settling_config

CONFIGS = {
    "diffusion.ini": lambda: diffusion_config(directory="runs/diffusion"),
    "advection.ini": lambda: advection_config(directory="runs/advection"),
    "settling_desk.ini": lambda: settling_config(scale="desk", directory="runs/settling-desk"),
    "settling_bench.ini": lambda: settling_config(scale="paper", directory="runs/settling-bench"),
    # 1/8 volume: every length halved
    "oscillator_desk.ini": lambda: oscillator_config(scale=0.5, walkers=250_000, steps=2000, tau=0.6,
                                                     directory="runs/oscillator-desk"),
    "oscillator_full.ini": lambda: oscillator_config(directory="runs/oscillator-full"),
}


def main(out="scripts/configs"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, make in CONFIGS.items():
        (out / name).write_text(dump_config(make()))
        print(out / name)


if __name__ == "__main__":
    main(*sys.argv[1:])
