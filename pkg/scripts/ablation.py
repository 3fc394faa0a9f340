"""Run both ablation grids (fusion variants, edge operators) on synthetic data.

    python3 scripts/ablation.py --out runs/ablation --epochs 30
"""

import argparse
import sys
from pathlib import Path

from cdseunet.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--count", type=int, default=16, help="synthetic images")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "ablation.ini"
    config.write_text(
        f"[model]\nbase_width = {args.base_width}\n\n"
        f"[data]\nsynth_count = {args.count}\nsynth_seed = {args.seed}\ntrain_fraction = 0.75\n"
    )
    status = 0
    for axis in ("fusion", "operator"):
        status |= cli(["ablate", "--axis", axis, "--config", str(config), "--epochs", str(args.epochs),
                       "--seed", str(args.seed), "--report", str(out / f"{axis}.json")])
    return status


if __name__ == "__main__":
    sys.exit(main())
