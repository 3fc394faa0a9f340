"""Write Canny, Sobel, Prewitt and Roberts edge maps for a few synthetic slices.

    python3 scripts/edge_gallery.py --out runs/edges
"""

import argparse
from pathlib import Path

import numpy as np

from cdseunet.data_io import EdgeParams, SyntheticSpec, synthesize, write_mask, write_pgm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/edges")
    ap.add_argument("--count", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(count=args.count, size=args.size, seed=args.seed)
    for i in range(args.count):
        img, mask, _ = synthesize(spec, i)
        write_pgm(img, out / f"img_{i}.pgm")
        write_mask(mask, out / f"img_{i}_mask.pgm")
        counts = []
        for op in ("canny", "sobel", "prewitt", "roberts"):
            edge = EdgeParams(operator=op).compute(img)
            write_mask(edge, out / f"img_{i}_{op}.pgm")
            counts.append(f"{op}={int(np.sum(edge))}")
        print(f"img_{i}: " + " ".join(counts))


if __name__ == "__main__":
    main()
