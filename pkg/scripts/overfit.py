"""Overfit a small model on 8 synthetic 64x64 images and report train-set DSC.

    python3 scripts/overfit.py --out runs/overfit --epochs 200
"""

import argparse
import time
from pathlib import Path

import numpy as np

from cdseunet.data_io import EdgeParams, Sample, SyntheticSpec, model_from_checkpoint_bytes, synthesize
from cdseunet.model import ModelConfig
from cdseunet.training import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit", help="output directory for checkpoint and log")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--fusion", default="double", choices=("simple", "single", "double"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=5)
    args = ap.parse_args()

    spec = SyntheticSpec(count=8, size=64, seed=args.seed)
    data = []
    for i in range(spec.count):
        img, mask, _ = synthesize(spec, i)
        edge = EdgeParams().compute(img).astype(np.float32)
        data.append(Sample(img.astype(np.float32) / 255.0, edge, mask, f"img_{i:04d}"))

    cfg = TrainConfig(epochs=args.epochs, batch_size=2, eval_every=args.eval_every, seed=args.seed,
                      model=ModelConfig(base_width=args.base_width, fusion_variant=args.fusion))

    def progress(rec):
        if rec.test is not None:
            print(f"epoch {rec.epoch:4d}  lr {rec.lr:.6f}  loss {rec.loss_total:.4f}  dsc {rec.test.dsc:.4f}", flush=True)

    started = time.perf_counter()
    ckpt, log = train(data, data, cfg, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "best.ckpt").write_bytes(ckpt)
    (out / "log.jsonl").write_text(log.to_jsonl(include_timing=True))
    report = evaluate(model_from_checkpoint_bytes(ckpt), data)
    print(f"train DSC {report.dsc:.4f} after {args.epochs} epochs in {time.perf_counter() - started:.0f}s")


if __name__ == "__main__":
    main()
