"""Post-training quantization grid: bit widths x calibration sources.

Calibrates the desk teacher with dense-inverted, sparse-inverted, and
Gaussian-noise data, then reports top-1 at several activation bit widths.
The weight path stays at --k-weights throughout.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from sparseinvert import data as D
from sparseinvert import quantize as Q
from sparseinvert import vit as V
from sparseinvert.checkpoint import load_checkpoint
from sparseinvert.invert import InversionConfig, StopSchedule, invert_batch
from sparseinvert.seeds import rng_stream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="out/quant")
    ap.add_argument("--k-weights", type=int, default=8)
    ap.add_argument("--k-acts", type=int, nargs="+", default=[8, 6, 4, 3])
    ap.add_argument("--calib-size", type=int, default=32)
    ap.add_argument("--val-size", type=int, default=256)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--schedule", default="50:0.3,100:0.3,200:0.3")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    val = D.make_dataset(D.SyntheticConfig(num_classes=cfg.num_classes,
                                           image_size=cfg.image_size,
                                           noise_std=0.03),
                         args.val_size, rng_stream(args.seed, "data"))
    fp = V.evaluate(model, val.images, val.labels)
    print(f"fp32 top-1 {fp:.4f}")

    labels = np.arange(args.calib_size) % cfg.num_classes
    icfg = InversionConfig(total_iters=args.iters, lr=0.25, alpha_tv=0.1,
                           seed=args.seed)
    sched = StopSchedule.parse(args.schedule)
    sources = {
        "dense": invert_batch(model, icfg, labels).images,
        "sparse": invert_batch(model, icfg, labels, schedule=sched).images,
        "noise": Q.dense_calibration(
            rng_stream(args.seed, "data").standard_normal(
                (args.calib_size, cfg.image_size, cfg.image_size, cfg.channels)),
            cfg.patch_size),
    }

    rows = [("source", "k_weights", "k_acts", "top1")]
    for name, calib in sources.items():
        for ka in args.k_acts:
            plan = Q.make_plan(model, calib, args.k_weights, ka)
            acc = Q.evaluate_quantized(model, plan, val)
            rows.append((name, args.k_weights, ka, acc))
            print(f"{name:6s} W{args.k_weights}/A{ka}: {acc:.4f}")
        # keep one plan per source around for inspection
        with open(out / f"plan_{name}.json", "w") as f:
            f.write(Q.make_plan(model, calib, args.k_weights,
                                args.k_acts[0]).to_json())

    with open(out / "quant_grid.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(f"wrote {out / 'quant_grid.csv'}")


if __name__ == "__main__":
    main()
