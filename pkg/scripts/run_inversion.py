"""Dense vs sparse inversion on the desk teacher: images, curves, throughput."""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from sparseinvert import costs as C
from sparseinvert import data as D
from sparseinvert import train as TR
from sparseinvert import vit as V
from sparseinvert.checkpoint import load_checkpoint, save_checkpoint
from sparseinvert.imagefiles import write_image
from sparseinvert.invert import InversionConfig, StopSchedule, invert_batch
from sparseinvert.seeds import rng_stream


def get_teacher(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    print("no checkpoint given, training the desk teacher (a few minutes)")
    cfg = D.SyntheticConfig(noise_std=0.03)
    train_set = D.make_dataset(cfg, 1024, rng_stream(args.seed, "data"))
    model, rep = TR.train_robust_teacher(
        train_set, V.DESK,
        TR.TrainConfig(epochs=60, batch_size=32, lr=1e-3, seed=args.seed,
                       init_std=0.05),
        eps_max=0.25, clean_epochs=20)
    print(f"teacher train acc {rep.acc_curve[-1]:.4f}")
    return model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default=None)
    ap.add_argument("--out", default="out/inversion")
    ap.add_argument("--iters", type=int, default=400)
    ap.add_argument("--lr", type=float, default=0.25)
    ap.add_argument("--alpha-tv", type=float, default=0.1)
    ap.add_argument("--schedule", default="50:0.3,100:0.3,200:0.3,300:0.3")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    teacher = get_teacher(args)
    if not args.checkpoint:
        save_checkpoint(teacher, out / "teacher.smiv")
    C_ = teacher.config.num_classes
    labels = np.arange(C_)
    cfg = InversionConfig(total_iters=args.iters, lr=args.lr,
                          alpha_tv=args.alpha_tv, seed=args.seed)
    sched = StopSchedule.parse(args.schedule)

    runs = {}
    for name, s in [("dense", None), ("sparse", sched)]:
        t0 = time.time()
        res = invert_batch(teacher, cfg, labels, schedule=s)
        dt = time.time() - t0
        runs[name] = res
        for i, im in enumerate(res.images):
            write_image(im, out / f"{name}_class{i}.pgm")
        with open(out / f"{name}_curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "mean_cls_loss", "retained", "macs_per_iter"])
            for t in range(args.iters):
                w.writerow([t + 1, float(res.loss_cls[t].mean()),
                            int(res.retained_count[t]),
                            int(res.flops_per_iter[t])])
        print(f"{name}: final loss {res.loss_cls[-1].mean():.4f} "
              f"retained {res.retained_count[-1]} wall {dt:.1f}s")

    # matched-iteration throughput, warm runs
    thr_d = C.measure_throughput(teacher, cfg, labels, schedule=None, repeats=3)
    thr_s = C.measure_throughput(teacher, cfg, labels, schedule=sched, repeats=3)
    print(f"throughput dense {thr_d:.1f} it/s, sparse {thr_s:.1f} it/s "
          f"(x{thr_s / thr_d:.2f})")

    ic = C.inversion_cost(sched, args.iters, teacher.config)
    inst = float(runs["sparse"].flops_per_iter.mean())
    print(f"analytic mean MACs/iter {ic.per_iteration.mean():.0f}, "
          f"instrumented {inst:.0f}, reduction {100 * ic.reduction:.2f}%")


if __name__ == "__main__":
    main()
