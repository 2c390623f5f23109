"""Dense vs sparse data-free transfer race over several seeds.

Per seed: train a student from dense-inverted images and one from
sparse-inverted images, log best accuracy and the iteration at which the
sparse arm first matches the dense arm's best.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from sparseinvert import data as D
from sparseinvert import distill as KD
from sparseinvert import vit as V
from sparseinvert.checkpoint import load_checkpoint, save_checkpoint
from sparseinvert.invert import InversionConfig, StopSchedule
from sparseinvert.seeds import rng_stream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="out/transfer")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--transfer-iters", type=int, default=100)
    ap.add_argument("--student-lr", type=float, default=0.05)
    ap.add_argument("--temperature", type=float, default=4.0)
    ap.add_argument("--probe-mode", default="full", choices=["linear", "full"])
    ap.add_argument("--inversion-iters", type=int, default=150)
    ap.add_argument("--schedule", default="40:0.25,80:0.25,120:0.25")
    ap.add_argument("--val-size", type=int, default=256)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    teacher = load_checkpoint(args.checkpoint)
    cfg = teacher.config
    val = D.make_dataset(D.SyntheticConfig(num_classes=cfg.num_classes,
                                           image_size=cfg.image_size,
                                           noise_std=0.03),
                         args.val_size, rng_stream(0, "data"))
    teacher_acc = V.evaluate(teacher, val.images, val.labels)
    print(f"teacher top-1 {teacher_acc:.4f}")

    sched = StopSchedule.parse(args.schedule)
    rows = [("seed", "arm", "best_acc", "final_acc", "race_iter", "wall_s")]
    for seed in range(args.seeds):
        best_dense = None
        for arm, s in [("dense", None), ("sparse", sched)]:
            tcfg = KD.TransferConfig(
                temperature=args.temperature, student_lr=args.student_lr,
                batch_size=16, total_iters=args.transfer_iters,
                probe_mode=args.probe_mode,
                inversion=InversionConfig(total_iters=args.inversion_iters,
                                          lr=0.25, alpha_tv=0.1, seed=seed),
                schedule=s, seed=seed)
            student = KD.make_student(teacher, np.random.default_rng(100 + seed))
            t0 = time.time()
            rep = KD.transfer(teacher, student, val, tcfg)
            wall = time.time() - t0
            best = float(np.max(rep.acc_curve))
            if arm == "dense":
                best_dense = best
            hit = KD.iterations_to_accuracy(rep, best_dense)
            race = hit[1] if hit else -1
            rows.append((seed, arm, best, float(rep.acc_curve[-1]), race,
                         round(wall, 1)))
            print(f"seed {seed} {arm:6s}: best {best:.4f} "
                  f"reaches dense-best at iter {race} ({wall:.0f}s)")
            with open(out / f"curve_s{seed}_{arm}.csv", "w", newline="") as f:
                csv.writer(f).writerows(rep.curve_rows())
            if arm == "sparse":
                save_checkpoint(student, out / f"student_s{seed}.smiv")

    with open(out / "race.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)

    sparse_best = [r[2] for r in rows[1:] if r[1] == "sparse"]
    print(f"median sparse best {np.median(sparse_best):.4f} "
          f"(teacher {teacher_acc:.4f})")


if __name__ == "__main__":
    main()
