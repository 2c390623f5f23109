"""Cost-model checks: analytic vs instrumented MACs, paper-dimension
reduction, and the foreground/background probe."""

import argparse

import numpy as np

from sparseinvert import costs as C
from sparseinvert import vit as V
from sparseinvert.checkpoint import load_checkpoint
from sparseinvert.invert import InversionConfig, StopSchedule, invert, invert_batch

DEIT_BASE = V.VitConfig(image_size=224, channels=3, patch_size=16,
                        embed_dim=768, num_heads=12, num_layers=12,
                        num_classes=1000)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--probe-seeds", type=int, default=20)
    ap.add_argument("--probe-k", type=int, default=4)
    args = ap.parse_args()

    # the published operating point: 30% stops at iterations 50/100/200/300,
    # then a long sparse tail out to 4000 iterations
    sched = StopSchedule(stages=((50, 0.3), (100, 0.3), (200, 0.3),
                                 (300, 0.3)))
    ic = C.inversion_cost(sched, 4000, DEIT_BASE)
    print(f"DeiT-Base per-iteration FLOPs reduction {100 * ic.reduction:.2f}%")

    model = load_checkpoint(args.checkpoint)
    cfg = InversionConfig(total_iters=60, lr=0.25, alpha_tv=0.1, seed=0)
    desk_sched = StopSchedule.parse("15:0.3,30:0.3,45:0.3")
    res = invert_batch(model, cfg, np.array([0, 1]), schedule=desk_sched)
    analytic = np.array([C.iteration_cost(int(r) + 1, model.config).total
                         for r in res.retained_count])
    exact = np.array_equal(analytic, res.flops_per_iter)
    print(f"instrumented == analytic on desk run: {exact}")

    ratios = []
    for seed in range(args.probe_seeds):
        dcfg = InversionConfig(total_iters=150, lr=0.25, alpha_tv=0.1,
                               label=0, seed=seed)
        _, dres = invert(model, dcfg)
        pcfg = InversionConfig(total_iters=60, lr=0.1, alpha_tv=0.1,
                               label=0, seed=seed)
        fg, bg = C.loss_contribution_probe(model, pcfg, dres.final_acls[0],
                                           k=args.probe_k)
        ratios.append(fg / max(bg, 1e-9))
        print(f"seed {seed}: fg drop {fg:.3f}, bg drop {bg:.3f}")
    print(f"median fg/bg ratio {np.median(ratios):.1f} over {args.probe_seeds} seeds")


if __name__ == "__main__":
    main()
