"""Analytic FLOPs model, throughput measurement, and contribution probes.

The analytic model counts multiply-accumulates for the attention and FFN
blocks (3*T*D^2 + 2*T^2*D and 8*T*D^2 per layer) plus the patch-embedding
and classifier matmuls.  Softmax, layernorm, GELU, and the attention output
projection are outside this scope; the instrumented counter in the tensor
engine uses the same scope, so the two must agree exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .invert import (InversionConfig, StopSchedule, invert_batch,
                     patch_pixel_mask, stop_count)
from .seeds import rng_stream
from .vit import VitConfig


def flops_sa(tokens: int, dim: int) -> int:
    """Self-attention MACs for one layer: QKV projections + both attention
    matmuls.  The output projection is excluded."""
    if tokens < 1 or dim < 1:
        raise ValueError("tokens and dim must be >= 1")
    return 3 * tokens * dim * dim + 2 * tokens * tokens * dim


def flops_ffn(tokens: int, dim: int) -> int:
    """Feed-forward MACs for one layer with the 4x hidden expansion."""
    if tokens < 1 or dim < 1:
        raise ValueError("tokens and dim must be >= 1")
    return 8 * tokens * dim * dim


@dataclass(frozen=True)
class CostBreakdown:
    """Per-iteration MAC counts at a fixed token count (CLS included)."""

    tokens: float
    sa: float
    ffn: float
    embed: float
    classifier: float

    @property
    def total(self) -> float:
        return self.sa + self.ffn + self.embed + self.classifier


def iteration_cost(tokens: int, cfg: VitConfig) -> CostBreakdown:
    """Exact cost of one forward pass over `tokens` tokens (retained+CLS)."""
    if not 2 <= tokens <= cfg.num_patches + 1:
        raise ValueError("tokens must cover CLS plus 1..num_patches patches")
    retained = tokens - 1
    return CostBreakdown(
        tokens=tokens,
        sa=cfg.num_layers * flops_sa(tokens, cfg.embed_dim),
        ffn=cfg.num_layers * flops_ffn(tokens, cfg.embed_dim),
        embed=retained * cfg.patch_dim * cfg.embed_dim,
        classifier=cfg.embed_dim * cfg.num_classes,
    )


def retained_trajectory(schedule: StopSchedule | None, total_iters: int,
                        num_patches: int) -> np.ndarray:
    """Retained-patch count at each iteration, mirroring the pruning loop:
    a stage scheduled at iteration t takes effect before t's forward pass."""
    stages = {} if schedule is None else schedule.as_dict()
    if schedule is not None:
        schedule.validate_total(total_iters)
    r = num_patches
    out = np.empty(total_iters, dtype=np.int64)
    for it in range(total_iters):
        p = stages.get(it)
        if p is not None and r > 1:
            r -= stop_count(r, p)
        out[it] = r
    return out


@dataclass(frozen=True)
class InversionCost:
    """Schedule-level cost summary: per-iteration totals, the average
    breakdown, and the reduction against the dense baseline."""

    per_iteration: np.ndarray
    average: CostBreakdown
    dense: CostBreakdown
    reduction: float


def inversion_cost(schedule: StopSchedule | None, total_iters: int,
                   cfg: VitConfig) -> InversionCost:
    if total_iters < 1:
        raise ValueError("total_iters must be >= 1")
    traj = retained_trajectory(schedule, total_iters, cfg.num_patches)
    parts = [iteration_cost(int(r) + 1, cfg) for r in traj]
    totals = np.array([c.total for c in parts], dtype=np.int64)
    avg = CostBreakdown(
        tokens=float(np.mean([c.tokens for c in parts])),
        sa=float(np.mean([c.sa for c in parts])),
        ffn=float(np.mean([c.ffn for c in parts])),
        embed=float(np.mean([c.embed for c in parts])),
        classifier=float(np.mean([c.classifier for c in parts])),
    )
    dense = iteration_cost(cfg.num_patches + 1, cfg)
    return InversionCost(
        per_iteration=totals,
        average=avg,
        dense=dense,
        reduction=1.0 - avg.total / dense.total,
    )


def _probe_arm(model, config: InversionConfig, canvas: np.ndarray,
               retained: np.ndarray) -> float:
    """Optimize only `retained` patches through the subset forward, boxed to
    the image range, and return the final full-canvas classification loss.

    The subset forward and the [0,1] box mirror the conditions under which
    images exist downstream; without the box, a constant offset in any patch
    (invisible to the smoothness term) can steer the logits arbitrarily and
    the foreground/background asymmetry cannot survive at this scale."""
    from . import tensor as T
    from . import vit as V
    from .invert import tv_regularizer

    cfg = model.config
    cv = canvas.copy()
    mask = patch_pixel_mask(retained, cfg.image_size, cfg.image_size,
                            cfg.patch_size)[..., None]
    m = np.zeros_like(cv)
    v = np.zeros_like(cv)
    for t in range(1, config.total_iters + 1):
        g = T.Graph()
        cvt = g.watch(T.Tensor(cv))
        logits, _ = V.forward(model, cvt, retained)
        loss = T.add(T.cross_entropy(logits, config.label),
                     T.scale(tv_regularizer(cvt, retained, cfg.patch_size),
                             config.alpha_tv))
        g.backward(loss)
        grad = cvt.grad
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        step = config.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        cv -= np.where(mask, step, 0.0)
        np.clip(cv, 0.0, 1.0, out=cv)
    logits, _ = V.forward(model, cv)
    return float(T.per_row_cross_entropy(logits.data[None],
                                         np.array([config.label]))[0])


def loss_contribution_probe(model, config: InversionConfig, dense_acls,
                            k: int):
    """Re-invert from noise twice, once through only the k highest-attention
    patches of a converged dense run and once through only the k lowest, and
    report each arm's drop in the full-canvas classification loss.

    Both arms share the same seeded init canvas, so the comparison is paired.
    Returns (fg_drop, bg_drop)."""
    from . import tensor as T
    from . import vit as V
    from .invert import identify_semantic_patches

    a = np.asarray(dense_acls, dtype=np.float64)
    if not 1 <= k <= a.shape[0]:
        raise ValueError("k out of range")
    cfg = model.config
    ranking = identify_semantic_patches(a, np.arange(a.shape[0]))
    rng = rng_stream(config.seed, "inversion")
    canvas = np.clip(rng.standard_normal(
        (cfg.image_size, cfg.image_size, cfg.channels)) * 0.25 + 0.5, 0.0, 1.0)
    logits, _ = V.forward(model, canvas)
    before = float(T.per_row_cross_entropy(logits.data[None],
                                           np.array([config.label]))[0])
    drops = []
    for patches in (ranking[:k], ranking[-k:]):
        after = _probe_arm(model, config, canvas, np.sort(patches))
        drops.append(before - after)
    return drops[0], drops[1]


def measure_throughput(model, config: InversionConfig, labels,
                       schedule: StopSchedule | None = None,
                       warmup_iters: int = 10, repeats: int = 5) -> float:
    """Wall-clock iterations/second for a full inversion run.

    One short warm-up run first, then the median over `repeats` timed runs.
    The timed runs reuse one seeded rng stream apiece so each repeat does
    identical work."""
    labels = np.asarray(labels)
    warm_cfg = InversionConfig(total_iters=warmup_iters, lr=config.lr,
                               alpha_tv=config.alpha_tv, label=config.label,
                               seed=config.seed, init=config.init)
    invert_batch(model, warm_cfg, labels, schedule=None)
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        invert_batch(model, config, labels, schedule=schedule)
        rates.append(config.total_iters / (time.perf_counter() - t0))
    return float(np.median(rates))


def schedule_for_sparsity(level: float, stage_at: int) -> StopSchedule | None:
    """Single-stage schedule stopping `level` of the patches at `stage_at`;
    level 0 means dense."""
    if not 0.0 <= level < 1.0:
        raise ValueError("sparsity level must be in [0, 1)")
    if level == 0.0:
        return None
    return StopSchedule(stages=((stage_at, level),))


def sparsity_sweep(teacher, val_dataset, transfer_config, levels,
                   stage_at: int | None = None, repeats: int = 3):
    """Re-run inversion throughput and a short knowledge transfer at each
    sparsity level.  Returns one dict per level with the achieved sparsity,
    inversion throughput, and the transferred student's best accuracy."""
    from dataclasses import replace

    from .distill import make_student, transfer

    inv_cfg = transfer_config.inversion
    if stage_at is None:
        stage_at = max(1, inv_cfg.total_iters // 4)
    num_patches = teacher.config.num_patches
    labels = np.zeros(transfer_config.batch_size, dtype=np.int64)
    rows = []
    for level in levels:
        sched = schedule_for_sparsity(float(level), stage_at)
        thr = measure_throughput(teacher, inv_cfg, labels, schedule=sched,
                                 repeats=repeats)
        tcfg = replace(transfer_config, schedule=sched)
        student = make_student(teacher, rng_stream(tcfg.seed, "transfer"))
        report = transfer(teacher, student, val_dataset, tcfg)
        stopped = 0 if sched is None else stop_count(num_patches,
                                                     sched.stages[0][1])
        rows.append({
            "level": float(level),
            "sparsity": stopped / num_patches,
            "throughput": thr,
            "accuracy": float(max(report.acc_curve)),
        })
    return rows
