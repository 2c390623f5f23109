"""Data-free knowledge transfer: alternate image inversion and KL matching.

Each transfer iteration inverts a fresh batch of teacher images for uniformly
drawn labels, then takes one student step that matches the student's softened
logits to the teacher's on that batch.  Sparse batches feed only the retained
patches to both models.  Validation always uses full real images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .invert import InversionConfig, SparseImage, StopSchedule, invert_batch
from .invert import identify_semantic_patches
from .seeds import rng_stream
from .train import DivergenceDetected
from .vit import VitModel, _trunc_normal, evaluate, forward, predict


def kd_loss(teacher_logits, student_logits: T.Tensor, temperature: float) -> T.Tensor:
    """KL(softmax(teacher/tau) || softmax(student/tau)), mean over the batch.

    The teacher side is a plain array (frozen reference distribution); the
    constant teacher-entropy term is included so the value is an exact KL,
    zero iff the softened distributions coincide."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = np.asarray(teacher_logits, dtype=np.float64) / temperature
    t = t - t.max(axis=-1, keepdims=True)
    p = np.exp(t)
    p /= p.sum(axis=-1, keepdims=True)
    rows = int(np.prod(p.shape[:-1])) if p.ndim > 1 else 1
    neg_entropy = float((p * np.log(p)).sum()) / rows

    logq = T.log_softmax_lastdim(T.scale(student_logits, 1.0 / temperature))
    cross = T.scale(T.tsum(T.mul(T.Tensor(p), logq)), -1.0 / rows)
    return T.add(cross, T.Tensor(np.float64(neg_entropy)))


@dataclass(frozen=True)
class TransferConfig:
    temperature: float = 20.0
    student_lr: float = 0.1
    batch_size: int = 16
    total_iters: int = 30
    probe_mode: str = "linear"
    schedule: StopSchedule | None = None
    inversion: InversionConfig = field(default_factory=InversionConfig)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.student_lr <= 0:
            raise ValueError("student_lr must be positive")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be >= 1")
        if self.probe_mode not in ("linear", "full"):
            raise ValueError("probe_mode must be 'linear' or 'full'")
        if self.schedule is not None:
            self.schedule.validate_total(self.inversion.total_iters)


@dataclass
class TransferReport:
    loss_curve: np.ndarray       # (T,) kd loss per iteration
    acc_curve: np.ndarray        # (T,) student validation accuracy
    samples: int                 # N = batch_size * iterations
    iterations: int
    batch_size: int

    def to_json(self) -> str:
        import json
        return json.dumps({
            "iterations": int(self.iterations),
            "batch_size": int(self.batch_size),
            "samples": int(self.samples),
            "best_acc": float(np.max(self.acc_curve)),
            "final_acc": float(self.acc_curve[-1]),
            "loss_curve": [float(x) for x in self.loss_curve],
            "acc_curve": [float(x) for x in self.acc_curve],
        }, indent=2)

    def curve_rows(self):
        """CSV-ready rows: (iteration, kd_loss, val_acc), 1-indexed."""
        rows = [("iteration", "kd_loss", "val_acc")]
        for t, (l, a) in enumerate(zip(self.loss_curve, self.acc_curve), 1):
            rows.append((t, float(l), float(a)))
        return rows


def make_student(teacher: VitModel, rng: np.random.Generator,
                 head_std: float = 0.02) -> VitModel:
    """Teacher copy with a freshly initialized classifier head; the usual
    starting point for the linear-probing regime."""
    student = teacher.copy()
    shape = student.params["head"].data.shape
    student.params["head"].data[...] = _trunc_normal(rng, shape, head_std)
    return student


def transfer(teacher: VitModel, student: VitModel, val: Dataset,
             cfg: TransferConfig) -> TransferReport:
    """Train `student` in place; teacher stays frozen."""
    if teacher.config.num_classes != student.config.num_classes:
        raise T.ShapeMismatch("teacher and student class counts differ")
    rng = rng_stream(cfg.seed, "transfer")
    C = teacher.config.num_classes
    if cfg.probe_mode == "linear":
        trained = [student.params["head"]]
    else:
        trained = student.parameters()

    losses, accs = [], []
    for _ in range(cfg.total_iters):
        labels = rng.integers(0, C, size=cfg.batch_size)
        inv = invert_batch(teacher, cfg.inversion, labels,
                           schedule=cfg.schedule, rng=rng)
        canvases = np.stack([im.canvas for im in inv.images])
        retained = np.stack([im.retained for im in inv.images])
        t_logits = predict(teacher, canvases, retained)

        g = T.Graph()
        for p in trained:
            g.watch(p)
        s_logits, _ = forward(student, canvases, retained)
        loss = kd_loss(t_logits, s_logits, cfg.temperature)
        if not np.isfinite(loss.data):
            raise DivergenceDetected("kd loss became non-finite")
        g.backward(loss)
        T.sgd_step(trained, [p.grad for p in trained], cfg.student_lr)
        T.release(trained)

        losses.append(loss.item())
        accs.append(evaluate(student, val.images, val.labels))

    return TransferReport(loss_curve=np.array(losses), acc_curve=np.array(accs),
                          samples=cfg.batch_size * cfg.total_iters,
                          iterations=cfg.total_iters, batch_size=cfg.batch_size)


def iterations_to_accuracy(report: TransferReport, threshold: float):
    """First logged step reaching the threshold, as (samples N, iterations T);
    None when never reached."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    hits = np.nonzero(report.acc_curve >= threshold)[0]
    if hits.size == 0:
        return None
    t = int(hits[0]) + 1
    return report.batch_size * t, t


def background_mass_fraction(image: SparseImage, acls: np.ndarray, k: int) -> float:
    """Share of rendered-image mass lying outside the k highest-attention
    patches.  Stopped patches render as zeros, so mass they would have held
    counts as removed, not as background."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranking = identify_semantic_patches(np.asarray(acls, dtype=np.float64),
                                        image.retained)
    fg = set(ranking[:k].tolist())
    rendered = np.abs(image.render())
    P, g = image.patch_size, image.grid
    total = float(rendered.sum())
    if total == 0.0:
        return 0.0
    bg = 0.0
    for idx in range(image.num_patches):
        if idx in fg:
            continue
        r, c = divmod(idx, g)
        bg += float(rendered[r * P:(r + 1) * P, c * P:(c + 1) * P, :].sum())
    return bg / total
