"""Dense and attention-guided sparse model inversion.

Inversion optimizes a noise canvas so the frozen classifier assigns it a
target label, with a masked total-variation term for local consistency.
The sparse strategy ranks retained patches by the previous iteration's
head-averaged CLS attention and permanently stops the lowest-ranked
fraction at scheduled iterations. Stopped patches leave the forward graph
entirely (token count shrinks), their pixels freeze bit-exactly, and
their Adam moments are discarded.

A batch of labels runs as independent trajectories sharing the model;
per-image retained sets are kept aligned because every trajectory prunes
the same count at the same iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit as V
from .tensor import Tensor
from .seeds import rng_stream


class ScheduleOutOfRange(ValueError):
    pass


class StaleAttention(ValueError):
    pass


DEFAULT_STAGES = ((50, 0.30), (100, 0.30), (200, 0.30), (300, 0.30))


@dataclass(frozen=True)
class StopSchedule:
    """Ordered pruning stages: at iteration t_s, stop fraction p_s of the
    currently retained patches."""
    stages: tuple = DEFAULT_STAGES

    def __post_init__(self):
        last = 0
        for t, p in self.stages:
            if int(t) != t or t < 1:
                raise ValueError(f"stage iteration {t!r} must be an integer >= 1")
            if t <= last and last > 0:
                raise ValueError("stage iterations must be strictly increasing")
            if not (0.0 < p < 1.0):
                raise ValueError(f"stop fraction {p} must lie in (0, 1)")
            last = t

    @classmethod
    def parse(cls, text: str) -> "StopSchedule | None":
        """e.g. "50:0.3,100:0.3"; "none"/"" -> None (dense)."""
        text = text.strip()
        if text.lower() in ("", "none"):
            return None
        stages = []
        for part in text.split(","):
            t, _, p = part.partition(":")
            stages.append((int(t), float(p)))
        return cls(tuple(stages))

    def as_dict(self) -> dict[int, float]:
        return {int(t): float(p) for t, p in self.stages}

    def validate_total(self, total_iters: int) -> None:
        for t, _ in self.stages:
            if t >= total_iters:
                raise ScheduleOutOfRange(
                    f"stage at iteration {t} does not precede total_iters={total_iters}")


@dataclass(frozen=True)
class InversionConfig:
    total_iters: int = 400
    lr: float = 0.25
    alpha_tv: float = 1e-4
    label: int = 0
    seed: int = 0
    init: str = "normal"

    def __post_init__(self):
        if self.alpha_tv < 0:
            raise ValueError("alpha_tv must be >= 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init not in ("normal",):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class SparseImage:
    canvas: np.ndarray            # (H, W, C) float64
    retained: np.ndarray          # sorted patch indices still being inverted
    history: list                 # [(iteration, stopped patch indices)]
    patch_size: int

    @property
    def grid(self) -> int:
        return self.canvas.shape[0] // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * (self.canvas.shape[1] // self.patch_size)

    def stopped(self) -> np.ndarray:
        if not self.history:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([idx for _, idx in self.history]))

    def validate(self) -> None:
        seen = np.concatenate([self.retained] + [idx for _, idx in self.history])
        if np.unique(seen).size != seen.size:
            raise ValueError("retained/history sets overlap")
        if np.sort(seen).tolist() != list(range(self.num_patches)):
            raise ValueError("retained + stopped must cover all patches")
        if self.retained.size < 1:
            raise V.EmptyRetained("a sparse image keeps at least one patch")

    def pixel_mask(self) -> np.ndarray:
        """(H, W) bool, True over retained patches."""
        return patch_pixel_mask(self.retained, self.canvas.shape[0],
                                self.canvas.shape[1], self.patch_size)

    def render(self) -> np.ndarray:
        """Canvas with stopped patches as zeros (the black blocks)."""
        out = self.canvas.copy()
        out[~self.pixel_mask()] = 0.0
        return out


def patch_pixel_mask(patch_idx, height: int, width: int, patch_size: int) -> np.ndarray:
    g = width // patch_size
    coarse = np.zeros((height // patch_size) * g, dtype=bool)
    coarse[np.asarray(patch_idx, dtype=np.int64)] = True
    coarse = coarse.reshape(height // patch_size, g)
    return np.kron(coarse, np.ones((patch_size, patch_size), dtype=bool))


def stop_count(r: int, p: float) -> int:
    """ceil(r*p), capped so at least one patch stays. The round() guards
    against float products like 30*0.1 landing a hair above the integer."""
    n = math.ceil(round(r * p, 9))
    return min(n, r - 1)


def identify_semantic_patches(a_cls: np.ndarray, retained: np.ndarray) -> np.ndarray:
    """Rank retained patch indices by attention weight, descending; ties
    break toward the smaller patch index."""
    a_cls = np.asarray(a_cls, dtype=np.float64)
    retained = np.asarray(retained, dtype=np.int64)
    if a_cls.shape != retained.shape:
        raise StaleAttention(
            f"attention over {a_cls.shape} patches but {retained.shape} retained")
    order = np.lexsort((retained, -a_cls))
    return retained[order]


def apply_stop_stage(image: SparseImage, ranking: np.ndarray, p: float,
                     iteration: int = 0) -> SparseImage:
    """Move the lowest-ranked ceil(r*p) patches into history."""
    if not (0.0 < p < 1.0):
        raise ValueError("stop fraction must lie in (0, 1)")
    r = image.retained.size
    n_stop = stop_count(r, p)
    if n_stop == 0:
        return image
    dropped = np.sort(ranking[r - n_stop:])
    kept = np.sort(ranking[:r - n_stop])
    return SparseImage(canvas=image.canvas, retained=kept,
                       history=image.history + [(iteration, dropped)],
                       patch_size=image.patch_size)


def tv_regularizer(image, retained, patch_size: int) -> Tensor:
    """Masked total variation; the full index set reproduces the plain sum
    over all four neighbor directions."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    h, w = x.shape[-3], x.shape[-2]
    retained = np.asarray(retained, dtype=np.int64)
    if retained.ndim == 2:
        mask = np.stack([patch_pixel_mask(row, h, w, patch_size) for row in retained])
    else:
        mask = patch_pixel_mask(retained, h, w, patch_size)
    return T.masked_tv(x, mask)


def inversion_loss(model: V.VitModel, image: SparseImage, y: int, alpha_tv: float) -> Tensor:
    """cross_entropy(forward(canvas, retained), y) + alpha * masked TV.

    Builds a fresh graph over the canvas; backward() on the result yields
    the canvas gradient via ``result.graph``.
    """
    g = T.Graph()
    cv = g.watch(Tensor(image.canvas))
    logits, _ = V.forward(model, cv, image.retained)
    loss = T.cross_entropy(logits, int(y))
    if alpha_tv != 0.0:
        loss = T.add(loss, T.scale(T.masked_tv(cv, image.pixel_mask()), alpha_tv))
    return loss


@dataclass
class InversionResult:
    images: list                      # SparseImage per label
    loss_cls: np.ndarray              # (iters, B) per-image classification loss
    tv: np.ndarray                    # (iters,) batch TV value
    flops_per_iter: np.ndarray        # (iters,) per-image MACs in model scope
    retained_count: np.ndarray        # (iters,) |retained| during that iteration
    init_canvas: np.ndarray           # (B, H, W, C) the starting noise
    final_acls: np.ndarray            # (B, r) last iteration's CLS attention

    @property
    def image(self) -> SparseImage:
        return self.images[0]


_B1, _B2, _EPS = 0.9, 0.999, 1e-8


def invert_batch(model: V.VitModel, config: InversionConfig, labels,
                 schedule: StopSchedule | None = None,
                 rng: np.random.Generator | None = None,
                 update_patches=None) -> InversionResult:
    """Invert one image per label. ``update_patches`` restricts the Adam
    write to a fixed patch set while keeping the forward dense (the
    foreground/background probe); it excludes a schedule.
    """
    cfg = model.config
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise T.ShapeMismatch("labels must be a 1-d sequence")
    B = labels.size
    H = W = cfg.image_size
    C = cfg.channels
    L = cfg.num_patches
    stages = {}
    if schedule is not None:
        schedule.validate_total(config.total_iters)
        stages = schedule.as_dict()
    if update_patches is not None and stages:
        raise ValueError("update_patches probe runs without a schedule")

    if rng is None:
        rng = rng_stream(config.seed, "inversion")
    canvas = rng.standard_normal((B, H, W, C))
    init_canvas = canvas.copy()

    retained = np.broadcast_to(np.arange(L, dtype=np.int64), (B, L)).copy()
    histories: list[list] = [[] for _ in range(B)]
    tv_mask = np.ones((B, H, W), dtype=bool)
    if update_patches is not None:
        upd = np.asarray(update_patches, dtype=np.int64)
        if upd.ndim == 1:
            upd = np.broadcast_to(upd, (B, upd.size))
        write_mask = np.stack([patch_pixel_mask(row, H, W, cfg.patch_size) for row in upd])
    else:
        write_mask = tv_mask  # aliases until a stage diverges them
    m = np.zeros_like(canvas)
    v = np.zeros_like(canvas)

    iters = config.total_iters
    loss_cls = np.empty((iters, B))
    tv_trace = np.zeros(iters)
    flops = np.empty(iters, dtype=np.int64)
    retained_count = np.empty(iters, dtype=np.int64)
    prev_acls = None

    for it in range(iters):
        if it in stages and retained.shape[1] > 1:
            r = retained.shape[1]
            n_stop = stop_count(r, stages[it])
            if n_stop > 0:
                new_ret = np.empty((B, r - n_stop), dtype=np.int64)
                for b in range(B):
                    ranking = identify_semantic_patches(prev_acls[b], retained[b])
                    new_ret[b] = np.sort(ranking[:r - n_stop])
                    histories[b].append((it, np.sort(ranking[r - n_stop:])))
                retained = new_ret
                tv_mask = np.stack([patch_pixel_mask(row, H, W, cfg.patch_size)
                                    for row in retained])
                write_mask = tv_mask
                froze = ~write_mask[..., None]
                m[np.broadcast_to(froze, m.shape)] = 0.0
                v[np.broadcast_to(froze, v.shape)] = 0.0

        g = T.Graph()
        cv = g.watch(Tensor(canvas))
        logits, rec = V.forward(model, cv, retained)
        loss = T.cross_entropy(logits, labels, reduction="sum")
        if config.alpha_tv != 0.0:
            tv = T.masked_tv(cv, tv_mask)
            loss = T.add(loss, T.scale(tv, config.alpha_tv))
            tv_trace[it] = tv.item()
        g.backward(loss)

        grad = cv.grad
        # Adam with bias correction; the masked write keeps frozen pixels
        # bit-identical (their gradient is structurally zero anyway)
        t = it + 1
        m *= _B1
        m += (1.0 - _B1) * grad
        v *= _B2
        v += (1.0 - _B2) * (grad * grad)
        step = config.lr * (m / (1.0 - _B1 ** t)) / (np.sqrt(v / (1.0 - _B2 ** t)) + _EPS)
        canvas -= np.where(write_mask[..., None], step, 0.0)

        prev_acls = V.cls_attention(rec)
        loss_cls[it] = T.per_row_cross_entropy(logits.data, labels)
        flops[it] = sum(g.macs.values()) // B
        retained_count[it] = retained.shape[1]

    images = [SparseImage(canvas=canvas[b], retained=retained[b],
                          history=histories[b], patch_size=cfg.patch_size)
              for b in range(B)]
    return InversionResult(images=images, loss_cls=loss_cls, tv=tv_trace,
                           flops_per_iter=flops, retained_count=retained_count,
                           init_canvas=init_canvas, final_acls=prev_acls)


def invert(model: V.VitModel, config: InversionConfig,
           schedule: StopSchedule | None = None) -> tuple[SparseImage, InversionResult]:
    """Single-trajectory inversion of config.label."""
    res = invert_batch(model, config, np.array([config.label]), schedule)
    return res.images[0], res
