"""Small pre-norm vision transformer that can run on a subset of patches.

The forward pass takes an explicit index list of retained patches. Pruning
happens after position embeddings are added, so every retained patch keeps
the position row of its original grid slot. The CLS token is always kept
and the classifier reads the final-layer CLS state.

All linear maps are bias-free. One shared implementation covers single
images (no leading dim) and batches; the sparse path with the full index
set is byte-identical to a dense run because it is the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EmptyRetained(ValueError):
    pass


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 28
    channels: int = 1
    patch_size: int = 7
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 3
    num_classes: int = 10
    ffn_hidden: int = 0  # 0 -> 4 * embed_dim
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"heads {self.num_heads} must divide embed dim {self.embed_dim}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else 4 * self.embed_dim


DESK = VitConfig()


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    x = rng.standard_normal(shape) * std
    lim = 2.0 * std
    bad = np.abs(x) > lim
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > lim
    return x


class VitModel:
    """Parameter container; ``params`` preserves insertion order."""

    def __init__(self, config: VitConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params.keys())

    def copy(self) -> "VitModel":
        return VitModel(self.config,
                        {k: Tensor(v.data.copy()) for k, v in self.params.items()})


def param_names(config: VitConfig) -> list[str]:
    names = ["patch_embed", "cls_token", "pos_embed"]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        names += [p + "ln1.gamma", p + "ln1.beta",
                  p + "wq", p + "wk", p + "wv", p + "wo",
                  p + "ln2.gamma", p + "ln2.beta",
                  p + "ffn1", p + "ffn2"]
    names.append("head")
    return names


def param_shape(config: VitConfig, name: str) -> tuple:
    D, Hd = config.embed_dim, config.hidden
    base = {
        "patch_embed": (config.patch_dim, D),
        "cls_token": (D,),
        "pos_embed": (config.num_patches + 1, D),
        "head": (D, config.num_classes),
    }
    if name in base:
        return base[name]
    leaf = name.split(".", 2)[-1]
    shapes = {"ln1.gamma": (D,), "ln1.beta": (D,), "ln2.gamma": (D,), "ln2.beta": (D,),
              "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
              "ffn1": (D, Hd), "ffn2": (Hd, D)}
    key = leaf if leaf in shapes else ".".join(name.split(".")[-2:])
    return shapes[key]


def init_vit(config: VitConfig, rng: np.random.Generator, std: float = 0.02) -> VitModel:
    """Truncated-normal weights, unit gammas, zero betas."""
    params: dict[str, Tensor] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        if name.endswith("gamma"):
            data = np.ones(shape)
        elif name.endswith("beta"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, std)
        params[name] = Tensor(data)
    return VitModel(config, params)


# ------------------------------------------------------------------ patching


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(…, H, W, C) -> (…, L, P*P*C), patches in row-major grid order,
    each patch flattened (rows, cols, channels)."""
    P = patch_size
    *lead, H, W, C = images.shape
    gh, gw = H // P, W // P
    x = images.reshape(*lead, gh, P, gw, P, C)
    x = np.moveaxis(x, -3, -4)  # (…, gh, gw, P, P, C)
    return x.reshape(*lead, gh * gw, P * P * C)


def unpatchify(patches: np.ndarray, image_size: int, patch_size: int, channels: int) -> np.ndarray:
    P = patch_size
    *lead, L, K = patches.shape
    g = image_size // P
    x = patches.reshape(*lead, g, g, P, P, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, image_size, image_size, channels)


def patchify_t(x: Tensor, patch_size: int) -> Tensor:
    """Graph-recorded patchify (pure reshape/transpose, exact gradients)."""
    P = patch_size
    *lead, H, W, C = x.shape
    gh, gw = H // P, W // P
    n = len(lead)
    t = T.reshape(x, (*lead, gh, P, gw, P, C))
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    t = T.transpose(t, axes)
    return T.reshape(t, (*lead, gh * gw, P * P * C))


# ------------------------------------------------------------------- forward


@dataclass
class AttentionRecord:
    """Post-softmax attention maps captured per layer.

    Each entry has shape (…, heads, T, T) where T = retained + 1 and
    index 0 on both token axes is the CLS token.
    """
    layers: list = field(default_factory=list)
    retained: np.ndarray | None = None


def cls_attention(record: AttentionRecord) -> np.ndarray:
    """Head-averaged final-layer attention from CLS to each retained patch.

    The CLS self-weight is dropped; entries align with ``record.retained``
    order. Output shape (…, r), all entries nonnegative.
    """
    if not record.layers:
        raise ValueError("attention record is empty")
    final = record.layers[-1]
    row = final[..., 0, :]        # attention paid by CLS
    avg = row.mean(axis=-2)       # average heads
    return avg[..., 1:]           # drop CLS self-weight


def _heads_split(x: Tensor, num_heads: int) -> Tensor:
    *lead, t_, d_ = x.shape
    n = len(lead)
    hdim = d_ // num_heads
    y = T.reshape(x, (*lead, t_, num_heads, hdim))
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return T.transpose(y, axes)


def _heads_merge(x: Tensor) -> Tensor:
    *lead, h_, t_, hd = x.shape
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    y = T.transpose(x, axes)
    return T.reshape(y, (*lead, t_, h_ * hd))


def _block(x: Tensor, model: VitModel, i: int, record: AttentionRecord, cfg: VitConfig) -> Tensor:
    p = model.params
    pre = f"layers.{i}."
    h = T.layernorm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
    q = _heads_split(T.matmul(h, p[pre + "wq"], tag="sa"), cfg.num_heads)
    k = _heads_split(T.matmul(h, p[pre + "wk"], tag="sa"), cfg.num_heads)
    v = _heads_split(T.matmul(h, p[pre + "wv"], tag="sa"), cfg.num_heads)
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = T.scale(T.matmul(q, kt, tag="sa"), 1.0 / math.sqrt(cfg.head_dim))
    attn = T.softmax_lastdim(scores)
    record.layers.append(attn.data)
    ctx = _heads_merge(T.matmul(attn, v, tag="sa"))
    # output projection is outside the quadratic/linear cost model scope
    x = T.add(x, T.matmul(ctx, p[pre + "wo"]))
    h2 = T.layernorm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
    f = T.matmul(T.gelu(T.matmul(h2, p[pre + "ffn1"], tag="ffn")), p[pre + "ffn2"], tag="ffn")
    return T.add(x, f)


def forward(model: VitModel, images, retained=None):
    """Run the transformer on the retained patch subset.

    images: Tensor or array, (H, W, C) for one image or (B, H, W, C).
    retained: sorted patch indices, (r,) shared or (B, r) per image;
    None means all patches. Returns (logits, AttentionRecord) with logits
    (num_classes,) or (B, num_classes).

    Recording happens implicitly: if the image tensor or any parameter is
    watched on a Graph, the whole pass lands on that graph.
    """
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim not in (3, 4):
        raise T.ShapeMismatch(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")
    if x.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise T.ShapeMismatch(f"image shape {x.shape[-3:]} does not match config")
    batched = x.ndim == 4

    L = cfg.num_patches
    if retained is None:
        retained = np.arange(L)
    retained = np.asarray(retained, dtype=np.int64)
    if retained.size == 0 or retained.shape[-1] == 0:
        raise EmptyRetained("at least one retained patch is required")
    if retained.min() < 0 or retained.max() >= L:
        raise IndexError(f"patch index outside [0, {L})")

    p = model.params
    D = cfg.embed_dim
    patches = patchify_t(x, cfg.patch_size)

    if batched:
        B = x.shape[0]
        idx = retained if retained.ndim == 2 else np.broadcast_to(retained, (B, retained.size))
        sel = T.take_rows_batched(patches, idx)
        pos = T.take_rows(p["pos_embed"], idx + 1)  # (B, r, D)
    else:
        if retained.ndim != 1:
            raise T.ShapeMismatch("per-image retained sets need a batched input")
        idx = retained
        sel = T.take_rows(patches, idx)
        pos = T.take_rows(p["pos_embed"], idx + 1)

    tok = T.add(T.matmul(sel, p["patch_embed"], tag="embed"), pos)
    cls0 = T.add(T.reshape(p["cls_token"], (1, D)), T.take_rows(p["pos_embed"], np.array([0])))
    if batched:
        cls0 = T.expand(cls0, (x.shape[0], 1, D))
    seq = T.concat([cls0, tok], axis=-2)

    record = AttentionRecord(retained=idx)
    for i in range(cfg.num_layers):
        seq = _block(seq, model, i, record, cfg)

    cls_final = T.slice_tokens(seq, 0, 1)
    logits = T.matmul(cls_final, p["head"], tag="head")
    out_shape = (x.shape[0], cfg.num_classes) if batched else (cfg.num_classes,)
    return T.reshape(logits, out_shape), record


def predict(model: VitModel, images, retained=None, batch_size: int = 256) -> np.ndarray:
    """Logits without any taping, chunked over the batch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return forward(model, images, retained)[0].data
    out = np.empty((images.shape[0], model.config.num_classes))
    for lo in range(0, images.shape[0], batch_size):
        hi = min(lo + batch_size, images.shape[0])
        idx = retained
        if idx is not None and np.ndim(idx) == 2:
            idx = idx[lo:hi]
        out[lo:hi] = forward(model, images[lo:hi], idx)[0].data
    return out


def evaluate(model: VitModel, images, labels, retained=None, batch_size: int = 256) -> float:
    """Top-1 accuracy."""
    logits = predict(model, images, retained, batch_size)
    return float((logits.argmax(axis=-1) == np.asarray(labels)).mean())
