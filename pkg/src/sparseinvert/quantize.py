"""Uniform k-bit fake quantization of the transformer.

Weight ranges come straight from per-tensor parameter extrema. Activation
ranges are calibrated by feeding images through the full-precision model
and recording per-site min/max; calibration images carry their own
retained patch subsets, so sparsely inverted data only exposes the sites
to foreground activations. Quantization is simulated in float
(quantize then dequantize); there are no integer kernels here because
top-1 accuracy of the fake-quantized model is the metric of interest.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import tensor as T
from . import vit as V
from .invert import SparseImage

_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# widening applied to a degenerate (constant-tensor) range
WIDEN_EPS = 1e-8


class DegenerateRange(ValueError):
    """T_max <= T_min leaves no usable quantization grid."""


class EmptyCalibration(ValueError):
    """Activation calibration needs at least one image."""


@dataclass(frozen=True)
class QuantRange:
    """Bounds and bit width of one uniform quantization grid."""
    t_min: float
    t_max: float
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"bit width must be >= 1, got {self.k}")
        if not self.t_max > self.t_min:
            raise DegenerateRange(
                f"need t_max > t_min, got [{self.t_min}, {self.t_max}]")

    @property
    def scale(self) -> float:
        return (self.t_max - self.t_min) / (2 ** self.k - 1)


def quantize_dequantize(x, r: QuantRange):
    """Clip to [t_min, t_max], snap to the k-bit grid, map back to float.

    Rounding is half-to-even (np.round), which keeps grid assignment
    unbiased. The trailing clip pins the top grid point at t_max so the
    operation is bit-exactly idempotent. Accepts an ndarray or a Tensor
    and returns the same kind; no gradient flows through.
    """
    wrap = isinstance(x, T.Tensor)
    xd = x.data if wrap else np.asarray(x, dtype=np.float64)
    s = r.scale
    xc = np.clip(xd, r.t_min, r.t_max)
    grid = np.round((xc - r.t_min) / s)
    y = np.clip(grid * s + r.t_min, r.t_min, r.t_max)
    return T.Tensor(y) if wrap else y


# ------------------------------------------------------------------ ranges


def weight_site_names(config: V.VitConfig) -> list:
    """Parameters of every linear map, in forward order. LayerNorm affines
    and the embedding tables stay full precision."""
    names = ["patch_embed"]
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        names += [pre + w for w in ("wq", "wk", "wv", "wo", "ffn1", "ffn2")]
    names.append("head")
    return names


def act_site_names(config: V.VitConfig) -> list:
    """Inputs of every linear map plus both attention matmul operand
    pairs: (q, k) for the score matmul and (attn_probs, v) for the
    context matmul."""
    sites = ["embed_in"]
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        sites += [pre + s for s in ("attn_in", "q", "k", "v", "attn_probs",
                                    "proj_in", "ffn_in", "ffn_hidden")]
    sites.append("head_in")
    return sites


def _bounded(lo: float, hi: float, k: int) -> QuantRange:
    if hi <= lo:
        lo, hi = lo - WIDEN_EPS, hi + WIDEN_EPS
    return QuantRange(lo, hi, k)


def weight_ranges(model: V.VitModel, k: int) -> dict:
    """Per-tensor min/max of the linear weights."""
    out = {}
    for name in weight_site_names(model.config):
        w = model.params[name].data
        out[name] = _bounded(float(w.min()), float(w.max()), k)
    return out


def calibrate_activations(model: V.VitModel, calib, k: int) -> dict:
    """Running per-site min/max over a list of SparseImage, each fed with
    its own retained subset. The model stays full precision here."""
    if not calib:
        raise EmptyCalibration("need at least one calibration image")
    lo, hi = {}, {}

    def observe(site, val):
        a, b = float(val.min()), float(val.max())
        if site in lo:
            lo[site] = min(lo[site], a)
            hi[site] = max(hi[site], b)
        else:
            lo[site], hi[site] = a, b
        return val

    for im in calib:
        forward_with_taps(model, im.canvas, im.retained, observe)
    return {site: _bounded(lo[site], hi[site], k) for site in lo}


def dense_calibration(images, patch_size: int) -> list:
    """Wrap plain (N, H, W, C) arrays as all-patches-retained calibration
    images, e.g. for a Gaussian-noise baseline."""
    images = np.asarray(images, dtype=np.float64)
    grid_h = images.shape[1] // patch_size
    grid_w = images.shape[2] // patch_size
    allp = np.arange(grid_h * grid_w)
    return [SparseImage(canvas=im.copy(), retained=allp.copy(), history=[],
                        patch_size=patch_size) for im in images]


# -------------------------------------------------------------------- plan


@dataclass
class QuantPlan:
    k_weights: int
    k_acts: int
    weights: dict = field(default_factory=dict)   # param name -> QuantRange
    acts: dict = field(default_factory=dict)      # site name  -> QuantRange

    def validate_for(self, config: V.VitConfig) -> None:
        missing = [n for n in weight_site_names(config) if n not in self.weights]
        missing += [s for s in act_site_names(config) if s not in self.acts]
        if missing:
            raise ValueError(f"plan lacks ranges for: {', '.join(missing)}")

    def to_json(self) -> str:
        def enc(rs):
            return {n: {"T_min": r.t_min, "T_max": r.t_max, "k": r.k}
                    for n, r in rs.items()}
        return json.dumps({"k_weights": self.k_weights, "k_acts": self.k_acts,
                           "weights": enc(self.weights), "acts": enc(self.acts)},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuantPlan":
        obj = json.loads(text)
        def dec(rs):
            return {n: QuantRange(float(d["T_min"]), float(d["T_max"]), int(d["k"]))
                    for n, d in rs.items()}
        return cls(k_weights=int(obj["k_weights"]), k_acts=int(obj["k_acts"]),
                   weights=dec(obj["weights"]), acts=dec(obj["acts"]))


def make_plan(model: V.VitModel, calib, k_weights: int, k_acts: int) -> QuantPlan:
    return QuantPlan(k_weights=k_weights, k_acts=k_acts,
                     weights=weight_ranges(model, k_weights),
                     acts=calibrate_activations(model, calib, k_acts))


# ----------------------------------------------------------------- forward


def _layernorm_np(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xc * inv) * gamma + beta


def _softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu_np(x):
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def _split_np(x, num_heads):
    *lead, t_, d_ = x.shape
    n = len(lead)
    y = x.reshape(*lead, t_, num_heads, d_ // num_heads)
    return y.transpose(*range(n), n + 1, n, n + 2)


def _merge_np(x):
    *lead, h_, t_, hd = x.shape
    n = len(lead)
    y = x.transpose(*range(n), n + 1, n, n + 2)
    return y.reshape(*lead, t_, h_ * hd)


def forward_with_taps(model: V.VitModel, images, retained=None, tap=None):
    """Plain-numpy forward that reports or rewrites activations in place.

    ``tap(site, value) -> value`` runs at every activation site named by
    act_site_names; returning the value unchanged reproduces the taped
    forward's logits exactly. No graph is built, so this path cannot
    backprop. Returns logits (num_classes,) or (B, num_classes).
    """
    cfg = model.config
    if tap is None:
        tap = lambda site, v: v
    x = np.asarray(images, dtype=np.float64)
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
        raise V.EmptyRetained("at least one retained patch is required")
    if retained.min() < 0 or retained.max() >= L:
        raise IndexError(f"patch index outside [0, {L})")

    p = {name: t.data for name, t in model.params.items()}
    D = cfg.embed_dim
    patches = V.patchify(x, cfg.patch_size)

    if batched:
        B = x.shape[0]
        idx = retained if retained.ndim == 2 else np.broadcast_to(retained, (B, retained.size))
        sel = patches[np.arange(B)[:, None], idx]
    else:
        if retained.ndim != 1:
            raise T.ShapeMismatch("per-image retained sets need a batched input")
        idx = retained
        sel = patches[idx]
    pos = p["pos_embed"][idx + 1]

    sel = tap("embed_in", sel)
    tok = sel @ p["patch_embed"] + pos
    cls0 = p["cls_token"].reshape(1, D) + p["pos_embed"][np.array([0])]
    if batched:
        cls0 = np.broadcast_to(cls0, (x.shape[0], 1, D))
    seq = np.concatenate([cls0, tok], axis=-2)

    inv_root = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        h = _layernorm_np(seq, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
        h = tap(pre + "attn_in", h)
        # operand taps happen before the head split; the split only
        # rearranges values, so the grids coincide
        q = _split_np(tap(pre + "q", h @ p[pre + "wq"]), cfg.num_heads)
        k = _split_np(tap(pre + "k", h @ p[pre + "wk"]), cfg.num_heads)
        v = _split_np(tap(pre + "v", h @ p[pre + "wv"]), cfg.num_heads)
        scores = (q @ np.swapaxes(k, -1, -2)) * inv_root
        attn = tap(pre + "attn_probs", _softmax_np(scores))
        ctx = tap(pre + "proj_in", _merge_np(attn @ v))
        seq = seq + ctx @ p[pre + "wo"]
        h2 = _layernorm_np(seq, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
        h2 = tap(pre + "ffn_in", h2)
        hidden = tap(pre + "ffn_hidden", _gelu_np(h2 @ p[pre + "ffn1"]))
        seq = seq + hidden @ p[pre + "ffn2"]

    cls_final = tap("head_in", seq[..., 0:1, :])
    logits = cls_final @ p["head"]
    out_shape = (x.shape[0], cfg.num_classes) if batched else (cfg.num_classes,)
    return logits.reshape(out_shape)


# -------------------------------------------------------------- evaluation


def quantize_weights(model: V.VitModel, ranges: dict) -> V.VitModel:
    """Copy of the model with each listed weight snapped to its grid."""
    qm = model.copy()
    for name, r in ranges.items():
        w = qm.params[name]
        w.data[...] = quantize_dequantize(w.data, r)
    return qm


def predict_quantized(model: V.VitModel, plan: QuantPlan, images,
                      retained=None, batch_size: int = 256) -> np.ndarray:
    plan.validate_for(model.config)
    qm = quantize_weights(model, plan.weights)

    def tap(site, val):
        return quantize_dequantize(val, plan.acts[site])

    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return forward_with_taps(qm, images, retained, tap)
    out = np.empty((images.shape[0], model.config.num_classes))
    for lo in range(0, images.shape[0], batch_size):
        hi = min(lo + batch_size, images.shape[0])
        idx = retained
        if idx is not None and np.ndim(idx) == 2:
            idx = idx[lo:hi]
        out[lo:hi] = forward_with_taps(qm, images[lo:hi], idx, tap)
    return out


def evaluate_quantized(model: V.VitModel, plan: QuantPlan, dataset) -> float:
    """Top-1 accuracy of the fake-quantized model on a dataset."""
    logits = predict_quantized(model, plan, dataset.images)
    return float((logits.argmax(axis=-1) == dataset.labels).mean())
