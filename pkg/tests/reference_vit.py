"""Straight-line single-image transformer forward, used as an oracle.

Deliberately written with explicit per-head loops and no shared code with
the package so wiring mistakes cannot cancel out.
"""

import numpy as np
from scipy.special import erf


def _ln(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    v = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(v + eps) * g + b


def _softmax_rows(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def reference_forward(model, image, retained=None):
    """Returns (logits, per-layer attention list) for one (H, W, C) image."""
    cfg = model.config
    P, D, nh = cfg.patch_size, cfg.embed_dim, cfg.num_heads
    hd = D // nh
    g = cfg.image_size // P

    patches = []
    for gi in range(g):
        for gj in range(g):
            blk = image[gi * P:(gi + 1) * P, gj * P:(gj + 1) * P, :]
            patches.append(blk.reshape(-1))
    patches = np.stack(patches)

    if retained is None:
        retained = list(range(g * g))
    W = {k: v.data for k, v in model.params.items()}
    tok = patches[list(retained)] @ W["patch_embed"]
    tok = tok + W["pos_embed"][[i + 1 for i in retained]]
    cls = W["cls_token"] + W["pos_embed"][0]
    x = np.vstack([cls[None, :], tok])

    maps = []
    for li in range(cfg.num_layers):
        pre = f"layers.{li}."
        h = _ln(x, W[pre + "ln1.gamma"], W[pre + "ln1.beta"], cfg.ln_eps)
        q = h @ W[pre + "wq"]
        k = h @ W[pre + "wk"]
        v = h @ W[pre + "wv"]
        heads = []
        amaps = []
        for hh in range(nh):
            sl = slice(hh * hd, (hh + 1) * hd)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
            A = _softmax_rows(scores)
            amaps.append(A)
            heads.append(A @ v[:, sl])
        maps.append(np.stack(amaps))
        ctx = np.concatenate(heads, axis=1)
        x = x + ctx @ W[pre + "wo"]
        h2 = _ln(x, W[pre + "ln2.gamma"], W[pre + "ln2.beta"], cfg.ln_eps)
        x = x + _gelu(h2 @ W[pre + "ffn1"]) @ W[pre + "ffn2"]

    return x[0] @ W["head"], maps
