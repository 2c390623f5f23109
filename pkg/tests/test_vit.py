"""Transformer wiring against the straight-line reference, plus the
patch-subset machinery."""

import numpy as np
import pytest

from sparseinvert import tensor as T
from sparseinvert import vit as V
from numdiff import fd_grad, rel_err
from reference_vit import reference_forward

TINY = V.VitConfig(image_size=6, channels=1, patch_size=3, embed_dim=8,
                   num_heads=2, num_layers=2, num_classes=3)


def tiny_model(seed=0):
    return V.init_vit(TINY, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        V.VitConfig(image_size=28, patch_size=5)
    with pytest.raises(ValueError):
        V.VitConfig(embed_dim=32, num_heads=5)


def test_config_derived_quantities():
    c = V.DESK
    assert (c.grid, c.num_patches, c.head_dim, c.patch_dim, c.hidden) == (4, 16, 8, 49, 128)


def test_param_inventory_and_init():
    m = tiny_model(3)
    assert m["patch_embed"].shape == (9, 8)
    assert m["cls_token"].shape == (8,)
    assert m["pos_embed"].shape == (5, 8)
    assert m["layers.0.wq"].shape == (8, 8)
    assert m["layers.1.ffn1"].shape == (8, 32)
    assert m["layers.1.ffn2"].shape == (32, 8)
    assert m["head"].shape == (8, 3)
    assert np.array_equal(m["layers.0.ln1.gamma"].data, np.ones(8))
    assert np.array_equal(m["layers.0.ln2.beta"].data, np.zeros(8))
    # truncated at two standard deviations
    assert np.abs(m["patch_embed"].data).max() <= 0.04
    assert m["patch_embed"].data.std() > 0.01


def test_init_deterministic():
    a, b = tiny_model(7), tiny_model(7)
    for k in a.params:
        assert np.array_equal(a[k].data, b[k].data)


def test_patchify_hand_example():
    # 4x4 image, P=2: patch row 1 is the top-right block
    img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    p = V.patchify(img, 2)
    assert p.shape == (4, 4)
    assert np.array_equal(p[0], [0, 1, 4, 5])
    assert np.array_equal(p[1], [2, 3, 6, 7])
    assert np.array_equal(p[2], [8, 9, 12, 13])
    assert np.array_equal(p[3], [10, 11, 14, 15])


def test_patchify_roundtrip():
    r = np.random.default_rng(0)
    img = r.standard_normal((2, 28, 28, 3))
    p = V.patchify(img, 7)
    back = V.unpatchify(p, 28, 7, 3)
    assert np.array_equal(back, img)


def test_patchify_t_matches_plain_and_differentiates():
    r = np.random.default_rng(1)
    img = r.standard_normal((6, 6, 2))
    pt = V.patchify_t(T.Tensor(img), 3)
    assert np.array_equal(pt.data, V.patchify(img, 3))

    g = T.Graph()
    x = g.watch(T.Tensor(img.copy()))
    w = r.standard_normal((4, 18))
    loss = T.tsum(T.mul(V.patchify_t(x, 3), T.Tensor(w)))
    g.backward(loss)

    def f(a):
        return float((V.patchify(a, 3) * w).sum())

    assert rel_err(x.grad, fd_grad(f, img.copy())) < 1e-7


def test_forward_matches_reference_full():
    m = tiny_model(11)
    r = np.random.default_rng(2)
    img = r.standard_normal((6, 6, 1))
    logits, rec = V.forward(m, img)
    ref_logits, ref_maps = reference_forward(m, img)
    assert logits.shape == (3,)
    assert rel_err(logits.data, ref_logits) < 1e-12
    assert len(rec.layers) == 2
    for got, want in zip(rec.layers, ref_maps):
        assert got.shape == (2, 5, 5)
        assert rel_err(got, want) < 1e-12
        assert np.allclose(got.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_matches_reference_subset():
    m = tiny_model(12)
    r = np.random.default_rng(3)
    img = r.standard_normal((6, 6, 1))
    logits, rec = V.forward(m, img, retained=np.array([1, 3]))
    ref_logits, ref_maps = reference_forward(m, img, retained=[1, 3])
    assert rel_err(logits.data, ref_logits) < 1e-12
    assert rec.layers[0].shape == (2, 3, 3)
    assert rel_err(rec.layers[-1], ref_maps[-1]) < 1e-12


def test_full_index_set_equals_none():
    m = tiny_model(13)
    img = np.random.default_rng(4).standard_normal((6, 6, 1))
    a, _ = V.forward(m, img)
    b, _ = V.forward(m, img, retained=np.arange(4))
    assert np.array_equal(a.data, b.data)


def test_batched_matches_single():
    m = tiny_model(14)
    imgs = np.random.default_rng(5).standard_normal((3, 6, 6, 1))
    batched, rec = V.forward(m, imgs)
    assert batched.shape == (3, 3)
    assert rec.layers[0].shape == (3, 2, 5, 5)
    for i in range(3):
        single, _ = V.forward(m, imgs[i])
        assert rel_err(batched.data[i], single.data) < 1e-12


def test_batched_per_image_retained():
    m = tiny_model(15)
    imgs = np.random.default_rng(6).standard_normal((2, 6, 6, 1))
    idx = np.array([[0, 2], [1, 3]])
    batched, _ = V.forward(m, imgs, retained=idx)
    for i in range(2):
        single, _ = V.forward(m, imgs[i], retained=idx[i])
        assert rel_err(batched.data[i], single.data) < 1e-12


def test_retained_validation():
    m = tiny_model(16)
    img = np.zeros((6, 6, 1))
    with pytest.raises(V.EmptyRetained):
        V.forward(m, img, retained=np.array([], dtype=int))
    with pytest.raises(IndexError):
        V.forward(m, img, retained=np.array([4]))
    with pytest.raises(T.ShapeMismatch):
        V.forward(m, np.zeros((5, 5, 1)))


def test_cls_attention_alignment():
    m = tiny_model(17)
    img = np.random.default_rng(7).standard_normal((6, 6, 1))
    retained = np.array([0, 2, 3])
    _, rec = V.forward(m, img, retained=retained)
    a = V.cls_attention(rec)
    assert a.shape == (3,)
    assert np.all(a >= 0)
    # row 0 of the final map is CLS; dropping its self-weight leaves retained order
    final = rec.layers[-1]
    manual = final[:, 0, 1:].mean(axis=0)
    assert np.array_equal(a, manual)
    # batched
    _, rec_b = V.forward(m, img[None], retained=retained)
    assert V.cls_attention(rec_b).shape == (1, 3)


def test_end_to_end_gradient_image_and_params():
    # wide init so the image meaningfully moves the loss; std=0.02 leaves
    # finite differences below float64 resolution
    def fresh():
        return V.init_vit(TINY, np.random.default_rng(18), std=0.4)

    m = fresh()
    r = np.random.default_rng(8)
    img = r.standard_normal((6, 6, 1))
    label = 1

    g = T.Graph()
    x = g.watch(T.Tensor(img.copy()))
    for p in m.parameters():
        g.watch(p)
    logits, _ = V.forward(m, x)
    loss = T.cross_entropy(logits, label)
    g.backward(loss)

    def loss_at_image(a):
        lo, _ = V.forward(fresh(), a)
        return T.cross_entropy(lo, label).item()

    assert rel_err(x.grad, fd_grad(loss_at_image, img.copy())) < 1e-5

    for name in ("patch_embed", "cls_token", "layers.0.wq", "layers.1.ffn2",
                 "layers.0.ln1.gamma", "pos_embed", "head"):
        base = m[name].data.copy()

        def loss_at_param(w, name=name, base=base):
            m2 = fresh()
            m2.params[name].data = w.reshape(base.shape)
            lo, _ = V.forward(m2, img)
            return T.cross_entropy(lo, label).item()

        e = rel_err(m[name].grad, fd_grad(loss_at_param, base.copy().ravel()).reshape(base.shape))
        assert e < 1e-5, f"{name}: {e}"


def test_forward_mac_tags():
    m = tiny_model(19)
    img = np.zeros((6, 6, 1))
    g = T.Graph()
    x = g.watch(T.Tensor(img))
    V.forward(m, x, retained=np.array([0, 1, 2]))
    tvar = 4  # 3 retained + cls
    D = 8
    assert g.macs["sa"] == 2 * (3 * tvar * D * D + 2 * tvar * tvar * D)
    assert g.macs["ffn"] == 2 * (8 * tvar * D * D)
    assert g.macs["embed"] == 3 * 9 * D
    assert g.macs["head"] == D * 3


def test_predict_and_evaluate():
    m = tiny_model(20)
    imgs = np.random.default_rng(9).standard_normal((5, 6, 6, 1))
    logits = V.predict(m, imgs, batch_size=2)
    assert logits.shape == (5, 3)
    for i in range(5):
        single, _ = V.forward(m, imgs[i])
        assert rel_err(logits[i], single.data) < 1e-12
    labels = logits.argmax(axis=1)
    assert V.evaluate(m, imgs, labels) == 1.0
    labels2 = labels.copy()
    labels2[0] = (labels2[0] + 1) % 3
    assert V.evaluate(m, imgs, labels2) == pytest.approx(0.8)


def test_forward_deterministic():
    m = tiny_model(21)
    img = np.random.default_rng(10).standard_normal((6, 6, 1))
    a, _ = V.forward(m, img)
    b, _ = V.forward(m, img)
    assert np.array_equal(a.data, b.data)


def test_model_copy_is_deep():
    m = tiny_model(22)
    c = m.copy()
    c["head"].data[0, 0] += 1.0
    assert m["head"].data[0, 0] != c["head"].data[0, 0]
