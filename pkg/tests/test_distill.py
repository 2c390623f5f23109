"""Knowledge transfer: KD loss values and gradients, the transfer loop's
fixed point and determinism, and the background-hallucination probe."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MINI_CFG
from numdiff import fd_grad, rel_err
from sparseinvert import data as D
from sparseinvert import distill as KD
from sparseinvert import invert as I
from sparseinvert import tensor as T
from sparseinvert import train as TR
from sparseinvert import vit as V


def test_kd_loss_closed_form_two_class():
    tl = np.array([[1.0, 0.0]])
    sl = T.Tensor(np.array([[0.0, 1.0]]))
    p = 1.0 / (1.0 + math.exp(-1.0))
    want = p * math.log(p / (1 - p)) + (1 - p) * math.log((1 - p) / p)
    assert abs(KD.kd_loss(tl, sl, 1.0).item() - want) < 1e-12


def test_kd_loss_identical_zero():
    tl = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 3.0]])
    assert abs(KD.kd_loss(tl, T.Tensor(tl.copy()), 3.0).item()) < 1e-15


def test_kd_loss_high_temperature_vanishes():
    tl = np.array([[4.0, -2.0]])
    sl = T.Tensor(np.array([[-3.0, 5.0]]))
    assert KD.kd_loss(tl, sl, 1e7).item() < 1e-12


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_kd_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    tl = rng.normal(size=(3, 5)) * 3
    sl = T.Tensor(rng.normal(size=(3, 5)) * 3)
    assert KD.kd_loss(tl, sl, 2.0).item() >= -1e-12


def test_kd_loss_gradient_matches_fd():
    rng = np.random.default_rng(7)
    tl = rng.normal(size=(2, 4))
    sl0 = rng.normal(size=(2, 4))

    g = T.Graph()
    sl = g.watch(T.Tensor(sl0.copy()))
    loss = KD.kd_loss(tl, sl, 5.0)
    g.backward(loss)

    def f(x):
        return KD.kd_loss(tl, T.Tensor(x), 5.0).item()

    assert rel_err(sl.grad, fd_grad(f, sl0.copy())) < 1e-5


def test_kd_loss_rejects_bad_temperature():
    with pytest.raises(ValueError):
        KD.kd_loss(np.zeros((1, 2)), T.Tensor(np.zeros((1, 2))), 0.0)


def test_transfer_config_validation():
    with pytest.raises(ValueError):
        KD.TransferConfig(temperature=-1.0)
    with pytest.raises(ValueError):
        KD.TransferConfig(student_lr=0.0)
    with pytest.raises(ValueError):
        KD.TransferConfig(batch_size=0)
    with pytest.raises(ValueError):
        KD.TransferConfig(probe_mode="frozen")
    with pytest.raises(I.ScheduleOutOfRange):
        KD.TransferConfig(schedule=I.StopSchedule.parse("500:0.3"),
                          inversion=I.InversionConfig(total_iters=100))


def test_iterations_to_accuracy_examples():
    rep = KD.TransferReport(loss_curve=np.zeros(3),
                            acc_curve=np.array([0.1, 0.5, 0.9]),
                            samples=24, iterations=3, batch_size=8)
    assert KD.iterations_to_accuracy(rep, 0.9) == (24, 3)
    assert KD.iterations_to_accuracy(rep, 0.5) == (16, 2)
    assert KD.iterations_to_accuracy(rep, 0.95) is None
    with pytest.raises(ValueError):
        KD.iterations_to_accuracy(rep, 0.0)
    with pytest.raises(ValueError):
        KD.iterations_to_accuracy(rep, 1.5)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=50, deadline=None)
def test_iterations_monotone_in_threshold(curve, th1, th2):
    rep = KD.TransferReport(loss_curve=np.zeros(len(curve)),
                            acc_curve=np.array(curve),
                            samples=4 * len(curve), iterations=len(curve),
                            batch_size=4)
    lo, hi = sorted((th1, th2))
    a, b = KD.iterations_to_accuracy(rep, lo), KD.iterations_to_accuracy(rep, hi)
    if b is not None:
        assert a is not None and a[1] <= b[1]


def test_make_student_resets_only_head(mini_teacher):
    student = KD.make_student(mini_teacher, np.random.default_rng(3))
    assert not np.array_equal(student.params["head"].data,
                              mini_teacher.params["head"].data)
    for name in student.names():
        if name != "head":
            assert np.array_equal(student.params[name].data,
                                  mini_teacher.params[name].data)


def test_transfer_fixed_point(mini_teacher, mini_sets):
    # identical student: softened distributions coincide, probe has nothing
    # to learn, and accuracy never moves
    cfg = KD.TransferConfig(batch_size=4, total_iters=4,
                            inversion=I.InversionConfig(total_iters=6, lr=0.1),
                            seed=2)
    student = mini_teacher.copy()
    rep = KD.transfer(mini_teacher, student, mini_sets, cfg)
    assert np.max(np.abs(rep.loss_curve)) < 1e-12
    base = V.evaluate(mini_teacher, mini_sets.images, mini_sets.labels)
    assert np.allclose(rep.acc_curve, base, atol=1e-9)


def test_transfer_loss_decreases(mini_teacher, mini_sets):
    cfg = KD.TransferConfig(temperature=4.0, student_lr=0.5, batch_size=8,
                            total_iters=12,
                            inversion=I.InversionConfig(total_iters=15, lr=0.1),
                            seed=5)
    student = KD.make_student(mini_teacher, np.random.default_rng(1))
    rep = KD.transfer(mini_teacher, student, mini_sets, cfg)
    assert rep.loss_curve[-1] < rep.loss_curve[0]
    assert rep.samples == 8 * 12 and rep.batch_size == 8


def test_transfer_sparse_and_dense_share_code_path(mini_teacher, mini_sets):
    base = dict(temperature=4.0, student_lr=0.5, batch_size=4, total_iters=3,
                inversion=I.InversionConfig(total_iters=8, lr=0.1), seed=7)
    reports = []
    for sched in (None, I.StopSchedule(stages=())):
        student = KD.make_student(mini_teacher, np.random.default_rng(1))
        reports.append(KD.transfer(mini_teacher, student, mini_sets,
                                   KD.TransferConfig(schedule=sched, **base)))
    assert np.array_equal(reports[0].loss_curve, reports[1].loss_curve)
    assert np.array_equal(reports[0].acc_curve, reports[1].acc_curve)


def test_transfer_deterministic(mini_teacher, mini_sets):
    cfg = KD.TransferConfig(batch_size=4, total_iters=3,
                            inversion=I.InversionConfig(total_iters=6, lr=0.1),
                            seed=9)
    curves = []
    for _ in range(2):
        student = KD.make_student(mini_teacher, np.random.default_rng(4))
        rep = KD.transfer(mini_teacher, student, mini_sets, cfg)
        curves.append((rep.loss_curve, rep.acc_curve))
    assert np.array_equal(curves[0][0], curves[1][0])
    assert np.array_equal(curves[0][1], curves[1][1])


def test_transfer_full_mode_updates_backbone(mini_teacher, mini_sets):
    cfg = KD.TransferConfig(temperature=4.0, student_lr=0.2, batch_size=4,
                            total_iters=2, probe_mode="full",
                            inversion=I.InversionConfig(total_iters=6, lr=0.1),
                            seed=3)
    student = KD.make_student(mini_teacher, np.random.default_rng(2))
    before = student.params["layers.0.wq"].data.copy()
    KD.transfer(mini_teacher, student, mini_sets, cfg)
    assert not np.array_equal(before, student.params["layers.0.wq"].data)


def test_background_mass_fraction_hand_example():
    # 14x14, P=7: patch 0 holds mass 2, patch 1 mass 1, patches 2/3 stopped
    canvas = np.zeros((14, 14, 1))
    canvas[0, 0, 0] = 2.0
    canvas[0, 7, 0] = 1.0
    canvas[7, 0, 0] = 5.0   # stopped: must not count
    img = I.SparseImage(canvas=canvas, retained=np.array([0, 1]),
                        history=[(1, np.array([2, 3]))], patch_size=7)
    acls = np.array([0.9, 0.1])
    assert KD.background_mass_fraction(img, acls, k=1) == pytest.approx(1.0 / 3.0)
    assert KD.background_mass_fraction(img, acls, k=2) == 0.0
    with pytest.raises(ValueError):
        KD.background_mass_fraction(img, acls, k=0)


def test_background_mass_zero_canvas():
    img = I.SparseImage(canvas=np.zeros((14, 14, 1)),
                        retained=np.arange(4), history=[], patch_size=7)
    assert KD.background_mass_fraction(img, np.ones(4), k=1) == 0.0


@pytest.fixture(scope="module")
def textured_teacher():
    # rho ties the background texture index to the label, so this teacher
    # is free to lean on background cues instead of the glyph
    cfg = D.SyntheticConfig(noise_std=0.03, texture_correlation=0.95)
    rng = np.random.default_rng(21)
    train = D.make_dataset(cfg, 512, rng)
    val = D.make_dataset(cfg, 128, rng)
    model, _ = TR.train_robust_teacher(
        train, V.DESK,
        TR.TrainConfig(epochs=40, batch_size=32, lr=1e-3, seed=1, init_std=0.05),
        eps_max=0.25, clean_epochs=15)
    assert V.evaluate(model, val.images, val.labels) >= 0.9
    return model


def test_early_stopping_suppresses_hallucinated_background(textured_teacher):
    # dense inversion of a texture-biased teacher paints texture into the
    # background; stopping low-attention patches removes that mass
    labels = np.arange(6)
    icfg = I.InversionConfig(total_iters=300, lr=0.25, alpha_tv=0.1, seed=3)
    sched = I.StopSchedule.parse("50:0.3,100:0.3,200:0.3")
    dense = I.invert_batch(textured_teacher, icfg, labels)
    sparse = I.invert_batch(textured_teacher, icfg, labels, schedule=sched)
    dfrac = [KD.background_mass_fraction(im, a, k=4)
             for im, a in zip(dense.images, dense.final_acls)]
    sfrac = [KD.background_mass_fraction(im, a, k=4)
             for im, a in zip(sparse.images, sparse.final_acls)]
    assert np.median(dfrac) > np.median(sfrac)
