"""Shared fixtures. The desk teacher is expensive (seconds), so it is
trained once per session and reused by inversion/quant/transfer tests."""

import numpy as np
import pytest

from sparseinvert import data as D
from sparseinvert import train as TR
from sparseinvert import vit as V

DESK_DATA = D.SyntheticConfig(noise_std=0.03)
# mixed adversarial recipe: 20 clean epochs, then 40 with ramped fgsm batches.
# plain training gives a brittle model whose inverted images are pure noise;
# see train_robust_teacher's docstring.
DESK_TRAIN = TR.TrainConfig(epochs=60, batch_size=32, lr=1e-3, seed=0, init_std=0.05)
DESK_EPS = 0.25
DESK_CLEAN_EPOCHS = 20

MINI_CFG = V.VitConfig(image_size=14, channels=1, patch_size=7, embed_dim=16,
                       num_heads=2, num_layers=2, num_classes=4)


@pytest.fixture(scope="session")
def mini_teacher():
    # small but real: a trained model so inversion has something to chase
    ds = D.make_dataset(D.SyntheticConfig(num_classes=4, image_size=28, noise_std=0.02),
                        160, np.random.default_rng(5))
    small = type(ds)(ds.images[:, 7:21, 7:21, :].copy(), ds.labels)
    model, rep = TR.train_teacher(small, MINI_CFG,
                                  TR.TrainConfig(epochs=40, batch_size=16, lr=1e-3,
                                                 seed=3, init_std=0.05))
    assert rep.acc_curve[-1] >= 0.95
    return model


@pytest.fixture(scope="session")
def mini_sets():
    ds = D.make_dataset(D.SyntheticConfig(num_classes=4, image_size=28, noise_std=0.02),
                        240, np.random.default_rng(6))
    small = type(ds)(ds.images[:, 7:21, 7:21, :].copy(), ds.labels)
    return small


@pytest.fixture(scope="session")
def desk_sets():
    rng = np.random.default_rng(11)
    train = D.make_dataset(DESK_DATA, 1024, rng)
    val = D.make_dataset(DESK_DATA, 256, rng)
    return train, val


@pytest.fixture(scope="session")
def desk_teacher(desk_sets):
    train, val = desk_sets
    model, report = TR.train_robust_teacher(train, V.DESK, DESK_TRAIN,
                                            eps_max=DESK_EPS,
                                            clean_epochs=DESK_CLEAN_EPOCHS)
    acc = TR.evaluate(model, val)
    assert acc >= 0.9, f"desk teacher only reached {acc}"
    return model


@pytest.fixture(scope="session")
def desk_teacher_acc(desk_teacher, desk_sets):
    return TR.evaluate(desk_teacher, desk_sets[1])
