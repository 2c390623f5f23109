"""Checkpoint serialization, netpbm export, and run-config validation."""

import json

import numpy as np
import pytest

from conftest import MINI_CFG
from sparseinvert import checkpoint as CK
from sparseinvert import config as CF
from sparseinvert import imagefiles as IM
from sparseinvert import vit as V
from sparseinvert.data import BadMagic, IoError, TruncatedFile
from sparseinvert.invert import SparseImage


# ---------------------------------------------------------------- checkpoint

def test_save_load_save_byte_identity(mini_teacher, tmp_path):
    p1 = tmp_path / "a.smiv"
    p2 = tmp_path / "b.smiv"
    CK.save_checkpoint(mini_teacher, p1)
    m = CK.load_checkpoint(p1)
    CK.save_checkpoint(m, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert m.config == mini_teacher.config


def test_loaded_model_logits_reproducible(mini_teacher, tmp_path):
    p = tmp_path / "m.smiv"
    CK.save_checkpoint(mini_teacher, p)
    m1 = CK.load_checkpoint(p)
    m2 = CK.load_checkpoint(p)
    x = np.random.default_rng(0).uniform(size=(3, 14, 14, 1))
    l1, _ = V.forward(m1, x)
    l2, _ = V.forward(m2, x)
    assert np.array_equal(l1.data, l2.data)
    # params round through f32 exactly once; every load agrees bit for bit
    for n in m1.params:
        assert np.array_equal(m1.params[n].data, m2.params[n].data)
        assert m1.params[n].data.dtype == np.float64


def test_storage_is_f32(mini_teacher):
    blob = CK.serialize(mini_teacher)
    m = CK.deserialize(blob)
    for n, t in m.params.items():
        assert np.array_equal(t.data, mini_teacher.params[n].data.astype(np.float32))


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.smiv"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic):
        CK.load_checkpoint(p)


def test_truncation_rejected(mini_teacher, tmp_path):
    blob = CK.serialize(mini_teacher)
    p = tmp_path / "cut.smiv"
    p.write_bytes(blob[:-11])
    with pytest.raises(TruncatedFile):
        CK.load_checkpoint(p)


def test_version_mismatch_refuses(mini_teacher):
    blob = bytearray(CK.serialize(mini_teacher))
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(CK.VersionMismatch):
        CK.deserialize(bytes(blob))


def test_missing_tensor_detected(mini_teacher):
    params = {k: v for k, v in mini_teacher.params.items() if k != "head"}
    broken = V.VitModel(mini_teacher.config, params)
    with pytest.raises(CK.CorruptCheckpoint, match="head"):
        CK.deserialize(CK.serialize(broken))


def test_trailing_bytes_detected(mini_teacher):
    with pytest.raises(CK.CorruptCheckpoint, match="trailing"):
        CK.deserialize(CK.serialize(mini_teacher) + b"x")


# ------------------------------------------------------------------- netpbm

def _img(canvas, retained, patch_size=7):
    return SparseImage(canvas=canvas, retained=np.asarray(retained),
                       history=[], patch_size=patch_size)


def test_constant_image_pixel_value(tmp_path):
    canvas = np.full((14, 14, 1), 0.4)
    p = tmp_path / "c.pgm"
    IM.write_image(_img(canvas, np.arange(4)), p)
    arr = IM.read_image(p)
    assert arr.shape == (14, 14, 1)
    assert np.all(arr == round(255 * 0.4))


def test_stopped_patch_is_black(tmp_path):
    canvas = np.full((14, 14, 1), 0.8)
    p = tmp_path / "s.pgm"
    IM.write_image(_img(canvas, [0, 1, 3]), p)  # patch 2 stopped
    arr = IM.read_image(p)[..., 0]
    assert np.all(arr[7:, :7] == 0)
    assert np.all(arr[:7, :] == 204) and np.all(arr[7:, 7:] == 204)


def test_round_trip_preserves_bytes(tmp_path):
    rng = np.random.default_rng(7)
    canvas = rng.uniform(size=(28, 28, 3))
    im = _img(canvas, np.arange(16))
    p = tmp_path / "rt.ppm"
    IM.write_image(im, p)
    assert p.read_bytes() == IM.image_bytes(im)
    arr = IM.read_image(p)
    expect = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    assert np.array_equal(arr, expect)


def test_magic_matches_channel_count():
    gray = IM.image_bytes(_img(np.zeros((7, 7, 1)), [0]))
    rgb = IM.image_bytes(_img(np.zeros((7, 7, 3)), [0]))
    assert gray.startswith(b"P5\n7 7\n255\n")
    assert rgb.startswith(b"P6\n7 7\n255\n")


def test_parser_skips_comments():
    payload = bytes(range(16)) * 3 + bytes(range(16))
    buf = b"P5 # gray\n# a comment line\n 8\t8\n255\n" + payload[:64]
    arr = IM.parse_image(buf)
    assert arr.shape == (8, 8, 1)
    assert arr.tobytes() == payload[:64]


def test_bad_files_raise_io_error(tmp_path):
    with pytest.raises(IoError):
        IM.parse_image(b"")
    with pytest.raises(IoError):
        IM.parse_image(b"P4\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(IoError):
        IM.parse_image(b"P5\n2 2\n255\n" + b"\x00" * 3)  # short payload
    with pytest.raises(IoError):
        IM.parse_image(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(IoError):
        IM.image_bytes(_img(np.zeros((7, 7, 2)), [0]))
    with pytest.raises(IoError):
        IM.read_image(tmp_path / "missing.pgm")


def test_values_clip_to_display_range(tmp_path):
    canvas = np.array([[[-0.5], [1.7]]])  # 1x2, out of range both sides
    im = _img(canvas, [0, 1], patch_size=1)
    buf = IM.image_bytes(im)
    assert buf.endswith(bytes([0, 255]))


# ------------------------------------------------------------------- config

def test_defaults_fill_in():
    rc = CF.build({"command": "invert"})
    assert rc.seed == 0 and rc.schedule is None
    assert rc.vit == V.VitConfig()
    assert rc.inversion.total_iters == 400
    assert rc.canonical["quant"]["calib"] == "invert"


def test_command_required():
    with pytest.raises(CF.ConfigError, match="command"):
        CF.build({})


def test_unknown_keys_rejected_with_path():
    with pytest.raises(CF.ConfigError, match="bogus"):
        CF.build({"command": "train", "bogus": 1})
    with pytest.raises(CF.ConfigError, match="train.warmup"):
        CF.build({"command": "train", "train": {"warmup": 2}})


def test_type_errors_rejected():
    with pytest.raises(CF.ConfigError, match="vit.embed_dim"):
        CF.build({"command": "train", "vit": {"embed_dim": "wide"}})
    with pytest.raises(CF.ConfigError, match="seed"):
        CF.build({"command": "train", "seed": True})
    with pytest.raises(CF.ConfigError, match="labels"):
        CF.build({"command": "invert", "labels": [0, "one"]})


def test_choice_fields_enforced():
    with pytest.raises(CF.ConfigError, match="command"):
        CF.build({"command": "frobnicate"})
    with pytest.raises(CF.ConfigError, match="quant.calib"):
        CF.build({"command": "quantize", "quant": {"calib": "psychic"}})


def test_several_errors_reported_together():
    try:
        CF.build({"command": "train", "bogus": 1, "vit": {"embed_dim": "x"}})
    except CF.ConfigError as e:
        msg = str(e)
    assert "bogus" in msg and "vit.embed_dim" in msg


def test_range_errors_surface_as_config_errors():
    with pytest.raises(CF.ConfigError):
        CF.build({"command": "invert", "schedule": "500:0.3",
                  "inversion": {"total_iters": 100}})
    with pytest.raises(CF.ConfigError):
        CF.build({"command": "train", "vit": {"embed_dim": 30, "num_heads": 4}})


def test_overrides_parse_json_or_bare_strings():
    raw = CF.apply_overrides({"command": "invert"},
                             ["seed=3", "schedule=50:0.3", "labels=[1,2]",
                              "train.robust=false"])
    rc = CF.build(raw)
    assert rc.seed == 3
    assert rc.schedule.stages == ((50, 0.3),)
    assert rc.labels == (1, 2)
    assert rc.canonical["train"]["robust"] is False


def test_override_must_have_equals():
    with pytest.raises(CF.ConfigError):
        CF.apply_overrides({}, ["seed"])


def test_hash_ignores_key_order_and_tracks_values():
    a = CF.build({"command": "invert", "seed": 1, "vit": {"embed_dim": 32}})
    b = CF.build({"vit": {"embed_dim": 32}, "seed": 1, "command": "invert"})
    c = CF.build({"command": "invert", "seed": 2})
    assert a.config_hash == b.config_hash
    assert a.config_hash != c.config_hash


def test_transfer_config_wired_from_sections():
    rc = CF.build({"command": "transfer", "seed": 5,
                   "schedule": "10:0.3", "inversion": {"total_iters": 40},
                   "transfer": {"temperature": 4.0, "probe_mode": "full"}})
    assert rc.transfer.seed == 5
    assert rc.transfer.inversion.total_iters == 40
    assert rc.transfer.schedule.stages == ((10, 0.3),)
    assert rc.transfer.temperature == 4.0
