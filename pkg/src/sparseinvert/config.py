"""Run configuration for the command-line shell.

A run is a JSON object validated against the schema below; unknown keys
and type errors are rejected before anything touches the filesystem.
Command-line flags override file values via dotted paths, so
``--set inversion.total_iters=200`` beats the file and the default.

All randomness downstream flows from the single top-level seed through
the named stream splitter in seeds.py.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from . import vit as V
from .data import SyntheticConfig
from .distill import TransferConfig
from .invert import InversionConfig, StopSchedule

COMMANDS = ("train", "invert", "quantize", "transfer", "probe", "sweep", "report")


class ConfigError(ValueError):
    pass


class _Leaf:
    def __init__(self, kind, default, choices=None):
        self.kind = kind
        self.default = default
        self.choices = choices


def _ok(kind, v):
    if kind == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "float":
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind == "str":
        return isinstance(v, str)
    if kind == "bool":
        return isinstance(v, bool)
    if kind == "str?":
        return v is None or isinstance(v, str)
    if kind.endswith("_list"):
        inner = kind[:-5]
        return isinstance(v, list) and all(_ok(inner, x) for x in v)
    raise AssertionError(kind)


_SCHEMA = {
    "command": _Leaf("str", None, COMMANDS),
    "seed": _Leaf("int", 0),
    "out_dir": _Leaf("str", "run"),
    "checkpoint": _Leaf("str?", None),
    "labels": _Leaf("int_list", []),
    "schedule": _Leaf("str", "none"),
    "vit": {
        "image_size": _Leaf("int", 28),
        "channels": _Leaf("int", 1),
        "patch_size": _Leaf("int", 7),
        "embed_dim": _Leaf("int", 32),
        "num_heads": _Leaf("int", 4),
        "num_layers": _Leaf("int", 3),
        "num_classes": _Leaf("int", 10),
        "ffn_hidden": _Leaf("int", 0),
        "ln_eps": _Leaf("float", 1e-5),
    },
    "data": {
        "train_size": _Leaf("int", 1024),
        "val_size": _Leaf("int", 256),
        "texture_correlation": _Leaf("float", 0.0),
        "noise_std": _Leaf("float", 0.03),
        "images_idx": _Leaf("str?", None),
        "labels_idx": _Leaf("str?", None),
    },
    "train": {
        "epochs": _Leaf("int", 60),
        "batch_size": _Leaf("int", 32),
        "lr": _Leaf("float", 1e-3),
        "init_std": _Leaf("float", 0.05),
        "robust": _Leaf("bool", True),
        "eps_max": _Leaf("float", 0.25),
        "clean_epochs": _Leaf("int", 20),
    },
    "inversion": {
        "total_iters": _Leaf("int", 400),
        "lr": _Leaf("float", 0.25),
        "alpha_tv": _Leaf("float", 1e-4),
        "init": _Leaf("str", "normal"),
    },
    "transfer": {
        "temperature": _Leaf("float", 20.0),
        "student_lr": _Leaf("float", 0.1),
        "batch_size": _Leaf("int", 16),
        "total_iters": _Leaf("int", 30),
        "probe_mode": _Leaf("str", "linear", ("linear", "full")),
    },
    "quant": {
        "k_weights": _Leaf("int", 8),
        "k_acts": _Leaf("int", 8),
        "calib": _Leaf("str", "invert", ("invert", "noise", "val")),
        "calib_size": _Leaf("int", 32),
    },
    "sweep": {
        "levels": _Leaf("float_list", [0.0, 0.5, 0.77]),
        "stage_at": _Leaf("int", 0),
        "repeats": _Leaf("int", 3),
    },
    "probe": {
        "k": _Leaf("int", 16),
        "seeds": _Leaf("int", 20),
        "arm_iters": _Leaf("int", 60),
        "arm_lr": _Leaf("float", 0.1),
    },
    "report": {
        "inputs": _Leaf("str_list", []),
    },
}


def _validate(raw, schema, path, errs, out):
    if not isinstance(raw, dict):
        errs.append(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
        return
    for key in raw:
        if key not in schema:
            errs.append(f"unknown key {'.'.join(filter(None, (path, key)))!r}")
    for key, spec in schema.items():
        here = ".".join(filter(None, (path, key)))
        if isinstance(spec, dict):
            out[key] = {}
            _validate(raw.get(key, {}), spec, here, errs, out[key])
            continue
        if key in raw:
            v = raw[key]
            if not _ok(spec.kind, v):
                errs.append(f"{here}: expected {spec.kind}, got {v!r}")
                continue
            if spec.choices is not None and v not in spec.choices:
                errs.append(f"{here}: {v!r} not one of {list(spec.choices)}")
                continue
            out[key] = v
        elif spec.default is None and spec.kind != "str?":
            errs.append(f"{here} is required")
        else:
            out[key] = spec.default


def apply_overrides(raw: dict, assignments) -> dict:
    """Dotted key=value pairs; values parse as JSON, bare words as strings."""
    for a in assignments or ():
        dotted, sep, text = a.partition("=")
        if not sep or not dotted:
            raise ConfigError(f"override {a!r} must look like key.path=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {a!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = value
    return raw


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out_dir: str
    checkpoint: str | None
    labels: tuple
    schedule: StopSchedule | None
    vit: V.VitConfig
    synth: SyntheticConfig
    inversion: InversionConfig
    transfer: TransferConfig
    canonical: dict = field(repr=False)

    def section(self, name: str) -> dict:
        return self.canonical[name]

    @property
    def config_hash(self) -> str:
        # out_dir says where artifacts land, not what the run computes;
        # the same run in two directories hashes the same
        sem = {k: v for k, v in self.canonical.items() if k != "out_dir"}
        blob = json.dumps(sem, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build(raw: dict) -> RunConfig:
    """Validate against the schema, fill defaults, and construct every
    sub-config eagerly so range errors also surface before any side effect."""
    errs: list[str] = []
    out: dict = {}
    _validate(raw, _SCHEMA, "", errs, out)
    if errs:
        raise ConfigError("; ".join(errs))
    try:
        vit = V.VitConfig(**out["vit"])
        synth = SyntheticConfig(num_classes=vit.num_classes,
                                image_size=vit.image_size,
                                texture_correlation=out["data"]["texture_correlation"],
                                noise_std=out["data"]["noise_std"])
        inv = InversionConfig(total_iters=out["inversion"]["total_iters"],
                              lr=out["inversion"]["lr"],
                              alpha_tv=out["inversion"]["alpha_tv"],
                              seed=out["seed"],
                              init=out["inversion"]["init"])
        sched = StopSchedule.parse(out["schedule"])
        tr = TransferConfig(temperature=out["transfer"]["temperature"],
                            student_lr=out["transfer"]["student_lr"],
                            batch_size=out["transfer"]["batch_size"],
                            total_iters=out["transfer"]["total_iters"],
                            probe_mode=out["transfer"]["probe_mode"],
                            schedule=sched, inversion=inv, seed=out["seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(command=out["command"], seed=out["seed"],
                     out_dir=out["out_dir"], checkpoint=out["checkpoint"],
                     labels=tuple(out["labels"]), schedule=sched, vit=vit,
                     synth=synth, inversion=inv, transfer=tr, canonical=out)


def load_config(path=None, overrides=None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    return build(apply_overrides(raw, overrides))
