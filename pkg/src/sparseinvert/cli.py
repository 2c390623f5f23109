"""Command-line shell.

    sparseinvert <command> [--config run.json] [--set key.path=value ...]

Commands: train, invert, quantize, transfer, probe, sweep, report.
Every run validates its configuration up front, then writes its
artifacts plus a manifest.json (config hash, seed, metrics, output
paths) into --out-dir. Failures exit non-zero with a one-line JSON
error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import costs as C
from . import data as D
from . import distill as KD
from . import invert as I
from . import quantize as Q
from . import train as TR
from . import vit as V
from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMMANDS, ConfigError, RunConfig, load_config
from .imagefiles import write_image
from .seeds import rng_stream


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _make_parser() -> _Parser:
    p = _Parser(prog="sparseinvert", add_help=True)
    p.add_argument("command", nargs="?", choices=COMMANDS,
                   help="overrides the config file's command")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE",
                   help="override a config value (JSON literal or bare string)")
    p.add_argument("--out-dir", help="shorthand for --set out_dir=...")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=...")
    p.add_argument("--checkpoint", help="shorthand for --set checkpoint=...")
    p.add_argument("--schedule", help="shorthand for --set schedule=...")
    return p


def _model(rc: RunConfig) -> V.VitModel:
    """Commands that inspect a model read its architecture from the
    checkpoint; the config's vit section only describes what train builds."""
    if rc.checkpoint is None:
        raise ConfigError(f"command {rc.command!r} needs a checkpoint path")
    return load_checkpoint(rc.checkpoint)


def _synth_for(cfg: V.VitConfig, rc: RunConfig) -> D.SyntheticConfig:
    sec = rc.section("data")
    return D.SyntheticConfig(num_classes=cfg.num_classes,
                             image_size=cfg.image_size, channels=cfg.channels,
                             texture_correlation=sec["texture_correlation"],
                             noise_std=sec["noise_std"])


def _val_dataset(rc: RunConfig, cfg: V.VitConfig) -> D.Dataset:
    rng = rng_stream(rc.seed, "data")
    return D.make_dataset(_synth_for(cfg, rc), rc.section("data")["val_size"], rng)


def _labels(rc: RunConfig, num_classes: int, n: int | None = None) -> np.ndarray:
    if rc.labels:
        lab = np.asarray(rc.labels, dtype=np.int64)
    else:
        lab = np.arange(n if n is not None else num_classes,
                        dtype=np.int64) % num_classes
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ConfigError(f"labels out of range for {num_classes} classes")
    return lab


def cmd_train(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    sec = rc.section("data")
    if (sec["images_idx"] is None) != (sec["labels_idx"] is None):
        raise ConfigError("images_idx and labels_idx must be given together")
    rng = rng_stream(rc.seed, "data")
    if sec["images_idx"] is not None:
        train_set = D.load_idx(sec["images_idx"], sec["labels_idx"])
    else:
        train_set = D.make_dataset(rc.synth, sec["train_size"], rng)
    val = D.make_dataset(rc.synth, sec["val_size"], rng)

    t = rc.section("train")
    tcfg = TR.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                          lr=t["lr"], seed=rc.seed, init_std=t["init_std"])
    if t["robust"]:
        model, rep = TR.train_robust_teacher(train_set, rc.vit, tcfg,
                                             eps_max=t["eps_max"],
                                             clean_epochs=t["clean_epochs"])
    else:
        model, rep = TR.train_teacher(train_set, rc.vit, tcfg)
    save_checkpoint(model, out / "teacher.smiv")
    metrics = {"val_acc": V.evaluate(model, val.images, val.labels),
               "final_train_acc": float(rep.acc_curve[-1]),
               "epochs": t["epochs"]}
    return metrics, {"checkpoint": "teacher.smiv"}


def _image_name(i: int, label: int, channels: int) -> str:
    ext = "pgm" if channels == 1 else "ppm"
    return f"inv_{i:03d}_class{label}.{ext}"


def cmd_invert(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    model = _model(rc)
    labels = _labels(rc, model.config.num_classes)
    res = I.invert_batch(model, rc.inversion, labels, schedule=rc.schedule)
    paths = {}
    for i, (im, y) in enumerate(zip(res.images, labels)):
        name = _image_name(i, int(y), model.config.channels)
        write_image(im, out / name)
        paths[f"image_{i}"] = name
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "mean_cls_loss", "tv", "retained"])
        for t in range(res.loss_cls.shape[0]):
            w.writerow([t + 1, float(res.loss_cls[t].mean()),
                        float(res.tv[t]), int(res.retained_count[t])])
    paths["curves"] = "curves.csv"
    L = model.config.num_patches
    metrics = {"final_cls_loss": float(res.loss_cls[-1].mean()),
               "images": len(res.images),
               "final_retained": int(res.retained_count[-1]),
               "sparsity": 1.0 - float(res.retained_count[-1]) / L}
    return metrics, paths


def cmd_quantize(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    model = _model(rc)
    q = rc.section("quant")
    n = q["calib_size"]
    if q["calib"] == "invert":
        labels = _labels(rc, model.config.num_classes, n)
        res = I.invert_batch(model, rc.inversion, labels, schedule=rc.schedule)
        calib = res.images
    elif q["calib"] == "noise":
        cfg = model.config
        noise = rng_stream(rc.seed, "data").standard_normal(
            (n, cfg.image_size, cfg.image_size, cfg.channels))
        calib = Q.dense_calibration(noise, cfg.patch_size)
    else:
        ds = D.make_dataset(_synth_for(model.config, rc), n,
                            rng_stream(rc.seed, "data"))
        calib = Q.dense_calibration(ds.images, model.config.patch_size)
    plan = Q.make_plan(model, calib, q["k_weights"], q["k_acts"])
    val = _val_dataset(rc, model.config)
    metrics = {"fp_acc": V.evaluate(model, val.images, val.labels),
               "quant_acc": Q.evaluate_quantized(model, plan, val),
               "k_weights": q["k_weights"], "k_acts": q["k_acts"],
               "calib": q["calib"]}
    with open(out / "plan.json", "w") as f:
        f.write(plan.to_json())
    return metrics, {"plan": "plan.json"}


def cmd_transfer(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    teacher = _model(rc)
    student = KD.make_student(teacher, rng_stream(rc.seed, "init"))
    val = _val_dataset(rc, teacher.config)
    report = KD.transfer(teacher, student, val, rc.transfer)
    save_checkpoint(student, out / "student.smiv")
    with open(out / "transfer.json", "w") as f:
        f.write(report.to_json())
    with open(out / "curves.csv", "w", newline="") as f:
        csv.writer(f).writerows(report.curve_rows())
    metrics = {"teacher_acc": V.evaluate(teacher, val.images, val.labels),
               "best_acc": float(np.max(report.acc_curve)),
               "final_acc": float(report.acc_curve[-1]),
               "samples": int(report.samples)}
    paths = {"student": "student.smiv", "report": "transfer.json",
             "curves": "curves.csv"}
    return metrics, paths


def cmd_probe(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    model = _model(rc)
    p = rc.section("probe")
    label = int(rc.labels[0]) if rc.labels else 0
    rows = []
    for s in range(p["seeds"]):
        dcfg = replace(rc.inversion, label=label, seed=s)
        res = I.invert_batch(model, dcfg, np.array([label]))
        pcfg = replace(rc.inversion, total_iters=p["arm_iters"],
                       lr=p["arm_lr"], label=label, seed=s)
        fg, bg = C.loss_contribution_probe(model, pcfg, res.final_acls[0],
                                           k=p["k"])
        rows.append((s, fg, bg))
    with open(out / "probe.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "fg_drop", "bg_drop"])
        w.writerows(rows)
    fgs = np.array([r[1] for r in rows])
    bgs = np.array([r[2] for r in rows])
    metrics = {"seeds": p["seeds"], "k": p["k"],
               "median_fg_drop": float(np.median(fgs)),
               "median_bg_drop": float(np.median(bgs))}
    return metrics, {"csv": "probe.csv"}


def cmd_sweep(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    teacher = _model(rc)
    s = rc.section("sweep")
    val = _val_dataset(rc, teacher.config)
    stage_at = s["stage_at"] if s["stage_at"] > 0 else None
    rows = C.sparsity_sweep(teacher, val, rc.transfer, s["levels"],
                            stage_at=stage_at, repeats=s["repeats"])
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "sparsity", "throughput", "accuracy"])
        for r in rows:
            w.writerow([r["level"], r["sparsity"], r["throughput"],
                        r["accuracy"]])
    # wall-clock throughput stays out of the manifest so reruns compare equal
    metrics = {"rows": len(rows),
               "levels": [r["level"] for r in rows],
               "accuracies": [r["accuracy"] for r in rows]}
    return metrics, {"csv": "sweep.csv"}


def cmd_report(rc: RunConfig, out: Path) -> tuple[dict, dict]:
    inputs = rc.section("report")["inputs"]
    if not inputs:
        raise ConfigError("report needs report.inputs, a list of manifest paths")
    rows = []
    for path in inputs:
        try:
            with open(path) as f:
                m = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise D.IoError(f"cannot read manifest {path}: {e}") from e
        row = {"command": m.get("command"), "seed": m.get("seed"),
               "config_hash": m.get("config_hash")}
        for k, v in sorted(m.get("metrics", {}).items()):
            if isinstance(v, (int, float, str)):
                row[k] = v
        rows.append(row)
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    with open(out / "summary.json", "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
    metrics = {"runs": len(rows)}
    return metrics, {"csv": "summary.csv", "json": "summary.json"}


_DISPATCH = {"train": cmd_train, "invert": cmd_invert, "quantize": cmd_quantize,
             "transfer": cmd_transfer, "probe": cmd_probe, "sweep": cmd_sweep,
             "report": cmd_report}
_NEEDS_CHECKPOINT = ("invert", "quantize", "transfer", "probe", "sweep")


def run(rc: RunConfig) -> dict:
    """Execute one validated run and return its manifest."""
    if rc.command in _NEEDS_CHECKPOINT and rc.checkpoint is None:
        raise ConfigError(f"command {rc.command!r} needs a checkpoint path")
    if rc.command == "report" and not rc.section("report")["inputs"]:
        raise ConfigError("report needs report.inputs, a list of manifest paths")
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics, paths = _DISPATCH[rc.command](rc, out)
    manifest = {"command": rc.command, "config_hash": rc.config_hash,
                "seed": rc.seed,
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "metrics": metrics, "paths": paths}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def main(argv=None) -> int:
    try:
        args = _make_parser().parse_args(argv)
        overrides = list(args.overrides)
        for flag, key in (("out_dir", "out_dir"), ("seed", "seed"),
                          ("checkpoint", "checkpoint"), ("schedule", "schedule")):
            v = getattr(args, flag)
            if v is not None:
                overrides.append(f"{key}={json.dumps(v)}")
        if args.command is not None:
            overrides.append(f"command={json.dumps(args.command)}")
        rc = load_config(args.config, overrides)
        manifest = run(rc)
    except ConfigError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2
    except Exception as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    print(json.dumps(manifest, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
