"""Command-line entry point: ``irstd {distill,train,eval,predict,synth,profile}``.

Every run directory receives ``config.txt`` (fully resolved flat config plus
a version stamp). An ``INCOMPLETE`` marker sits in the directory until the
command finishes. Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .config import ConfigError, dump_flat, resolve
from .data import (
    IMAGE_SUFFIXES,
    SynthConfig,
    load_dataset,
    read_image,
    read_manifest,
    read_mask,
    synth_generate,
    write_dataset,
    write_mask,
)
from .losses import LossConfig
from .model import ModelConfig, build_model, model_config

OUTPUT_ROOT_ENV = "IRSTD_OUTPUT_ROOT"
log = logging.getLogger("irstd")


class UsageError(Exception):
    pass


COMMON = {
    "run.seed": 0,
    "run.profile": "desk",
    "run.threads": 1,
    "model.stem": 1,
    "model.input_channels": 3,
    "model.use_queries": True,
    "model.inject_prompt": True,
    "data.root": "synth",
    "data.manifest": None,
    "data.exclude": None,
    "data.resize": 0,
    "data.size": 32,
    "data.count": 16,
    "data.seed": 0,
}

DEFAULTS = {
    "distill": {
        **COMMON,
        "data.count": 32,
        "distill.steps": 0,
        "distill.epochs": 20,
        "distill.batch": 8,  # desk-scale defaults; demos/configs/distill_full.txt has the full recipe
        "distill.lr": 1e-3,
        "distill.weight_decay": 0.05,
        "distill.prompts": 2,
        "distill.teacher": "mock",
        "distill.checkpoint_every": 0,
        "loss.lambda_distill": 5.0,
        "loss.temperature": 1.0,
        "loss.dice_eps": 1.0,
        "loss.soft_targets": False,
    },
    "train": {
        **COMMON,
        "train.steps": 500,
        "train.batch": 4,
        "train.lr": 1e-4,
        "train.final_lr": 1e-6,
        "train.warmup": 10,
        "train.weight_decay": 1e-4,
        "train.augment": True,
        "train.crop": 0,
        "train.init": None,
        "train.eval_every": 50,
        "train.checkpoint_every": 0,
        "loss.lambda_dice": 5.0,
        "loss.dice_eps": 1.0,
        "loss.points": True,
        "loss.point_count": 1024,
        "loss.oversample": 3.0,
        "loss.importance": 0.75,
        "loss.early_weight": 1.0,
    },
    "eval": {
        "eval.pred": None,
        "eval.gt": None,
        "eval.manifest": None,
        "eval.match": "centroid",
        "eval.distance": 3.0,
        "eval.iou_mode": "dataset",
        "eval.csv": False,
    },
    "predict": {
        "run.threads": 1,
        "predict.checkpoint": None,
        "predict.input": None,
        "predict.threshold": 0.0,
        "predict.heatmaps": False,
    },
    "synth": {
        "data.size": 64,
        "data.count": 16,
        "data.seed": 0,
        "data.min_targets": 1,
        "data.max_targets": 3,
        "data.min_radius": 1.0,
        "data.max_radius": 3.0,
    },
    "profile": {
        "profile.b": 1,
        "profile.n": 4,
        "profile.d": 256,
        "profile.h": 64,
        "profile.w": 64,
        "profile.heads": 8,
        "profile.measure": True,
    },
}

# flag name -> config key
FLAGS = {
    "distill": {"data": "data.root", "manifest": "data.manifest", "steps": "distill.steps",
                "epochs": "distill.epochs", "batch": "distill.batch", "teacher": "distill.teacher",
                "prompts": "distill.prompts", "lr": "distill.lr", "seed": "run.seed",
                "profile": "run.profile", "stem": "model.stem"},
    "train": {"data": "data.root", "manifest": "data.manifest", "steps": "train.steps", "batch": "train.batch",
              "augment": "train.augment", "init": "train.init", "lr": "train.lr", "seed": "run.seed",
              "profile": "run.profile", "stem": "model.stem", "eval_every": "train.eval_every"},
    "eval": {"pred": "eval.pred", "gt": "eval.gt", "manifest": "eval.manifest", "match": "eval.match",
             "distance": "eval.distance", "csv": "eval.csv"},
    "predict": {"checkpoint": "predict.checkpoint", "input": "predict.input", "threshold": "predict.threshold",
                "dump_heatmaps": "predict.heatmaps"},
    "synth": {"count": "data.count", "size": "data.size", "seed": "data.seed"},
    "profile": {"b": "profile.b", "n": "profile.n", "d": "profile.d", "h": "profile.h", "w": "profile.w",
                "heads": "profile.heads"},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irstd", description="Infrared small target detection toolkit")
    p.add_argument("--version", action="version", version=f"irstd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)")
        return sp

    d = common(sub.add_parser("distill", help="distillation pre-training"))
    d.add_argument("--data", help="'synth' or a dataset root with images/ and masks/")
    d.add_argument("--manifest")
    d.add_argument("--steps", type=int)
    d.add_argument("--epochs", type=int)
    d.add_argument("--batch", type=int)
    d.add_argument("--teacher", help="'mock' or a directory of <id>.npz teacher outputs")
    d.add_argument("--prompts", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--profile", choices=["desk", "paper"])
    d.add_argument("--stem", type=int, choices=[1, 2, 4])
    d.add_argument("--resume", help="checkpoint to resume from")

    t = common(sub.add_parser("train", help="fine-tune on an IRSTD dataset"))
    t.add_argument("--data")
    t.add_argument("--manifest")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--augment", choices=["on", "off"])
    t.add_argument("--init", help="distilled checkpoint; only the encoder side is loaded")
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--profile", choices=["desk", "paper"])
    t.add_argument("--stem", type=int, choices=[1, 2, 4])
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--resume")

    e = common(sub.add_parser("eval", help="IoU / Pd / Fa of predicted masks"))
    e.add_argument("--pred", help="directory of predicted masks")
    e.add_argument("--gt", help="directory of ground-truth masks")
    e.add_argument("--manifest")
    e.add_argument("--match", choices=["centroid", "overlap"])
    e.add_argument("--distance", type=float)
    e.add_argument("--csv", action="store_const", const=True, help="also write per_image.csv")

    pr = common(sub.add_parser("predict", help="write binarized masks for a folder of images"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--input", help="folder of images (or a dataset root with images/)")
    pr.add_argument("--threshold", type=float)
    pr.add_argument("--dump-heatmaps", dest="dump_heatmaps", action="store_const", const=True,
                    help="also write per-level FPN heatmaps before/after query interaction")

    s = common(sub.add_parser("synth", help="materialize a synthetic dataset"))
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)

    pf = common(sub.add_parser("profile", help="bi-direction attention operation counts"))
    for k in ("b", "n", "d", "h", "w", "heads"):
        pf.add_argument(f"--{k}", type=int)
    return p


def resolve_config(args) -> Dict[str, object]:
    flags = {}
    for name, key in FLAGS[args.command].items():
        v = getattr(args, name, None)
        if v is None:
            continue
        if name == "augment":
            v = v == "on"
        flags[key] = v
    config = resolve(DEFAULTS[args.command], args.config, args.set)
    # explicit flags beat both the file and --set
    return resolve(DEFAULTS[args.command], None, {**config, **flags})


def run_dir_for(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / args.command


def stamp(config) -> str:
    return dump_flat(config) + f"# irstd {__version__} torch {torch.__version__} numpy {np.__version__}\n"


def _model_config(config) -> ModelConfig:
    return model_config(
        config["run.profile"], config["model.stem"],
        encoder={"input_channels": config["model.input_channels"]},
        use_queries=config["model.use_queries"], inject_prompt=config["model.inject_prompt"],
    )


def _samples(config) -> list:
    root = config["data.root"]
    channels = 1
    if root == "synth":
        return list(synth_generate(SynthConfig(size=config["data.size"], count=config["data.count"],
                                               seed=config["data.seed"], channels=channels)))
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data root not found: {root}")
    manifest = config["data.manifest"]
    if manifest is None:
        manifest = [p.stem for p in sorted((root / "images").iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES] \
            if (root / "images").is_dir() else []
    elif not Path(manifest).exists():
        raise UsageError(f"manifest not found: {manifest}")
    resize = config["data.resize"] or None
    samples = list(load_dataset(root, manifest, config["data.exclude"], resize=resize))
    if not samples:
        raise UsageError(f"no samples found under {root}")
    return samples


def cmd_distill(config, run_dir: Path, args) -> int:
    from .distill import DistillSchedule, FileTeacher, build_student, distill_run, mock_sample_teacher

    samples = _samples(config)
    teacher_spec = config["distill.teacher"]
    if teacher_spec == "mock":
        teacher = mock_sample_teacher
    else:
        if not Path(teacher_spec).is_dir():
            raise UsageError(f"teacher directory not found: {teacher_spec}")
        teacher = FileTeacher(teacher_spec)
    student = build_student(_model_config(config), seed=config["run.seed"])
    schedule = DistillSchedule(
        steps=config["distill.steps"] or None, epochs=config["distill.epochs"], batch_size=config["distill.batch"],
        lr=config["distill.lr"], weight_decay=config["distill.weight_decay"], n_prompts=config["distill.prompts"],
        seed=config["run.seed"], checkpoint_every=config["distill.checkpoint_every"],
    )
    loss_cfg = LossConfig(lambda_distill=config["loss.lambda_distill"], temperature=config["loss.temperature"],
                          dice_eps=config["loss.dice_eps"], soft_teacher_targets=config["loss.soft_targets"])
    res = distill_run(student, teacher, samples, schedule, loss_cfg, run_dir, config,
                      resume=getattr(args, "resume", None))
    recs = res["log"]
    if recs:
        print(f"steps={len(recs)} initial_total={recs[0]['total']!r} final_total={recs[-1]['total']!r}")
    print(f"checkpoint={res['checkpoint']}")
    return 0


def cmd_train(config, run_dir: Path, args) -> int:
    from .distill import transfer_encoder
    from .train import TrainSchedule, train_run

    samples = _samples(config)
    model = build_model(_model_config(config), seed=config["run.seed"])
    if config["train.init"]:
        arrays, _ = ckpt.read_archive(config["train.init"])
        n = len(transfer_encoder(arrays, model))
        print(f"initialized {n} encoder tensors from {config['train.init']}")
    schedule = TrainSchedule(
        steps=config["train.steps"], batch_size=config["train.batch"], lr=config["train.lr"],
        final_lr=config["train.final_lr"], warmup=config["train.warmup"], weight_decay=config["train.weight_decay"],
        seed=config["run.seed"], augment=config["train.augment"], crop_size=config["train.crop"] or None,
        checkpoint_every=config["train.checkpoint_every"],
    )
    loss_cfg = LossConfig(lambda_dice=config["loss.lambda_dice"], dice_eps=config["loss.dice_eps"],
                          point_count=config["loss.point_count"], oversample_ratio=config["loss.oversample"],
                          importance_fraction=config["loss.importance"], early_weight=config["loss.early_weight"],
                          use_points=config["loss.points"])
    res = train_run(model, samples, schedule, loss_cfg, run_dir, config, resume=getattr(args, "resume", None),
                    eval_every=config["train.eval_every"])
    recs = res["log"]
    if recs:
        print(f"steps={len(recs)} first_lr={recs[0]['lr']!r} final_lr={recs[-1]['lr']!r} "
              f"final_total={recs[-1]['total']!r}")
    if res["best_iou"] is not None:
        print(f"train_iou={res['best_iou']!r}")
    print(f"checkpoint={res['checkpoint']}")
    return 0


def _mask_files(folder: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def cmd_eval(config, run_dir: Path, args) -> int:
    from .metrics import evaluate, per_image_csv, render_report

    if not config["eval.pred"] or not config["eval.gt"]:
        raise UsageError("eval needs --pred and --gt directories")
    pred_dir, gt_dir = Path(config["eval.pred"]), Path(config["eval.gt"])
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    gts = _mask_files(gt_dir)
    preds = _mask_files(pred_dir)
    ids = read_manifest(config["eval.manifest"]) if config["eval.manifest"] else sorted(gts)
    missing = [i for i in ids if i not in preds or i not in gts]
    if missing:
        raise UsageError(f"missing prediction or ground truth for: {', '.join(missing[:10])}")
    report = evaluate([read_mask(preds[i]) for i in ids], [read_mask(gts[i]) for i in ids],
                      config["eval.match"], config["eval.distance"], config["eval.iou_mode"])
    name = gt_dir.parent.name if gt_dir.name == "masks" else gt_dir.name
    rendered = render_report(report, name)
    print(rendered["text"])
    (run_dir / "report.json").write_text(rendered["json"])
    (run_dir / "report.txt").write_text(rendered["text"] + "\n")
    if config["eval.csv"]:
        (run_dir / "per_image.csv").write_text(per_image_csv(report, ids))
    return 0


def _heatmap(x: torch.Tensor) -> np.ndarray:
    m = x.abs().mean(0).numpy()
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def cmd_predict(config, run_dir: Path, args) -> int:
    from PIL import Image
    import torch.nn.functional as F

    if not config["predict.checkpoint"] or not config["predict.input"]:
        raise UsageError("predict needs --checkpoint and --input")
    src = Path(config["predict.input"])
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    if (src / "images").is_dir():
        src = src / "images"
    ckpt_path = Path(config["predict.checkpoint"])
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    arrays, saved = ckpt.read_archive(ckpt_path)
    model = build_model(_model_config({**DEFAULTS["train"], **saved}))
    ckpt.load_into(model, arrays)
    model.eval()
    mult = model.config.encoder.size_multiple
    files = _mask_files(src)
    masks_dir = run_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    heat_dir = run_dir / "heatmaps"
    if config["predict.heatmaps"]:
        heat_dir.mkdir(exist_ok=True)
    for stem, path in files.items():
        img = torch.from_numpy(read_image(path))[None, None]
        h, w = img.shape[-2:]
        # zero-pad up to the encoder's size multiple; the mask is cropped back
        ph, pw = (-h) % mult, (-w) % mult
        img = F.pad(img, (0, pw, 0, ph))
        with torch.no_grad():
            out = model(img, keep_diagnostics=config["predict.heatmaps"])
        mask = (out["final"].logits[0, 0, :h, :w] > config["predict.threshold"]).numpy()
        write_mask(masks_dir / f"{stem}.png", mask)
        if config["predict.heatmaps"]:
            for key, val in out["fused"].diagnostics.items():
                arr = (_heatmap(val[0]) * 255).astype(np.uint8)
                Image.fromarray(arr, mode="L").save(heat_dir / f"{stem}_{key}.png")
    print(f"predicted={len(files)} masks_dir={masks_dir}")
    return 0


def cmd_synth(config, run_dir: Path, args) -> int:
    cfg = SynthConfig(size=config["data.size"], count=config["data.count"], seed=config["data.seed"],
                      n_targets=(config["data.min_targets"], config["data.max_targets"]),
                      radius=(config["data.min_radius"], config["data.max_radius"]))
    manifest = write_dataset(synth_generate(cfg), run_dir)
    print(f"samples={cfg.count} manifest={manifest}")
    return 0


def cmd_profile(config, run_dir: Path, args) -> int:
    from .queries import bi_attn_cost, measure_bi_attention

    b, n, d, h, w = (config[f"profile.{k}"] for k in "bndhw")
    cost = bi_attn_cost(b, n, d, h, w)
    lines = [f"b={b}", f"n={n}", f"d={d}", f"h={h}", f"w={w}"]
    lines += [f"term.{k}={v}" for k, v in cost.terms.items()]
    lines.append(f"formula_total={cost.total_ops}")
    if config["profile.measure"]:
        m = measure_bi_attention(b, n, d, h, w, config["profile.heads"])
        lines.append(f"measured_total={m['measured']}")
        lines.append(f"match={'true' if m['measured'] == cost.total_ops else 'false'}")
        lines += [f"extra.{k}={v}" for k, v in m["extras"].items()]
    text = "\n".join(lines)
    print(text)
    (run_dir / "profile.txt").write_text(text + "\n")
    return 0


COMMANDS = {
    "distill": cmd_distill,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "profile": cmd_profile,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if "run.threads" in config:
        torch.set_num_threads(config["run.threads"])
    run_dir = run_dir_for(args)
    marker = run_dir / "INCOMPLETE"
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"{args.command} started\n")
        (run_dir / "config.txt").write_text(stamp(config))
        code = COMMANDS[args.command](config, run_dir, args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if code == 0:
        marker.unlink(missing_ok=True)
    return code


if __name__ == "__main__":
    sys.exit(main())
