"""Fine-tuning loop, learning-rate schedules and the structured training log."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import Sample, augment, to_tensors
from .decoder import binarize
from .losses import LossConfig, mask_loss
from .metrics import evaluate
from .model import IRSTDModel


def multistep_lr(step: int, total: int, base: float = 1e-4, milestones=(0.9, 0.95), gamma: float = 0.1) -> float:
    """Base rate divided by 10 at each milestone fraction of ``total`` steps."""
    drops = sum(step >= int(round(m * total)) for m in milestones)
    return base * gamma**drops


def cosine_lr(step: int, total: int, base: float = 1e-4, final: float = 1e-6, warmup: int = 10) -> float:
    """Linear warm-up over ``warmup`` steps, then cosine from ``base`` (at step ``warmup``)
    down to ``final`` (at step ``total - 1``)."""
    if step < warmup:
        return base * (step + 1) / (warmup + 1)
    span = max(1, total - 1 - warmup)
    t = min(1.0, (step - warmup) / span)
    return final + (base - final) * 0.5 * (1.0 + math.cos(math.pi * t))


class RunLog:
    """Append-only ``key=value`` lines; floats use repr so reruns compare bitwise."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, object]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **fields):
        self.records.append(dict(fields))
        if self.path is not None:
            line = " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def read_log(path) -> List[Dict[str, object]]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for tok in line.split():
            k, v = tok.split("=", 1)
            try:
                rec[k] = int(v)
            except ValueError:
                try:
                    rec[k] = float(v)
                except ValueError:
                    rec[k] = v
        out.append(rec)
    return out


@dataclass
class TrainSchedule:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-4
    final_lr: float = 1e-6
    warmup: int = 10
    weight_decay: float = 1e-4
    seed: int = 0
    augment: bool = True
    scale_range: tuple = (0.5, 2.0)
    crop_size: Optional[int] = None
    checkpoint_every: int = 0
    grad_clip: float = 0.0


def set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices for ``step``: epoch-wise permutations derived from (seed, epoch)."""
    per_epoch = max(1, n // batch_size) if n >= batch_size else 1
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    if n < batch_size:
        return np.resize(perm, batch_size)
    return perm[k * batch_size:(k + 1) * batch_size]


def make_batch(samples: Sequence[Sample], idx, step: int, schedule) -> tuple:
    chosen = []
    for j, i in enumerate(idx):
        s = samples[int(i)]
        if schedule.augment:
            s = augment(s, schedule.scale_range, schedule.crop_size or s.mask.shape[0],
                        seed=int(np.random.SeedSequence([schedule.seed, step, j]).generate_state(1)[0]))
        chosen.append(s)
    return to_tensors(chosen)


def finetune_loss(model: IRSTDModel, images, masks, loss_cfg: LossConfig, generator=None):
    out = model(images)
    total, parts = mask_loss(out["final"].logits, masks, loss_cfg, generator=generator)
    breakdown = {"final": parts["total"]}
    logged = parts["total"]
    for key in ("early_encoder", "early_fpn"):
        t, p = mask_loss(out[key].logits, masks, loss_cfg, generator=generator)
        total = total + loss_cfg.early_weight * t
        breakdown[key] = p["total"]
        logged += loss_cfg.early_weight * p["total"]
    breakdown["total"] = logged
    return total, breakdown, out


@torch.no_grad()
def predict_masks(model: IRSTDModel, images: torch.Tensor, batch_size: int = 8) -> np.ndarray:
    model.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(binarize(model(images[i:i + batch_size])["final"])[:, 0].numpy())
    return np.concatenate(outs, 0)


def train_iou(model, samples: Sequence[Sample]) -> float:
    images, masks = to_tensors(samples)
    pred = predict_masks(model, images)
    return evaluate(list(pred), list(masks[:, 0].numpy().astype(bool))).iou


def train_run(model: IRSTDModel, samples: Sequence[Sample], schedule: TrainSchedule,
              loss_cfg: LossConfig = LossConfig(), run_dir: Optional[Path] = None,
              config: Optional[dict] = None, resume: Optional[Path] = None,
              eval_every: int = 0, stop_iou: Optional[float] = None) -> dict:
    """Fine-tune with AdamW + warm-up cosine; early and final heads are all supervised."""
    run_dir = Path(run_dir) if run_dir is not None else None
    log = RunLog(run_dir / "train.log" if run_dir else None)
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    start = 0
    if resume is not None:
        arrays, _ = ckpt.read_archive(resume)
        ckpt.load_into(model, arrays)
        ckpt.load_optimizer(opt, model, arrays)
        start = int(ckpt.meta(arrays)["step"])
    best_iou = None
    done = start
    for step in range(start, schedule.steps):
        model.train()
        lr = cosine_lr(step, schedule.steps, schedule.lr, schedule.final_lr, schedule.warmup)
        set_lr(opt, lr)
        idx = batch_indices(step, len(samples), schedule.batch_size, schedule.seed)
        images, masks = make_batch(samples, idx, step, schedule)
        gen = torch.Generator().manual_seed(schedule.seed * 1_000_003 + step)
        loss, parts, _ = finetune_loss(model, images, masks, loss_cfg, gen)
        if not torch.isfinite(loss):
            if run_dir is not None:
                np.savez(run_dir / "nan_batch.npz", images=images.numpy(), masks=masks.numpy(), step=step)
            raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if schedule.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
        opt.step()
        record = {"step": step, "lr": lr, **parts}
        if eval_every and ((step + 1) % eval_every == 0 or step + 1 == schedule.steps):
            record["train_iou"] = train_iou(model, samples)
            best_iou = max(best_iou or 0.0, record["train_iou"])
        log.write(**record)
        if run_dir is not None and schedule.checkpoint_every and (step + 1) % schedule.checkpoint_every == 0:
            ckpt.save_checkpoint(run_dir / f"step_{step + 1:06d}.npz", model, config, opt, {"step": step + 1})
        done = step + 1
        if stop_iou is not None and best_iou is not None and best_iou >= stop_iou:
            break
    final_path = None
    if run_dir is not None:
        final_path = ckpt.save_checkpoint(run_dir / "final.npz", model, config, opt, {"step": done})
    return {"log": log.records, "checkpoint": final_path, "best_iou": best_iou}
