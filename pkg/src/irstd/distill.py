"""Distillation pre-training: teacher interface, a mock granularity teacher and the loop.

The student is the encoder (with its query engine) plus a throw-away neck and
a prompt-conditioned head that emits six granularity masks per prompt, so
its outputs line up slot by slot with the teacher's pre-matching set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import checkpoint as ckpt
from .backbone import build_encoder, replicate_channels
from .data import Sample, to_tensors
from .decoder import TwoWayTransformer
from .fpn import TinyFPN
from .layers import MLP, LayerNorm2d, flatten_map, point_sample, unflatten_map
from .losses import LossConfig, distill_loss
from .model import ModelConfig
from .queries import EncoderQueryEngine, SparseQuerySet
from .train import RunLog, batch_indices, multistep_lr, set_lr

GRANULARITY_RADII = (0, 1, 2, 4, 8, 16)
N_GRANULARITY = len(GRANULARITY_RADII)
TEACHER_LOGIT = 10.0


@dataclass
class TeacherOutputs:
    mid: torch.Tensor  # (6N, h, w) logits before matching
    final: torch.Tensor  # (K, h, w) selected masks
    prompts: torch.Tensor  # (N, 2) points, (x, y) in [0, 1]
    selected: List[int] = field(default_factory=list)

    def __post_init__(self):
        n = self.prompts.shape[0]
        if self.mid.shape[0] != N_GRANULARITY * n:
            raise ValueError(f"teacher mid has {self.mid.shape[0]} masks for {n} prompts")
        if self.final.shape[0] > self.mid.shape[0]:
            raise ValueError("more final masks than intermediate ones")


@dataclass
class StudentOutputs:
    mid: torch.Tensor
    final: torch.Tensor


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy**2 + xx**2) <= radius**2


def granularity_masks(component: np.ndarray, radii=GRANULARITY_RADII) -> List[np.ndarray]:
    """Dilations of a binary component by disks of the given radii (radius 0 = itself)."""
    out = []
    for r in radii:
        out.append(component.copy() if r == 0 else ndimage.binary_dilation(component, _disk(r)))
    return out


def mock_teacher(gt_mask, n_prompts: int, seed: int = 0, logit: float = TEACHER_LOGIT) -> TeacherOutputs:
    """Deterministic stand-in for a granularity-aware segmenter.

    Prompts cycle over the ground-truth components in a seeded random order,
    one random interior pixel per visit. Each prompt yields six nested masks
    (the component dilated by 0, 1, 2, 4, 8, 16 px) as +/- ``logit``; the
    radius-0 masks are the final selection. With no foreground, prompts land
    on random background pixels and every mask is empty.
    """
    gt = np.asarray(gt_mask).astype(bool)
    if n_prompts < 1:
        raise ValueError("need at least one prompt")
    h, w = gt.shape
    rng = np.random.default_rng(seed)
    labels, n_comp = ndimage.label(gt, structure=np.ones((3, 3), bool))
    order = rng.permutation(n_comp) + 1 if n_comp else []
    mids, prompts = [], []
    for k in range(n_prompts):
        if n_comp:
            lab = order[k % n_comp]
            comp = labels == lab
            pix = np.argwhere(comp)
            y, x = pix[rng.integers(len(pix))]
            masks = granularity_masks(comp)
        else:
            y, x = rng.integers(h), rng.integers(w)
            masks = [np.zeros_like(gt)] * N_GRANULARITY
        prompts.append(((x + 0.5) / w, (y + 0.5) / h))
        mids.extend(masks)
    mid = torch.from_numpy(np.stack(mids).astype(np.float32) * (2 * logit) - logit)
    selected = [N_GRANULARITY * k for k in range(n_prompts)]
    return TeacherOutputs(mid, mid[selected].clone(), torch.tensor(prompts, dtype=torch.float32), selected)


def mock_sample_teacher(sample: Sample, n_prompts: int, seed: int = 0) -> TeacherOutputs:
    return mock_teacher(sample.mask, n_prompts, seed)


class FileTeacher:
    """Teacher outputs precomputed on disk as ``<root>/<sample id>.npz``.

    Each archive holds ``mid`` (6N, H, W) logits, ``prompts`` (N, 2) and
    optionally ``final`` / ``selected``; absent a selection the finest mask
    of every prompt is used.
    """

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"teacher directory not found: {self.root}")

    def __call__(self, sample: Sample, n_prompts: int, seed: int = 0) -> TeacherOutputs:
        path = self.root / f"{sample.id}.npz"
        if not path.exists():
            raise FileNotFoundError(f"no teacher outputs for sample {sample.id!r}: {path}")
        with np.load(path) as z:
            mid = torch.from_numpy(z["mid"].astype(np.float32))
            prompts = torch.from_numpy(z["prompts"].astype(np.float32))
            selected = [int(k) for k in z["selected"]] if "selected" in z.files else \
                [N_GRANULARITY * k for k in range(len(prompts))]
            final = torch.from_numpy(z["final"].astype(np.float32)) if "final" in z.files else mid[selected].clone()
        if len(prompts) != n_prompts:
            raise ValueError(f"{path} holds {len(prompts)} prompts, schedule expects {n_prompts}")
        return TeacherOutputs(mid, final, prompts, selected)


class FourierPE(nn.Module):
    """Random Fourier positional features of normalized (x, y) coordinates."""

    def __init__(self, dim: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian", scale * torch.randn(2, dim // 2))
        self.dim = dim

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        c = (2 * coords - 1) @ self.gaussian.to(coords.dtype)
        c = 2 * math.pi * c
        pe = torch.cat([c.sin(), c.cos()], -1)
        if pe.shape[-1] < self.dim:
            pe = F.pad(pe, (0, self.dim - pe.shape[-1]))
        return pe

    def grid(self, h, w, like):
        ys = (torch.arange(h, dtype=like.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=like.dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return self(torch.stack([gx, gy], -1)).reshape(h * w, self.dim)


class GranularityHead(nn.Module):
    """Point prompt -> six mask tokens -> two-way attention -> dot-product masks."""

    def __init__(self, dim: int, depth: int = 2, num_heads: int = 8, mlp_ratio: float = 4.0):
        super().__init__()
        self.pe = FourierPE(dim)
        self.granularity = nn.Parameter(torch.randn(N_GRANULARITY, dim) * 0.5)
        self.prompt_proj = nn.Linear(dim, dim)
        self.transformer = TwoWayTransformer(depth, dim, num_heads, int(dim * mlp_ratio))
        hidden = max(1, dim // 2)
        self.mask_convs = nn.Sequential(
            nn.Conv2d(dim, hidden, 3, padding=1), LayerNorm2d(hidden), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU(),
        )
        self.hypernet = MLP(dim, dim, hidden, num_layers=3, act=nn.ReLU)

    def forward(self, image: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        """``image`` (B, d, h, w), ``prompts`` (B, N, 2) -> logits (B, 6N, h, w)."""
        b, d, h, w = image.shape
        n = prompts.shape[1]
        # prompt token = its position code plus the image feature under it
        prompt_tok = self.pe(prompts) + self.prompt_proj(point_sample(image, prompts).transpose(1, 2))
        tokens = prompt_tok[:, :, None, :] + self.granularity[None, None]  # (B, N, 6, d)
        tokens = tokens.reshape(b * n, N_GRANULARITY, d)
        img = image.repeat_interleave(n, dim=0)
        queries, keys = self.transformer(img, self.pe.grid(h, w, image), tokens)
        feats = self.mask_convs(unflatten_map(keys, h, w))
        logits = torch.einsum("bkc,bchw->bkhw", self.hypernet(queries), feats)
        return logits.reshape(b, n * N_GRANULARITY, h, w)


class DistillStudent(nn.Module):
    """Encoder + encoder queries (kept after pre-training) with a neck and granularity head."""

    def __init__(self, config: ModelConfig, head_depth: int = 2):
        super().__init__()
        self.config = config
        d = config.dim
        ec = config.encoder
        self.encoder = build_encoder(ec, seed=None)
        self.queries = nn.ModuleDict({"encoder": SparseQuerySet("encoder", config.n_encoder_queries, d)})
        self.encoder_queries = EncoderQueryEngine(ec.stage_channels, d, config.num_heads,
                                                  config.deform_heads, config.deform_points)
        self.neck = TinyFPN(ec.stage_channels, d)
        self.head = GranularityHead(d, head_depth, config.num_heads)

    def forward(self, images: torch.Tensor, prompts: torch.Tensor, output_size=None) -> torch.Tensor:
        images = replicate_channels(images, self.config.encoder.input_channels)
        q = self.queries["encoder"].expand(images.shape[0])
        pyramid, _, _ = self.encoder_queries(self.encoder, images, q, self.config.use_queries)
        fused, _ = self.neck(pyramid)
        logits = self.head(fused.levels[0], prompts)
        size = output_size or images.shape[-2:]
        if tuple(logits.shape[-2:]) != tuple(size):
            logits = F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
        return logits


def build_student(config: ModelConfig, seed: int = 0) -> DistillStudent:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DistillStudent(config)


@dataclass
class DistillSchedule:
    steps: Optional[int] = None
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.05
    milestones: tuple = (0.9, 0.95)
    n_prompts: int = 2
    seed: int = 0
    checkpoint_every: int = 0

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, n_samples // self.batch_size)


def teacher_seed(run_seed: int, sample_index: int) -> int:
    """Prompts are fixed per sample, like precomputed teacher outputs on disk."""
    return int(np.random.SeedSequence([run_seed, sample_index]).generate_state(1)[0])


def distill_batch(samples: Sequence[Sample], idx, teacher: Callable, n_prompts: int, seeds: Sequence[int]):
    images, _ = to_tensors([samples[int(i)] for i in idx])
    outs = [teacher(samples[int(i)], n_prompts, s) for i, s in zip(idx, seeds)]
    mid = torch.stack([o.mid for o in outs])
    final = torch.stack([o.final for o in outs])
    prompts = torch.stack([o.prompts for o in outs])
    return images, prompts, mid, final, outs[0].selected


def student_step_loss(student: DistillStudent, images, prompts, t_mid, t_final, selected, loss_cfg):
    s_mid = student(images, prompts, output_size=t_mid.shape[-2:])
    s_final = s_mid[:, selected]
    return distill_loss(StudentOutputs(s_mid, s_final), StudentOutputs(t_mid, t_final), loss_cfg)


def distill_run(student: DistillStudent, teacher: Callable, samples: Sequence[Sample], schedule: DistillSchedule,
                loss_cfg: LossConfig = LossConfig(), run_dir: Optional[Path] = None, config: Optional[dict] = None,
                resume: Optional[Path] = None) -> dict:
    """Optimize the distillation loss with AdamW and a x0.1 multi-step schedule."""
    run_dir = Path(run_dir) if run_dir is not None else None
    log = RunLog(run_dir / "distill.log" if run_dir else None)
    total = schedule.total_steps(len(samples))
    opt = torch.optim.AdamW(student.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    start = 0
    if resume is not None:
        arrays, _ = ckpt.read_archive(resume)
        ckpt.load_into(student, arrays)
        ckpt.load_optimizer(opt, student, arrays)
        start = int(ckpt.meta(arrays)["step"])
    for step in range(start, total):
        student.train()
        lr = multistep_lr(step, total, schedule.lr, schedule.milestones)
        set_lr(opt, lr)
        idx = batch_indices(step, len(samples), schedule.batch_size, schedule.seed)
        seeds = [teacher_seed(schedule.seed, int(i)) for i in idx]
        images, prompts, t_mid, t_final, selected = distill_batch(
            samples, idx, teacher, schedule.n_prompts, seeds)
        loss, parts = student_step_loss(student, images, prompts, t_mid, t_final, selected, loss_cfg)
        if not torch.isfinite(loss):
            dump = None
            if run_dir is not None:
                dump = run_dir / "nan_batch.npz"
                np.savez(dump, images=images.numpy(), prompts=prompts.numpy(), teacher_mid=t_mid.numpy(),
                         indices=np.asarray(idx), step=step)
            raise FloatingPointError(f"non-finite distillation loss at step {step} {parts}; batch dumped to {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.write(step=step, lr=lr, **parts)
        if run_dir is not None and schedule.checkpoint_every and (step + 1) % schedule.checkpoint_every == 0:
            ckpt.save_checkpoint(run_dir / f"step_{step + 1:06d}.npz", student, config, opt, {"step": step + 1})
    path = None
    if run_dir is not None:
        path = ckpt.save_checkpoint(run_dir / "final.npz", student, config, opt, {"step": max(total, start)})
    return {"log": log.records, "checkpoint": path, "total_steps": total}


def transfer_encoder(student_arrays, model: nn.Module) -> list:
    """Copy encoder, encoder queries and their engine into a fine-tuning model."""
    return ckpt.load_into(model, student_arrays, prefixes=ckpt.ENCODER_PREFIXES)
