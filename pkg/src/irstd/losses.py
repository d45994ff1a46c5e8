"""Training objectives: BCE, soft Dice, spatial / channel KL, distillation and point-sampled mask loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from .layers import point_sample


@dataclass
class LossConfig:
    lambda_distill: float = 5.0
    lambda_dice: float = 5.0
    temperature: float = 1.0
    dice_eps: float = 1.0
    point_count: int = 1024
    oversample_ratio: float = 3.0
    importance_fraction: float = 0.75
    soft_teacher_targets: bool = False
    early_weight: float = 1.0
    use_points: bool = True

    def __post_init__(self):
        for name in ("lambda_distill", "lambda_dice", "temperature", "oversample_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dice_eps < 0 or self.early_weight < 0:
            raise ValueError("dice_eps and early_weight must be non-negative")
        if self.point_count < 1:
            raise ValueError("point_count must be >= 1")
        if not 0.0 <= self.importance_fraction <= 1.0:
            raise ValueError("importance_fraction must lie in [0, 1]")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    _check_shapes(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def dice(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice on sigmoid probabilities; sums per sample (dim 0), mean over the batch."""
    _check_shapes(logits, targets)
    p = torch.sigmoid(logits).flatten(1)
    y = targets.to(logits.dtype).flatten(1)
    num = 2.0 * (p * y).sum(1) + eps
    den = p.sum(1) + y.sum(1) + eps
    return (1.0 - num / den).mean()


def _kl(student_logits, teacher_logits, dim, tau):
    log_s = F.log_softmax(student_logits / tau, dim=dim)
    log_t = F.log_softmax(teacher_logits / tau, dim=dim)
    return (log_t.exp() * (log_t - log_s)).sum(dim)


def kl_spatial(student_mid: torch.Tensor, teacher_mid: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """KL(teacher || student) of per-mask spatial softmaxes, averaged over masks, times tau^2.

    Inputs are (..., M, h, w) logits.
    """
    _check_shapes(student_mid, teacher_mid)
    s = student_mid.flatten(-2)
    t = teacher_mid.flatten(-2)
    return _kl(s, t, -1, tau).mean() * tau**2


def kl_channel(student_mid: torch.Tensor, teacher_mid: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """KL(teacher || student) of per-pixel softmaxes over the mask axis (-3), averaged over pixels."""
    _check_shapes(student_mid, teacher_mid)
    return _kl(student_mid, teacher_mid, -3, tau).mean() * tau**2


def teacher_targets(final_logits: torch.Tensor, soft: bool = False) -> torch.Tensor:
    if soft:
        return torch.sigmoid(final_logits)
    return (final_logits > 0).to(final_logits.dtype)


def distill_loss(student, teacher, config: LossConfig = LossConfig()) -> Tuple[torch.Tensor, Dict[str, float]]:
    """``bce + lambda * (dice + kl_spatial + kl_channel)``.

    ``student`` / ``teacher`` carry ``mid`` (6N, h, w) and ``final`` (K, h, w)
    logits, optionally with a leading batch axis.
    """
    if student.mid.shape[-3] != teacher.mid.shape[-3]:
        raise ValueError(
            f"student has {student.mid.shape[-3]} intermediate masks, teacher {teacher.mid.shape[-3]}"
        )
    tau = config.temperature
    y = teacher_targets(teacher.final, config.soft_teacher_targets)
    s_final = student.final
    if s_final.dim() == 3:
        s_final, y = s_final.unsqueeze(0), y.unsqueeze(0)
    terms = {
        "bce": bce(s_final, y),
        "dice": dice(s_final.flatten(0, 1), y.flatten(0, 1), config.dice_eps),
        "kl": kl_spatial(student.mid, teacher.mid, tau),
        "cd": kl_channel(student.mid, teacher.mid, tau),
    }
    total = terms["bce"] + config.lambda_distill * (terms["dice"] + terms["kl"] + terms["cd"])
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    # logged total is recombined from the logged terms so the record is self-consistent
    breakdown["total"] = breakdown["bce"] + config.lambda_distill * (
        breakdown["dice"] + breakdown["kl"] + breakdown["cd"]
    )
    return total, breakdown


def grid_points(h: int, w: int, batch: int = 1, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pixel-center coordinates of an h x w grid, (batch, h*w, 2) in (x, y)."""
    kw = {} if like is None else {"dtype": like.dtype, "device": like.device}
    ys = (torch.arange(h, **kw) + 0.5) / h
    xs = (torch.arange(w, **kw) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], -1)
    return pts.unsqueeze(0).expand(batch, -1, -1)


def _pixel_centers(b, n, h, w, generator, dtype):
    idx = torch.randint(h * w, (b, n), generator=generator)
    return torch.stack([((idx % w).to(dtype) + 0.5) / w, ((idx // w).to(dtype) + 0.5) / h], -1)


def sample_points(targets: torch.Tensor, pred_logits: torch.Tensor, config: LossConfig,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uncertainty-biased random points in [0, 1]^2, (B, P, 2).

    Draws ``oversample_ratio * P`` uniform candidates, keeps the
    ``importance_fraction * P`` with the smallest |logit| and fills the rest
    with fresh uniform points. Points are target-pixel centers drawn uniformly
    with replacement, so a bilinear readout returns exactly the values the
    dense loss sees and the uniform part is an unbiased subsample of it.
    """
    b = pred_logits.shape[0]
    h, w = targets.shape[-2:]
    p = min(config.point_count, h * w)
    dtype = pred_logits.dtype
    n_important = int(config.importance_fraction * p)
    n_random = p - n_important
    coords = []
    if n_important:
        n_cand = max(int(config.oversample_ratio * p), n_important)
        cand = _pixel_centers(b, n_cand, h, w, generator, dtype)
        with torch.no_grad():
            uncertainty = -point_sample(pred_logits.detach(), cand).abs()[:, 0]
        idx = uncertainty.topk(n_important, dim=1).indices
        coords.append(torch.gather(cand, 1, idx[..., None].expand(-1, -1, 2)))
    if n_random:
        coords.append(_pixel_centers(b, n_random, h, w, generator, dtype))
    return torch.cat(coords, 1)


def mask_loss(pred_logits: torch.Tensor, target: torch.Tensor, config: LossConfig = LossConfig(),
              points: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
              dense: Optional[bool] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """``bce + lambda_dice * dice`` on (B, 1, h, w) logits against (B, 1, H, W) targets.

    With point sampling the two maps may differ in resolution; both are read
    bilinearly at shared normalized coordinates. Dense mode resizes the logits
    to the target grid instead.
    """
    target = target.to(pred_logits.dtype)
    if target.dim() == 3:
        target = target.unsqueeze(1)
    dense = (not config.use_points) if dense is None else dense
    if dense and points is None:
        if pred_logits.shape[-2:] != target.shape[-2:]:
            pred_logits = F.interpolate(pred_logits, size=target.shape[-2:], mode="bilinear", align_corners=False)
        logits_v, target_v = pred_logits.flatten(1), target.flatten(1)
    else:
        if points is None:
            points = sample_points(target, pred_logits, config, generator)
        logits_v = point_sample(pred_logits, points)[:, 0]
        target_v = point_sample(target, points)[:, 0]
    # sampled sums estimate the dense sums times P / (H*W); scale the smoothing term alike
    eps = config.dice_eps * logits_v.shape[1] / (target.shape[-2] * target.shape[-1])
    terms = {"bce": bce(logits_v, target_v), "dice": dice(logits_v, target_v, eps)}
    total = terms["bce"] + config.lambda_dice * terms["dice"]
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = breakdown["bce"] + config.lambda_dice * breakdown["dice"]
    return total, breakdown
