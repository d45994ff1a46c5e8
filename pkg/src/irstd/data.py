"""Dataset loading, augmentation and a synthetic infrared small-target generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")

# per-dataset settings used by the tuning recipe; the split id lists are user supplied
DATASET_PRESETS = {
    "sirst": dict(stem=1, image_size=256, eval_resize=256, augment=True, n_train=256),
    "nudt": dict(stem=1, image_size=256, eval_resize=None, augment=False, n_train=663),
    "irstd1k": dict(stem=2, image_size=512, eval_resize=None, augment=True, n_train=800, n_excluded=6),
    "mdfa": dict(stem=1, image_size=128, eval_resize=None, augment=True, n_train=10000),
}


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be (C, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape[1:]} and mask {self.mask.shape} sizes differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"mask of {self.id!r} is not binary")


# --------------------------------------------------------------------------
# files


def read_manifest(source: Union[str, Path, Iterable[str], None]) -> List[str]:
    """Ids from a manifest file (one per line, ``#`` comments) or an iterable."""
    if source is None:
        return []
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    else:
        lines = list(source)
    ids = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    return ids


def _find_file(folder: Path, stem: str) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        p = folder / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Grayscale float image in [0, 1] from 8-bit, 16-bit or RGB files; shape (H, W)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            top = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
            return (arr / top).astype(np.float32)
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float32) / 255.0


def read_mask(path: Union[str, Path], name: str = "") -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        log.warning("mask %s has values outside {0, 255}; binarizing at 128", name or path)
    return (arr >= 128).astype(np.uint8)


def write_mask(path: Union[str, Path], mask) -> None:
    arr = np.asarray(mask).astype(bool).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def write_image(path: Union[str, Path], image: np.ndarray) -> None:
    gray = image[0] if image.ndim == 3 else image
    Image.fromarray(np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8), mode="L").save(path)


def _resize(image: np.ndarray, mask: np.ndarray, size: Tuple[int, int]):
    if image.shape[1:] == tuple(size):
        return image, mask
    img = F.interpolate(torch.from_numpy(image)[None], size=size, mode="bilinear", align_corners=False)[0]
    msk = F.interpolate(torch.from_numpy(mask)[None, None].float(), size=size, mode="nearest-exact")[0, 0]
    return img.numpy(), msk.numpy().astype(np.uint8)


def load_dataset(root: Union[str, Path], split_manifest, exclude=None,
                 resize: Optional[Union[int, Tuple[int, int]]] = None, channels: int = 1) -> Iterator[Sample]:
    """Yield samples for the manifest ids, in manifest order.

    ``root`` holds ``images/`` and ``masks/`` with matching file stems. Ids in
    ``exclude`` (file or iterable) are skipped. All masks are checked up front
    so a missing one fails before any sample is produced.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    excluded = set(read_manifest(exclude))
    ids = [i for i in read_manifest(split_manifest) if i not in excluded]
    pairs = []
    missing = []
    for stem in ids:
        img = _find_file(root / "images", stem)
        msk = _find_file(root / "masks", stem)
        if img is None:
            raise FileNotFoundError(f"no image for id {stem!r} under {root / 'images'}")
        if msk is None:
            missing.append(stem)
        pairs.append((stem, img, msk))
    if missing:
        raise FileNotFoundError(f"missing masks for: {', '.join(missing)}")
    if isinstance(resize, int):
        resize = (resize, resize)

    def generate():
        for stem, img_path, msk_path in pairs:
            image = read_image(img_path)[None]
            mask = read_mask(msk_path, stem)
            if image.shape[1:] != mask.shape:
                raise ValueError(f"image and mask sizes differ for {stem!r}")
            if resize is not None:
                image, mask = _resize(image, mask, resize)
            if channels > 1:
                image = np.repeat(image, channels, axis=0)
            yield Sample(image.astype(np.float32), mask, stem)

    return generate()


def write_dataset(samples: Iterable[Sample], root: Union[str, Path], manifest_name: str = "train.txt") -> Path:
    """Materialize samples in the ``images/``, ``masks/`` + manifest layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)
        ids.append(s.id)
    manifest = root / manifest_name
    manifest.write_text("".join(f"{i}\n" for i in ids))
    return manifest


# --------------------------------------------------------------------------
# augmentation


def augment(sample: Sample, scale_range=(0.5, 2.0), crop_size: Optional[Union[int, Tuple[int, int]]] = None,
            seed: int = 0, scale: Optional[float] = None, enabled: bool = True) -> Sample:
    """Random resize then fixed-size crop, applied identically to image and mask.

    ``crop_size`` defaults to the input size. Regions of the crop that fall
    outside the resized image are zero in both image and mask.
    """
    if not enabled:
        return sample
    rng = np.random.default_rng(seed)
    h, w = sample.mask.shape
    if scale is None:
        scale = float(rng.uniform(*scale_range))
    if crop_size is None:
        crop_size = (h, w)
    elif isinstance(crop_size, int):
        crop_size = (crop_size, crop_size)
    ch, cw = crop_size
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    image, mask = _resize(sample.image, sample.mask, (nh, nw))

    ph, pw = max(ch, nh), max(cw, nw)
    if (ph, pw) != (nh, nw):
        image = np.pad(image, ((0, 0), (0, ph - nh), (0, pw - nw)))
        mask = np.pad(mask, ((0, ph - nh), (0, pw - nw)))
    y0 = int(rng.integers(0, ph - ch + 1))
    x0 = int(rng.integers(0, pw - cw + 1))
    image = np.ascontiguousarray(image[:, y0:y0 + ch, x0:x0 + cw], dtype=np.float32)
    mask = np.ascontiguousarray(mask[y0:y0 + ch, x0:x0 + cw], dtype=np.uint8)
    return Sample(image, mask, sample.id)


# --------------------------------------------------------------------------
# synthetic data


HALF_PEAK = math.sqrt(2.0 * math.log(2.0))


@dataclass
class SynthConfig:
    size: int = 64
    n_targets: Tuple[int, int] = (1, 3)
    radius: Tuple[float, float] = (1.0, 3.0)
    contrast: Tuple[float, float] = (0.35, 0.7)
    octaves: int = 3
    clutter: float = 0.35
    count: int = 16
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        self.n_targets = tuple(int(v) for v in self.n_targets)
        self.radius = tuple(float(v) for v in self.radius)
        self.contrast = tuple(float(v) for v in self.contrast)
        lo, hi = self.radius
        if not (1.0 <= lo <= hi <= self.size / 8):
            raise ValueError(f"radius range {self.radius} must lie within [1, size/8={self.size / 8}]")
        if min(self.contrast) <= 0 or self.contrast[0] > self.contrast[1]:
            raise ValueError("contrast range must be positive and ordered")
        if self.n_targets[0] < 0 or self.n_targets[0] > self.n_targets[1]:
            raise ValueError("n_targets must be an ordered non-negative range")


def value_noise(size: int, octaves: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-octave value noise normalized to [0, 1]."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        coarse = rng.random((cells + 1, cells + 1))
        out += amp * ndimage.zoom(coarse, size / (cells + 1), order=1, mode="nearest")[:size, :size]
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _place_targets(cfg: SynthConfig, rng: np.random.Generator):
    n = int(rng.integers(cfg.n_targets[0], cfg.n_targets[1] + 1))
    placed = []
    for _ in range(n):
        r = float(rng.uniform(*cfg.radius))
        for _attempt in range(100):
            margin = r + 1.0
            cy, cx = rng.uniform(margin, cfg.size - margin, size=2)
            # keep half-peak disks at least 2 px apart so components stay separate
            if all(math.hypot(cy - py, cx - px) > r + pr + 2.0 for py, px, pr, _ in placed):
                break
        else:
            continue
        placed.append((cy, cx, r, float(rng.uniform(*cfg.contrast))))
    return placed


def synth_sample(cfg: SynthConfig, index: int) -> Tuple[Sample, list]:
    """One sample plus its target list [(cy, cx, radius, contrast)]."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    gradient = (np.cos(rng.uniform(0, 2 * np.pi)) * xx + np.sin(rng.uniform(0, 2 * np.pi)) * yy) / size
    background = cfg.clutter * value_noise(size, cfg.octaves, rng) + 0.1 * (gradient - gradient.min())
    image = background.copy()
    mask = np.zeros((size, size), dtype=bool)
    targets = _place_targets(cfg, rng)
    for cy, cx, r, c in targets:
        sigma = r / HALF_PEAK
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        image += c * blob
        mask |= blob > 0.5
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    if cfg.channels > 1:
        image = np.repeat(image, cfg.channels, axis=0)
    return Sample(image, mask.astype(np.uint8), f"synth_{cfg.seed}_{index:05d}"), targets


def synth_generate(cfg: SynthConfig) -> Iterator[Sample]:
    for i in range(cfg.count):
        yield synth_sample(cfg, i)[0]


def to_tensors(samples: Sequence[Sample]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (B, C, H, W) images and (B, 1, H, W) float masks."""
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).float().unsqueeze(1)
    return images, masks
