"""Checkpoint archives: one ``.npz`` of named arrays plus key-value config text.

Parameter names follow the module tree (``encoder.stage1.block0...``,
``queries.encoder.tokens``). Optimizer moments are stored as
``optim.<param name>.<field>`` and scalars under ``meta.*``.
"""

from __future__ import annotations

import zipfile
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch

from .config import dump_flat, parse_flat

CONFIG_KEY = "__config__"
ENCODER_PREFIXES = ("encoder.", "queries.encoder.", "encoder_queries.")


def save_checkpoint(path: Union[str, Path], model: torch.nn.Module, config: Optional[dict] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                for field, value in state.items():
                    arrays[f"optim.{names[id(p)]}.{field}"] = torch.as_tensor(value).detach().cpu().numpy()
    for k, v in (meta or {}).items():
        arrays[f"meta.{k}"] = np.asarray(v)
    text = dump_flat(config or {})
    arrays[CONFIG_KEY] = np.asarray(text)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    path.with_suffix(".config.txt").write_text(text)
    return path


def read_archive(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError) as exc:
        raise ValueError(f"not a checkpoint archive: {path}") from exc
    config = parse_flat(str(arrays.pop(CONFIG_KEY, np.asarray(""))))
    return arrays, config


def model_arrays(arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in arrays.items() if not k.startswith(("optim.", "meta."))}


def load_into(model: torch.nn.Module, arrays: Dict[str, np.ndarray], prefixes: Optional[Iterable[str]] = None,
              strict: bool = True) -> list:
    """Copy matching arrays into ``model``; returns the loaded names."""
    params = model_arrays(arrays)
    if prefixes is not None:
        prefixes = tuple(prefixes)
        params = {k: v for k, v in params.items() if k.startswith(prefixes)}
    state = model.state_dict()
    unknown = [k for k in params if k not in state]
    if unknown and strict:
        raise KeyError(f"checkpoint has parameters the model lacks: {unknown[:5]}")
    loaded = []
    with torch.no_grad():
        for k, v in params.items():
            if k not in state:
                continue
            if tuple(state[k].shape) != v.shape:
                raise ValueError(f"shape mismatch for {k}: model {tuple(state[k].shape)} vs archive {v.shape}")
            state[k].copy_(torch.from_numpy(np.array(v)).to(state[k].dtype))
            loaded.append(k)
    if strict and prefixes is None:
        missing = [k for k in state if k not in params]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    return loaded


def load_optimizer(optimizer: torch.optim.Optimizer, model: torch.nn.Module, arrays: Dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        prefix = f"optim.{name}."
        fields = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if fields:
            optimizer.state[p] = {
                f: torch.from_numpy(np.array(v)).to(p.dtype if v.ndim else torch.float32) for f, v in fields.items()
            }


def meta(arrays: Dict[str, np.ndarray]) -> dict:
    return {k[5:]: arrays[k].item() for k in arrays if k.startswith("meta.")}
