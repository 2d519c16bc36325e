"""Named-tensor checkpoints: one safetensors container plus a JSON sidecar."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from torch import nn

WEIGHTS_NAME = "weights.safetensors"
CONFIG_NAME = "config.json"


def dump_json(obj, path: str | os.PathLike) -> bytes:
    data = (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return data


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def optimizer_tensors(optimizer: torch.optim.Optimizer, prefix: str = "optim") -> dict[str, torch.Tensor]:
    out = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            t = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            out[f"{prefix}.{idx}.{key}"] = t.detach().clone().contiguous()
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], prefix: str = "optim") -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = value
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_checkpoint(
    path: str | os.PathLike,
    module: nn.Module,
    config: dict,
    optimizer: torch.optim.Optimizer | None = None,
) -> str:
    """Write weights (and optimizer moments) plus config; return the weights digest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().clone().contiguous() for k, v in module.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer))
    save_file(tensors, str(path / WEIGHTS_NAME), metadata={"format": "pt"})
    dump_json(config, path / CONFIG_NAME)
    return file_digest(path / WEIGHTS_NAME)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor], dict]:
    """Return (model state dict, optimizer tensors, config)."""
    path = Path(path)
    if not (path / WEIGHTS_NAME).is_file() or not (path / CONFIG_NAME).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    tensors = load_file(str(path / WEIGHTS_NAME))
    model = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    optim = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    config = json.loads((path / CONFIG_NAME).read_text())
    return model, optim, config
