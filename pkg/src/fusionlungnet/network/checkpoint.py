"""Single-file checkpoints: named parameter tensors plus a manifest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import torch

from .backbone import BackboneConfig
from .model import AblationFlags, FusionLungNet


def canonical_json(config: dict) -> str:
    """Sorted-key, whitespace-free JSON; the form config hashes are taken over."""
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def model_spec(model: FusionLungNet) -> dict:
    return {"backbone": asdict(model.backbone_cfg), "flags": asdict(model.flags)}


def save_checkpoint(path, model: FusionLungNet, *, epoch: int = 0, seed: int = 0, config: dict | None = None,
                    optimizer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = config if config is not None else model_spec(model)
    payload = {
        "manifest": {
            "config_hash": config_hash(config),
            "epoch": int(epoch),
            "seed": int(seed),
            "model": model_spec(model),
        },
        "config": config,
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return torch.load(path, map_location="cpu", weights_only=False)


def load_model(path_or_payload) -> tuple[FusionLungNet, dict]:
    """Rebuild the network stored in a checkpoint. Returns (model in eval mode, payload)."""
    payload = path_or_payload if isinstance(path_or_payload, dict) else read_checkpoint(path_or_payload)
    spec = payload["manifest"]["model"]
    model = FusionLungNet(
        BackboneConfig(**spec["backbone"]), AblationFlags(**spec["flags"]), seed=None, load_weights=False
    )
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload
