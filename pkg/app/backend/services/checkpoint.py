"""
Checkpoint files: format tag, ModelConfig echo, every named parameter and
buffer (floating arrays stored as float64), optimizer moments, training
progress (step, epoch, position inside the epoch, schedule length, best
validation snapshot) and RNG state.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from model.models import ModelConfig
from utils.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pfda-checkpoint"
CHECKPOINT_VERSION = 2


def _export_tensors(state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    exported = {}
    for name, tensor in state.items():
        tensor = tensor.detach().cpu()
        exported[name] = tensor.to(torch.float64) if tensor.is_floating_point() else tensor.clone()
    return exported


def _import_tensors(
    saved: Dict[str, torch.Tensor], current: Dict[str, torch.Tensor]
) -> Dict[str, torch.Tensor]:
    return {
        name: saved[name].to(device=current[name].device, dtype=current[name].dtype)
        for name in current
    }


def _check_names_and_shapes(
    path: Path, saved: Dict[str, torch.Tensor], current: Dict[str, torch.Tensor], what: str
) -> None:
    missing = sorted(set(current) - set(saved))
    unexpected = sorted(set(saved) - set(current))
    if missing or unexpected:
        raise CheckpointError(f"{path}: {what} missing {missing}, unexpected {unexpected}")
    for name, tensor in current.items():
        if tuple(saved[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{path}: '{name}' has shape {tuple(saved[name].shape)}, "
                f"expected {tuple(tensor.shape)}"
            )


def checkpoint_save(
    path: Union[str, Path],
    model: torch.nn.Module,
    model_config: ModelConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    epoch: int = 0,
    seed: int = 0,
    progress: Optional[Dict[str, Any]] = None,
    best_snapshot: Optional[Dict[str, torch.Tensor]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint.

    ``progress`` holds plain scalars (position in the epoch, schedule
    length, best validation Dice and step, stale epochs) and
    ``best_snapshot`` a state dict of the best validation model.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model_config.model_dump(),
        "parameters": _export_tensors(model.state_dict()),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "epoch": int(epoch),
        "seed": int(seed),
        "progress": dict(progress or {}),
        "best_snapshot": _export_tensors(best_snapshot) if best_snapshot is not None else None,
        "torch_rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.info(f"💾 Saved checkpoint at step {step} to {path}")
    return path


def checkpoint_load(
    path: Union[str, Path],
    model: torch.nn.Module,
    model_config: ModelConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    restore_rng: bool = True,
) -> Dict[str, Any]:
    """
    Restore parameters (and optimizer/RNG state) into ``model``.

    Returns the checkpoint metadata: step, epoch, seed, progress, extra and
    ``best_snapshot`` (cast to the model's dtypes, or None).

    Raises:
        FileNotFoundError: if ``path`` does not exist
        CheckpointError: on a foreign file, version mismatch, different
            ModelConfig, or parameter name/shape mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}"
        )
    saved_config = ModelConfig.model_validate(payload["model_config"])
    if saved_config != model_config:
        raise CheckpointError(
            f"{path}: checkpoint ModelConfig {saved_config.model_dump()} does not match "
            f"{model_config.model_dump()}"
        )

    current = model.state_dict()
    _check_names_and_shapes(path, payload["parameters"], current, "parameters")
    model.load_state_dict(_import_tensors(payload["parameters"], current), strict=True)

    best_snapshot = None
    if payload.get("best_snapshot") is not None:
        _check_names_and_shapes(path, payload["best_snapshot"], current, "best snapshot")
        best_snapshot = _import_tensors(payload["best_snapshot"], current)

    if optimizer is not None and payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng_state"])
    logger.info(f"✅ Loaded checkpoint from {path} (step {payload['step']})")
    return {
        "step": payload["step"],
        "epoch": payload["epoch"],
        "seed": payload["seed"],
        "progress": payload.get("progress", {}),
        "best_snapshot": best_snapshot,
        "extra": payload.get("extra", {}),
    }
