"""Checkpoint directory: ``model.pt`` parameter blob plus ``checkpoint.json``."""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path

import torch

from ..config import RunConfig, config_from_dict
from ..model import VIRD
from ..synthdata.scene import SynthParams

CHECKPOINT_VERSION = 1
BLOB = "model.pt"
MANIFEST = "checkpoint.json"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: VIRD, directory, epoch: int, step: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (BLOB + ".tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, directory / BLOB)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "step": step,
        "seed": model.cfg.train.seed,
        "config": model.cfg.to_dict(),
        "data": asdict(model.data),
        "shapes": model.manifest(),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_checkpoint_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"{path} is missing")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('format_version')!r} != {CHECKPOINT_VERSION}")
    return manifest


def load_checkpoint(directory, config: RunConfig | None = None) -> VIRD:
    """Rebuild the model stored in ``directory`` (in eval mode).

    ``config`` replaces the stored configuration, e.g. to change evaluation
    grids; architecture fields must match the stored parameters.
    """
    directory = Path(directory)
    manifest = read_checkpoint_manifest(directory)
    cfg = config or config_from_dict(manifest["config"])
    model = VIRD(cfg, SynthParams(**manifest["data"]))
    state = torch.load(directory / BLOB, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameters in {directory} do not match the configuration: {exc}") from exc
    model.eval()
    return model
