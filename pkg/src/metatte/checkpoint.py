"""Save and restore trained parameters with their configs and per-task scalers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import container
from .autodiff import ParameterStore
from .errors import CheckpointError
from .model import ModelConfig
from .trajectory import Scaler

KIND = "checkpoint"


@dataclass
class Checkpoint:
    store: ParameterStore
    scalers: dict[str, Scaler]
    model_config: ModelConfig
    train_config: dict | None = None
    extra: dict | None = None


def save_checkpoint(
    path,
    store: ParameterStore,
    scalers: Mapping[str, Scaler],
    model_config: ModelConfig,
    train_config: dict | None = None,
    extra: dict | None = None,
) -> None:
    manifest = {
        "kind": KIND,
        "model_config": model_config.to_dict(),
        "train_config": train_config,
        "scalers": {task_id: s.to_dict() for task_id, s in scalers.items()},
        "extra": extra or {},
    }
    container.write(path, manifest, store.params)


def load_checkpoint(path) -> Checkpoint:
    manifest, arrays = container.read(path)
    if manifest.get("kind") != KIND:
        raise CheckpointError(f"{path} is not a checkpoint (kind={manifest.get('kind')!r})")
    store = ParameterStore()
    for name, value in arrays.items():
        store.add(name, value)
    return Checkpoint(
        store,
        {task_id: Scaler.from_dict(d) for task_id, d in manifest["scalers"].items()},
        ModelConfig.from_dict(manifest["model_config"]),
        manifest.get("train_config"),
        manifest.get("extra"),
    )
