"""Serialize preprocessed task sets into the shared container format."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from . import container
from .errors import CheckpointError
from .trajectory import MetaTrajectory, PreprocessConfig, TaskThresholds, TteTask

KIND = "taskset"


def save_taskset(path, tasks: list[TteTask], cfg: PreprocessConfig) -> None:
    """Write every trajectory once, tagged with its task and split.

    Val/test pools are shared across tasks, so they are stored once and
    rebuilt as shared lists on load.
    """
    records = []
    chunks, labels, dists = [], [], []

    def put(traj: MetaTrajectory, split: str) -> None:
        records.append({"id": traj.id, "task_id": traj.task_id, "split": split, "length": len(traj)})
        chunks.append(traj.rows)
        labels.append(traj.label)
        dists.append(traj.distance_km)

    for task in tasks:
        for traj in task.train:
            put(traj, "train")
    if tasks:
        for traj in tasks[0].val:
            put(traj, "val")
        for traj in tasks[0].test:
            put(traj, "test")
    manifest = {
        "kind": KIND,
        "task_ids": [t.task_id for t in tasks],
        "thresholds": {k: asdict(v) for k, v in cfg.tasks.items()},
        "trajectories": records,
    }
    arrays = {
        "rows": np.concatenate(chunks) if chunks else np.zeros((0, 5)),
        "labels": np.array(labels, dtype=np.float64),
        "distance_km": np.array(dists, dtype=np.float64),
    }
    container.write(path, manifest, arrays)


def load_taskset(path) -> tuple[list[TteTask], PreprocessConfig]:
    manifest, arrays = container.read(path)
    if manifest.get("kind") != KIND:
        raise CheckpointError(f"{path} is not a task set (kind={manifest.get('kind')!r})")
    cfg = PreprocessConfig({k: TaskThresholds(**v) for k, v in manifest["thresholds"].items()})
    rows = arrays["rows"].reshape(-1, 5)
    train: dict[str, list] = {task_id: [] for task_id in manifest["task_ids"]}
    val, test = [], []
    offset = 0
    for i, rec in enumerate(manifest["trajectories"]):
        n = rec["length"]
        traj = MetaTrajectory(
            rec["id"], rec["task_id"], rows[offset : offset + n].copy(),
            float(arrays["labels"][i]), float(arrays["distance_km"][i]),
        )
        offset += n
        {"train": train.get(rec["task_id"]), "val": val, "test": test}[rec["split"]].append(traj)
    tasks = [TteTask(task_id, trajs, val, test) for task_id, trajs in train.items()]
    return tasks, cfg
