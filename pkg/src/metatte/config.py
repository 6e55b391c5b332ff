"""Flat ``section.key = value`` run configuration files.

Example::

    # thresholds and date splits per city task
    task.chengdu.min_time = 315
    task.chengdu.max_time = 1174
    task.chengdu.min_dist = 1.84
    task.chengdu.max_dist = 8.14
    task.chengdu.timezone = Asia/Shanghai
    task.chengdu.train = 2014-08-03..2014-08-16
    task.chengdu.val = 2014-08-21..2014-08-22
    task.chengdu.test = 2014-08-24..2014-08-29
    input.chengdu = data/chengdu.csv
    model.cell = gru
    train.eta = 7000
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .trajectory import DateRange, PreprocessConfig, SplitRanges, TaskThresholds

TASK_KEYS = {"min_time", "max_time", "min_dist", "max_dist", "timezone", "train", "val", "test"}
MODEL_KEYS = {"embed_dim", "rnn_units", "cell", "variant", "decoder_widths"}
TRAIN_KEYS = {"k", "batch_size", "beta", "eta", "seed", "eval_every", "lr"}
_THRESHOLD_KEYS = ("min_time", "max_time", "min_dist", "max_dist")


@dataclass
class RunConfig:
    tasks: dict[str, dict[str, str]] = field(default_factory=dict)
    inputs: dict[str, Path] = field(default_factory=dict)
    model: dict[str, str] = field(default_factory=dict)
    train: dict[str, str] = field(default_factory=dict)

    def preprocess_config(self, task_ids=None) -> PreprocessConfig:
        out = {}
        for task_id in task_ids if task_ids is not None else self.tasks:
            entry = self.tasks.get(task_id, {})
            missing = [k for k in _THRESHOLD_KEYS if k not in entry]
            if missing:
                raise ConfigurationError(f"task {task_id!r} is missing thresholds: {', '.join(missing)}")
            try:
                values = [float(entry[k]) for k in _THRESHOLD_KEYS]
            except ValueError as exc:
                raise ConfigurationError(f"task {task_id!r}: {exc}") from None
            out[task_id] = TaskThresholds(*values, timezone=entry.get("timezone", "UTC"))
        return PreprocessConfig(out)

    def split_ranges(self, task_id: str) -> SplitRanges:
        entry = self.tasks.get(task_id, {})
        missing = [k for k in ("train", "val", "test") if k not in entry]
        if missing:
            raise ConfigurationError(f"task {task_id!r} is missing date ranges: {', '.join(missing)}")
        try:
            return SplitRanges(*(DateRange.parse(entry[k]) for k in ("train", "val", "test")))
        except ValueError as exc:
            raise ConfigurationError(f"task {task_id!r}: bad date range: {exc}") from None


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        parts = key.split(".")
        section = parts[0]
        if section == "task" and len(parts) == 3 and parts[2] in TASK_KEYS:
            cfg.tasks.setdefault(parts[1], {})[parts[2]] = value
        elif section == "input" and len(parts) == 2:
            path = Path(value)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            cfg.inputs[parts[1]] = path
        elif section == "model" and len(parts) == 2 and parts[1] in MODEL_KEYS:
            cfg.model[parts[1]] = value
        elif section == "train" and len(parts) == 2 and parts[1] in TRAIN_KEYS:
            cfg.train[parts[1]] = value
        else:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
    for task_id, path in cfg.inputs.items():
        if not path.exists():
            raise FileNotFoundError(f"input file for task {task_id!r} does not exist: {path}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def render_config(pre: PreprocessConfig, splits: dict[str, SplitRanges], inputs: dict[str, str] | None = None) -> str:
    lines = []
    for task_id, th in pre.tasks.items():
        for k in _THRESHOLD_KEYS:
            lines.append(f"task.{task_id}.{k} = {getattr(th, k)!r}")
        lines.append(f"task.{task_id}.timezone = {th.timezone}")
        if task_id in splits:
            s = splits[task_id]
            lines += [f"task.{task_id}.train = {s.train}", f"task.{task_id}.val = {s.val}", f"task.{task_id}.test = {s.test}"]
        if inputs and task_id in inputs:
            lines.append(f"input.{task_id} = {inputs[task_id]}")
    return "\n".join(lines) + "\n"
