"""Command-line entry point.

Usage::

    metatte synth      --out-dir data --trips 2000 --seed 0
    metatte preprocess --config data/run.cfg --out data/tasks.mtte --report data/report.csv
    metatte train      --taskset data/tasks.mtte --out runs/gru --cell gru --eta 2000
    metatte evaluate   --checkpoint runs/gru/best.mtte --taskset data/tasks.mtte --buckets both
    metatte ablate     --taskset data/tasks.mtte --out runs/ablation --eta 2000

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, render_config
from .errors import CheckpointError, ConfigurationError
from .meta import TrainConfig, train
from .metrics import default_buckets, evaluate, format_table, mae, mape, predict_seconds, rmse, write_reports
from .model import CELLS, VARIANTS, ModelConfig
from .taskset import load_taskset, save_taskset
from .trajectory import TaskConstructionError, build_tasks, parse_trajectories, preprocess_task, write_report

logger = logging.getLogger("metatte")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

# (row label, variant, cell) in the order of the published comparison table
ABLATION_ROWS = (
    ("MetaTTE-WT", "wt", "lstm"),
    ("MetaTTE-WA", "wa", "lstm"),
    ("MetaTTE-LSTM", "full", "lstm"),
    ("MetaTTE-BiLSTM", "full", "bilstm"),
    ("MetaTTE-GRU", "full", "gru"),
)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cell", choices=CELLS, default=None, help="recurrent cell (default: lstm)")
    p.add_argument("--embed-dim", type=_positive_int, default=None,
                   help="embedding size D, also the RNN width n_r (default: 64)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=_positive_int, default=None, help="inner Adam steps per meta-iteration (default: 10)")
    p.add_argument("--batch-size", type=_positive_int, default=None, help="trajectories per batch (default: 32)")
    p.add_argument("--beta", type=_positive_float, default=None, help="meta step size (default: 0.1)")
    p.add_argument("--eta", type=_positive_int, default=None,
                   help="meta-iteration horizon; iterations 1..eta-1 run (default: 7000)")
    p.add_argument("--seed", type=int, default=None, help="root random seed (default: 0)")
    p.add_argument("--eval-every", type=_positive_int, default=None,
                   help="validation interval in meta-iterations (default: 100)")
    p.add_argument("--lr", type=_positive_float, default=None, help="Adam learning rate (default: 0.001)")
    p.add_argument("--config", type=Path, default=None, help="key = value run configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metatte", description="Multi-city travel-time estimation with meta-learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the two-city synthetic benchmark")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for point files, oracles and run.cfg")
    p.add_argument("--trips", type=_positive_int, default=2000, help="trips per city (default: 2000)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")

    p = sub.add_parser("preprocess", help="filter raw GPS files and build the task set")
    p.add_argument("--config", type=Path, required=True, help="thresholds, date ranges and input.<task> paths")
    p.add_argument("--out", type=Path, required=True, help="task-set file to write")
    p.add_argument("--report", type=Path, default=None, help="keep/drop report CSV (default: <out>.report.csv)")
    p.add_argument("--has-header", action="store_true", help="input files start with a header row")

    p = sub.add_parser("train", help="meta-train one model on every task")
    p.add_argument("--taskset", type=Path, required=True, help="task-set file from preprocess")
    p.add_argument("--out", type=Path, required=True, help="directory for checkpoints and history.csv")
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="full model, wt (no temporal embeddings) or wa (mean fusion) (default: full)")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file written by train")
    p.add_argument("--taskset", type=Path, required=True, help="task-set file from preprocess")
    p.add_argument("--split", choices=("val", "test"), default="test", help="pool to score (default: test)")
    p.add_argument("--buckets", choices=("none", "time", "distance", "both"), default="none",
                   help="add bucketed reports by travel time (120 s) or distance (1 km) (default: none)")
    p.add_argument("--oracle", type=Path, action="append", default=[],
                   help="oracle sidecar CSV (trip_id, oracle_seconds); adds an oracle reference table")
    p.add_argument("--out", type=Path, default=None, help="write the reports as CSV")
    p.add_argument("--config", type=Path, default=None, help="run configuration to check the checkpoint against")
    p.add_argument("--embed-dim", type=_positive_int, default=None, help="expected D of the checkpoint")

    p = sub.add_parser("ablate", help="train and compare the five model variants under one seed")
    p.add_argument("--taskset", type=Path, required=True, help="task-set file from preprocess")
    p.add_argument("--out", type=Path, required=True, help="directory with one sub-directory per variant")
    p.add_argument("--embed-dim", type=_positive_int, default=None, help="embedding size D (default: 64)")
    _add_train_flags(p)
    return parser


# ---------------------------------------------------------------------------
# configuration merging


def _load_run_config(path) -> RunConfig:
    return load_config(path) if path is not None else RunConfig()


def _as(kind, key, value):
    try:
        return kind(value)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None


def _train_config(args, run: RunConfig, checkpoint_dir=None) -> TrainConfig:
    kinds = {"k": int, "batch_size": int, "beta": float, "eta": int, "seed": int, "eval_every": int, "lr": float}
    values = {key: _as(kinds[key], f"train.{key}", v) for key, v in run.train.items()}
    for key in kinds:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir), **values)


def _model_config(args, run: RunConfig, variant=None, cell=None) -> ModelConfig:
    m = run.model
    variant = variant or getattr(args, "variant", None) or m.get("variant", "full")
    cell = cell or getattr(args, "cell", None) or m.get("cell", "lstm")
    embed_dim = getattr(args, "embed_dim", None) or _as(int, "model.embed_dim", m.get("embed_dim", 64))
    if "rnn_units" in m and _as(int, "model.rnn_units", m["rnn_units"]) != embed_dim:
        raise ConfigurationError(f"model.rnn_units must equal embed_dim {embed_dim}")
    widths = None
    if "decoder_widths" in m:
        widths = [_as(int, "model.decoder_widths", w) for w in m["decoder_widths"].replace(",", " ").split()]
    return ModelConfig.for_variant(variant, cell, embed_dim, widths)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synthetic import FAST_CITY, SLOW_CITY, SYNTHETIC_THRESHOLDS, generate_city, write_oracle, write_points
    from .trajectory import CHENGDU_SPLIT, PreprocessConfig

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    specs = (SLOW_CITY, FAST_CITY)
    inputs = {}
    for spec, ss in zip(specs, np.random.SeedSequence(args.seed).spawn(len(specs))):
        corpus = generate_city(spec, args.trips, int(ss.generate_state(1)[0]))
        write_points(corpus, out / f"{spec.task_id}.csv")
        write_oracle(corpus, out / f"{spec.task_id}.oracle.csv")
        inputs[spec.task_id] = f"{spec.task_id}.csv"
        print(f"{spec.task_id}: {len(corpus.trajectories)} trips -> {out / (spec.task_id + '.csv')}")
    pre = PreprocessConfig({s.task_id: SYNTHETIC_THRESHOLDS[s.task_id] for s in specs})
    text = render_config(pre, {s.task_id: CHENGDU_SPLIT for s in specs}, inputs)
    (out / "run.cfg").write_text(text, encoding="utf-8")
    print(f"configuration -> {out / 'run.cfg'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    run = load_config(args.config)
    if not run.inputs:
        raise ConfigurationError("configuration lists no input.<task> files")
    pre = run.preprocess_config(list(run.inputs))
    splits, reports = {}, []
    for task_id, path in run.inputs.items():
        ranges = run.split_ranges(task_id)
        parsed = parse_trajectories(path, task_id, has_header=args.has_header)
        splits[task_id], report = preprocess_task(parsed, task_id, pre, ranges)
        reports.append(report)
        for line in parsed.diagnostics[:5]:
            logger.warning("%s: %s", task_id, line)
    report_path = args.report or args.out.with_name(args.out.name + ".report.csv")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(reports, report_path)
    try:
        tasks = build_tasks(splits)
    except TaskConstructionError as exc:
        tasks = []
        logger.warning("no task set built: %s", exc)
    save_taskset(args.out, tasks, pre)
    for r in reports:
        dropped = sum(r.dropped.values())
        print(f"{r.task_id}: parsed {r.parsed}, kept {r.kept}, dropped {dropped}, "
              f"train/val/test {r.train}/{r.val}/{r.test}")
    print(f"task set -> {args.out}; report -> {report_path}")
    return EXIT_OK


def _load_tasks(path):
    tasks, pre = load_taskset(path)
    if not tasks:
        raise ConfigurationError(f"task set {path} holds no tasks")
    return tasks, pre


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    model_config = _model_config(args, run)
    cfg = _train_config(args, run, args.out)
    tasks, _ = _load_tasks(args.taskset)
    result = train(tasks, model_config, cfg)
    print(f"trained {model_config.variant}/{model_config.cell} for {cfg.eta - 1} meta-iterations; "
          f"best validation MAE {result.best_val_mae:.2f} s at iteration {result.best_iteration}")
    print(f"outputs -> {args.out}")
    return EXIT_OK


def _oracle_reports(pool, paths):
    from .metrics import MetricsReport
    from .synthetic import read_oracle

    oracle = {}
    for p in paths:
        oracle.update(read_oracle(p))
    hits = [t for t in pool if t.id in oracle]
    if not hits:
        raise ConfigurationError("oracle sidecar shares no trip ids with the evaluated pool")
    out = [MetricsReport.compute("oracle:overall", [oracle[t.id] for t in hits], [t.label for t in hits])]
    for task_id in dict.fromkeys(t.task_id for t in hits):
        sub = [t for t in hits if t.task_id == task_id]
        out.append(MetricsReport.compute(f"oracle:{task_id}", [oracle[t.id] for t in sub], [t.label for t in sub]))
    return out


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _load_run_config(args.config)
    expected = args.embed_dim or (int(run.model["embed_dim"]) if "embed_dim" in run.model else None)
    if expected is not None and expected != ckpt.model_config.embed_dim:
        raise ConfigurationError(
            f"checkpoint has embed_dim {ckpt.model_config.embed_dim}, configuration expects {expected}")
    for key in ("cell", "variant"):
        if key in run.model and run.model[key] != getattr(ckpt.model_config, key):
            raise ConfigurationError(
                f"checkpoint has {key} {getattr(ckpt.model_config, key)!r}, configuration expects {run.model[key]!r}")
    tasks, pre = _load_tasks(args.taskset)
    missing = [t.task_id for t in tasks if t.task_id not in ckpt.scalers]
    if missing:
        raise ConfigurationError(f"checkpoint has no scaler for task(s) {', '.join(missing)}")
    pool = getattr(tasks[0], args.split)
    buckets = [] if args.buckets == "none" else default_buckets(pre.tasks.values(), args.buckets)
    reports = evaluate(ckpt.store, ckpt.model_config, pool, ckpt.scalers, buckets)
    if args.oracle:
        reports += _oracle_reports(pool, args.oracle)
    print(format_table(reports))
    if args.out is not None:
        write_reports(reports, args.out)
    return EXIT_OK


ABLATION_COLUMNS = ("model", "variant", "cell", "val_mae", "val_mape", "val_rmse",
                    "test_mae", "test_mape", "test_rmse")


def _ablation_row(label, variant, cell, ckpt_path, tasks):
    ckpt = load_checkpoint(ckpt_path)
    row = [label, variant, cell]
    for pool in (tasks[0].val, tasks[0].test):
        pred = predict_seconds(ckpt.store, ckpt.model_config, pool, ckpt.scalers)
        truth = np.array([t.label for t in pool])
        row += [mae(pred, truth), mape(pred, truth), rmse(pred, truth)]
    return row


def run_ablation(tasks, out: Path, cfg_for, model_for, seed: int) -> list[list]:
    """Train each variant into ``out/<variant>-<cell>`` unless its checkpoint exists; return table rows."""
    rows = []
    for label, variant, cell in ABLATION_ROWS:
        run_dir = out / f"{variant}-{cell}"
        done = run_dir / "final.mtte"
        model_config = model_for(variant, cell)
        if done.exists() and (run_dir / "history.csv").exists():
            logger.info("%s: reusing %s", label, done)
        else:
            train(tasks, model_config, cfg_for(run_dir))
        best = run_dir / "best.mtte"
        rows.append(_ablation_row(label, variant, cell, best if best.exists() else done, tasks))
    return rows


def write_ablation(rows, seed: int, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([*row[:3], *(repr(v) for v in row[3:])])


def cmd_ablate(args) -> int:
    run = _load_run_config(args.config)
    tasks, _ = _load_tasks(args.taskset)
    base = _train_config(args, run)
    args.out.mkdir(parents=True, exist_ok=True)

    def cfg_for(run_dir):
        return _train_config(args, run, run_dir)

    def model_for(variant, cell):
        return _model_config(args, run, variant=variant, cell=cell)

    rows = run_ablation(tasks, args.out, cfg_for, model_for, base.seed)
    write_ablation(rows, base.seed, args.out / "ablation.csv")
    print(f"seed {base.seed}")
    print(f"{'model':<16}{'val MAE':>10}{'val MAPE':>10}{'test MAE':>10}{'test MAPE':>10}")
    for row in rows:
        print(f"{row[0]:<16}{row[3]:>10.2f}{row[4]:>10.2f}{row[6]:>10.2f}{row[7]:>10.2f}")
    print(f"table -> {args.out / 'ablation.csv'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValueError) as exc:
        print(f"metatte {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"metatte {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
