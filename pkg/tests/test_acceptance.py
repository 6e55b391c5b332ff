"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The long training runs (criteria 6, 7, 8, 9) share one session-scoped
meta-training run and take roughly half an hour on a single core.
"""

import math

import numpy as np
import pytest

from metatte import autodiff as ad
from metatte.autodiff import Tensor
from metatte.checkpoint import load_checkpoint
from metatte.gradcheck import check_gradients
from metatte.meta import TrainConfig, adapt, meta_step_size, meta_update, sample_batch, train
from metatte.metrics import mae, mape, predict_seconds, rmse
from metatte.model import ModelConfig, attention_fuse, forward, init_params, loss, make_batch, train_step
from metatte.synthetic import benchmark_tasks
from metatte.trajectory import (
    CHENGDU,
    RULE1_DISTANCE,
    RULE1_TIME,
    RULE2,
    RULE3,
    GpsPoint,
    MetaTrajectory,
    PreprocessConfig,
    RawTrajectory,
    Scaler,
    apply_rules,
    fit_scaler,
)

META_SEED = 0
META_TRIPS = 2000


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _random_meta(rng, i, length):
    rows = np.zeros((length, 5))
    rows[:, :2] = rng.normal(size=(length, 2))
    rows[:, 2] = rng.integers(0, 7)
    rows[:, 3] = rng.integers(0, 24, size=length)
    return MetaTrajectory(f"g{i}", "a", rows, float(rng.uniform(300, 900)))


def test_criterion_01_gradients(criterion):
    rng = np.random.default_rng(0)
    batch = make_batch([_random_meta(rng, i, 3) for i in range(2)], Scaler((0, 0), (1, 1), 600.0, 200.0))
    worst = {}
    for cell in ("lstm", "gru", "bilstm"):
        cfg = ModelConfig.for_variant("full", cell, 4)
        store = init_params(cfg, 1)
        # random non-zero biases and embeddings so no gate or channel is trivially flat
        prng = np.random.default_rng(2)
        params = {k: v + prng.normal(scale=0.3, size=v.shape) for k, v in store.params.items()}
        err = check_gradients(lambda leaves: loss(forward(batch, leaves, cfg), batch.targets), params, step=1e-5)
        worst[cell] = max(err.values())
    ok = max(worst.values()) < 1e-4
    criterion(1, "gradient correctness", ok,
              ", ".join(f"{c} max rel err {e:.1e}" for c, e in worst.items()) + " (limit 1e-4)")
    assert ok


# ---------------------------------------------------------------------------
# 2. preprocessing exactness


def _north(tid, km, seconds, n=8, t0=1.4076e9, lat0=30.6, lon0=104.0, times=None):
    dlat = km / (math.pi * 6371.0 / 180.0)
    times = times if times is not None else [t0 + seconds * i / (n - 1) for i in range(n)]
    return RawTrajectory(tid, "chengdu", [GpsPoint(lat0 + dlat * i / (n - 1), lon0, t) for i, t in enumerate(times)])


def _planted_fixture():
    rng = np.random.default_rng(5)
    trajs, planted = [], {}

    def add(traj, rule=None):
        trajs.append(traj)
        if rule:
            planted[traj.id] = rule

    for i in range(170):
        add(_north(f"ok{i}", rng.uniform(2.0, 7.0), rng.uniform(400, 1100), n=int(rng.integers(3, 20))))
    for i in range(10):
        seconds = rng.uniform(100, 300) if i < 5 else rng.uniform(1200, 2000)
        add(_north(f"time{i}", 3.0, seconds), RULE1_TIME)
    for i in range(10):
        km = rng.uniform(0.5, 1.5) if i < 5 else rng.uniform(9.0, 12.0)
        add(_north(f"dist{i}", km, 600.0), RULE1_DISTANCE)
    for i in range(5):
        # repeated fixes at one location, otherwise a plausible duration
        pts = [GpsPoint(30.6, 104.0, 1.4076e9 + 60.0 * j) for j in range(1 + i)]
        add(RawTrajectory(f"single{i}", "chengdu", pts), RULE2)
    for i in range(5):
        t0 = 1.4076e9
        times = [t0] * 6 if i < 3 else [t0 + 600.0 - 120.0 * j for j in range(6)]
        add(_north(f"dur{i}", 3.0, 0.0, n=6, times=times), RULE3)
    order = rng.permutation(len(trajs))
    return [trajs[i] for i in order], planted


def test_criterion_02_preprocessing(criterion):
    trajs, planted = _planted_fixture()
    assert len(trajs) == 200
    cfg = PreprocessConfig({"chengdu": CHENGDU})
    dropped = {}
    for traj in trajs:
        verdict = apply_rules(traj, cfg)
        if not verdict.keep:
            dropped[traj.id] = verdict.reason
    counts = {rule: sum(r == rule for r in dropped.values()) for rule in (RULE1_TIME, RULE1_DISTANCE, RULE2, RULE3)}
    ok = dropped == planted
    criterion(2, "preprocessing exactness", ok,
              f"dropped {len(dropped)}/200 by rule {counts}, planted set matched exactly: {ok}")
    assert ok


# ---------------------------------------------------------------------------
# 3. attention simplex


def test_criterion_03_attention_simplex(criterion):
    rng = np.random.default_rng(3)
    worst_sum = worst_fix = 0.0
    for _ in range(1000):
        b, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        scale = 10.0 ** rng.uniform(-2, 2)
        feats = [Tensor(rng.normal(scale=scale, size=(b, d))) for _ in range(3)]
        w, bias = Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=3))
        _, weights = attention_fuse(feats, w, bias)
        worst_sum = max(worst_sum, float(np.max(np.abs(weights.data.sum(axis=-1) - 1.0))))
        x = feats[0]
        fused, _ = attention_fuse([x, x, x], w, bias)
        worst_fix = max(worst_fix, float(np.max(np.abs(fused.data - x.data) / np.maximum(1.0, np.abs(x.data)))))
    ok = worst_sum <= 1e-12 and worst_fix <= 1e-12
    criterion(3, "attention simplex", ok,
              f"max |sum - 1| {worst_sum:.1e}, max |fuse(X,X,X) - X| {worst_fix:.1e} (limit 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 4. meta-update algebra


def test_criterion_04_meta_update(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    off_segment = 0
    cases = 0
    for eta in (2, 3, 10, 100, 2000, 7000):
        for beta in (0.01, 0.1, 0.5, 1.0):
            for r in sorted({1, 2, eta // 2, eta - 1} & set(range(1, eta))):
                a, b = rng.normal(size=16) * 10, rng.normal(size=16) * 10
                out = meta_update({"w": a}, {"w": b}, r, beta, eta)["w"]
                oracle = [x + beta * (1 - r / eta) * (y - x) for x, y in zip(a.tolist(), b.tolist())]
                worst = max(worst, max(abs(o - p) for o, p in zip(oracle, out.tolist())))
                lo, hi = np.minimum(a, b), np.maximum(a, b)
                slack = 1e-12 * (1 + np.abs(a) + np.abs(b))
                off_segment += int(((out < lo - slack) | (out > hi + slack)).sum())
                cases += 1
    first = float(meta_update({"w": np.array(0.0)}, {"w": np.array(1.0)}, 1, 0.1, 7000)["w"])
    half = meta_step_size(3500, 0.1, 7000)
    ok = worst <= 1e-12 and off_segment == 0 and abs(first - 0.1) < 1e-4 and abs(half - 0.05) < 1e-15
    criterion(4, "meta-update algebra", ok,
              f"{cases} grid cases, max |oracle diff| {worst:.1e}, off-segment components {off_segment}, "
              f"r=1 step {first:.6f}, r=eta/2 factor {half:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 5. single-batch overfit


def test_criterion_05_overfit(criterion):
    tasks, _, _ = benchmark_tasks(n_trips=60, seed=11)
    task = tasks[0]
    scaler = fit_scaler(task.train)
    batch = sample_batch(task, 8, np.random.default_rng(0), scaler)
    cfg = ModelConfig.for_variant("full", "lstm", 16)
    store = init_params(cfg, 0)
    losses = [train_step(store, batch, cfg) for _ in range(200)]
    final = float(loss(forward(batch, store.leaves(), cfg), batch.targets).data)
    ratio = final / losses[0]
    ok = ratio < 0.05
    criterion(5, "single-batch overfit", ok,
              f"loss {losses[0]:.4f} -> {final:.5f} after 200 Adam steps ({100 * ratio:.2f}% of initial, limit 5%)")
    assert ok


# ---------------------------------------------------------------------------
# shared meta-training run for criteria 6, 7 and 9

META_MODEL = ModelConfig.for_variant("full", "gru", 32)


def _meta_cfg(out):
    return TrainConfig(k=10, batch_size=32, beta=0.1, eta=2000, seed=META_SEED, eval_every=100,
                       checkpoint_dir=str(out))


@pytest.fixture(scope="session")
def benchmark():
    tasks, _, _ = benchmark_tasks(n_trips=META_TRIPS, seed=META_SEED)
    return tasks


@pytest.fixture(scope="session")
def meta_run(benchmark, tmp_path_factory):
    out = tmp_path_factory.mktemp("meta") / "run"
    result = train(benchmark, META_MODEL, _meta_cfg(out))
    return result, out


def _task_pool(pool, task_id):
    return [t for t in pool if t.task_id == task_id]


@pytest.mark.slow
def test_criterion_06_adaptation_benefit(benchmark, meta_run, criterion):
    result, out = meta_run
    meta_params = load_checkpoint(out / "final.mtte").store.params
    scalers = result.scalers
    wins, reductions = 0, []
    for trial in range(10):
        meta_mae, fresh_mae = [], []
        fresh = init_params(META_MODEL, 10_000 + trial).params
        for j, task in enumerate(benchmark):
            pool = _task_pool(task.val, task.task_id)
            truth = np.array([t.label for t in pool])
            for start, sink in ((meta_params, meta_mae), (fresh, fresh_mae)):
                # both starts see the same ten batches
                rng = np.random.default_rng([trial, j])
                adapted = adapt(start, task, scalers[task.task_id], META_MODEL, 10, rng)
                sink.append(mae(predict_seconds(adapted, META_MODEL, pool, scalers), truth))
        m, f = float(np.mean(meta_mae)), float(np.mean(fresh_mae))
        wins += m < f
        reductions.append(1.0 - m / f)
    median = float(np.median(reductions))
    ok = wins >= 9 and median >= 0.30
    criterion(6, "reptile adaptation benefit", ok,
              f"meta-trained start wins {wins}/10 trials, median MAE reduction {100 * median:.1f}% "
              f"(need >= 9/10 and >= 30%)")
    assert ok


@pytest.mark.slow
def test_criterion_07_single_model_multi_task(benchmark, meta_run, criterion):
    result, out = meta_run
    ckpt = load_checkpoint(out / "final.mtte")
    # one parameter store; per-task state lives only in the scalers
    task_ids = [t.task_id for t in benchmark]
    assert not any(tid in name for name in ckpt.store.names() for tid in task_ids)
    pool = benchmark[0].val
    per_task = {}
    for tid in task_ids:
        sub = _task_pool(pool, tid)
        per_task[tid] = mape(predict_seconds(ckpt.store, ckpt.model_config, sub, ckpt.scalers),
                             [t.label for t in sub])
    ok = all(v <= 15.0 for v in per_task.values())
    criterion(7, "single model on both tasks", ok,
              ", ".join(f"{k} val MAPE {v:.2f}%" for k, v in per_task.items()) + " (limit 15%)")
    assert ok


def test_trained_model_beats_untrained_start(benchmark, meta_run):
    result, _ = meta_run
    pool = benchmark[0].val
    truth = [t.label for t in pool]
    untrained = init_params(META_MODEL, 0)
    before = mae(predict_seconds(untrained, META_MODEL, pool, result.scalers), truth)
    after = mae(predict_seconds(result.store, META_MODEL, pool, result.scalers), truth)
    assert after < before


# ---------------------------------------------------------------------------
# 8. ablation ordering

ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_D = 16
ABLATION_ETA = 400


def _holds(err_a, err_b):
    """a <= b, with a tie allowed when a's excess is within two paired standard errors."""
    diff = err_a - err_b
    se = diff.std(ddof=1) / math.sqrt(len(diff))
    return diff.mean() <= 2.0 * se


@pytest.mark.slow
def test_criterion_08_ablation_ordering(benchmark, criterion):
    pool = benchmark[0].val
    truth = np.array([t.label for t in pool])
    table = {v: [] for v in ("full", "wa", "wt")}
    agree = 0
    for seed in ABLATION_SEEDS:
        errs = {}
        for variant in table:
            model = ModelConfig.for_variant(variant, "lstm", ABLATION_D)
            res = train(benchmark, model, TrainConfig(eta=ABLATION_ETA, eval_every=ABLATION_ETA, seed=seed))
            errs[variant] = np.abs(predict_seconds(res.store, model, pool, res.scalers) - truth)
            table[variant].append(float(errs[variant].mean()))
        agree += _holds(errs["full"], errs["wa"]) and _holds(errs["wa"], errs["wt"])
    medians = {v: float(np.median(m)) for v, m in table.items()}
    ok = agree >= 3
    criterion(8, "ablation ordering", ok,
              f"LSTM <= WA <= WT in {agree}/5 seeds; median val MAE LSTM {medians['full']:.1f}, "
              f"WA {medians['wa']:.1f}, WT {medians['wt']:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism


@pytest.mark.slow
def test_criterion_09_determinism(benchmark, meta_run, tmp_path, criterion):
    _, first = meta_run
    second = tmp_path / "again"
    train(benchmark, META_MODEL, _meta_cfg(second))
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("history.csv", "final.mtte", "best.mtte")}
    ok = all(same.values())
    criterion(9, "determinism", ok, ", ".join(f"{k} identical: {v}" for k, v in same.items()))
    assert ok


# ---------------------------------------------------------------------------
# 10. metric oracles


def test_criterion_10_metric_oracles(criterion):
    rng = np.random.default_rng(10)
    worst = 0.0
    order_violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        truth = rng.uniform(30, 3000, n)
        pred = truth + rng.normal(scale=rng.uniform(0.1, 500), size=n)
        p, t = pred.tolist(), truth.tolist()
        oracle_mae = math.fsum(abs(a - b) for a, b in zip(p, t)) / n
        oracle_mape = 100.0 * math.fsum(abs(a - b) / abs(b) for a, b in zip(p, t)) / n
        oracle_rmse = math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(p, t)) / n)
        for got, want in ((mae(pred, truth), oracle_mae), (mape(pred, truth), oracle_mape),
                          (rmse(pred, truth), oracle_rmse)):
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
        order_violations += mae(pred, truth) > rmse(pred, truth)
    ok = worst <= 1e-12 and order_violations == 0
    criterion(10, "metric oracles", ok,
              f"1000 arrays, max rel diff {worst:.1e} (limit 1e-12), mae > rmse in {order_violations} cases")
    assert ok
