from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metatte import autodiff as ad
from metatte.errors import ConfigurationError, ConsistencyError, NumericError
from metatte.meta import (
    HISTORY_COLUMNS,
    MAX_CONSECUTIVE_FAILURES,
    TrainConfig,
    TrainingError,
    adapt,
    inner_loop,
    meta_step_size,
    meta_update,
    sample_batch,
    sample_indices,
    sample_task,
    train,
    validation_metrics,
)
from metatte.model import ModelConfig, init_params, train_step
from metatte.synthetic import benchmark_tasks
from metatte.trajectory import MetaTrajectory, Scaler, TteTask

TINY = ModelConfig.for_variant("full", "gru", 4, (8, 4))


@pytest.fixture(scope="module")
def small_tasks():
    tasks, _, _ = benchmark_tasks(n_trips=80, seed=3)
    return tasks


def _task(task_id="a", n=20, length=3, label=500.0, seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        rows = np.zeros((length, 5))
        rows[:, :2] = rng.normal(size=(length, 2))
        trajs.append(MetaTrajectory(f"{task_id}{i}", task_id, rows, label))
    return TteTask(task_id, trajs, trajs[:4], trajs[4:8])


# ---------------------------------------------------------------------------
# config and sampling


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.beta, cfg.k, cfg.eta) == (32, 0.1, 10, 7000)


@pytest.mark.parametrize("field,value", [("k", 0), ("beta", 0.0), ("eta", 0), ("batch_size", 0)])
def test_train_config_rejects(field, value):
    with pytest.raises(ConfigurationError):
        TrainConfig(**{field: value})


def test_sample_single_task():
    t = _task()
    rng = np.random.default_rng(0)
    assert all(sample_task([t], rng) is t for _ in range(20))


def test_sample_task_uniform():
    tasks = [_task("a", n=1), _task("b", n=1)]
    rng = np.random.default_rng(1)
    counts = Counter(sample_task(tasks, rng).task_id for _ in range(10_000))
    assert all(0.45 <= c / 10_000 <= 0.55 for c in counts.values())


def test_sample_task_deterministic_and_empty():
    tasks = [_task("a", n=1), _task("b", n=1), _task("c", n=1)]
    seq = lambda: [sample_task(tasks, np.random.default_rng(7)).task_id for _ in range(5)]  # noqa: E731
    assert seq() == seq()
    with pytest.raises(ConfigurationError):
        sample_task([], np.random.default_rng(0))


def test_sample_batch_shapes(small_tasks):
    task = small_tasks[0]
    scaler = Scaler((0, 0), (1, 1), 0, 1)
    batch = sample_batch(task, 32, np.random.default_rng(0), scaler)
    assert len(batch) == 32
    assert batch.lengths.max() == batch.features.shape[1]


def test_sample_batch_same_length_no_padding():
    batch = sample_batch(_task(length=4), 8, np.random.default_rng(0), Scaler((0, 0), (1, 1), 0, 1))
    assert batch.mask.all()


def test_sample_batch_replacement_and_determinism():
    a = sample_indices(5, 32, np.random.default_rng(3))
    b = sample_indices(5, 32, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert a.max() < 5


# ---------------------------------------------------------------------------
# inner loop


def test_inner_loop_zero_k_rejected():
    with pytest.raises(ConfigurationError):
        inner_loop(init_params(TINY, 0), _task(), Scaler((0, 0), (1, 1), 0, 1), 0, TINY, np.random.default_rng(0))


def test_inner_loop_k1_equals_single_adam_step():
    task = _task(seed=4)
    scaler = Scaler((0, 0), (1, 1), 480.0, 30.0)
    store = init_params(TINY, 1)
    reference = init_params(TINY, 1)
    before, after, losses = inner_loop(store, task, scaler, 1, TINY, np.random.default_rng(9), batch_size=4)
    batch = sample_batch(task, 4, np.random.default_rng(9), scaler)
    ref_loss = train_step(reference, batch, TINY)
    assert losses == [ref_loss]
    for name in after:
        assert after[name].tobytes() == reference[name].tobytes()
    for name in before:
        assert before[name].tobytes() == init_params(TINY, 1)[name].tobytes()


def test_inner_loop_fixed_point_when_loss_is_zero():
    # zero weights and constant label equal to the scaler mean: prediction 0 = target 0,
    # so every gradient vanishes except at the kink, where |x|' is 0 at x = 0
    task = _task(label=500.0)
    scaler = Scaler((0, 0), (1, 1), 500.0, 1.0)
    store = init_params(TINY, 0)
    for name in store.params:
        store.params[name] = np.zeros_like(store.params[name])
    before, after, _ = inner_loop(store, task, scaler, 3, TINY, np.random.default_rng(0), batch_size=4)
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])


def test_inner_loop_restores_on_numeric_error(monkeypatch):
    import metatte.meta as meta

    store = init_params(TINY, 0)
    snapshot = ad.clone_params(store)
    calls = {"n": 0}
    real = meta.train_step

    def flaky(st_, batch, cfg, lr):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("boom")
        return real(st_, batch, cfg, lr)

    monkeypatch.setattr(meta, "train_step", flaky)
    with pytest.raises(NumericError):
        inner_loop(store, _task(), Scaler((0, 0), (1, 1), 480, 30), 3, TINY, np.random.default_rng(0), 4)
    for name in snapshot:
        np.testing.assert_array_equal(store[name], snapshot[name])


# ---------------------------------------------------------------------------
# meta update


def test_meta_update_zero_delta():
    a = {"w": np.array([1.0, 2.0])}
    assert meta_update(a, {"w": a["w"].copy()}, 5, 0.1, 7000)["w"].tolist() == [1.0, 2.0]


def test_meta_update_examples():
    out = meta_update({"w": np.array(0.0)}, {"w": np.array(1.0)}, 1, 0.1, 7000)
    assert float(out["w"]) == pytest.approx(0.1, abs=1e-4)
    assert meta_step_size(3500, 0.1, 7000) == pytest.approx(0.05, abs=1e-15)


def test_meta_update_bounds():
    with pytest.raises(ConfigurationError):
        meta_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 0, 0.1, 10)
    with pytest.raises(ConfigurationError):
        meta_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 10, 0.1, 10)
    with pytest.raises(ConsistencyError):
        meta_update({"w": np.zeros(1)}, {"w": np.zeros(2)}, 1, 0.1, 10)


def test_schedule_strictly_decreasing():
    values = [meta_step_size(r, 0.1, 7000) for r in range(1, 7000)]
    assert all(b < a for a, b in zip(values, values[1:]))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=8),
    st.lists(st.floats(-100, 100), min_size=8, max_size=8),
    st.floats(0.001, 1.0),
    st.integers(2, 10_000),
    st.data(),
)
def test_meta_update_on_segment(theta1, theta2, beta, eta, data):
    r = data.draw(st.integers(1, eta - 1))
    a = np.array(theta1)
    b = np.array(theta2[: len(theta1)])
    out = meta_update({"w": a}, {"w": b}, r, beta, eta)["w"]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    slack = 1e-12 * (1 + np.abs(a) + np.abs(b))
    assert ((out >= lo - slack) & (out <= hi + slack)).all()


# ---------------------------------------------------------------------------
# training


def test_eta_two_runs_one_iteration(small_tasks):
    res = train(small_tasks, TINY, TrainConfig(eta=2, batch_size=4, k=2, eval_every=1))
    assert [row.iteration for row in res.history] == [1]
    assert res.history[0].val_mae is not None


def test_training_deterministic(small_tasks, tmp_path):
    cfg = dict(eta=6, batch_size=4, k=2, eval_every=2, seed=5)
    a = train(small_tasks, TINY, TrainConfig(checkpoint_dir=str(tmp_path / "a"), **cfg))
    b = train(small_tasks, TINY, TrainConfig(checkpoint_dir=str(tmp_path / "b"), **cfg))
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
    for name in ("history.csv", "final.mtte", "best.mtte"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "history.csv").read_text().splitlines()[0]
    assert header == ",".join(HISTORY_COLUMNS)


def test_training_reduces_inner_loss(small_tasks):
    # the validation pools here are tiny (17 trips per city), so the signal checked
    # is the mean inner-loop loss early versus late in training
    cfg = TrainConfig(eta=300, batch_size=16, k=5, beta=0.5, eval_every=299, seed=1)
    model = ModelConfig.for_variant("full", "gru", 8)
    res = train(small_tasks, model, cfg, store=init_params(model, 0))
    losses = [row.train_loss for row in res.history]
    assert np.mean(losses[-50:]) < 0.8 * np.mean(losses[:50])


def test_persistent_numeric_failure_is_fatal(small_tasks, monkeypatch):
    import metatte.meta as meta

    def always_fail(*args, **kwargs):
        raise NumericError("nan loss")

    monkeypatch.setattr(meta, "inner_loop", always_fail)
    with pytest.raises(TrainingError):
        train(small_tasks, TINY, TrainConfig(eta=MAX_CONSECUTIVE_FAILURES + 5))


def test_isolated_numeric_failure_is_skipped(small_tasks, monkeypatch):
    import metatte.meta as meta

    real = meta.inner_loop
    calls = {"n": 0}

    def sometimes(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("nan loss")
        return real(*args, **kwargs)

    monkeypatch.setattr(meta, "inner_loop", sometimes)
    res = train(small_tasks, TINY, TrainConfig(eta=4, batch_size=4, k=1))
    assert res.aborted == 1 and len(res.history) == 3
    assert np.isnan(res.history[1].train_loss)


def test_adapt_leaves_source_untouched(small_tasks):
    params = ad.clone_params(init_params(TINY, 0))
    copy = {k: v.copy() for k, v in params.items()}
    scaler = Scaler((0, 0), (1, 1), 600, 200)
    adapted = adapt(params, small_tasks[0], scaler, TINY, 3, np.random.default_rng(0), batch_size=4)
    for k in params:
        np.testing.assert_array_equal(params[k], copy[k])
    assert any(not np.array_equal(adapted[k], params[k]) for k in params)
