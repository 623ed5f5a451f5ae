import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aicrn import tensor as T
from aicrn.data import Dataset
from aicrn.errors import ConfigError, R2UndefinedError, ShapeError, TrainingError
from aicrn.network import AicrnConfig, build, load_weights
from aicrn.tensor import Tensor
from aicrn.training import (
    Decision,
    EarlyStopState,
    NadamState,
    TrainConfig,
    compute_metrics,
    early_stop_observe,
    fit,
    mse_loss,
    nadam_step,
)

from conftest import leaf

TINY = AicrnConfig(input_len=16, stem_width=4, num_blocks=1, cbam_ratio=2, stem_kernel=3, block_kernel=3)


# --- loss -------------------------------------------------------------------


def test_mse_values_and_gradient():
    assert mse_loss(Tensor([[1.0], [2.0]]), Tensor([[1.0], [2.0]])).data == 0
    assert mse_loss(Tensor([[0.0], [0.0]]), Tensor([[1.0], [3.0]])).data == 5.0
    p = leaf([[0.5], [-1.0], [2.0]])
    t = np.array([[1.0], [1.0], [1.0]])
    T.backward(mse_loss(p, Tensor(t)))
    np.testing.assert_allclose(p.grad, 2 * (p.data - t) / 3, rtol=1e-12)
    with pytest.raises(ShapeError):
        mse_loss(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


# --- Nadam ------------------------------------------------------------------


def test_nadam_two_step_hand_trace():
    theta = leaf([0.0])
    s = NadamState()
    lr, b1, b2, eps = 0.0005, 0.9, 0.999, 1e-8

    # step 1: m = 0.1, v = 0.001
    m1_hat = 0.1 / (1 - 0.81)
    g1_hat = 1 / 0.1
    v1_hat = 0.001 / 0.001
    after1 = 0.0 - lr * (b1 * m1_hat + (1 - b1) * g1_hat) / (math.sqrt(v1_hat) + eps)
    # step 2: m = 0.09 + 0.1 = 0.19, v = 0.000999 + 0.001 = 0.001999
    m2_hat = 0.19 / (1 - 0.729)
    g2_hat = 1 / (1 - 0.81)
    v2_hat = 0.001999 / (1 - 0.998001)
    after2 = after1 - lr * (b1 * m2_hat + (1 - b1) * g2_hat) / (math.sqrt(v2_hat) + eps)

    nadam_step({"w": theta}, {"w": np.array([1.0])}, s)
    assert abs(theta.data[0] - after1) < 1e-12
    nadam_step({"w": theta}, {"w": np.array([1.0])}, s)
    assert abs(theta.data[0] - after2) < 1e-12
    assert s.t == 2
    assert abs(s.m["w"][0] - 0.19) < 1e-15 and abs(s.v["w"][0] - 0.001999) < 1e-15


def test_nadam_zero_gradient_leaves_parameters():
    theta = leaf(np.random.default_rng(0).standard_normal(5))
    before = theta.data.copy()
    s = NadamState()
    for _ in range(3):
        nadam_step({"w": theta}, {"w": np.zeros(5)}, s)
    assert theta.data.tobytes() == before.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(-5, 5))
def test_nadam_zero_betas_is_sign_sgd(gs, theta0):
    g = np.array(gs)
    theta = leaf(np.full(g.shape, theta0))
    nadam_step({"w": theta}, {"w": g}, NadamState(lr=0.01, beta1=0.0, beta2=0.0))
    np.testing.assert_allclose(theta.data, theta0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_nadam_step_bound(seed):
    rng = np.random.default_rng(seed)
    theta = leaf(rng.standard_normal(50))
    s = NadamState()
    for _ in range(30):
        before = theta.data.copy()
        g = rng.standard_normal(50) * 10 ** rng.uniform(-4, 4, 50)
        nadam_step({"w": theta}, {"w": g}, s)
        bound = s.lr * (1 + s.beta1) / (1 - s.beta1**s.t)
        assert np.all(np.abs(theta.data - before) <= bound * (1 + 1e-12))
        assert np.all(s.v["w"] >= 0)


def test_nadam_rejects_non_finite_gradient():
    with pytest.raises(TrainingError, match="'w'"):
        nadam_step({"w": leaf([0.0])}, {"w": np.array([np.nan])}, NadamState())


# --- metrics ----------------------------------------------------------------


def test_metrics_hand_values():
    m = compute_metrics([1.0, 2.0], [2.0, 4.0])
    assert m["mae"] == 1.5 and m["rmse"] == math.sqrt(2.5)
    assert m["r2"] == 1 - 5.0 / 2.0
    perfect = compute_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert perfect == {"mae": 0.0, "rmse": 0.0, "r2": 1.0}
    t = np.array([1.0, 4.0, 2.0, 9.0])
    assert compute_metrics(np.full(4, t.mean()), t)["r2"] == 0.0


def test_metrics_constant_target_keeps_mae_rmse():
    with pytest.raises(R2UndefinedError) as info:
        compute_metrics([1.0, 3.0], [2.0, 2.0])
    assert info.value.mae == 1.0 and info.value.rmse == 1.0


def test_metrics_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(2, 10))
        p, t = rng.standard_normal(n), rng.standard_normal(n)
        m = compute_metrics(p, t)
        assert m["rmse"] >= m["mae"] - 1e-15
        assert m["r2"] <= 1.0


# --- early stopping ---------------------------------------------------------


def trace(losses, patience, min_delta=0.0):
    s = EarlyStopState(patience=patience, min_delta=min_delta)
    out = []
    for loss in losses:
        out.append((early_stop_observe(s, loss), s.counter))
        if out[-1][0] is Decision.STOP:
            break
    return out


def test_early_stop_monotone():
    assert [d for d, _ in trace([5, 4, 3], 2)] == [Decision.IMPROVED] * 3


def test_early_stop_plateau():
    assert trace([3, 3, 3, 3], 2) == [
        (Decision.IMPROVED, 0),
        (Decision.CONTINUE, 1),
        (Decision.CONTINUE, 2),
        (Decision.STOP, 3),
    ]


def test_early_stop_min_delta():
    assert trace([3, 2.8], 5, min_delta=0.5) == [(Decision.IMPROVED, 0), (Decision.CONTINUE, 1)]


def test_early_stop_recovery_resets_counter():
    assert [c for _, c in trace([3, 4, 4, 2, 5], 3)] == [0, 1, 2, 0, 1]


def test_early_stop_rejects_bad_settings():
    with pytest.raises(ConfigError):
        EarlyStopState(patience=0)
    with pytest.raises(ConfigError):
        EarlyStopState(min_delta=-1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.integers(1, 5))
def test_early_stop_invariants(losses, patience):
    s = EarlyStopState(patience=patience)
    best = -math.inf
    since_best = 0
    for loss in losses:
        d = early_stop_observe(s, loss)
        assert s.best_score >= best and s.counter <= patience + 1
        best = s.best_score
        since_best = 0 if d is Decision.IMPROVED else since_best + 1
        assert since_best <= patience + 1
        if d is Decision.STOP:
            break


# --- fit --------------------------------------------------------------------


def toy_sets(n_train=12, n_val=6, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_train + n_val, 8, 16)).astype(np.float32)
    y = (np.zeros(n_train + n_val) if zero else x[:, 0].mean(axis=1) * 5 + 60).astype(np.float32)
    ids = [f"r{i}" for i in range(n_train + n_val)]
    return (Dataset(ids[:n_train], x[:n_train], y[:n_train]), Dataset(ids[n_train:], x[n_train:], y[n_train:]))


def test_fit_degenerate_zero_model_runs_to_max_epochs(tmp_path):
    model = build(TINY, np.random.default_rng(0))
    for _, p in model.named_parameters():
        p.data[:] = 0
    tr, va = toy_sets(zero=True)
    run = fit(model, tr, va, TrainConfig(max_epochs=5, patience=10, batch_size=4, checkpoint=str(tmp_path / "z.aicn")))
    assert len(run.history) == 5 and not run.stopped_early
    assert run.best_val_loss == 0.0 and run.best_epoch == 1
    assert run.checkpoint_writes == 1


def test_fit_checkpoint_writes_match_improvements(tmp_path):
    model = build(TINY, np.random.default_rng(1))
    tr, va = toy_sets(seed=1)
    ckpt = tmp_path / "m.aicn"
    run = fit(model, tr, va, TrainConfig(max_epochs=25, patience=3, batch_size=4, checkpoint=str(ckpt)))
    improved = [r for r in run.history if r.decision == "improved"]
    assert run.checkpoint_writes == len(improved) >= 1
    assert run.best_epoch == improved[-1].epoch
    assert run.best_val_loss == min(r.val_mse for r in run.history)
    assert len(run.history) - run.best_epoch <= 3 + 1
    saved = load_weights(ckpt).state_arrays()
    assert all(saved[k].tobytes() == v.tobytes() for k, v in model.state_arrays().items())
    line = run.history[0].log_line()
    assert line.startswith("epoch=1 train_mse=") and " val_mse=" in line and line.endswith("counter=0")


def test_fit_history_csv(tmp_path):
    model = build(TINY, np.random.default_rng(1))
    tr, va = toy_sets(seed=1)
    run = fit(model, tr, va, TrainConfig(max_epochs=3, batch_size=4))
    run.write_history_csv(tmp_path / "h.csv")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_mse,val_mse" and len(rows) == 4
    assert float(rows[1].split(",")[2]) == run.history[0].val_mse


@pytest.mark.parametrize("standardize", [True, False])
def test_fit_deterministic(standardize):
    def once():
        model = build(TINY, np.random.default_rng(2))
        tr, va = toy_sets(seed=2)
        run = fit(model, tr, va, TrainConfig(max_epochs=4, batch_size=4, seed=9, standardize_targets=standardize))
        return [(r.train_mse, r.val_mse) for r in run.history], model.state_arrays()

    (h1, s1), (h2, s2) = once(), once()
    assert h1 == h2
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)


def test_fit_rejects_overlap_shape_and_empty():
    model = build(TINY, np.random.default_rng(0))
    tr, va = toy_sets()
    with pytest.raises(ConfigError, match="share"):
        fit(model, tr, tr, TrainConfig(max_epochs=1, batch_size=4))
    wrong = Dataset(va.ids, va.x[:, :, :8], va.y)
    with pytest.raises(ShapeError):
        fit(model, tr, wrong, TrainConfig(max_epochs=1, batch_size=4))
    with pytest.raises(ConfigError):
        fit(model, tr, Dataset([], va.x[:0], va.y[:0]), TrainConfig(max_epochs=1, batch_size=4))


def test_fit_unwritable_checkpoint(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    tr, va = toy_sets()
    with pytest.raises(OSError):
        fit(build(TINY, np.random.default_rng(0)), tr, va,
            TrainConfig(max_epochs=1, batch_size=4, checkpoint=str(blocker / "m.aicn")))


def test_fit_non_finite_loss_aborts_with_epoch():
    tr, va = toy_sets()
    tr.y[0] = np.inf
    with pytest.raises(TrainingError, match="epoch 1"):
        fit(build(TINY, np.random.default_rng(0)), tr, va,
            TrainConfig(max_epochs=2, batch_size=4, standardize_targets=False))


def test_train_config_validation():
    for bad in (dict(batch_size=1), dict(max_epochs=0), dict(target="st"), dict(lr=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
