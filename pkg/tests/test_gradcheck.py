import numpy as np
import pytest

from aicrn import cli, gradcheck, layers
from aicrn import tensor as T
from aicrn.gradcheck import CASES, check_gradients, relative_error, run_case


def test_relative_error_is_max_norm():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-6])) == pytest.approx(1e-6)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_kink_straddle_is_excluded():
    x = T.Tensor(np.array([1e-4, 0.5, -0.5]), requires_grad=True)
    gc = check_gradients(lambda: T.reduce(layers.relu(x), None, "sum"), [x], step=1e-3)
    assert gc.straddled == 1 and gc.checked == 2 and gc.error < 1e-10


@pytest.mark.parametrize("name", ["mul", "reduce_max", "conv1d", "batchnorm1d_train", "apply_cbam"])
def test_selected_cases_pass(name):
    result = run_case(name, seed=1, trials=3)
    assert result.passed, (name, result.error)
    assert result.checked > 0


def _broken_sigmoid(x):
    s = 1 / (1 + np.exp(-x.data))
    return T.record("sigmoid", s, (x,), lambda g: (g * s,))  # missing (1 - s)


def test_corrupted_backward_is_caught(monkeypatch, capsys):
    monkeypatch.setattr(layers, "sigmoid", _broken_sigmoid)
    assert not run_case("sigmoid", trials=2).passed
    assert cli.main(["gradcheck", "--only", "sigmoid", "relu"]) == 1
    captured = capsys.readouterr()
    assert "sigmoid" in captured.err and "relu" not in captured.err
    assert "FAIL sigmoid" in captured.out


def test_suite_covers_every_engine_and_layer_op():
    ops = {"add", "sub", "mul", "matmul", "reduce_sum", "reduce_mean", "reduce_max", "conv1d",
           "batchnorm1d_train", "batchnorm1d_eval", "relu", "leaky_relu", "sigmoid", "avg_pool1d",
           "global_avg_pool", "dropout", "linear", "mse_loss", "channel_attention", "spatial_attention",
           "apply_cbam", "aicrn_end_to_end"}
    assert ops <= set(CASES)
    assert CASES["aicrn_end_to_end"][1] == gradcheck.END_TO_END_THRESHOLD
    assert all(CASES[n][1] == gradcheck.OP_THRESHOLD for n in CASES if n != "aicrn_end_to_end")
    assert all(CASES[n][2] >= 20 for n in ops - {"aicrn_end_to_end"})


def test_unknown_op_is_usage_error():
    assert cli.main(["gradcheck", "--only", "nope"]) == 2
