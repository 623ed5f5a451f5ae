import numpy as np
import pytest

from aicrn import tensor as T
from aicrn.errors import ConfigError, CorruptCheckpointError, ShapeError
from aicrn.network import (
    AicrnConfig,
    build,
    forward,
    load_weights,
    predict,
    read_checkpoint,
    residual_forward,
    save_weights,
)
from aicrn.tensor import Tensor
from aicrn.training import mse_loss

import oracles

TINY = AicrnConfig(input_len=32, stem_width=8, num_blocks=2, cbam_ratio=4, stem_kernel=5, block_kernel=3)


def zero_branch(block):
    for conv in (block.conv_a, block.conv_b):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    for bn in (block.bn_a, block.bn_b):
        bn.beta.data[:] = 0


def test_default_config_shapes():
    model = build(AicrnConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 8, 1000)).astype(np.float32)
    out = forward(model, Tensor(x), "eval")
    assert out.shape == (2, 1)


def test_invalid_config_lists_offending_fields():
    with pytest.raises(ConfigError, match="stem_kernel.*num_blocks"):
        AicrnConfig(stem_kernel=4, num_blocks=0).validate()
    with pytest.raises(ConfigError, match="cbam_ratio"):
        build(AicrnConfig(stem_width=12, cbam_ratio=8), np.random.default_rng(0))


def test_same_seed_same_parameters():
    a = build(TINY, np.random.default_rng(3)).state_arrays()
    b = build(TINY, np.random.default_rng(3)).state_arrays()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_ablation_is_strict_subset():
    with_att = build(TINY, np.random.default_rng(0))
    without = build(AicrnConfig(**{**TINY.__dict__, "attention": False}), np.random.default_rng(0))
    names_with, names_without = set(with_att.parameters()), set(without.parameters())
    assert names_without < names_with
    assert without.num_parameters() < with_att.num_parameters()
    for name in names_without:
        assert with_att.parameters()[name].shape == without.parameters()[name].shape


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_identity_regime(mode):
    model = build(TINY, np.random.default_rng(0), np.float64)
    block = model.blocks[0]
    zero_branch(block)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 16))
    out = residual_forward(Tensor(x), block, mode).data
    np.testing.assert_array_equal(out, np.where(x >= 0, x, 0.1 * x))
    pos = np.abs(x)
    assert residual_forward(Tensor(pos), block, mode).data.tobytes() == pos.tobytes()
    assert not residual_forward(Tensor(np.zeros((2, 8, 16))), block, mode).data.any()


def test_identity_regime_through_whole_stack():
    model = build(TINY, np.random.default_rng(0), np.float64)
    for b in model.blocks:
        zero_branch(b)
    x = np.abs(np.random.default_rng(2).standard_normal((3, 8, 16)))
    h = Tensor(x)
    for b in model.blocks:
        h = residual_forward(h, b, "train")
    assert h.data.tobytes() == x.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_residual_forward_matches_reference(seed):
    cfg = AicrnConfig(stem_width=4, cbam_ratio=2, block_kernel=3, num_blocks=1, input_len=32)
    model = build(cfg, np.random.default_rng(seed), np.float64)
    m = model.blocks[0]
    rng = np.random.default_rng(100 + seed)
    for t in (m.bn_a.gamma, m.bn_a.beta, m.bn_b.gamma, m.bn_b.beta, m.conv_a.bias, m.conv_b.bias,
              m.channel.b1, m.channel.b2, m.spatial.conv.bias):
        t.data[:] = rng.standard_normal(t.shape)
    x = rng.standard_normal((2, 4, 16))

    d = lambda t: t.data  # noqa: E731
    h = oracles.leaky(oracles.batchnorm_train(oracles.conv(x, d(m.conv_a.weight), d(m.conv_a.bias)),
                                              d(m.bn_a.gamma), d(m.bn_a.beta)))
    h = oracles.batchnorm_train(oracles.conv(h, d(m.conv_b.weight), d(m.conv_b.bias)), d(m.bn_b.gamma), d(m.bn_b.beta))
    h = oracles.cbam(h, tuple(d(t) for t in (m.channel.w1, m.channel.b1, m.channel.w2, m.channel.b2)),
                     (d(m.spatial.conv.weight), d(m.spatial.conv.bias)))
    expected = oracles.leaky(x + h)
    got = residual_forward(Tensor(x), m, "train").data
    np.testing.assert_allclose(got, expected, atol=1e-6, rtol=0)


def test_residual_width_mismatch():
    model = build(TINY, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        residual_forward(Tensor(np.zeros((1, 4, 16))), model.blocks[0], "eval")


def test_forward_shape_error_names_expected():
    model = build(TINY, np.random.default_rng(0))
    with pytest.raises(ShapeError, match=r"8, 32"):
        forward(model, Tensor(np.zeros((1, 8, 31))))


def test_eval_forward_deterministic_and_symmetric():
    model = build(TINY, np.random.default_rng(0))
    rec = np.random.default_rng(5).standard_normal((1, 8, 32)).astype(np.float32)
    x = np.concatenate([rec, rec])
    a = forward(model, Tensor(x), "eval").data
    b = forward(model, Tensor(x), "eval").data
    assert a.tobytes() == b.tobytes()
    assert a[0, 0] == a[1, 0]


def test_train_step_gives_finite_gradients():
    model = build(TINY, np.random.default_rng(0))
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((4, 8, 32)).astype(np.float32))
    y = Tensor(rng.standard_normal((4, 1)).astype(np.float32))
    loss = mse_loss(forward(model, x, "train", rng), y)
    T.backward(loss)
    assert np.isfinite(loss.data)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name


def test_save_load_roundtrip_bitwise(tmp_path):
    model = build(TINY, np.random.default_rng(0))
    # non-trivial running stats so buffers are exercised
    forward(model, Tensor(np.random.default_rng(1).standard_normal((4, 8, 32)).astype(np.float32)),
            "train", np.random.default_rng(2))
    path = save_weights(model, tmp_path / "m.aicn")
    loaded = load_weights(path)
    a, b = model.state_arrays(), loaded.state_arrays()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loaded.config == model.config
    x = np.random.default_rng(3).standard_normal((3, 8, 32)).astype(np.float32)
    assert predict(model, x).tobytes() == predict(loaded, x).tobytes()


def test_checkpoint_layout(tmp_path):
    model = build(TINY, np.random.default_rng(0))
    raw = save_weights(model, tmp_path / "m.aicn").read_bytes()
    assert raw[:4] == b"AICN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(model.state_arrays())
    arrays, config = read_checkpoint(tmp_path / "m.aicn")
    assert config["stem_width"] == 8


def test_default_model_roundtrip(tmp_path):
    model = build(AicrnConfig(), np.random.default_rng(0))
    loaded = load_weights(save_weights(model, tmp_path / "d.aicn"))
    x = np.random.default_rng(1).standard_normal((1, 8, 1000)).astype(np.float32)
    assert predict(model, x).tobytes() == predict(loaded, x).tobytes()


@pytest.mark.parametrize("cut", [3, 11, 200, -1])
def test_truncated_checkpoint(tmp_path, cut):
    path = save_weights(build(TINY, np.random.default_rng(0)), tmp_path / "m.aicn")
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(CorruptCheckpointError):
        load_weights(path)


def test_bad_magic_version_and_trailing(tmp_path):
    path = save_weights(build(TINY, np.random.default_rng(0)), tmp_path / "m.aicn")
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:4] + (2).to_bytes(4, "little") + raw[8:], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(CorruptCheckpointError):
            load_weights(path)


def test_attention_mismatch_is_shape_disagreement(tmp_path):
    path = save_weights(build(TINY, np.random.default_rng(0)), tmp_path / "m.aicn")
    no_att = AicrnConfig(**{**TINY.__dict__, "attention": False})
    with pytest.raises(CorruptCheckpointError, match="shape disagreement"):
        load_weights(path, expect=no_att)
