import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asbunet import checkpoint, ops
from asbunet.data import generate_dataset, stack
from asbunet.layers import Param
from asbunet.network import Network, build_default_spec
from asbunet.train import (LR_FLOOR, MomentumSGD, TrainConfig, TrainingError, batch_pos_weight, clip_gradients,
                           decay_interval, epoch_means, learning_rate, split_dataset, train)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.momentum, cfg.lr_init, cfg.lr_step_fraction, cfg.lr_factor, cfg.l2) == (0.9, 1e-2, 0.3, 0.1, 1e-12)
    assert (cfg.batch_size, cfg.epochs, cfg.split) == (8, 20, 0.8)


@pytest.mark.parametrize("bad", [dict(momentum=1.0), dict(lr_init=0.0), dict(lr_factor=1.0),
                                 dict(batch_size=0), dict(split=1.0)])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_text_round_trip():
    cfg = TrainConfig(batch_size=4, epochs=3, pos_weight=5.0, augment=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    parsed = TrainConfig.from_text("# comment\nbatch_size = 2  # trailing\n\nsplit = 80:20\n")
    assert parsed.batch_size == 2 and parsed.split == 0.8
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_text("learning_rate = 0.1\n")
    with pytest.raises(ValueError):
        TrainConfig.from_text("batch_size 4\n")


def test_two_decays():
    cfg = TrainConfig()
    spe = 100
    assert decay_interval(cfg, spe) == 30
    assert learning_rate(cfg, 0, spe) == 1e-2
    assert learning_rate(cfg, 29, spe) == 1e-2
    assert learning_rate(cfg, 60, spe) == pytest.approx(1e-4, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.floats(0.05, 2.0))
def test_schedule_non_increasing_with_floor(spe, frac):
    cfg = TrainConfig(lr_step_fraction=frac)
    lrs = [learning_rate(cfg, s, spe) for s in range(0, 40 * spe, max(1, spe // 7))]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= LR_FLOOR


def test_quadratic_converges():
    # minimise (w - 3)^2 from w = -2
    p = Param(np.array([-2.0]))
    opt = MomentumSGD([p], momentum=0.9, l2=0.0)
    for _ in range(500):
        p.grad[...] = 2 * (p.values - 3.0)
        opt.step(1e-2)
    assert abs(p.values[0] - 3.0) < 1e-3


def test_momentum_update_rule():
    p = Param(np.array([1.0, -2.0]))
    opt = MomentumSGD([p], momentum=0.5, l2=0.1)
    p.grad[...] = [1.0, 1.0]
    opt.step(0.1)
    v1 = -0.1 * (np.array([1.0, 1.0]) + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.values, np.array([1.0, -2.0]) + v1, rtol=1e-15)
    w1 = p.values.copy()
    opt.step(0.1)
    v2 = 0.5 * v1 - 0.1 * (np.array([1.0, 1.0]) + 0.1 * w1)
    np.testing.assert_allclose(p.values, w1 + v2, rtol=1e-15)


def test_zero_gradient_only_shrinks():
    w0 = np.array([0.5, -4.0, 2.0])
    p = Param(w0.copy())
    opt = MomentumSGD([p], momentum=0.9, l2=1e-12)
    opt.step(1e-2)
    assert np.all(np.abs(p.values - w0) <= 1e-2 * 1e-12 * np.abs(w0) * (1 + 1e-9))
    assert np.all(np.abs(p.values) <= np.abs(w0))


def test_split_sizes_and_determinism():
    items = list(range(10))
    tr, te = split_dataset(items, 0.8, seed=1)
    assert (len(tr), len(te)) == (8, 2)
    assert sorted(tr + te) == items
    assert split_dataset(items, (80, 20), seed=1) == (tr, te)
    tr2, _ = split_dataset(list(range(600)), 500 / 600, seed=0)
    assert len(tr2) == 500
    with pytest.raises(ValueError):
        split_dataset([1], 0.8)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 5))
def test_split_within_one_of_ratio(n, ratio, seed):
    tr, te = split_dataset(list(range(n)), ratio, seed)
    assert abs(len(tr) - ratio * n) <= 1
    assert sorted(tr + te) == list(range(n))


def test_pos_weight_clamped():
    cfg = TrainConfig()
    y = np.zeros((1, 1, 10, 10))
    assert batch_pos_weight(y, cfg) == 20.0
    y[..., :5] = 1
    assert batch_pos_weight(y, cfg) == 1.0
    y[...] = 0
    y[..., :2, :] = 1  # 20 fg, 80 bg
    assert batch_pos_weight(y, cfg) == 4.0
    assert batch_pos_weight(y, TrainConfig(pos_weight=2.5)) == 2.5


def test_clip_gradients():
    a, b = Param(np.zeros(2)), Param(np.zeros(1))
    a.grad[...] = [3.0, 0.0]
    b.grad[...] = [4.0]
    assert clip_gradients([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8])


@pytest.mark.parametrize("seed", range(5))
def test_descent_step_reduces_loss(seed):
    rng = np.random.default_rng(seed)
    net = Network(build_default_spec("1/16"), seed=seed)
    x = rng.random((2, 3, 32, 32))
    y = (rng.random((2, 1, 32, 32)) < 0.3).astype(float)
    before, g = ops.weighted_bce_with_logits(net.forward_logits(x, training=True), y, 3.0)
    net.zero_grad()
    net.backward(g)
    opt = MomentumSGD([p for _, p in net.named_params()], momentum=0.0, l2=0.0)
    opt.step(1e-4)
    after, _ = ops.weighted_bce_with_logits(net.forward_logits(x, training=True), y, 3.0)
    assert after < before


@pytest.fixture(scope="module")
def tiny_run():
    data = generate_dataset(6, 32, seed=0)
    cfg = TrainConfig(batch_size=2, epochs=2)
    log = io.StringIO()
    net = Network(build_default_spec("1/16"), seed=0)
    _, history = train(net, data, cfg, log_file=log)
    return data, cfg, net, history, log.getvalue()


def test_training_history_and_log(tiny_run):
    _, cfg, _, history, log = tiny_run
    assert [h[0] for h in history] == list(range(6))
    assert [h[3] for h in history] == [0, 0, 0, 1, 1, 1]
    np.testing.assert_allclose([h[1] for h in history], [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-6], rtol=1e-12)
    lines = log.strip().split("\n")
    assert len(lines) == 6
    step, lr, loss = lines[0].split(",")
    assert (int(step), float(lr)) == (0, 1e-2)
    assert len(epoch_means(history)) == 2


def test_training_is_bit_reproducible(tiny_run):
    data, cfg, net, history, _ = tiny_run
    net2 = Network(build_default_spec("1/16"), seed=0)
    _, history2 = train(net2, data, cfg)
    assert history2 == history
    for (_, a), (_, b) in zip(net.named_state(), net2.named_state()):
        np.testing.assert_array_equal(a, b)


def test_trained_state_survives_checkpoint(tiny_run, tmp_path):
    _, _, net, _, _ = tiny_run
    for _, arr in net.named_state():
        np.testing.assert_array_equal(arr, arr.astype(np.float32))
    checkpoint.save_checkpoint(net, tmp_path / "t.asbu")
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    np.testing.assert_array_equal(checkpoint.load_checkpoint(tmp_path / "t.asbu").forward(x), net.forward(x))


def test_nan_loss_aborts():
    data = generate_dataset(2, 32, seed=0)
    net = Network(build_default_spec("1/16"), seed=0)
    net.head.c3.bias.values[...] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(net, data, TrainConfig(batch_size=2, epochs=1))


def test_empty_data():
    with pytest.raises(ValueError):
        train(Network(build_default_spec("1/16")), [], TrainConfig())


def test_stack_feeds_network():
    x, y = stack(generate_dataset(2, 32, seed=1))
    assert Network(build_default_spec("1/8")).forward(x).shape == y.shape
