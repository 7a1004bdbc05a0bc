import numpy as np
import pytest
from hypothesis import given, strategies as st

from bldc_ann.mlp import (ConfigError, LabeledDataset, Mlp, TrainConfig, TrainingFault, cost, forward, predict,
                          split_dataset, tansig, tansig_grad, train)


@given(st.floats(-30, 30))
def test_tansig_matches_its_definition(x):
    assert tansig(x) == pytest.approx(-1.0 + 2.0 / (1.0 + np.exp(-2.0 * x)), abs=1e-12)


def test_tansig_grad():
    a = tansig(0.3)
    assert tansig_grad(a) == pytest.approx((tansig(0.3 + 1e-6) - tansig(0.3 - 1e-6)) / 2e-6, rel=1e-8)


def _sine_data(m=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(m, 2))
    return LabeledDataset(x, np.column_stack([np.sin(x[:, 0]), np.cos(x[:, 1])]))


def test_forward_shapes_and_scaling():
    net = Mlp.initialise((2, 4, 2), seed=0, output_scale=np.array([0.5, 2.0]), output_offset=np.array([1.0, 0.0]))
    x = np.ones((5, 2))
    out = predict(net, x)
    assert out.shape == (5, 2)
    hidden, _ = forward(net, x)
    assert hidden.shape == (5, 4)
    a2 = np.tanh(np.hstack([np.ones((5, 1)), x]) @ net.theta1.T)
    h = np.hstack([np.ones((5, 1)), a2]) @ net.theta2.T
    np.testing.assert_allclose(out, h / net.output_scale + net.output_offset, rtol=1e-14)
    assert forward(net, x[0])[1].shape == (2,)


def test_zeros_net_predicts_offset():
    net = Mlp.zeros((10, 5, 2))
    np.testing.assert_array_equal(predict(net, np.ones((3, 10))), 0.0)


def test_mismatched_weights_rejected():
    with pytest.raises(ValueError):
        Mlp(np.zeros((3, 3)), np.zeros((1, 3)))


def test_save_load_roundtrip(tmp_path):
    net = Mlp.initialise((3, 4, 1), seed=5, input_scale=np.array([1.0, 2.0, 3.0]))
    net.meta["note"] = "x"
    net.save(tmp_path / "n.json")
    back = Mlp.load(tmp_path / "n.json")
    np.testing.assert_array_equal(back.theta1, net.theta1)
    np.testing.assert_array_equal(back.theta2, net.theta2)
    np.testing.assert_array_equal(back.input_scale, net.input_scale)
    assert back.meta == net.meta and back.topology == (3, 4, 1)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(predict(back, x), predict(net, x))


def test_load_rejects_inconsistent_topology():
    d = Mlp.initialise((3, 4, 1), seed=0).to_dict()
    d["topology"] = [3, 5, 1]
    with pytest.raises(ValueError):
        Mlp.from_dict(d)


@pytest.mark.parametrize("m", [10, 11, 997, 1000])
def test_split_sizes(m):
    ds = LabeledDataset(np.arange(m, dtype=float)[:, None], np.zeros(m))
    tr, va, te = split_dataset(ds, TrainConfig())
    assert tr.m == int(0.4 * m) and va.m == int(0.1 * m) and tr.m + va.m + te.m == m
    assert sorted(np.concatenate([tr.x, va.x, te.x]).ravel()) == list(range(m))


def test_split_needs_ten_examples():
    with pytest.raises(ConfigError):
        split_dataset(LabeledDataset(np.zeros((9, 1)), np.zeros(9)), TrainConfig())


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"max_epochs": 0}, {"batch_size": 0},
                                    {"split_fractions": (0.5, 0.5, 0.5)}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_roundtrip():
    cfg = TrainConfig(learning_rate=0.2, batch_size=32, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


@pytest.mark.parametrize("batch", [None, 16])
def test_training_reduces_cost(batch):
    ds = _sine_data()
    cfg = TrainConfig(learning_rate=0.3 if batch else 0.5, max_epochs=200, batch_size=batch)
    net, hist = train(ds, (2, 8, 2), cfg)
    assert hist.val_cost[hist.best_epoch] < 0.5 * hist.val_cost[0]
    assert net.meta["best_epoch"] == hist.best_epoch
    _, _, te = split_dataset(ds, cfg)
    assert cost(net, te.x, te.y) < 0.5 * cost(Mlp.initialise((2, 8, 2), cfg.seed), te.x, te.y)
    assert hist.to_csv().startswith("epoch,train_cost,val_cost\n0,")


def test_training_is_deterministic():
    ds = _sine_data()
    cfg = TrainConfig(learning_rate=0.3, max_epochs=30, batch_size=16, seed=7)
    a, _ = train(ds, (2, 6, 2), cfg)
    b, _ = train(ds, (2, 6, 2), cfg)
    np.testing.assert_array_equal(a.theta1, b.theta1)
    np.testing.assert_array_equal(a.theta2, b.theta2)


def test_early_stopping():
    ds = _sine_data()
    _, hist = train(ds, (2, 8, 2), TrainConfig(learning_rate=0.5, max_epochs=5000, early_stop_patience=3))
    assert hist.epochs[-1] - hist.best_epoch <= 3
    assert hist.epochs[-1] < 5000


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_history():
    ds = LabeledDataset(np.random.default_rng(0).normal(size=(100, 2)) * 1e3, np.ones(100) * 1e3)
    with pytest.raises(TrainingFault) as info:
        train(ds, (2, 4, 1), TrainConfig(learning_rate=1e6, max_epochs=50))
    assert len(info.value.history.epochs) >= 2


def test_topology_mismatch():
    with pytest.raises(ConfigError):
        train(_sine_data(), (3, 4, 2), TrainConfig(max_epochs=1))


def test_fits_a_separable_toy_mapping():
    x = np.array([[-1.0], [-0.5], [0.5], [1.0]] * 10)
    ds = LabeledDataset(x, np.where(x > 0, 0.5, -0.5))
    _, hist = train((ds, ds), (1, 3, 1), TrainConfig(learning_rate=1.0, max_epochs=500))
    assert hist.best_val_cost < 1e-3


def test_small_step_decreases_cost():
    from bldc_ann.mlp import backprop_gradients

    ds = _sine_data(50)
    net = Mlp.initialise((2, 5, 2), seed=3)
    g1, g2 = backprop_gradients(net, ds.x, ds.y)
    stepped = net.with_weights(net.theta1 - 1e-4 * g1, net.theta2 - 1e-4 * g2)
    assert cost(stepped, ds.x, ds.y) < cost(net, ds.x, ds.y)


def test_returned_weights_beat_the_last_epoch():
    ds = _sine_data()
    cfg = TrainConfig(learning_rate=2.0, max_epochs=60, early_stop_patience=60)
    net, hist = train(ds, (2, 8, 2), cfg)
    _, va, _ = split_dataset(ds, cfg)
    assert cost(net, va.x, va.y) == pytest.approx(hist.best_val_cost)
    assert hist.best_val_cost <= hist.val_cost[-1]
