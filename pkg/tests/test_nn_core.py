import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedspk.errors import ConfigError, InputError, TrainingError
from fedspk.nn_core import (
    BATCHNORM,
    DENSE,
    SIGMOID,
    XAVIER_SIGMOID,
    LayerSpec,
    Network,
    NetworkSpec,
    OptimizerConfig,
    ce_loss_fn,
    cross_entropy_loss,
    grad_check,
    load_checkpoint,
    mlp_spec,
    save_checkpoint,
    sgd_step,
    softmax,
)

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def dense_net(n_in, n_out, bias=True):
    return Network(NetworkSpec((LayerSpec(DENSE, n_in, n_out, bias),)))


def random_small_net(seed, batch_norm):
    r = np.random.default_rng(seed)
    n_in = int(r.integers(2, 6))
    hidden = [int(h) for h in r.integers(2, 6, size=int(r.integers(1, 3)))]
    emb = int(r.integers(2, 5))
    classes = int(r.integers(2, 5))
    spec = mlp_spec(n_in, hidden, emb, heads=(("out", classes),), batch_norm=batch_norm)
    net = Network(spec, r)
    x = r.normal(size=(int(r.integers(4, 9)), n_in))
    y = r.integers(0, classes, size=len(x))
    return net, x, y


# -- forward --------------------------------------------------------------------


def test_identity_dense_layer_passes_input_through():
    net = dense_net(3, 3)
    net.params["trunk.0.W"][...] = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(net.forward(x).embedding, x)


def test_sigmoid_of_zero_is_half():
    net = Network(NetworkSpec((LayerSpec(SIGMOID, 4, 4),)))
    np.testing.assert_array_equal(net.forward(np.zeros((2, 4))).embedding, 0.5)


def test_two_layer_net_matches_hand_product():
    spec = NetworkSpec((LayerSpec(DENSE, 2, 2), LayerSpec(DENSE, 2, 1)))
    net = Network(spec)
    W1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    b1 = np.array([0.5, -1.0])
    W2 = np.array([[2.0], [-1.0]])
    b2 = np.array([0.25])
    net.params.update({"trunk.0.W": W1, "trunk.0.b": b1, "trunk.1.W": W2, "trunk.1.b": b2})
    x = np.array([[1.0, 1.0]])
    # hidden = [1+3+0.5, 2+4-1] = [4.5, 5]; out = 9 - 5 + 0.25
    assert net.forward(x).embedding[0, 0] == 4.25


def test_forward_rejects_wrong_width():
    net = dense_net(3, 2)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 4)))


def test_spec_rejects_mismatched_layers():
    with pytest.raises(ConfigError):
        NetworkSpec((LayerSpec(DENSE, 3, 4), LayerSpec(SIGMOID, 5, 5)))


def test_batchnorm_infer_is_deterministic_affine(rng):
    net = Network(mlp_spec(4, [6], 3, batch_norm=True), rng)
    for _ in range(5):
        net.forward(rng.normal(size=(16, 4)), "train")
    x = rng.normal(size=(7, 4))
    a = net.forward(x, "infer").embedding
    b = net.forward(x, "infer").embedding
    assert np.array_equal(a, b)
    # per-row result does not depend on what else is in the batch
    np.testing.assert_allclose(net.forward(x[:1], "infer").embedding, a[:1], rtol=0, atol=1e-14)


def test_batchnorm_running_variance_nonnegative(rng):
    net = Network(mlp_spec(3, [5], None, batch_norm=True), rng)
    for _ in range(20):
        net.forward(rng.normal(size=(8, 3)) * 10, "train")
    assert all((v >= 0).all() for k, v in net.buffers.items() if k.endswith("running_var"))


# -- losses --------------------------------------------------------------------


@pytest.mark.parametrize("c", [2, 6, 100])
def test_cross_entropy_uniform_logits_is_log_c(c):
    loss, _ = cross_entropy_loss(np.full((3, c), 1.7), np.zeros(3, dtype=int))
    assert loss == pytest.approx(math.log(c), rel=1e-14)


def test_cross_entropy_saturated_true_class_goes_to_zero():
    loss, grad = cross_entropy_loss(np.array([[0.0, 800.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.abs(grad).max() < 1e-300


def test_cross_entropy_matches_direct_softmax():
    loss, grad = cross_entropy_loss(np.array([[1.0, 2.0, 3.0]]), np.array([2]))
    e = [math.exp(1), math.exp(2), math.exp(3)]
    expected = -math.log(e[2] / sum(e))
    assert loss == pytest.approx(expected, rel=1e-14)
    p = np.array(e) / sum(e)
    np.testing.assert_allclose(grad[0], p - np.array([0, 0, 1.0]), rtol=1e-13)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy_loss(np.zeros((1, 3)), np.array([3]))


@given(arrays(np.float64, (4, 5), elements=finite))
def test_softmax_rows_sum_to_one(logits):
    p = softmax(logits)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50), st.integers(0, 3))
def test_cross_entropy_shift_invariant(logits, c, label):
    labels = np.full(3, label)
    a, _ = cross_entropy_loss(logits, labels)
    b, _ = cross_entropy_loss(logits + c, labels)
    assert abs(a - b) < 1e-10


# -- optimiser -----------------------------------------------------------------


def _params():
    return {"w": np.array([1.0, -2.0, 3.0])}


def test_sgd_zero_grad_no_decay_is_noop():
    p = _params()
    sgd_step(p, {"w": np.zeros(3)}, OptimizerConfig(0.1, 0.9, 0.0), {})
    np.testing.assert_array_equal(p["w"], _params()["w"])


def test_sgd_plain_step():
    p = _params()
    g = np.array([0.5, 0.5, -1.0])
    sgd_step(p, {"w": g}, OptimizerConfig(0.1, 0.0, 0.0), {})
    np.testing.assert_array_equal(p["w"], _params()["w"] - 0.1 * g)


def test_sgd_momentum_second_step_is_1_9_lr_g():
    p = _params()
    g = np.array([1.0, 2.0, -4.0])
    cfg = OptimizerConfig(0.01, 0.9, 0.0)
    vel = {}
    sgd_step(p, {"w": g}, cfg, vel)
    before = p["w"].copy()
    sgd_step(p, {"w": g}, cfg, vel)
    np.testing.assert_allclose(before - p["w"], 0.01 * 1.9 * g, rtol=1e-13)


def test_sgd_weight_decay_enters_gradient():
    p = _params()
    sgd_step(p, {"w": np.zeros(3)}, OptimizerConfig(0.1, 0.0, 0.5), {})
    np.testing.assert_allclose(p["w"], _params()["w"] * (1 - 0.05))


def test_sgd_zero_lr_bit_identical(rng):
    p = {"w": rng.normal(size=10)}
    before = p["w"].copy()
    sgd_step(p, {"w": rng.normal(size=10)}, OptimizerConfig(0.0, 0.9, 5e-4), {})
    assert np.array_equal(p["w"], before)


def test_sgd_non_finite_gradient_raises():
    with pytest.raises(TrainingError, match="'w'"):
        sgd_step(_params(), {"w": np.array([1.0, np.nan, 0.0])}, OptimizerConfig(), {})


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(batch_size=0)
    with pytest.raises(ConfigError):
        OptimizerConfig(weight_decay=-1)


# -- gradient checks -------------------------------------------------------------


def test_grad_check_linear_net(rng):
    net = Network(NetworkSpec((LayerSpec(DENSE, 4, 3),), (("out", 3),)), rng)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    report = grad_check(net, x, y)
    assert report.max_error < 1e-5


def test_grad_check_batchnorm_train_mode(rng):
    net = Network(mlp_spec(4, [5], 3, heads=(("out", 3),), batch_norm=True), rng)
    x = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    buffers = {k: v.copy() for k, v in net.buffers.items()}
    report = grad_check(net, x, y)
    assert report.max_error < 1e-4
    assert {"trunk.1.gamma", "trunk.1.beta"} <= set(report.errors)
    for k, v in buffers.items():
        assert np.array_equal(net.buffers[k], v)


def test_grad_check_zero_parameter_net():
    net = Network(NetworkSpec((LayerSpec(SIGMOID, 3, 3),)))
    report = grad_check(net, np.zeros((2, 3)), np.array([0, 1]))
    assert report.errors == {}


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("batch_norm", [False, True])
def test_grad_check_random_nets(seed, batch_norm):
    net, x, y = random_small_net(seed, batch_norm)
    assert grad_check(net, x, y).max_error < 1e-4


def test_grad_check_xavier_init_net(rng):
    spec = mlp_spec(5, [4, 4], None, heads=(("out", 3),), batch_norm=False, init=XAVIER_SIGMOID)
    net = Network(spec, rng)
    x = rng.normal(size=(5, 5))
    report = grad_check(net, x, rng.integers(0, 3, size=5), loss_fn=None)
    assert report.max_error < 1e-4


def test_backward_ignores_heads_without_gradient(rng):
    net = Network(mlp_spec(3, [4], 2, heads=(("a", 2), ("b", 3)), batch_norm=False), rng)
    x = rng.normal(size=(4, 3))
    loss_fn = ce_loss_fn(x, np.array([0, 1, 0, 1]), head="a")
    _, grads = loss_fn(net)
    assert not grads["head.b.W"].any()
    assert grad_check(net, loss_fn=loss_fn).max_error < 1e-4


# -- parameters and checkpoints --------------------------------------------------


def test_flat_params_round_trip(rng):
    net = Network(mlp_spec(4, [3], 2, heads=(("out", 2),)), rng)
    v = net.flat_params()
    assert v.shape == (net.num_params,)
    other = Network(net.spec, np.random.default_rng(99))
    other.set_flat_params(v)
    assert np.array_equal(other.flat_params(), v)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    net = Network(mlp_spec(6, [5], 4, heads=(("speaker", 3),), batch_norm=True), rng)
    net.forward(rng.normal(size=(10, 6)), "train")
    save_checkpoint(tmp_path / "a.ckpt", net, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"note": "x"}
    assert loaded.spec == net.spec
    for k in net.params:
        assert np.array_equal(loaded.params[k], net.params[k])
    for k in net.buffers:
        assert np.array_equal(loaded.buffers[k], net.buffers[k])
    x = rng.normal(size=(3, 6))
    assert np.array_equal(loaded.forward(x, "infer").logits["speaker"], net.forward(x, "infer").logits["speaker"])
    save_checkpoint(tmp_path / "b.ckpt", loaded, {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("conv", 2, 2)
    with pytest.raises(ConfigError):
        LayerSpec(BATCHNORM, 2, 3)
