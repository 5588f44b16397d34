"""Autodiff engine: gradient oracles, SGD recurrences, graph contracts."""

import numpy as np
import pytest

from freqlens import nn
from freqlens import tensor as T
from util import TinyConvNet, micro_resnet, random_batch


def test_backward_linear_form_exact():
    rng = np.random.default_rng(0)
    w = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    loss = T.tsum(T.mul(w, T.Tensor(x)))
    loss.backward()
    np.testing.assert_array_equal(w.grad, x)


def test_ce_gradient_at_uniform_logits_closed_form():
    k = 5
    logits = T.Tensor(np.zeros((1, k), dtype=np.float32), requires_grad=True)
    loss = T.cross_entropy(logits, np.array([2]))
    loss.backward()
    expected = np.full(k, 1.0 / k, dtype=np.float32)
    expected[2] -= 1.0
    np.testing.assert_allclose(logits.grad[0], expected, atol=1e-7)


def test_random_two_layer_cnn_vs_finite_differences_step_1e3():
    # committed seed; step 1e-3 stays clear of activation kinks here
    net = TinyConvNet(seed=4, with_bn=False)
    rng = np.random.default_rng(40)
    x, y = random_batch(rng, b=2, c=1, hw=6)
    res = T.grad_check(net, (x, y), fd_step=1e-3, max_coords_per_param=12, seed=0)
    assert res.max_rel_error < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_fd_over_seeds(seed):
    net = micro_resnet(seed=seed, classes=3)
    rng = np.random.default_rng(100 + seed)
    x, y = random_batch(rng, b=2, c=3, hw=8, classes=3)
    net.train()
    res = T.grad_check(net, (x, y), max_coords_per_param=5, seed=seed)
    assert res.max_rel_error < 1e-3


def test_grad_check_linear_softmax_tight():
    class LinearSoftmax(nn.Module):
        def __init__(self):
            super().__init__()
            rng = np.random.default_rng(9)
            self.fc = nn.Linear(12, 4, rng=rng)

        def forward(self, x):
            b = x.shape[0]
            return self.fc(T.reshape(x, (b, -1)))

    net = LinearSoftmax()
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (4, 3, 2, 2)).astype(np.float32)
    y = rng.integers(0, 4, 4)
    res = T.grad_check(net, (x, y), max_coords_per_param=40, seed=0)
    assert res.max_rel_error < 1e-4


def test_grad_check_conv_bn_hardtanh_micro_net():
    net = TinyConvNet(seed=7, with_bn=True)
    net.train()
    rng = np.random.default_rng(17)
    x, y = random_batch(rng, b=2, c=1, hw=6)
    res = T.grad_check(net, (x, y), max_coords_per_param=10, seed=3)
    assert res.max_rel_error < 1e-3


def test_grad_check_frozen_net_reports_empty():
    net = TinyConvNet(seed=0)
    for p in net.parameters():
        p.requires_grad = False
    res = T.grad_check(net, random_batch(np.random.default_rng(0), c=1, hw=6))
    assert res.empty
    assert res.max_rel_error == 0.0


def test_input_gradient_via_requires_grad():
    net = micro_resnet(seed=1)
    net.eval()
    x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32),
                 requires_grad=True)
    loss = T.cross_entropy(net(x), np.array([0, 1]))
    loss.backward()
    assert x.grad.shape == x.shape
    assert np.isfinite(x.grad).all()
    assert np.abs(x.grad).max() > 0


def test_backward_is_linear_in_loss():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    y = np.array([0, 1, 2, 3])

    def grads(a, b):
        logits = T.Tensor(x.copy(), requires_grad=True)
        combined = T.add(T.mul(T.cross_entropy(logits, y), a),
                         T.mul(T.cw_margin(logits, y), b))
        combined.backward()
        return logits.grad

    g_a = grads(1.0, 0.0)
    g_b = grads(0.0, 1.0)
    g_mix = grads(2.0, 3.0)
    np.testing.assert_allclose(g_mix, 2.0 * g_a + 3.0 * g_b, atol=1e-5)


def test_forward_deterministic_bitwise():
    net = micro_resnet(seed=5)
    net.eval()
    x = np.random.default_rng(2).uniform(0, 1, (3, 3, 8, 8)).astype(np.float32)
    a = net(T.Tensor(x)).data
    b = net(T.Tensor(x)).data
    np.testing.assert_array_equal(a, b)


def test_forward_zero_weights_gives_uniform_rows():
    net = micro_resnet(seed=0, classes=4)
    for p in net.parameters():
        p.data[...] = 0
    net.eval()
    x = np.random.default_rng(0).uniform(0, 1, (3, 3, 8, 8)).astype(np.float32)
    logits = net(T.Tensor(x)).data
    assert np.all(logits == logits[:, :1])
    probs = T.softmax(logits)
    np.testing.assert_allclose(probs, 0.25, atol=1e-7)


def test_forward_identity_conv_pools_input():
    class PoolNet(nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.Conv2d(1, 1, 1, name="id")
            self.conv.weight.data[...] = 1.0
            self.fc = nn.Linear(1, 1, name="out")
            self.fc.weight.data[...] = 1.0
            self.fc.bias.data[...] = 0.0

        def forward(self, x):
            return self.fc(T.global_avg_pool(self.conv(x)))

    img = np.array([[[[0.1, 0.5], [0.3, 0.9]]]], dtype=np.float32)
    logits = PoolNet()(T.Tensor(img)).data
    np.testing.assert_allclose(logits, [[0.45]], rtol=1e-6)


def test_forward_batch_independence():
    net = micro_resnet(seed=8)
    net.eval()
    x1 = np.random.default_rng(4).uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
    x4 = np.repeat(x1, 4, axis=0)
    row_single = net(T.Tensor(x1)).data[0]
    row_batched = net(T.Tensor(x4)).data[0]
    # BLAS blocking differs across batch sizes; rows agree to float32 ulps
    np.testing.assert_allclose(row_single, row_batched, atol=1e-6)
    rows = net(T.Tensor(x4)).data
    np.testing.assert_array_equal(rows[0], rows[3])


def test_forward_shape_mismatch_names_layer():
    net = micro_resnet(seed=0)
    x = np.zeros((1, 5, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="stem.conv"):
        net(T.Tensor(x))


def test_backward_twice_raises():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    loss = T.tsum(T.mul(w, w))
    loss.backward()
    with pytest.raises(RuntimeError, match="consumed"):
        loss.backward()


def test_backward_through_consumed_subgraph_raises():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    mid = T.mul(w, w)
    T.tsum(mid).backward()
    with pytest.raises(RuntimeError, match="consumed"):
        T.tmean(mid).backward()


def test_backward_requires_scalar():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(w, w).backward()


def test_unreachable_tensor_keeps_zero_grad():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    other = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    T.tsum(T.mul(w, w)).backward()
    np.testing.assert_array_equal(other.grad, np.zeros(3))


# -- sgd ----------------------------------------------------------------------


def test_sgd_plain_step():
    w = np.array([1.0, -2.0], dtype=np.float32)
    g = np.array([0.5, 0.25], dtype=np.float32)
    (new,), _ = T.sgd_update([w], [g], lr=0.1)
    np.testing.assert_allclose(new, w - 0.1 * g, rtol=1e-7)


def test_sgd_zero_grad_fixed_point():
    w = np.array([1.0, -2.0], dtype=np.float32)
    (new,), _ = T.sgd_update([w], [np.zeros_like(w)], lr=0.1)
    np.testing.assert_array_equal(new, w)


def test_sgd_momentum_two_step_recurrence():
    w0 = np.array([1.0], dtype=np.float32)
    g = np.array([0.5], dtype=np.float32)
    (w1,), vel = T.sgd_update([w0], [g], lr=0.1, momentum=0.9)
    (w2,), _ = T.sgd_update([w1], [g], lr=0.1, momentum=0.9, velocities=vel)
    expected = w0 - 0.1 * g - 0.1 * (1.9 * g)
    np.testing.assert_allclose(w2, expected, rtol=1e-6)


def test_sgd_nonfinite_gradient_aborts_step(caplog):
    w = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = T.SGD([w], lr=0.1)
    w.grad[...] = np.nan
    before = w.data.copy()
    with caplog.at_level("WARNING"):
        assert opt.step() is False
    np.testing.assert_array_equal(w.data, before)
    assert any("non-finite" in r.message for r in caplog.records)


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        T.SGD([T.Tensor(np.ones(1), requires_grad=True)], lr=0.0)


# -- losses against closed forms ------------------------------------------------


def test_cw_margin_clamp_region_zero_gradient():
    logits = T.Tensor(np.array([[3.0, 1.0]], dtype=np.float32), requires_grad=True)
    loss = T.cw_margin(logits, np.array([0]), kappa=0.0)
    assert float(loss.data) == 0.0
    loss.backward()
    np.testing.assert_array_equal(logits.grad, np.zeros((1, 2)))


def test_cw_margin_active_region_signs():
    logits = T.Tensor(np.array([[1.0, 3.0]], dtype=np.float32), requires_grad=True)
    loss = T.cw_margin(logits, np.array([0]), kappa=0.0)
    assert float(loss.data) == pytest.approx(2.0)
    loss.backward()
    assert logits.grad[0, 1] > 0
    assert logits.grad[0, 0] < 0


def test_bce_with_logits_symmetric_point():
    logits = T.Tensor(np.zeros((2, 3), dtype=np.float32))
    loss = T.bce_with_logits(logits, np.full((2, 3), 0.5, dtype=np.float32))
    assert float(loss.data) == pytest.approx(np.log(2.0), rel=1e-6)


def test_committed_ops_stay_finite():
    rng = np.random.default_rng(12)
    for seed in range(5):
        net = micro_resnet(seed=seed)
        x, y = random_batch(np.random.default_rng(seed), b=3, c=3, hw=8)
        logits = net(T.Tensor(x))
        loss = T.cross_entropy(logits, y)
        loss.backward()
        assert np.isfinite(logits.data).all()
        assert np.isfinite(loss.data).all()
        for p in net.parameters():
            assert np.isfinite(p.grad).all()
