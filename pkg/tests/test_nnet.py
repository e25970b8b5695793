"""Differentiation core: every layer's analytic gradient against central
finite differences, initialization rules, and dropout scaling."""

import numpy as np
import pytest

from shiftprobe import nnet
from shiftprobe.nnet import (
    EncoderArch,
    HeadArch,
    Tensor,
    encoder_forward,
    head_forward,
    init_params,
    wrap_params,
)

FD_H = 1e-4
FD_TOL = 1e-4


def finite_difference_check(build_loss, arrays, h=FD_H):
    """Max relative error between analytic and central-difference gradients.

    `build_loss` maps {name: Tensor} to a scalar Tensor and must not
    capture the tensors themselves (it is re-invoked for perturbations).
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    build_loss(tensors).backward()
    worst = 0.0
    for name, t in tensors.items():
        flat = arrays[name].ravel()
        grads = np.zeros_like(flat) if t.grad is None else t.grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(build_loss({k: Tensor(v) for k, v in arrays.items()}).data)
            flat[i] = orig - h
            minus = float(build_loss({k: Tensor(v) for k, v in arrays.items()}).data)
            flat[i] = orig
            fd = (plus - minus) / (2 * h)
            denom = max(abs(fd), abs(grads[i]), 1e-6)
            worst = max(worst, abs(fd - grads[i]) / denom)
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_conv_temporal_gradients(seed):
    gen = np.random.default_rng(seed)
    arrays = {
        "x": gen.normal(size=(2, 3, 20)),
        "w": gen.normal(size=(2, 5)),
        "b": gen.normal(size=(2,)),
    }
    err = finite_difference_check(
        lambda t: nnet.mean_all(nnet.square(nnet.conv_temporal(t["x"], t["w"], t["b"]))), arrays
    )
    assert err <= FD_TOL


@pytest.mark.parametrize("seed", range(10))
def test_conv_spatial_gradients(seed):
    gen = np.random.default_rng(100 + seed)
    arrays = {
        "h": gen.normal(size=(2, 2, 3, 10)),
        "w": gen.normal(size=(3, 2, 3)),
        "b": gen.normal(size=(3,)),
    }
    err = finite_difference_check(
        lambda t: nnet.mean_all(nnet.square(nnet.conv_spatial(t["h"], t["w"], t["b"]))), arrays
    )
    assert err <= FD_TOL


@pytest.mark.parametrize("seed", range(10))
def test_pool_square_log_gradients(seed):
    gen = np.random.default_rng(200 + seed)
    arrays = {"x": gen.uniform(0.5, 2.0, size=(2, 3, 17))}

    def loss(t):
        pooled = nnet.avg_pool_time(nnet.square(t["x"]), 5, 3)
        return nnet.mean_all(nnet.log_floor(pooled, 1e-8))

    assert finite_difference_check(loss, arrays) <= FD_TOL


@pytest.mark.parametrize("seed", range(10))
def test_linear_sigmoid_bce_gradients(seed):
    gen = np.random.default_rng(300 + seed)
    arrays = {
        "x": gen.normal(size=(4, 3)),
        "w": gen.normal(size=(3, 1)),
        "b": gen.normal(size=(1,)),
    }
    y = Tensor((gen.random(4) > 0.5).astype(float))

    def loss(t):
        out = nnet.reshape(nnet.linear(t["x"], t["w"], t["b"]), (4,))
        return nnet.mean_all(nnet.bce(nnet.sigmoid(out), y))

    assert finite_difference_check(loss, arrays) <= FD_TOL


@pytest.mark.parametrize("seed", range(10))
def test_smooth_l1_and_relu_gradients(seed):
    gen = np.random.default_rng(400 + seed)
    # keep points away from the |e| == beta kink and the relu corner
    pred = gen.normal(size=(6,)) * 2
    target = pred + np.where(gen.random(6) > 0.5, 0.4, 1.8) * np.sign(gen.normal(size=6))
    arrays = {"p": pred}
    assert finite_difference_check(
        lambda t: nnet.mean_all(nnet.smooth_l1(t["p"], Tensor(target), 1.0)), arrays
    ) <= FD_TOL
    arrays = {"x": gen.normal(size=(5, 4)) + 0.5}
    assert finite_difference_check(
        lambda t: nnet.mean_all(nnet.square(nnet.relu(t["x"]))), arrays
    ) <= FD_TOL


@pytest.mark.parametrize("seed", range(3))
def test_full_encoder_chain_gradients(seed):
    arch = EncoderArch(
        n_channels=3, n_samples=60, n_filters=2, kernel_len=5,
        pool_width=8, pool_stride=4, embed_dim=4,
    )
    params = init_params(arch.param_specs(), seed=seed)
    arrays = dict(params.tensors)
    x_in = np.random.default_rng(500 + seed).normal(size=(2, 3, 60))

    def loss(t):
        return nnet.mean_all(nnet.square(encoder_forward(t, arch, Tensor(x_in))))

    assert finite_difference_check(loss, arrays) <= FD_TOL


def test_dropout_masked_gradient():
    gen = np.random.default_rng(1)
    arrays = {"x": gen.normal(size=(3, 4)), "w": gen.normal(size=(4, 1)), "b": gen.normal(size=(1,))}
    mask = (gen.random((3, 4)) > 0.5).astype(float)

    def loss(t):
        h = nnet.dropout(t["x"], mask, 0.5)
        return nnet.mean_all(nnet.square(nnet.reshape(nnet.linear(h, t["w"], t["b"]), (3,))))

    assert finite_difference_check(loss, arrays) <= FD_TOL


def test_zero_loss_fixed_point_gives_zero_gradient():
    pred = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    target = Tensor(np.array([1.0, -2.0, 3.0]))
    nnet.mean_all(nnet.smooth_l1(pred, target, 1.0)).backward()
    np.testing.assert_array_equal(pred.grad, 0.0)


def test_duplicated_batch_keeps_mean_gradient():
    gen = np.random.default_rng(2)
    x = gen.normal(size=(3, 4))
    w_arr = gen.normal(size=(4, 1))
    y = gen.normal(size=3)

    def mean_grad(x_in, y_in):
        w = Tensor(w_arr, requires_grad=True)
        out = nnet.reshape(nnet.matmul(Tensor(x_in), w), (len(x_in),))
        nnet.mean_all(nnet.smooth_l1(out, Tensor(y_in), 1.0)).backward()
        return w.grad

    single = mean_grad(x, y)
    doubled = mean_grad(np.vstack([x, x]), np.concatenate([y, y]))
    np.testing.assert_allclose(single, doubled, rtol=1e-12)


class TestInit:
    def test_biases_constant_fill(self):
        arch = EncoderArch(n_channels=3, n_samples=60, n_filters=2, kernel_len=5,
                           pool_width=8, pool_stride=4, embed_dim=4)
        params = init_params(arch.param_specs(), seed=0)
        for name, arr in params.tensors.items():
            if name.endswith(".b"):
                np.testing.assert_array_equal(arr, 0.01)

    def test_xavier_uniform_bound_for_square_linear(self):
        head = HeadArch(in_dim=4, task="grade", hidden=4)
        params = init_params(head.param_specs(), seed=3)
        w = params.tensors["head.hidden.w"]
        bound = np.sqrt(6.0 / 8.0)
        assert np.abs(w).max() <= bound
        # draws actually use the range (not degenerate)
        assert np.abs(w).max() > 0.5 * bound

    def test_same_seed_identical_params(self):
        head = HeadArch(in_dim=8, task="age")
        a = init_params(head.param_specs(), seed=9)
        b = init_params(head.param_specs(), seed=9)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_zero_weight_bias_path_hand_evaluated(self):
        arch = EncoderArch(n_channels=3, n_samples=60, n_filters=2, kernel_len=5,
                           pool_width=8, pool_stride=4, embed_dim=4)
        params = init_params(arch.param_specs(), seed=0)
        for name in params.tensors:
            if name.endswith(".w"):
                params.tensors[name][:] = 0.0
        x = np.random.default_rng(0).normal(size=(2, 3, 60))
        z = encoder_forward(wrap_params(params, set()), arch, Tensor(x)).data
        # conv biases contribute 0.01 twice, squared/pool/log cancel into the
        # zero output weights, so only the final bias remains.
        np.testing.assert_allclose(z, 0.01, rtol=1e-12)
        assert np.all(np.isfinite(z))


class TestDropoutScaling:
    def test_inverted_dropout_unbiased_on_linear_net(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(1, 40))
        w = gen.normal(size=(40, 1))
        clean = float((x @ w)[0, 0])
        p = 0.5
        n_masks = 20_000
        masks = (gen.random((n_masks, 40)) >= p).astype(float)
        outs = (x * masks / (1 - p)) @ w
        se = outs.std() / np.sqrt(n_masks)
        assert abs(outs.mean() - clean) <= 3 * se

    def test_head_forward_dropout_location(self):
        head = HeadArch(in_dim=3, task="grade", hidden=3)
        params = init_params(head.param_specs(), seed=1)
        z = np.random.default_rng(2).normal(size=(1, 3))
        all_ones = np.ones((1, 3))
        wrapped = wrap_params(params, set())
        base = head_forward(wrapped, head, Tensor(z)).data
        masked = head_forward(wrapped, head, Tensor(z), all_ones, 0.5).data
        # keep-all mask at p=0.5 doubles the hidden activations
        dropped = head_forward(wrapped, head, Tensor(z), np.zeros((1, 3)), 0.5).data
        bias_only = params.tensors["head.out.b"][0]
        np.testing.assert_allclose(dropped, bias_only, rtol=1e-12)
        assert not np.allclose(masked, base)


def test_float32_flow_preserves_dtype():
    head = HeadArch(in_dim=4, task="grade")
    params = init_params(head.param_specs(), seed=1)
    wrapped = wrap_params(params, set(), dtype=np.float32)
    z = Tensor(np.zeros((2, 4), dtype=np.float32))
    out = head_forward(wrapped, head, z)
    assert out.data.dtype == np.float32
