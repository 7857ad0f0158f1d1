import numpy as np
import pytest

from drowzee import nn
from drowzee.tensor import ShapeError, Tensor, backward, finite_diff_check


def leaf(a):
    return Tensor(a, requires_grad=True)


def projected(fn, rng):
    """sum(out * R) for a fixed random R: sensitive to every output element."""
    R = rng.normal(size=fn().shape)
    return lambda: (fn() * R).sum()


def conv_reference(x, k, b, stride, pad, groups):
    B, C, H, W = x.shape
    O, cg, kh, kw = k.shape
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for o in range(O):
        g = o // og
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, o, i, j] = (patch * k[o]).sum(axis=(1, 2, 3))
    return out + (0 if b is None else b[None, :, None, None])


@pytest.mark.parametrize("stride,pad,groups,ksize", [(1, 1, 1, 3), (1, 1, 4, 3), (2, 1, 2, 3),
                                                     (1, 0, 1, 1), (4, 0, 1, 4), (2, 0, 1, 3)])
def test_conv2d_matches_direct_loop(rng, stride, pad, groups, ksize):
    C, O = 4, 4 if groups > 1 else 6
    x = rng.normal(size=(2, C if ksize != 4 else 1, 8, 8))
    cin = x.shape[1]
    k = rng.normal(size=(O, cin // groups, ksize, ksize))
    b = rng.normal(size=O)
    got = nn.conv2d(x, k, b, stride=stride, padding=pad, groups=groups).data
    assert np.allclose(got, conv_reference(x, k, b, stride, pad, groups), atol=1e-12)


def test_pointwise_identity_conv_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    k = np.eye(3).reshape(3, 3, 1, 1)
    assert np.allclose(nn.conv2d(x, k).data, x)


def test_depthwise_ones_kernel_on_constant_gives_9c():
    c = 1.7
    x = np.full((1, 2, 5, 5), c)
    out = nn.conv2d(x, np.ones((2, 1, 3, 3)), padding=1, groups=2).data
    assert np.allclose(out[:, :, 1:-1, 1:-1], 9 * c)


def test_conv_3x3_preserves_spatial_extent(rng):
    x = rng.normal(size=(2, 4, 5, 50))
    assert nn.conv2d(x, rng.normal(size=(4, 4, 3, 3)), padding=1).shape == x.shape


def test_conv_group_mismatch_errors(rng):
    with pytest.raises(ShapeError):
        nn.Conv2d(4, 6, 3, groups=4)
    with pytest.raises(ShapeError):
        nn.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3)))


def test_conv2d_gradcheck_4ch_8x8(rng):
    x = leaf(rng.normal(size=(2, 4, 8, 8)))
    k, b = leaf(0.3 * rng.normal(size=(4, 4, 3, 3))), leaf(rng.normal(size=4))
    f = projected(lambda: nn.conv2d(x, k, b, padding=1), rng)
    rep = finite_diff_check(f, {"x": x, "kernel": k, "bias": b}, max_elements=40)
    assert rep.passed, rep.lines()


def test_batchnorm_train_normalizes_and_tracks_stats(rng):
    bn = nn.BatchNorm2d(3)
    x = 2.0 + 3.0 * rng.normal(size=(4, 3, 5, 5))
    y = nn.batchnorm2d(x, bn, "train").data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    n = 4 * 25
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    assert np.all(bn.running_var >= 0)


def test_batchnorm_eval_identity_and_batch_of_one(rng):
    bn = nn.BatchNorm2d(3)
    x = rng.normal(size=(1, 3, 4, 4))
    assert np.allclose(nn.batchnorm2d(x, bn, "eval").data, x / np.sqrt(1 + 1e-5))
    with pytest.raises(ValueError):
        nn.batchnorm2d(x, bn, "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradcheck(rng, mode):
    bn = nn.BatchNorm2d(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, 3)
    x = leaf(rng.normal(size=(2, 3, 4, 4)))
    f = projected(lambda: nn.batchnorm2d(x, bn, mode), rng)
    rep = finite_diff_check(f, {"x": x, "gamma": bn.gamma, "beta": bn.beta})
    assert rep.passed, rep.lines()


def test_layernorm_examples(rng):
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.allclose(nn.layernorm(np.full((3, 4), 5.0), np.ones(4), np.zeros(4)).data, 0)
    out = nn.layernorm(np.array([[1.0, -1.0]]), g, b, eps=0.0).data
    assert np.allclose(out, [[1.0, -1.0]])
    x = leaf(rng.normal(size=(2, 3, 5)))
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 5)), leaf(rng.normal(size=5))
    rep = finite_diff_check(projected(lambda: nn.layernorm(x, gamma, beta), rng),
                            {"x": x, "gamma": gamma, "beta": beta})
    assert rep.passed


def test_linear_examples(rng):
    x = rng.normal(size=(3, 4))
    assert np.allclose(nn.linear(x, np.eye(4), np.zeros(4)).data, x)
    b = rng.normal(size=2)
    assert np.allclose(nn.linear(np.zeros((3, 4)), rng.normal(size=(4, 2)), b).data, np.tile(b, (3, 1)))
    xl, W, bl = leaf(x), leaf(rng.normal(size=(4, 2))), leaf(b)
    assert finite_diff_check(projected(lambda: nn.linear(xl, W, bl), rng), [xl, W, bl]).passed
    with pytest.raises(ShapeError):
        nn.linear(x, np.ones((3, 2)))


def test_channel_split_concat():
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    a, b = nn.channel_split(x)
    assert a.data.ravel().tolist() == [0, 1] and b.data.ravel().tolist() == [2, 3]
    assert np.array_equal(nn.channel_concat(a, b).data, x)
    with pytest.raises(ShapeError):
        nn.channel_split(np.ones((1, 2, 2, 3)))
    with pytest.raises(ShapeError):
        nn.channel_concat(np.ones((1, 2, 2, 2)), np.ones((1, 3, 2, 2)))


def test_split_gradient_is_identity(rng):
    x = leaf(rng.normal(size=(2, 3, 3, 6)))
    a, b = nn.channel_split(x)
    backward(nn.channel_concat(a, b).sum())
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_channel_shuffle_examples(rng):
    x = np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 1, 1, 4)   # [a, b, c, d]
    assert nn.channel_shuffle(x, 2).data.ravel().tolist() == [0, 2, 1, 3]
    y = rng.normal(size=(2, 3, 3, 8))
    back = nn.channel_shuffle(nn.channel_shuffle(y, 2), 4)
    assert np.array_equal(back.data, y)
    sums_in = np.sort(y.sum(axis=(0, 1, 2)))
    sums_out = np.sort(nn.channel_shuffle(y, 2).data.sum(axis=(0, 1, 2)))
    assert np.allclose(sums_in, sums_out)
    perm = nn.shuffle_permutation(8, 2)
    assert np.array_equal(np.sort(perm), np.arange(8))
    with pytest.raises(ShapeError):
        nn.channel_shuffle(np.ones((1, 1, 1, 6)), 4)


def test_permute_layout_round_trip_and_gradient(rng):
    x = leaf(rng.normal(size=(2, 3, 4, 5)))
    cf = nn.permute_layout(x, "channels_first")
    assert cf.shape == (2, 5, 3, 4)
    assert np.array_equal(nn.permute_layout(cf, "channels_last").data, x.data)
    R = rng.normal(size=cf.shape)
    backward((cf * R).sum())
    assert np.array_equal(x.grad, R.transpose(0, 2, 3, 1))
    assert nn.permute_layout(np.ones((3, 4, 5)), "channels_first").shape == (5, 3, 4)


def test_global_avg_pool(rng):
    assert np.allclose(nn.adaptive_global_avg_pool(np.full((2, 3, 4, 5), 2.5)).data, 2.5)
    one = rng.normal(size=(2, 1, 1, 5))
    assert np.allclose(nn.adaptive_global_avg_pool(one).data, one.reshape(2, 5))
    x = leaf(rng.normal(size=(2, 3, 4, 5)))
    backward(nn.adaptive_global_avg_pool(x).sum())
    assert np.allclose(x.grad, 1 / 12)


def test_state_dict_round_trip_and_mismatch(rng):
    m = nn.Conv2d(2, 2, 3, rng=rng)
    state = m.state_dict()
    m2 = nn.Conv2d(2, 2, 3, rng=np.random.default_rng(99))
    m2.load_state_dict(state)
    assert np.array_equal(m2.kernel.data, m.kernel.data)
    with pytest.raises(KeyError):
        m2.load_state_dict({"kernel": state["kernel"]})
    with pytest.raises(ShapeError):
        m2.load_state_dict({**state, "bias": np.zeros(3)})
