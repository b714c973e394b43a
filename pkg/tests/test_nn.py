import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convmixer import nn
from convmixer.gradcheck import check_gradients
from convmixer.nn import BatchNormState, ConvSpec
from convmixer.tensor import ShapeError, Tensor, default_dtype


def naive_conv2d(x, w, b, spec):
    """Direct summation over every tap, written independently of the library."""
    B, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    s, G = spec.stride, spec.groups
    if spec.padding == "same":
        oh, ow = math.ceil(H / s), math.ceil(W / s)
        ph = max((oh - 1) * s + k - H, 0)
        pw = max((ow - 1) * s + k - W, 0)
        top, left = ph // 2, pw // 2
    else:
        oh, ow = (H - k) // s + 1, (W - k) // s + 1
        top = left = 0
    Og = O // G
    out = np.zeros((B, O, oh, ow))
    for bi in range(B):
        for o in range(O):
            g = o // Og
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(Cg):
                        for i in range(k):
                            for j in range(k):
                                iy, ix = y * s + i - top, xx * s + j - left
                                if 0 <= iy < H and 0 <= ix < W:
                                    acc += w[o, c, i, j] * x[bi, g * Cg + c, iy, ix]
                    out[bi, o, y, xx] = acc
    return out


SPECS = [
    ConvSpec(4, 4, 3, 1, 4, "same"),
    ConvSpec(4, 4, 4, 1, 4, "same"),
    ConvSpec(4, 6, 3, 2, 2, "same"),
    ConvSpec(4, 8, 2, 2, 1, "none"),
    ConvSpec(4, 4, 1, 1, 1, "none"),
    ConvSpec(4, 4, 5, 1, 1, "same"),
]


def test_patch_embedding_output_shape():
    spec = ConvSpec.patch_embed(3, 16, 7)
    # shape arithmetic only; a full 1536-channel weight is not needed to check it
    assert spec.output_size(224, 224) == (32, 32)
    x = Tensor(np.zeros((2, 3, 224, 224)))
    out = nn.conv2d(x, Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert out.shape == (2, 16, 32, 32)


def test_patch_embedding_full_width_shape():
    spec = ConvSpec.patch_embed(3, 1536, 7)
    out = nn.conv2d(Tensor(np.zeros((2, 3, 224, 224))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert out.shape == (2, 1536, 32, 32)


def test_delta_kernel_is_identity(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    out = nn.conv2d(x, Tensor(w), Tensor(np.zeros(3)), ConvSpec.depthwise(3, 3))
    np.testing.assert_array_equal(out.data, x.data)


def test_all_ones_kernel_corner_and_centre():
    x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = nn.conv2d(x, w, Tensor([0.0]), ConvSpec(1, 1, 3, padding="same")).data
    oracle = naive_conv2d(x.data, w.data, None, ConvSpec(1, 1, 3, padding="same"))
    np.testing.assert_allclose(out, oracle)
    assert out[0, 0, 0, 0] == 12
    assert out[0, 0, 1, 1] == 45


@pytest.mark.parametrize("spec", SPECS, ids=str)
@pytest.mark.parametrize("method", ["direct", "im2col"])
def test_conv_matches_naive_oracle(spec, method, rng):
    x = rng.uniform(-1, 1, (2, 4, 7, 6)).astype(np.float32)
    w = rng.uniform(-1, 1, spec.weight_shape).astype(np.float32)
    b = rng.uniform(-1, 1, spec.out_channels).astype(np.float32)
    out = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), spec, method=method).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, spec), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_direct_and_im2col_agree(spec, rng):
    x = Tensor(rng.uniform(-1, 1, (2, 4, 9, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, spec.weight_shape), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, (2, spec.out_channels) + spec.output_size(9, 8)))
    grads = []
    outs = []
    for method in ("direct", "im2col"):
        x.zero_grad()
        w.zero_grad()
        out = nn.conv2d(x, w, None, spec, method=method)
        outs.append(out.data.copy())
        (out * proj).sum().backward()
        grads.append((x.grad.copy(), w.grad.copy()))
    scale = np.abs(outs[0]).max()
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-5, atol=1e-5 * scale)
    for a, b in zip(grads[0], grads[1]):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5 * np.abs(a).max())


@pytest.mark.parametrize("spec", SPECS, ids=str)
@pytest.mark.parametrize("method", ["direct", "im2col"])
def test_conv_gradients(spec, method, rng):
    with default_dtype(np.float64):
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, spec.weight_shape), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, spec.out_channels), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, spec.out_channels) + spec.output_size(6, 6)))
        check_gradients(lambda: (nn.conv2d(x, w, b, spec, method) * proj).sum(), [x, w, b])


def test_conv_errors():
    spec = ConvSpec(4, 4, 3)
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    with pytest.raises(ValueError):
        ConvSpec(4, 6, 3, groups=4)


@given(k=st.integers(1, 8), h=st.integers(1, 9), w=st.integers(1, 9))
@settings(max_examples=40, deadline=None)
def test_same_padding_preserves_extent(k, h, w):
    spec = ConvSpec(2, 2, k, groups=2, padding="same")
    out = nn.conv2d(Tensor(np.ones((1, 2, h, w))), Tensor(np.ones(spec.weight_shape)), None, spec)
    assert out.shape == (1, 2, h, w)


def test_even_kernel_padding_split():
    assert ConvSpec(1, 1, 8, padding="same").pads(32, 32) == (3, 4, 3, 4)


def test_depthwise_channel_isolation(rng):
    spec = ConvSpec.depthwise(5, 3)
    x = rng.uniform(-1, 1, (1, 5, 6, 6))
    w = Tensor(rng.uniform(-1, 1, spec.weight_shape))
    base = nn.conv2d(Tensor(x), w, None, spec).data
    for c in range(5):
        bumped = x.copy()
        bumped[:, c] += rng.uniform(0.5, 1.0, (6, 6))
        diff = np.abs(nn.conv2d(Tensor(bumped), w, None, spec).data - base).sum(axis=(0, 2, 3))
        assert diff[c] > 0
        assert np.all(np.delete(diff, c) == 0)


def test_pointwise_conv_is_per_position_matmul(rng):
    spec = ConvSpec.pointwise(4, 3)
    x = rng.uniform(-1, 1, (2, 4, 5, 5)).astype(np.float32)
    w = rng.uniform(-1, 1, spec.weight_shape).astype(np.float32)
    out = nn.conv2d(Tensor(x), Tensor(w), None, spec).data
    flat = x.transpose(0, 2, 3, 1).reshape(-1, 4)
    ref = (Tensor(flat) @ Tensor(w[:, :, 0, 0].T)).data.reshape(2, 5, 5, 3).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)


# -- batchnorm -------------------------------------------------------------------


def test_batchnorm_zero_gamma_collapses_to_beta(rng):
    state = BatchNormState.create(3)
    state.gamma.data[:] = 0
    state.beta.data[:] = [0.5, -1.0, 2.0]
    out = nn.batchnorm2d(Tensor(rng.uniform(-1, 1, (2, 3, 4, 4))), state, "train").data
    np.testing.assert_array_equal(out, np.broadcast_to(state.beta.data[None, :, None, None], out.shape))


def test_batchnorm_eval_identity_statistics(rng):
    state = BatchNormState.create(3, eps=1e-12)
    x = rng.uniform(-1, 1, (2, 3, 4, 4))
    np.testing.assert_allclose(nn.batchnorm2d(Tensor(x), state, "eval").data, x, atol=1e-6)


def test_batchnorm_two_values():
    state = BatchNormState.create(1)
    out = nn.batchnorm2d(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), state, "train").data.ravel()
    expected = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [-expected, expected], rtol=1e-6)
    assert abs(out[0] + 0.999995) < 1e-6


def test_batchnorm_running_stats_update():
    state = BatchNormState.create(1)
    nn.batchnorm2d(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), state, "train")
    # mean 2, unbiased var 2
    np.testing.assert_allclose(state.running_mean, [0.2])
    np.testing.assert_allclose(state.running_var, [0.9 * 1 + 0.1 * 2.0])


def test_batchnorm_train_statistics(rng):
    state = BatchNormState.create(4)
    x = rng.normal(3.0, 2.0, (4, 4, 5, 5))
    out = nn.batchnorm2d(Tensor(x), state, "train").data.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-4)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)


def test_batchnorm_errors():
    state = BatchNormState.create(2)
    with pytest.raises(ShapeError):
        nn.batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), state)
    with pytest.raises(ValueError):
        nn.batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), state, "train")


def test_batchnorm_eval_is_deterministic(rng):
    state = BatchNormState.create(2)
    state.running_mean[:] = [0.3, -0.1]
    x = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
    a = nn.batchnorm2d(x, state, "eval").data
    b = nn.batchnorm2d(x, state, "eval").data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode, rng):
    with default_dtype(np.float64):
        state = BatchNormState.create(4)
        state.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
        state.beta.data[:] = rng.uniform(-1, 1, 4)
        state.running_mean[:] = rng.uniform(-0.2, 0.2, 4)
        state.running_var[:] = rng.uniform(0.5, 1.5, 4)
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)))
        check_gradients(lambda: (nn.batchnorm2d(x, state, mode) * proj).sum(), [x, state.gamma, state.beta])


# -- layernorm -------------------------------------------------------------------


def test_layernorm_constant_channels_gives_beta():
    beta = Tensor([0.1, 0.2, 0.3])
    out = nn.layernorm(Tensor(np.full((1, 3, 2, 2), 4.0)), Tensor(np.ones(3)), beta).data
    np.testing.assert_allclose(out, np.broadcast_to(beta.data[None, :, None, None], out.shape))


def test_layernorm_two_channels():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = nn.layernorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).data.ravel()
    np.testing.assert_allclose(out, [-1, 1], atol=1e-5)


def test_layernorm_zero_gamma(rng):
    beta = Tensor([1.0, -1.0])
    out = nn.layernorm(Tensor(rng.uniform(-1, 1, (2, 2, 3, 3))), Tensor(np.zeros(2)), beta).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta.data[None, :, None, None], out.shape))


def test_layernorm_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.layernorm(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_layernorm_gradients(rng):
    with default_dtype(np.float64):
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)))
        check_gradients(lambda: (nn.layernorm(x, g, b) * proj).sum(), [x, g, b])


# -- activations, pooling, linear, loss -----------------------------------------------


def test_activation_values():
    assert nn.gelu(Tensor([0.0])).item() == 0
    assert nn.relu(Tensor([0.0])).item() == 0
    np.testing.assert_array_equal(nn.relu(Tensor([-2.0, 2.0])).data, [0, 2])
    closed_form = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert abs(nn.gelu(Tensor([1.0])).item() - closed_form) < 1e-6
    assert abs(nn.gelu(Tensor([1.0])).item() - 0.8412) < 1e-4


def test_gelu_close_to_exact_erf_form():
    xs = np.linspace(-4, 4, 101)
    exact = 0.5 * xs * (1 + np.vectorize(math.erf)(xs / math.sqrt(2)))
    assert np.abs(nn.gelu(Tensor(xs)).data - exact).max() < 1e-3


@pytest.mark.parametrize("kind", ["gelu", "relu"])
def test_activation_gradients(kind, rng):
    with default_dtype(np.float64):
        vals = rng.uniform(-1, 1, (1, 4, 6, 6))
        vals[np.abs(vals) < 0.01] = 0.5  # keep clear of the relu kink
        x = Tensor(vals, requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)))
        check_gradients(lambda: (nn.activation(kind, x) * proj).sum(), [x])


def test_unknown_activation():
    with pytest.raises(ValueError):
        nn.activation("swish", Tensor([1.0]))


def test_global_avg_pool():
    np.testing.assert_allclose(nn.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data, 1.5)
    assert nn.global_avg_pool(Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))).item() == 2.5
    assert nn.global_avg_pool(Tensor(np.zeros((3, 2, 7, 1)))).shape == (3, 2)


def test_global_avg_pool_gradients(rng):
    with default_dtype(np.float64):
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 4)))
        check_gradients(lambda: (nn.global_avg_pool(x) * proj).sum(), [x])


def test_linear_examples(rng):
    x = Tensor(rng.uniform(-1, 1, (3, 4)))
    np.testing.assert_allclose(nn.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
    out = nn.linear(x, Tensor(np.zeros((4, 2))), Tensor([0.5, -0.5])).data
    np.testing.assert_array_equal(out, [[0.5, -0.5]] * 3)
    out = nn.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [[2, 3]])
    with pytest.raises(ShapeError):
        nn.linear(x, Tensor(np.zeros((3, 2))), None)


def test_linear_gradients(rng):
    with default_dtype(np.float64):
        x = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (3, 4)))
        check_gradients(lambda: (nn.linear(x, w, b) * proj).sum(), [x, w, b])


def test_cross_entropy_examples(rng):
    target = nn.softmax(rng.uniform(-1, 1, (4, 10)))
    loss = nn.softmax_cross_entropy(Tensor(np.zeros((4, 10))), target).item()
    assert abs(loss - math.log(10)) < 1e-6
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000
    assert nn.softmax_cross_entropy(Tensor(logits), nn.one_hot([3], 10)).item() < 1e-6
    loss = nn.softmax_cross_entropy(Tensor([[0.0, math.log(3)]]), np.array([[1.0, 0.0]])).item()
    assert abs(loss - math.log(4)) < 1e-6


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([[0.7, 0.7]]))
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([[1.5, -0.5]]))


def test_cross_entropy_gradients(rng):
    with default_dtype(np.float64):
        logits = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        target = nn.softmax(rng.uniform(-2, 2, (3, 5)))
        check_gradients(lambda: nn.softmax_cross_entropy(logits, target), [logits])
    # closed form: (softmax - target) / B
    np.testing.assert_allclose(logits.grad, (nn.softmax(logits.data) - target) / 3, atol=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_cross_entropy_nonnegative(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(0, 3, (4, 6))
    target = nn.softmax(r.normal(0, 3, (4, 6)))
    assert nn.softmax_cross_entropy(Tensor(logits), target).item() >= -1e-6
