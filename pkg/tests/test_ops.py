import numpy as np
import pytest
from scipy import signal

from cellseg import ops
from cellseg.tensor import Tensor, parameter


def rng(seed=0):
    return np.random.default_rng(seed)


def scipy_conv2d(x, kern, stride, padding):
    """Independent reference: per-channel scipy correlate, channels-last."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = kern.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        xp = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        xp = x
    out = np.zeros((b, (xp.shape[1] - kh) // stride + 1,
                    (xp.shape[2] - kw) // stride + 1, cout))
    for n in range(b):
        for co in range(cout):
            acc = np.zeros((xp.shape[1] - kh + 1, xp.shape[2] - kw + 1))
            for ci in range(cin):
                acc += signal.correlate2d(xp[n, :, :, ci], kern[:, :, ci, co], mode="valid")
            out[n, :, :, co] = acc[::stride, ::stride]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(rng().normal(size=(2, 5, 5, 3)).astype(np.float32))
        k = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            k[1, 1, c, c] = 1.0
        out = ops.conv2d(x, Tensor(k), Tensor(np.zeros(3, dtype=np.float32)))
        assert np.allclose(out.data, x.data)

    def test_all_ones_kernel_constant_field(self):
        c = 0.7
        x = Tensor(np.full((1, 5, 5, 1), c, dtype=np.float32))
        k = Tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
        out = ops.conv2d(x, k)
        assert np.isclose(out.data[0, 2, 2, 0], 9 * c, rtol=1e-6)

    @pytest.mark.parametrize("stride,padding,shape", [
        (1, "same", (2, 7, 6, 4)),
        (2, "same", (2, 8, 8, 3)),
        (2, "same", (1, 7, 9, 2)),
        (1, "valid", (2, 6, 6, 3)),
    ])
    def test_matches_scipy_reference(self, stride, padding, shape):
        g = rng(hash((stride, padding, shape)) % 2**32)
        x = g.normal(size=shape)
        k = g.normal(size=(3, 3, shape[3], 5))
        ours = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64),
                          stride=stride, padding=padding)
        ref = scipy_conv2d(x, k, stride, padding)
        assert ours.data.shape == ref.shape
        assert np.allclose(ours.data, ref, atol=1e-10)

    def test_stride2_output_is_ceil_half(self):
        x = Tensor(np.zeros((1, 7, 10, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 2, 4), dtype=np.float32))
        assert ops.conv2d(x, k, stride=2).shape == (1, 4, 5, 4)

    def test_1x1_equals_matmul(self):
        g = rng(3)
        x = g.normal(size=(2, 4, 4, 6)).astype(np.float32)
        k = g.normal(size=(1, 1, 6, 2)).astype(np.float32)
        out = ops.conv2d(Tensor(x), Tensor(k))
        ref = x.reshape(-1, 6) @ k[0, 0]
        assert np.allclose(out.data.reshape(-1, 2), ref, atol=1e-5)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 4, 4, 3), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 4, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv2d(x, k)

    def test_kernel_size_5_rejected(self):
        x = Tensor(np.zeros((1, 8, 8, 1), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv2d(x, Tensor(np.zeros((5, 5, 1, 1), dtype=np.float32)))


class TestDepthwise:
    def test_identity_kernels(self):
        x = Tensor(rng(1).normal(size=(2, 6, 6, 4)).astype(np.float32))
        k = np.zeros((3, 3, 4), dtype=np.float32)
        k[1, 1, :] = 1.0
        out = ops.depthwise_conv3x3(x, Tensor(k), Tensor(np.zeros(4, dtype=np.float32)))
        assert np.allclose(out.data, x.data)

    def test_single_channel_equals_full_conv(self):
        g = rng(2)
        x = g.normal(size=(1, 5, 7, 1)).astype(np.float32)
        k = g.normal(size=(3, 3)).astype(np.float32)
        dw = ops.depthwise_conv3x3(Tensor(x), Tensor(k[:, :, None]))
        full = ops.conv2d(Tensor(x), Tensor(k[:, :, None, None]))
        assert np.allclose(dw.data, full.data, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ops.depthwise_conv3x3(Tensor(np.zeros((1, 4, 4, 3), dtype=np.float32)),
                                  Tensor(np.zeros((3, 3, 2), dtype=np.float32)))


class TestTransposeConv:
    def test_adjoint_identity(self):
        # <conv(x), y> == <x, transpose_conv(y)> with the shared kernel
        g = rng(4)
        x = Tensor(g.normal(size=(2, 8, 8, 3)), dtype=np.float64)
        k = Tensor(g.normal(size=(3, 3, 3, 5)), dtype=np.float64)
        y = Tensor(g.normal(size=(2, 4, 4, 5)), dtype=np.float64)
        cx = ops.conv2d(x, k, stride=2)
        ty = ops.transpose_conv2d_s2(y, k)
        lhs = float((cx.data * y.data).sum())
        rhs = float((x.data * ty.data).sum())
        assert abs(lhs - rhs) / max(abs(lhs), 1e-9) < 1e-10

    def test_output_doubles_spatial(self):
        y = Tensor(np.zeros((1, 5, 7, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 4, 2), dtype=np.float32))
        assert ops.transpose_conv2d_s2(y, k).shape == (1, 10, 14, 4)

    def test_zero_kernel_bias_only(self):
        y = Tensor(np.ones((1, 1, 1, 2), dtype=np.float32))
        k = Tensor(np.zeros((3, 3, 3, 2), dtype=np.float32))
        b = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32))
        out = ops.transpose_conv2d_s2(y, k, b)
        assert out.shape == (1, 2, 2, 3)
        assert np.allclose(out.data, b.data)


class TestPointwise:
    def test_relu(self):
        out = ops.relu(Tensor(np.array([-2.0, 0.0, 3.0], dtype=np.float32)))
        assert np.array_equal(out.data, [0.0, 0.0, 3.0])

    def test_sigmoid_of_zero(self):
        assert ops.sigmoid(Tensor(np.zeros(1, dtype=np.float32))).data[0] == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = ops.sigmoid(Tensor(np.array([-1e4, 1e4], dtype=np.float32)))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_mul_broadcasts_channel(self):
        a = Tensor(np.ones((1, 2, 2, 4), dtype=np.float32))
        m = Tensor(np.full((1, 2, 2, 1), 0.5, dtype=np.float32))
        assert np.allclose(ops.mul(a, m).data, 0.5)

    def test_scale_affine(self):
        out = ops.scale(Tensor(np.array([1.0, 2.0], dtype=np.float32)), -1.0, 1.0)
        assert np.allclose(out.data, [0.0, -1.0])

    def test_concat_channels(self):
        a = Tensor(np.ones((1, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros((1, 2, 2, 3), dtype=np.float32))
        out = ops.concat_channels([a, b])
        assert out.shape == (1, 2, 2, 5)
        assert np.allclose(out.data[..., :2], 1.0) and np.allclose(out.data[..., 2:], 0.0)


class TestNormalize:
    def test_constant_channel_instance_norm_is_zero(self):
        x = Tensor(np.full((1, 4, 4, 2), 3.0, dtype=np.float32))
        out = ops.normalize(x, "instance")
        assert np.abs(out.data).max() <= 1e-2  # bounded by eps smoothing

    def test_two_values_normalize_to_pm_one(self):
        x = np.zeros((1, 1, 2, 1), dtype=np.float64)
        x[0, 0, 0, 0], x[0, 0, 1, 0] = 1.0, 3.0
        out = ops.normalize(Tensor(x, dtype=np.float64), "instance", eps=1e-14)
        assert np.allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-6)

    def test_instance_norm_per_sample_channel(self):
        g = rng(5)
        x = g.normal(size=(3, 6, 5, 4)).astype(np.float32)
        out = ops.normalize(Tensor(x), "instance").data
        assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
        assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-3)

    def test_batch_live_uses_batch_statistics(self):
        g = rng(6)
        x = g.normal(size=(4, 3, 3, 2)).astype(np.float32)
        out = ops.normalize(Tensor(x), "batch_live").data
        assert np.allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)

    def test_channel_norm_per_pixel(self):
        g = rng(7)
        x = g.normal(size=(2, 3, 3, 8)).astype(np.float32)
        out = ops.normalize(Tensor(x), "channel").data
        assert np.allclose(out.mean(axis=3), 0.0, atol=1e-5)

    def test_affine_params_applied(self):
        x = Tensor(np.array([[[[1.0], [3.0]]]], dtype=np.float32))
        gain = Tensor(np.array([2.0], dtype=np.float32))
        bias = Tensor(np.array([10.0], dtype=np.float32))
        out = ops.normalize(x, "instance", gain, bias, eps=1e-12)
        assert np.allclose(out.data.reshape(-1), [8.0, 12.0], atol=1e-4)

    def test_none_kind_is_identity(self):
        x = Tensor(np.ones((1, 2, 2, 1), dtype=np.float32))
        assert ops.normalize(x, "none") is x

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ops.normalize(Tensor(np.ones((1, 2, 2, 1))), "layer")


class TestSoftmaxXent:
    def test_uniform_logits_gives_log_c(self):
        logits = Tensor(np.zeros((1, 2, 2, 3), dtype=np.float32))
        labels = np.zeros((1, 2, 2, 3), dtype=np.float32)
        labels[..., 1] = 1.0
        loss, n = ops.softmax_xent(logits, Tensor(labels))
        assert n == 4
        assert np.isclose(loss.item(), np.log(3.0), rtol=1e-6)

    def test_saturated_correct_prediction(self):
        logits = np.zeros((1, 1, 1, 3), dtype=np.float32)
        logits[..., 2] = 50.0
        labels = np.zeros((1, 1, 1, 3), dtype=np.float32)
        labels[..., 2] = 1.0
        loss, _ = ops.softmax_xent(Tensor(logits), Tensor(labels))
        assert loss.item() < 1e-9

    def test_batch_mask_selects_entries(self):
        g = rng(8)
        logits = g.normal(size=(2, 2, 2, 3)).astype(np.float32)
        labels = np.eye(3, dtype=np.float32)[g.integers(0, 3, size=(2, 2, 2))]
        full, _ = ops.softmax_xent(Tensor(logits), Tensor(labels))
        only0, n = ops.softmax_xent(Tensor(logits), Tensor(labels), np.array([1.0, 0.0]))
        ref0, _ = ops.softmax_xent(Tensor(logits[:1]), Tensor(labels[:1]))
        assert n == 4
        assert np.isclose(only0.item(), ref0.item(), rtol=1e-6)
        assert not np.isclose(full.item(), only0.item())

    def test_all_zero_mask_flagged(self):
        logits = parameter(np.ones((1, 2, 2, 3), dtype=np.float32))
        labels = Tensor(np.eye(3, dtype=np.float32)[np.zeros((1, 2, 2), dtype=int)])
        loss, n = ops.softmax_xent(logits, labels, np.zeros(1))
        assert n == 0 and loss.item() == 0.0 and loss.node is None

    def test_softmax_rows_sum_to_one(self):
        g = rng(9)
        p = ops.softmax(g.normal(size=(2, 4, 4, 3)) * 10)
        assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
