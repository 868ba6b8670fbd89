"""The differentiable operator set used by the automaton architecture.

Convolutions are channels-last (b, h, w, c) and implemented as one matmul
per kernel tap, which keeps everything inside BLAS without materialising
im2col buffers.  Same-padding zero-fills the border, so edge cells see an
implicit wall.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, make_result

NORM_KINDS = ("none", "batch_live", "instance", "channel")


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    pad = max((out - 1) * stride + k - size, 0)
    return out, pad // 2, pad - pad // 2


def _pad(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int]) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _conv_fwd(x, kern, stride, ph, pw, oh, ow):
    b = x.shape[0]
    kh, kw, cin, cout = kern.shape
    xp = _pad(x, ph, pw)
    out = np.zeros((b * oh * ow, cout), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + stride * (oh - 1) + 1:stride,
                       v:v + stride * (ow - 1) + 1:stride, :]
            out += patch.reshape(-1, cin) @ kern[u, v]
    return out.reshape(b, oh, ow, cout)


def _conv_dx(g, kern, stride, ph, pw, x_shape):
    b, h, w, cin = x_shape
    kh, kw, _, cout = kern.shape
    oh, ow = g.shape[1], g.shape[2]
    gflat = g.reshape(-1, cout)
    dxp = np.zeros((b, h + ph[0] + ph[1], w + pw[0] + pw[1], cin), dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + stride * (oh - 1) + 1:stride,
                v:v + stride * (ow - 1) + 1:stride, :] += \
                (gflat @ kern[u, v].T).reshape(b, oh, ow, cin)
    return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]


def _conv_dk(g, x, stride, ph, pw, kshape):
    kh, kw, cin, cout = kshape
    oh, ow = g.shape[1], g.shape[2]
    xp = _pad(x, ph, pw)
    gflat = g.reshape(-1, cout)
    dk = np.zeros(kshape, dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + stride * (oh - 1) + 1:stride,
                       v:v + stride * (ow - 1) + 1:stride, :]
            dk[u, v] = patch.reshape(-1, cin).T @ gflat
    return dk


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation; kernel (kh, kw, cin, cout), kh/kw in {1,3}, stride in {1,2}."""
    kh, kw, cin, cout = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"kernel size {kh}x{kw} unsupported (must be 1 or 3)")
    if stride not in (1, 2):
        raise ValueError(f"stride {stride} unsupported (must be 1 or 2)")
    if x.data.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"input channels {x.shape} do not match kernel cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    b, h, w, _ = x.shape

    if padding == "same":
        oh, ph0, ph1 = _same_pads(h, kh, stride)
        ow, pw0, pw1 = _same_pads(w, kw, stride)
    elif padding == "valid":
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        ph0 = ph1 = pw0 = pw1 = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ph, pw = (ph0, ph1), (pw0, pw1)

    if kh == kw == 1 and stride == 1:
        out = (x.data.reshape(-1, cin) @ kernel.data[0, 0]).reshape(b, h, w, cout)
    else:
        out = _conv_fwd(x.data, kernel.data, stride, ph, pw, oh, ow)
    if bias is not None:
        out = out + bias.data

    xd, kd = x.data, kernel.data
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def grad_fn(g):
        if kh == kw == 1 and stride == 1:
            dx = (g.reshape(-1, cout) @ kd[0, 0].T).reshape(xd.shape) if x.requires_grad else None
            dk = (xd.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(kd.shape) \
                if kernel.requires_grad else None
        else:
            dx = _conv_dx(g, kd, stride, ph, pw, xd.shape) if x.requires_grad else None
            dk = _conv_dk(g, xd, stride, ph, pw, kd.shape) if kernel.requires_grad else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum((0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_result(out, "conv2d", parents, grad_fn)


def depthwise_conv3x3(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 3x3 filtering, stride 1, same padding; kernel (3, 3, c)."""
    if kernel.shape[:2] != (3, 3) or kernel.data.ndim != 3:
        raise ValueError(f"depthwise kernel must be (3,3,c), got {kernel.shape}")
    c = kernel.shape[2]
    if x.data.ndim != 4 or x.shape[3] != c:
        raise ValueError(f"input channels {x.shape} do not match kernel c={c}")
    b, h, w, _ = x.shape
    xp = _pad(x.data, (1, 1), (1, 1))
    out = np.zeros_like(x.data)
    for u in range(3):
        for v in range(3):
            out += xp[:, u:u + h, v:v + w, :] * kernel.data[u, v]
    if bias is not None:
        out = out + bias.data

    xd, kd = x.data, kernel.data
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def grad_fn(g):
        dx = None
        if x.requires_grad:
            dxp = np.zeros((b, h + 2, w + 2, c), dtype=g.dtype)
            for u in range(3):
                for v in range(3):
                    dxp[:, u:u + h, v:v + w, :] += g * kd[u, v]
            dx = dxp[:, 1:1 + h, 1:1 + w, :]
        dk = None
        if kernel.requires_grad:
            xpl = _pad(xd, (1, 1), (1, 1))
            dk = np.zeros_like(kd)
            for u in range(3):
                for v in range(3):
                    dk[u, v] = (xpl[:, u:u + h, v:v + w, :] * g).sum((0, 1, 2))
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum((0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_result(out, "depthwise_conv3x3", parents, grad_fn)


def transpose_conv2d_s2(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of the stride-2 same-padding conv; doubles both spatial extents.

    kernel is (3, 3, cout, cin) for input (b, h, w, cin) -> (b, 2h, 2w, cout).
    """
    if kernel.data.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ValueError(f"transpose kernel must be (3,3,cout,cin), got {kernel.shape}")
    cout, cin = kernel.shape[2], kernel.shape[3]
    if x.data.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"input channels {x.shape} do not match kernel cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    b, h, w, _ = x.shape
    oh, ow = 2 * h, 2 * w
    # pads of the paired forward conv (input size 2h, k=3, stride 2)
    _, ph0, ph1 = _same_pads(oh, 3, 2)
    _, pw0, pw1 = _same_pads(ow, 3, 2)
    ph, pw = (ph0, ph1), (pw0, pw1)

    out = _conv_dx(x.data, kernel.data, 2, ph, pw, (b, oh, ow, cout))
    if bias is not None:
        out = out + bias.data

    xd, kd = x.data, kernel.data
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def grad_fn(g):
        dx = _conv_fwd(g, kd, 2, ph, pw, h, w) if x.requires_grad else None
        dk = _conv_dk(xd, g, 2, ph, pw, kd.shape) if kernel.requires_grad else None
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum((0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_result(out, "transpose_conv2d_s2", parents, grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return [g * (out > 0)]

    return make_result(out, "relu", [x], grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def grad_fn(g):
        return [g * out * (1.0 - out)]

    return make_result(out, "sigmoid", [x], grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axes, keepdims=True) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        return [g, g]

    return make_result(a.data + b.data, "add", [a, b], grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a size-1 channel axis broadcasts (used by gates/masks)."""
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"mul rank mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        da = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        db = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return [da, db]

    return make_result(ad * bd, "mul", [a, b], grad_fn)


def scale(x: Tensor, gain: float, offset: float = 0.0) -> Tensor:
    gain, offset = float(gain), float(offset)
    out = x.data * gain + offset if offset else x.data * gain

    def grad_fn(g):
        return [g * gain]

    return make_result(out, "scale", [x], grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat of nothing")
    base = parts[0].shape[:3]
    for p in parts:
        if p.shape[:3] != base:
            raise ValueError("concat spatial/batch shapes differ")
    sizes = [p.shape[3] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=3)
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return [g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return make_result(out, "concat", list(parts), grad_fn)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        return [np.broadcast_to(g, x.data.shape)]

    return make_result(out, "sum", [x], grad_fn)


_NORM_AXES = {"instance": (1, 2), "batch_live": (0, 1, 2), "channel": (3,)}


def normalize(x: Tensor, kind: str, gain: Optional[Tensor] = None,
              bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Standardise over the kind's axes, then per-channel affine.

    batch_live always uses current-batch statistics, also in evaluation.
    """
    if kind == "none":
        return x
    if kind not in _NORM_AXES:
        raise ValueError(f"unknown normalization {kind!r} (one of {NORM_KINDS})")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = _NORM_AXES[kind]
    if any(x.shape[a] == 0 for a in axes):
        raise ValueError(f"normalization axis of size 0 in shape {x.shape}")

    mu = x.data.mean(axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = [x] + [t for t in (gain, bias) if t is not None]
    gd = gain.data if gain is not None else None

    def grad_fn(g):
        dxhat = g * gd if gd is not None else g
        dx = None
        if x.requires_grad:
            dx = inv * (dxhat - dxhat.mean(axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axes, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum((0, 1, 2)) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.sum((0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_result(out, f"norm_{kind}", parents, grad_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (prediction utility)."""
    m = logits.max(-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(-1, keepdims=True)


def softmax_xent(logits: Tensor, labels: Tensor,
                 batch_mask: Optional[np.ndarray] = None) -> tuple[Tensor, int]:
    """Mean cross-entropy over contributing pixels.

    labels are one-hot over the last axis; batch_mask (length b, 0/1) selects
    which batch entries contribute.  Returns (loss, contributing pixel count);
    a count of 0 means no entry passed the mask: loss 0, zero gradient.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    b, h, w, c = logits.shape
    if batch_mask is None:
        batch_mask = np.ones(b)
    wb = np.asarray(batch_mask, dtype=logits.dtype).reshape(b)
    count = int(round(float(wb.sum())) * h * w)
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), 0

    ld = logits.data
    m = ld.max(-1, keepdims=True)
    e = np.exp(ld - m)
    se = e.sum(-1, keepdims=True)
    ce = (np.log(se) + m)[..., 0] - (labels.data * ld).sum(-1)
    loss = np.asarray((ce * wb[:, None, None]).sum() / count, dtype=logits.dtype)

    p = e / se
    yd = labels.data

    def grad_fn(g):
        dl = (p - yd) * (wb[:, None, None, None] * (g / count))
        return [dl.astype(logits.dtype), None]

    return make_result(loss, "softmax_xent", [logits, labels], grad_fn), count
