"""Shared oracles: central finite differences and the relative-error metric."""
import numpy as np

from cellseg.tensor import Tensor, backward


def numeric_grad(f, tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``tensor``.

    ``f`` must rebuild its computation from ``tensor.data`` on every call.
    Use float64 tensors.
    """
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f()
        flat[i] = orig - eps
        lm = f()
        flat[i] = orig
        gf[i] = (lp - lm) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / denom)


def analytic_grads(loss: Tensor, tensors):
    for t in tensors:
        t.grad = None
    backward(loss)
    return [t.grad for t in tensors]


def f64(arr, requires_grad=True) -> Tensor:
    t = Tensor(np.asarray(arr, dtype=np.float64))
    t.requires_grad = requires_grad
    return t
