"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .nn import trace_relu_masks
from .tensor import Tensor


def _central(fn, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    f_plus = fn().item()
    flat[i] = orig - h
    f_minus = fn().item()
    flat[i] = orig
    return (f_plus - f_minus) / (2 * h)


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-3, order: int = 2) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``.

    ``order=2`` is the plain (f(x+h) - f(x-h)) / 2h stencil. ``order=4``
    Richardson-combines steps h and h/2, cancelling the h^2 truncation term.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        d_h = _central(fn, flat, i, h)
        if order == 2:
            out[i] = d_h
        else:
            out[i] = (4 * _central(fn, flat, i, h / 2) - d_h) / 3
    return grad


def kink_crossings(fn: Callable[[], Tensor], target: Tensor, h: float) -> np.ndarray:
    """Elements whose +-h perturbation flips some relu on or off.

    Finite differences across such a kink do not estimate the derivative.
    """
    with trace_relu_masks() as base:
        fn()
    ref = [m.copy() for m in base]
    crossed = np.zeros(target.size, dtype=bool)
    flat = target.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        for delta in (h, -h):
            flat[i] = orig + delta
            with trace_relu_masks() as masks:
                fn()
            if any(not np.array_equal(a, b) for a, b in zip(ref, masks)):
                crossed[i] = True
        flat[i] = orig
    return crossed.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-6)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    order: int = 2,
    skip_kinks: bool = False,
    names: Optional[Sequence[str]] = None,
) -> float:
    """Compare backprop gradients of ``fn`` against central differences.

    Every tensor in ``inputs`` must be a leaf with ``requires_grad=True``.
    Returns the worst elementwise relative error and raises AssertionError
    if it reaches ``tol``. With ``skip_kinks`` elements whose stencil crosses
    a relu kink are left out of the comparison.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    worst = 0.0
    for idx, (t, a) in enumerate(zip(inputs, analytic)):
        label = names[idx] if names else f"input {idx}"
        err = relative_error(a, numerical_grad(fn, t, h, order))
        if skip_kinks:
            err = np.where(kink_crossings(fn, t, h), 0.0, err)
        worst = max(worst, float(err.max()))
        if err.max() >= tol:
            j = int(err.argmax())
            raise AssertionError(
                f"{label} shape {t.shape}: element {j} analytic {a.reshape(-1)[j]:.6g} "
                f"(rel err {err.reshape(-1)[j]:.3g})"
            )
    return worst
