"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor

# relative error denominator floor; below it the comparison is effectively absolute
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        up = f()
        x[i] = orig - step
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def check_gradients(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per parameter between tape and finite-difference gradients.

    ``loss_fn`` maps a dict of leaf tensors to a scalar tensor; ``params`` are
    perturbed in place and restored.
    """
    leaves = {name: Tensor(value, requires_grad=True) for name, value in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
        analytic = tape.gradients(loss, leaves)

    def value() -> float:
        return float(loss_fn({name: Tensor(v) for name, v in params.items()}).data)

    return {
        name: relative_error(analytic[name], numeric_gradient(value, params[name], step))
        for name in params
    }
