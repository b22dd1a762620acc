"""Central finite-difference check of tape gradients, in 64-bit mode."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, float64_mode


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, weights))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
              seed: int = 0, wrt: Sequence[int] | None = None) -> list[float]:
    """Compare tape gradients of ``fn`` against central differences.

    Non-scalar outputs are contracted with a fixed random weight tensor so
    every output element participates.  Returns one relative error
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` per checked
    input.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    with float64_mode():
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        probe = fn(*[Tensor(a) for a in arrays])
        weights = None
        if probe.size != 1:
            weights = np.random.default_rng(seed).standard_normal(probe.shape)

        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        with Tape():
            out = _scalarize(fn(*tensors), weights)
        backward(out)

        def f(vals):
            return float(_scalarize(fn(*[Tensor(v) for v in vals]), weights).data)

        errors = []
        for i in wrt:
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = f(arrays)
                flat[j] = orig - eps
                down = f(arrays)
                flat[j] = orig
                nflat[j] = (up - down) / (2 * eps)
            errors.append(relative_error(tensors[i].grad, numeric))
        return errors
