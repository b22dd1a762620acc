"""Seeded parameter initialisation."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import InvalidShape
from .tensor import Tensor, default_dtype


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv kernel [k, Cin, Cout]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def seeded_init(shape: Sequence[int], scheme: str = "xavier_uniform", seed=0,
                std: float = 1.0) -> Tensor:
    """Deterministic initial values for a tensor of ``shape``.

    ``scheme`` is one of ``zeros``, ``ones``, ``xavier_uniform`` (bound
    ``sqrt(6 / (fan_in + fan_out))``) or ``normal`` (mean 0, deviation
    ``std``).  ``seed`` may be an int or a sequence of ints.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShape(f"shape must be nonempty with positive dims, got {shape}")
    dtype = default_dtype()
    if scheme == "zeros":
        return Tensor(np.zeros(shape), dtype=dtype)
    if scheme == "ones":
        return Tensor(np.ones(shape), dtype=dtype)
    rng = np.random.default_rng(seed)
    if scheme == "xavier_uniform":
        fan_in, fan_out = _fans(shape)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)
    if scheme == "normal":
        return Tensor(rng.normal(0.0, std, size=shape), dtype=dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")
