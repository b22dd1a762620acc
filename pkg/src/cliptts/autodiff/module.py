"""Parameter containers with stable dotted names."""

from __future__ import annotations

import zlib
from typing import Iterator, Mapping

import numpy as np

from ..errors import CheckpointMismatch, ShapeError
from .init import seeded_init
from .tensor import Parameter


class Module:
    """Base class for anything that owns parameters.

    Parameters are discovered from instance attributes in assignment order;
    lists of modules get numbered path segments (``fft.0.attn.wq``).
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def bind_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def initialize(self, seed: int) -> "Module":
        """Fill every parameter from its init scheme.

        Each parameter's stream is keyed by (seed, crc32 of its name), so
        the values do not depend on construction order or on which sibling
        modules exist.
        """
        for name, p in self.named_parameters():
            key = zlib.crc32(name.encode("utf-8"))
            p.data[...] = seeded_init(p.shape, p.init, seed=[seed, key],
                                      std=p.init_std or 1.0).data
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "",
                        strict: bool = True) -> None:
        """Copy ``state[prefix + name]`` into each parameter bitwise.

        With ``strict``, keys under ``prefix`` that the module does not own
        are an error too.  Keys outside ``prefix`` are ignored.
        """
        own = dict(self.named_parameters(prefix))
        missing = sorted(k for k in own if k not in state)
        if missing:
            raise CheckpointMismatch(f"checkpoint is missing parameter(s): {', '.join(missing)}")
        if strict:
            extra = sorted(k for k in state if k.startswith(prefix) and k not in own)
            if extra:
                raise CheckpointMismatch(f"checkpoint has unexpected parameter(s): {', '.join(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        for name, p in own.items():
            p.data[...] = state[name]
