"""Parameter containers and helpers shared by every network component.

Parameters live in plain dataclasses whose fields are Tensors, lists of
dataclasses, or plain config values. ``named_parameters`` walks such a tree
in field order, which fixes the parameter ordering used by the optimizer,
the EMA shadow and the checkpoint table.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

from mpdit.errors import StructureError
from mpdit.tensor import Rng, Tensor, layer_norm, matmul

LN_EPS = 1e-6


@dataclass
class Linear:
    """Affine map ``x @ weight + bias``; weight is stored (in, out)."""

    weight: Tensor
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


@dataclass
class LayerNormAffine:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


@dataclass
class ParamFactory:
    """Creates leaf parameters from one seeded stream.

    With ``shape_only`` set, parameters are zero-stride views of a single
    scalar: shapes and element counts are real, memory is not. Used to
    instantiate XL-sized configs for parameter accounting.
    """

    rng: Rng
    dtype: np.dtype = np.dtype(np.float32)
    shape_only: bool = False

    def _leaf(self, shape: tuple[int, ...], draw: Callable[[], np.ndarray]) -> Tensor:
        if self.shape_only:
            return Tensor(np.broadcast_to(np.zeros((), dtype=self.dtype), shape), requires_grad=True)
        return Tensor(np.ascontiguousarray(draw(), dtype=self.dtype), requires_grad=True)

    def zeros(self, *shape: int) -> Tensor:
        return self._leaf(shape, lambda: np.zeros(shape))

    def ones(self, *shape: int) -> Tensor:
        return self._leaf(shape, lambda: np.ones(shape))

    def normal(self, *shape: int, std: float = 1.0) -> Tensor:
        return self._leaf(shape, lambda: self.rng.normal(shape, dtype=np.float64) * std)

    def xavier(self, fan_in: int, fan_out: int) -> Tensor:
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        shape = (fan_in, fan_out)
        return self._leaf(shape, lambda: self.rng.uniform(shape, -bound, bound, dtype=np.float64))

    def linear(self, fan_in: int, fan_out: int, *, zero: bool = False, bias: bool = True) -> Linear:
        weight = self.zeros(fan_in, fan_out) if zero else self.xavier(fan_in, fan_out)
        return Linear(weight, self.zeros(fan_out) if bias else None)

    def normal_linear(self, fan_in: int, fan_out: int, std: float = 0.02) -> Linear:
        return Linear(self.normal(fan_in, fan_out, std=std), self.zeros(fan_out))

    def layer_norm(self, dim: int) -> LayerNormAffine:
        return LayerNormAffine(self.ones(dim), self.zeros(dim))


# ---------------------------------------------------------------------------
# Tree walking
# ---------------------------------------------------------------------------


def named_parameters(tree: Any, prefix: str = "") -> list[tuple[str, Tensor]]:
    return list(_walk(tree, prefix))


def _walk(node: Any, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(node, Tensor):
        yield prefix, node
    elif dataclasses.is_dataclass(node) and not isinstance(node, type):
        for f in dataclasses.fields(node):
            yield from _walk(getattr(node, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            yield from _walk(child, f"{prefix}.{i}" if prefix else str(i))


def parameters(tree: Any) -> list[Tensor]:
    return [t for _, t in _walk(tree, "")]


def parameter_count(tree: Any) -> int:
    return sum(t.size for t in parameters(tree))


def map_tensors(tree: Any, fn: Callable[[Tensor], Tensor]) -> Any:
    """Rebuild ``tree`` with every Tensor leaf replaced by ``fn(leaf)``."""
    if isinstance(tree, Tensor):
        return fn(tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        changes = {
            f.name: map_tensors(getattr(tree, f.name), fn) for f in dataclasses.fields(tree) if f.init
        }
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, list):
        return [map_tensors(child, fn) for child in tree]
    if isinstance(tree, tuple):
        return tuple(map_tensors(child, fn) for child in tree)
    return tree


def zero_grads(tree: Any) -> None:
    for t in parameters(tree):
        t.grad = None


def assert_same_structure(a: Any, b: Any, what: str = "parameter sets") -> None:
    left = [(name, t.shape) for name, t in _walk(a, "")]
    right = [(name, t.shape) for name, t in _walk(b, "")]
    if left != right:
        diff = sorted(set(left) ^ set(right))[:5]
        raise StructureError(f"{what} differ in structure: {diff}")
