"""Dense tensors with reverse-mode differentiation on top of numpy.

Everything above this module is composed from the operations defined here:
broadcasting arithmetic, batched matmul, reshapes/slicing/concatenation,
reductions, the exact GELU, SiLU, last-axis softmax, LayerNorm, and a real
DFT written as dense matrix products (grid lengths are 32 in every model
config, so O(G^2) is fine and keeps results bit-reproducible).

Conventions:
  - GELU is the exact Gaussian-CDF form ``x * Phi(x)`` (no tanh approximation).
  - Every op checks its output and raises NonFiniteError naming the op
    instead of letting NaN/Inf propagate.
  - Tensors default to float32. ``precision(np.float64)`` switches the
    default for tensors created inside the block; gradient checks require it.
  - The default dtype and the grad switch live in context variables, so
    workers on separate threads can run on disjoint tensors independently.
"""

from __future__ import annotations

import contextlib
import contextvars
import functools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy import special

from mpdit.errors import ConfigError, DimensionError, NonFiniteError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_DEFAULT_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "mpdit_default_dtype", default=np.dtype(np.float32)
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "mpdit_grad_enabled", default=True
)

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# Precision and grad-mode switches
# ---------------------------------------------------------------------------


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Make ``dtype`` (float32 or float64) the default inside the block."""
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ConfigError("precision", f"unsupported dtype {dt}")
    token = _DEFAULT_DTYPE.set(dt)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

Operand = Union["Tensor", np.ndarray, int, float]
Backward = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]


class Tensor:
    """An n-dimensional float array that can record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    # numpy defers binary operators to Tensor (``np.float32(2) * t`` works).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, *, dtype=None) -> None:
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: Operand) -> Tensor:
        o = _as_tensor(other, self)
        a_shape, b_shape = self.shape, o.shape
        return _result(
            self.data + o.data,
            (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other: Operand) -> Tensor:
        o = _as_tensor(other, self)
        a_shape, b_shape = self.shape, o.shape
        return _result(
            self.data - o.data,
            (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: Operand) -> Tensor:
        return _as_tensor(other, self) - self

    def __mul__(self, other: Operand) -> Tensor:
        o = _as_tensor(other, self)
        a, b = self.data, o.data
        return _result(
            a * b,
            (self, o),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> Tensor:
        o = _as_tensor(other, self)
        a, b = self.data, o.data
        return _result(
            a / b,
            (self, o),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other: Operand) -> Tensor:
        return _as_tensor(other, self) / self

    def __neg__(self) -> Tensor:
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise DimensionError("pow: only scalar exponents are supported")
        p = float(exponent)
        x = self.data
        return _result(x**p, (self,), lambda g: (g * p * x ** (p - 1.0),), "pow")

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, _as_tensor(other, self))

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(_as_tensor(other, self), self)

    # -- shape ops -----------------------------------------------------------

    def __getitem__(self, index) -> Tensor:
        src_shape = self.shape
        advanced = _is_advanced_index(index)

        def backward(g: np.ndarray):
            full = np.zeros(src_shape, dtype=g.dtype)
            if advanced:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return _result(self.data[index], (self,), backward, "getitem")

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view {src_shape} as {shape}") from exc
        return _result(data, (self,), lambda g: (g.reshape(src_shape),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def astype(self, dtype) -> Tensor:
        dt = np.dtype(dtype)
        if dt == self.dtype:
            return self
        src = self.dtype
        return _result(self.data.astype(dt), (self,), lambda g: (g.astype(src),), "astype")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        src_shape = self.shape

        def backward(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise DimensionError(f"mean over an empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ---------------------------------------------------------

    def sin(self) -> Tensor:
        x = self.data
        return _result(np.sin(x), (self,), lambda g: (g * np.cos(x),), "sin")

    def cos(self) -> Tensor:
        x = self.data
        return _result(np.cos(x), (self,), lambda g: (-g * np.sin(x),), "cos")

    # -- differentiation -----------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if not np.isfinite(g).all():
                    raise NonFiniteError("backward")
                if node.grad is None:
                    node.grad = Tensor(np.array(g, dtype=node.dtype))
                else:
                    node.grad = Tensor(node.grad.data + g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    record = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out._parents = parents if record else ()
    out._backward = backward if record else None
    return out


def _as_tensor(value: Operand, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_advanced_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# Linear algebra and structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction (..., M, K) @ (..., K, P) with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from exc
    x, y = a.data, b.data

    def backward(g: np.ndarray):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(x, y), (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    dtype = tensors[0].dtype
    parts = [t if t.dtype == dtype else t.astype(dtype) for t in tensors]
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in parts]
        raise DimensionError(f"concat along axis {axis} failed for shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(parts), backward, "concat")


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: ``x * Phi(x)`` with Phi the standard normal CDF."""
    v = x.data
    cdf = 0.5 * (1.0 + special.erf(v * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return _result(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),), "gelu")


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = special.expit(v)
    return _result(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),), "silu")


def softmax_last_dim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over an empty last axis, shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(
    x: Tensor,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-6,
) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then apply the affine."""
    if eps <= 0:
        raise ConfigError("layer_norm.eps", f"must be > 0, got {eps}")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm over an empty last axis, shape {x.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd

    def backward(g: np.ndarray):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    out = _result(xhat.astype(v.dtype, copy=False), (x,), backward, "layer_norm")
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# Real DFT (dense)
# ---------------------------------------------------------------------------


@dataclass
class ComplexSpectrum:
    """Half spectrum of a real signal: bins 0..G/2 along the last axis."""

    real: Tensor
    imag: Tensor
    original_length: int

    @property
    def bins(self) -> int:
        return self.real.shape[-1]


@functools.lru_cache(maxsize=32)
def _forward_dft_matrices(length: int) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(length)[:, None]
    k = np.arange(length // 2 + 1)[None, :]
    angle = 2.0 * np.pi * ((j * k) % length) / length
    cos_m, sin_m = np.cos(angle), -np.sin(angle)
    # DC and Nyquist bins of a real signal are purely real.
    sin_m[:, 0] = 0.0
    if length % 2 == 0:
        sin_m[:, -1] = 0.0
    cos_m.flags.writeable = False
    sin_m.flags.writeable = False
    return cos_m, sin_m


@functools.lru_cache(maxsize=32)
def _inverse_dft_matrices(length: int) -> tuple[np.ndarray, np.ndarray]:
    bins = length // 2 + 1
    k = np.arange(bins)[:, None]
    j = np.arange(length)[None, :]
    weight = np.full((bins, 1), 2.0)
    weight[0] = 1.0
    if length % 2 == 0:
        weight[-1] = 1.0
    angle = 2.0 * np.pi * ((k * j) % length) / length
    cos_m = weight * np.cos(angle) / length
    sin_m = -weight * np.sin(angle) / length
    sin_m[0] = 0.0
    if length % 2 == 0:
        sin_m[-1] = 0.0
    cos_m.flags.writeable = False
    sin_m.flags.writeable = False
    return cos_m, sin_m


def dft_real(x: Tensor) -> ComplexSpectrum:
    """Forward real DFT along the last axis, computed in float64.

    Bin g is ``sum_j x[j] * exp(-2*pi*i*g*j/G)`` for g in [0, G/2].
    """
    if x.ndim == 0 or x.shape[-1] < 2:
        raise DimensionError(f"dft_real needs a last axis of length >= 2, got {x.shape}")
    length = x.shape[-1]
    squeeze = x.ndim == 1
    xp = x.astype(np.float64)
    if squeeze:
        xp = xp.reshape(1, length)
    cos_m, sin_m = _forward_dft_matrices(length)
    real = matmul(xp, Tensor(cos_m))
    imag = matmul(xp, Tensor(sin_m))
    if squeeze:
        real, imag = real.reshape(-1), imag.reshape(-1)
    return ComplexSpectrum(real, imag, length)


def idft_real(spectrum: ComplexSpectrum, n: int) -> Tensor:
    """Inverse of :func:`dft_real`; the imaginary parts of bin 0 and bin G/2 are ignored."""
    if n != spectrum.original_length:
        raise DimensionError(
            f"idft_real length {n} does not match spectrum length {spectrum.original_length}"
        )
    if spectrum.bins != n // 2 + 1 or spectrum.imag.shape != spectrum.real.shape:
        raise DimensionError(
            f"spectrum of shape {spectrum.real.shape}/{spectrum.imag.shape} is not a length-{n} half spectrum"
        )
    real, imag = spectrum.real, spectrum.imag
    squeeze = real.ndim == 1
    if squeeze:
        real, imag = real.reshape(1, -1), imag.reshape(1, -1)
    cos_m, sin_m = _inverse_dft_matrices(n)
    dtype = real.dtype
    out = matmul(real, Tensor(cos_m.astype(dtype))) + matmul(imag, Tensor(sin_m.astype(dtype)))
    return out.reshape(-1) if squeeze else out


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    *,
    max_coords: int | None = None,
    atol: float = 0.0,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f(x)`` against central differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``max_coords`` caps the number of coordinates sampled per input tensor.
    Coordinates whose analytic and numeric values differ by at most ``atol``
    count as exact; whole-network checks set it just above float64
    roundoff so gradients that vanish analytically (a key bias under
    softmax shift invariance) do not read as relative error 1.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        if t.dtype != np.float64:
            raise ConfigError("grad_check", "inputs must be float64; build them under precision(np.float64)")
        if not t.data.flags.writeable or not t.data.flags.c_contiguous:
            t.data = np.array(t.data, order="C")
        t.requires_grad = True
        t.grad = None

    out = f(x)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = [
        (t.grad.data if t.grad is not None else np.zeros_like(t.data)).reshape(-1).copy()
        for t in inputs
    ]

    chooser = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if max_coords is None or flat.size <= max_coords:
                coords = range(flat.size)
            else:
                coords = chooser.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = _finite_scalar(f(x))
                flat[i] = orig - h
                f_minus = _finite_scalar(f(x))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = float(grad[i])
                diff = abs(ana - numeric)
                if diff <= atol:
                    continue
                err = diff / max(1e-8, abs(ana) + abs(numeric))
                worst = max(worst, err)
    return worst


def _finite_scalar(value: Tensor) -> float:
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("grad_check")
    return v


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_U64 = 2**64


@dataclass
class Rng:
    """Counter-based random stream.

    Draw number k comes from ``Generator(PCG64(SeedSequence([seed, k])))``;
    normals use numpy's standard-normal (ziggurat) transform, drawn in
    float64 and rounded to the requested dtype. State is ``(seed, counter)``.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed)
        self.counter = int(self.counter)
        if not 0 <= self.seed < _U64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if self.counter < 0:
            raise ConfigError("rng.counter", f"must be >= 0, got {self.counter}")

    def _next(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += 1
        return gen

    def normal(self, shape, dtype=None) -> np.ndarray:
        draws = self._next().standard_normal(shape, dtype=np.float64)
        return draws.astype(dtype or get_default_dtype())

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=None) -> np.ndarray:
        draws = self._next().uniform(low, high, size=shape)
        return draws.astype(dtype or get_default_dtype())

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._next().integers(low, high, size=size, dtype=np.int64)

    def fork(self, *keys: int) -> Rng:
        """Independent child stream addressed by ``keys``; does not advance this stream."""
        child = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(child.generate_state(1, np.uint64)[0]))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter
