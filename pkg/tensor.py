"""
Tensor Core
===========

Dense float64 tensors with a reverse-mode gradient tape, the operators the
model needs, an ordered parameter store and a finite-difference gradient checker.

Every operator is a pure function of its inputs. A result joins the tape only
when one of its inputs requires a gradient, so a frozen parameter snapshot
evaluates without recording anything.
"""

import logging
import os
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

DTYPE = np.float64
DEBUG_CHECKS = os.getenv("LATENTFORMER_DEBUG", "0") == "1"

# Activation patterns of relu/clip, recorded only while a gradient check runs.
_KINK_LOG: Optional[List[bytes]] = None


class Tensor:
    """A dense float64 array that may participate in the gradient tape."""

    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by {getattr(backward, '__qualname__', 'op')}")
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} is invalid for a tensor with {ndim} dimensions")
    return axis % ndim


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _node(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node(a.data / b.data, (a, b), backward)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(active).tobytes())
    return _node(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def clip(a: TensorLike, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(inside).tobytes())
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# Reductions and normalisation
# --------------------------------------------------------------------------

def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(x % a.ndim for x in axes))
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(out), (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[x] for x in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(x: TensorLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax along `axis`.

    Args:
        x: Logits.
        axis: Axis to normalise over.
        mask: Optional boolean array broadcastable to `x`; False entries get
            probability exactly zero and never influence the allowed entries.

    Returns:
        Tensor of probabilities with the shape of `x`.
    """
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data
    if mask is not None:
        allowed = np.broadcast_to(mask, x.shape)
        if not np.all(allowed.any(axis=axis)):
            raise ContractError("attention mask leaves a query row with no allowed key")
        z = np.where(allowed, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _node(y, (x,), backward)


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return _node(out, (x,), backward)


def logsumexp(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    weights = np.exp(x.data - m) / s

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)
    return _node(out, (x,), backward)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"layer_norm needs a non-empty last axis, got shape {x.shape}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {n}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _node(out, (x, gain, bias), backward)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    """Affine map over the last axis with weight `[in, out]`."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def embedding(table: TensorLike, indices) -> Tensor:
    """Row lookup `table[indices]` with scatter-add gradients."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range for table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)
    return _node(table.data[idx], (table,), backward)


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def reshape(x: TensorLike, shape) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {original} into {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(original),))


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: TensorLike, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def broadcast_to(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat of an empty sequence")
    axis = _normalize_axis(axis, parts[0].ndim)
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis):
            raise DimensionError(f"concat shape mismatch along axis {axis}: {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def getitem(x: TensorLike, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)
    return _node(np.array(x.data[index]), (x,), backward)


# --------------------------------------------------------------------------
# Convolution and patch extraction
# --------------------------------------------------------------------------

def _same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def conv2d(x: TensorLike, kernels: TensorLike, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of `x [C_in, H, W]` with `kernels [C_out, C_in, kH, kW]`.

    Args:
        x: Input feature map.
        kernels: Filter bank.
        stride: Step between windows, at least 1.
        padding: "same" keeps ceil(H / stride) outputs per axis; "valid" adds none.

    Returns:
        Tensor [C_out, H', W'].
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    _, h, w = x.shape
    kh, kw = kernels.shape[2:]
    if padding == "same":
        top, bottom, oh = _same_padding(h, kh, stride)
        left, right, ow = _same_padding(w, kw, stride)
    elif padding == "valid":
        top = bottom = left = right = 0
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    else:
        raise ParameterError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + top + bottom or kw > w + left + right:
        raise DimensionError(f"conv2d kernel {kernels.shape} larger than padded input {x.shape}")
    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))
    span_h, span_w = stride * (oh - 1) + 1, stride * (ow - 1) + 1

    out = np.zeros((kernels.shape[0], oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            window = padded[:, i:i + span_h:stride, j:j + span_w:stride]
            out += np.tensordot(kernels.data[:, :, i, j], window, axes=([1], [0]))

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_k = np.zeros_like(kernels.data)
        for i in range(kh):
            for j in range(kw):
                window = padded[:, i:i + span_h:stride, j:j + span_w:stride]
                grad_k[:, :, i, j] = np.tensordot(g, window, axes=([1, 2], [1, 2]))
                grad_padded[:, i:i + span_h:stride, j:j + span_w:stride] += np.tensordot(
                    kernels.data[:, :, i, j], g, axes=([0], [0]))
        return grad_padded[:, top:top + h, left:left + w], grad_k
    return _node(out, (x, kernels), backward)


def extract_patches(x: TensorLike, size: int, stride: int) -> Tensor:
    """Overlapping `size x size` windows of `x [C, H, W]`, flattened to `[P, C*size*size]`.

    Patches are ordered row-major over window positions.
    """
    x = as_tensor(x)
    if stride < 1:
        raise ParameterError(f"patch stride must be >= 1, got {stride}")
    c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError(f"patch size {size} exceeds feature map {x.shape}")
    nh, nw = (h - size) // stride + 1, (w - size) // stride + 1
    windows = sliding_window_view(x.data, (size, size), axis=(1, 2))[:, ::stride, ::stride][:, :nh, :nw]
    out = windows.transpose(1, 2, 0, 3, 4).reshape(nh * nw, c * size * size)

    def backward(g):
        grad = np.zeros_like(x.data)
        per_patch = g.reshape(nh, nw, c, size, size)
        for pi in range(nh):
            for pj in range(nw):
                grad[:, pi * stride:pi * stride + size, pj * stride:pj * stride + size] += per_patch[pi, pj]
        return (grad,)
    return _node(out, (x,), backward)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Leaf tensors that require gradients accumulate into `.grad`; repeated uses
    of a tensor and repeated calls add up.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the gradient tape")

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only randomness source in the package."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_table(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class ParamStore:
    """Insertion-ordered, uniquely named collection of learnable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n == prefix or n.startswith(prefix)] if prefix else list(self._params)

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(self._params[n].size for n in self.names(prefix)))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def frozen(self) -> "ParamStore":
        """Detached copy used as the frozen E-step snapshot."""
        snapshot = ParamStore()
        for name, tensor in self._params.items():
            snapshot.add(name, tensor.data.copy(), requires_grad=False)
        return snapshot

    def flat_values(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def layout(self) -> List[Dict]:
        """Name, shape and byte offset of every tensor inside a flat float64 blob."""
        entries, offset = [], 0
        for name, tensor in self._params.items():
            entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            offset += tensor.size * 8
        return entries

    def write_blob(self, path: str) -> None:
        self.flat_values().astype("<f8").tofile(path)

    def read_blob(self, path: str, layout: Sequence[Dict]) -> None:
        """Load values written by `write_blob`, verifying names and shapes first."""
        expected = self.layout()
        if len(layout) != len(expected):
            raise ContractError(f"checkpoint lists {len(layout)} tensors, model has {len(expected)}")
        for got, want in zip(layout, expected):
            if got["name"] != want["name"] or list(got["shape"]) != want["shape"] or got["offset"] != want["offset"]:
                raise ContractError(f"checkpoint entry {got.get('name')} {got.get('shape')} "
                                    f"does not match model entry {want['name']} {want['shape']}")
        blob = np.fromfile(path, dtype="<f8")
        if blob.size != sum(t.size for t in self._params.values()):
            raise ContractError(f"checkpoint blob holds {blob.size} values, model needs "
                                f"{sum(t.size for t in self._params.values())}")
        position = 0
        for tensor in self._params.values():
            tensor.data[...] = blob[position:position + tensor.size].reshape(tensor.shape)
            position += tensor.size


class ParamScope:
    """Prefix view into a ParamStore, e.g. `store.scope("encoder.te0")["attn.w_q"]`."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self._full(key)]

    def __contains__(self, key: str) -> bool:
        return self._full(key) in self.store

    def add(self, key: str, data: np.ndarray) -> Tensor:
        return self.store.add(self._full(key), data)

    def scope(self, sub: str) -> "ParamScope":
        return ParamScope(self.store, self._full(sub))

    def num_parameters(self) -> int:
        return self.store.num_parameters(self.prefix + ".")


# --------------------------------------------------------------------------
# Finite-difference gradient check
# --------------------------------------------------------------------------

@contextmanager
def kink_monitor():
    """Record relu/clip activation patterns evaluated inside the block."""
    global _KINK_LOG
    previous, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = previous


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    def passed(self, tolerance: float = 1e-5) -> bool:
        return self.max_rel_error < tolerance


def gradcheck(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-3) -> GradCheckResult:
    """Compare tape gradients with central finite differences.

    The output of `fn` is reduced to a scalar with a fixed random projection.
    Entries whose +h and -h evaluations fall on different sides of a relu or
    clamp kink are skipped.

    Args:
        fn: Closure recomputing the output from the current tensor values.
        tensors: Named leaf tensors to check; perturbed in place.
        h: Finite-difference step.
        max_entries: Sample at most this many entries per tensor.
        seed: Seed for the projection and the entry sampling.
        floor: Lower bound on the norm used to form relative errors.

    Returns:
        GradCheckResult with the worst relative error over all tensors.
    """
    rng = make_rng(seed)
    projection = rng.standard_normal(fn().shape)

    def scalar() -> Tensor:
        return tsum(mul(fn(), projection))

    for t in tensors.values():
        t.grad = None
    backward(scalar())
    result = GradCheckResult(max_rel_error=0.0)
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data, dtype=DTYPE, order="C")
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric, exact = [], []
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            with kink_monitor() as plus_pattern:
                f_plus = float(scalar().data)
            flat[i] = original - h
            with kink_monitor() as minus_pattern:
                f_minus = float(scalar().data)
            flat[i] = original
            if plus_pattern != minus_pattern:
                result.skipped += 1
                continue
            numeric.append((f_plus - f_minus) / (2.0 * h))
            exact.append(analytic.reshape(-1)[i])
            result.checked += 1
        if not numeric:
            continue
        numeric_arr, exact_arr = np.array(numeric), np.array(exact)
        scale = max(np.linalg.norm(numeric_arr), np.linalg.norm(exact_arr), floor)
        error = float(np.linalg.norm(numeric_arr - exact_arr) / scale)
        result.errors[name] = error
        result.max_rel_error = max(result.max_rel_error, error)
        t.grad = None
    if result.skipped:
        logger.debug(f"gradcheck skipped {result.skipped} entries straddling a kink")
    return result
