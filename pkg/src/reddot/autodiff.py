"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the RED-DOT network needs are provided. Graph nodes are
built only when some input requires a gradient, so inference runs at plain
numpy speed.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IoError, NumericalError, ShapeError, StateError

_DEBUG = False


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Raise :class:`NumericalError` as soon as any op produces a non-finite value."""
    global _DEBUG
    previous, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced in forward pass")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


# --------------------------------------------------------------------------
# elementwise and structural ops


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _scalar_like(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_like(a, b)
    b = _scalar_like(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _scalar_like(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    basic = all(
        isinstance(i, (slice, int, type(None), type(Ellipsis)))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# network primitives


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = xd.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance), then scale and shift."""
    x = as_tensor(x)
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/shift must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + shift.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gain.data
        gx = None
        if x.requires_grad:
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gshift = g.sum(axis=reduce_axes) if shift.requires_grad else None
        return gx, ggain, gshift

    return _make(out, (x, gain, shift), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _make(out, (x,), backward)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    keep = rng.random(shape, dtype=np.float32) >= p
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout. Pass ``mask`` to reuse a frozen mask."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or (p == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise StateError("dropout in training mode needs an rng or a mask")
        mask = dropout_mask(x.shape, p, rng, x.dtype.type)
    return mul(x, Tensor(mask.astype(x.dtype, copy=False)))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the overflow-free fused form."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    if t.size == 0:
        raise ShapeError("bce on an empty batch")
    z = logits.data
    n = z.size
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(loss.sum() / n, dtype=logits.dtype)
    return _make(value, (logits,), lambda g: (g * (stable_sigmoid(z) - t) / n,))


def multi_head_self_attention(
    x: Tensor,
    heads: int,
    params: Mapping[str, Tensor],
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Bidirectional scaled dot-product self-attention over ``x`` of shape ``(..., L, dim)``.

    ``params`` holds ``w_q, w_k, w_v, w_o`` as ``(dim, dim)`` and matching biases
    ``b_q, b_k, b_v, b_o``.
    """
    x = as_tensor(x)
    dim = x.shape[-1]
    if heads < 1 or dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    batch, length = x.shape[0], x.shape[1]
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    q = split(linear(x, params["w_q"], params["b_q"]))
    k = split(linear(x, params["w_k"], params["b_k"]))
    v = split(linear(x, params["w_v"], params["b_v"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    attended = matmul(dropout(weights, dropout_p, training, rng), v)
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch, length, dim))
    out = linear(merged, params["w_o"], params["b_o"])
    if squeeze:
        out = reshape(out, (length, dim))
    if return_weights:
        w = weights.data[0] if squeeze else weights.data
        return out, w
    return out


# --------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class ParameterSet:
    """Named leaf tensors plus Adam moment estimates."""

    params: dict[str, Tensor] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(sorted(self.params))

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"parameter {name!r} registered twice")
        tensor = parameter(value)
        self.params[name] = tensor
        return tensor

    def items(self):
        return sorted(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise StateError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            target = self.params[name]
            if value.shape != target.shape:
                raise ShapeError(f"{name}: stored {value.shape}, model expects {target.shape}")
            target.data = np.array(value, dtype=target.dtype)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for moments in (self.first_moment, self.second_moment):
            for name in moments:
                moments[name] = moments[name].astype(dtype)

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def adam_step(params: ParameterSet, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, no weight decay."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters: {', '.join(missing)}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = params.first_moment.get(name)
        v = params.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params.first_moment[name] = m
        params.second_moment[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float]
    checked_values: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    x: np.ndarray | Sequence[np.ndarray] | Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences in float64.

    ``x`` is either arrays (passed to ``f`` as fresh leaf tensors) or a mapping
    of existing leaf tensors that ``f`` closes over (e.g. model parameters).
    ``max_samples`` limits how many coordinates per input are perturbed.
    """
    if isinstance(x, Mapping):
        leaves = dict(x)
        for t in leaves.values():
            if t.data.dtype != np.float64:
                raise ConfigError("grad_check needs float64 tensors")
            t.requires_grad = True
        call = lambda: f()  # noqa: E731
    else:
        arrays = [x] if isinstance(x, np.ndarray) else list(x)
        leaves = {str(i): Tensor(np.array(a, dtype=np.float64), requires_grad=True) for i, a in enumerate(arrays)}
        ordered = list(leaves.values())
        call = lambda: f(*ordered)  # noqa: E731

    for t in leaves.values():
        t.grad = None
    out = call()
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    rng = np.random.default_rng(seed)
    per_input, checked = {}, 0
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_samples is not None and flat.size > max_samples:
            coords = np.sort(rng.choice(flat.size, size=max_samples, replace=False))
        numeric = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            plus = float(call().data)
            flat[c] = orig - h
            minus = float(call().data)
            flat[c] = orig
            numeric[i] = (plus - minus) / (2 * h)
        err = relative_error(analytic.reshape(-1)[coords], numeric, floor)
        per_input[name] = float(err.max()) if err.size else 0.0
        checked += len(coords)
    worst = max(per_input.values()) if per_input else 0.0
    return GradCheckReport(max_rel_error=worst, per_input=per_input, checked_values=checked, tolerance=tolerance)


# --------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = b"REDC"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def save_checkpoint(params: ParameterSet, path, config: Mapping | None = None) -> None:
    """Versioned header + JSON block, then float32 values, moments included, in name order."""
    names = [name for name, _ in params.items()]
    has_moments = all(n in params.first_moment for n in names) and bool(names)
    meta = {
        "config": dict(config or {}),
        "step": params.step,
        "has_moments": has_moments,
        "params": [[n, list(params[n].shape)] for n in names],
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, len(header)), header]
    for n in names:
        chunks.append(params[n].data.astype("<f4").tobytes())
    if has_moments:
        for store in (params.first_moment, params.second_moment):
            for n in names:
                chunks.append(store[n].astype("<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray], int]:
    """Return ``(config, values, first_moment, second_moment, step)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(data)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise FormatError(f"not a version-{_CKPT_VERSION} checkpoint")
    offset = _CKPT_HEADER.size
    meta = json.loads(data[offset:offset + hlen].decode("utf-8"))
    offset += hlen

    def read_block():
        nonlocal offset
        out = {}
        for name, shape in meta["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
            offset += 4 * count
            out[name] = arr
        return out

    try:
        values = read_block()
        first = read_block() if meta["has_moments"] else {}
        second = read_block() if meta["has_moments"] else {}
    except ValueError as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return meta["config"], values, first, second, int(meta["step"])


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
