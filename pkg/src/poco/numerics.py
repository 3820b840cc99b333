"""Small differentiable kernel: MLPs, reverse-mode gradients, Adam, Polyak averaging.

Everything here works on plain numpy arrays. A :class:`ParamSet` is an
immutable, ordered mapping from tensor name to array. Losses are written as
functions of a mapping ``name -> Var`` and differentiated with
:func:`value_and_grad`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NumericalOverflowError(FloatingPointError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Parameter containers


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable ordered collection of named parameter arrays."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        frozen = {}
        for name, arr in tensors.items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        self._tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParamSet({shapes})"

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._tensors.items()})

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        check_same_structure(self, other)
        return ParamSet({k: fn(v, other[k]) for k, v in self._tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        out, i = {}, 0
        for k, v in self._tensors.items():
            out[k] = np.asarray(flat[i:i + v.size], dtype=v.dtype).reshape(v.shape)
            i += v.size
        if i != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {i}")
        return ParamSet(out)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._tensors.values())

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if list(self) != list(other):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )


def check_same_structure(a: ParamSet, b: ParamSet) -> None:
    if list(a) != list(b):
        raise ShapeError(f"parameter names differ: {list(a)} vs {list(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"{k}: shape {a[k].shape} vs {b[k].shape}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "silu"
    use_layer_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be nonempty")
        if min(self.input_dim, self.output_dim, *self.hidden_dims) <= 0:
            raise ValueError("all layer widths must be positive")
        if self.hidden_activation != "silu":
            raise ValueError(f"unsupported activation {self.hidden_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ParamSet:
    """Kaiming-uniform fan-in weights, zero biases, unit LayerNorm gains."""
    tensors = {}
    last = spec.n_layers - 1
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        gain = 1.0 if i == last else math.sqrt(2.0)
        bound = gain * math.sqrt(3.0 / fan_in)
        tensors[f"l{i}.w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        tensors[f"l{i}.b"] = np.zeros(fan_out, dtype=dtype)
        if spec.use_layer_norm and i != last:
            tensors[f"l{i}.ln_g"] = np.ones(fan_out, dtype=dtype)
            tensors[f"l{i}.ln_b"] = np.zeros(fan_out, dtype=dtype)
    return ParamSet(tensors)


def check_params(spec: MlpSpec, params: Mapping) -> None:
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w = params[f"l{i}.w"]
        w = w.value if isinstance(w, Var) else w
        if w.shape != (fan_out, fan_in):
            raise ShapeError(f"layer {i}: weight shape {w.shape}, expected {(fan_out, fan_in)}")


# --------------------------------------------------------------------------
# Plain forward pass


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly and is much cheaper than exp-based forms
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize the last axis to zero mean and unit variance (no gain/offset)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + eps))


def mlp_forward(spec: MlpSpec, params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    x = np.asarray(x)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {spec.input_dim}")
    h = x.astype(params["l0.w"].dtype, copy=False)
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ params[f"l{i}.w"].T + params[f"l{i}.b"]
        if i != last:
            h = silu(h)
            if spec.use_layer_norm:
                h = layer_norm(h) * params[f"l{i}.ln_g"] + params[f"l{i}.ln_b"]
    return h


# --------------------------------------------------------------------------
# Reverse-mode differentiation


class Var:
    """A node on the gradient tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        value = np.asarray(value)
        if not np.isfinite(value).all():
            raise NumericalOverflowError("non-finite value produced during loss evaluation")
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_var(other)))

    def __rsub__(self, other):
        return add(_as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.value + b.value, (a, b), backward)


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Var:
    """2-D matrix product."""
    a, b = _as_var(a), _as_var(b)

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Var(a.value @ b.value, (a, b), backward)


def index(a: Var, idx) -> Var:
    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), backward)


def affine(x, w: Var, b: Var) -> Var:
    """Batched ``x @ w.T + b``; x may be a constant array."""
    x = _as_var(x)

    def backward(g):
        return g @ w.value, g.T @ x.value, g.sum(axis=0)

    return Var(x.value @ w.value.T + b.value, (x, w, b), backward)


def silu_op(x: Var) -> Var:
    s = _sigmoid(x.value)

    def backward(g):
        return (g * (s * (1.0 + x.value * (1.0 - s))),)

    return Var(x.value * s, (x,), backward)


def layer_norm_op(x: Var, eps: float = LN_EPS) -> Var:
    n = x.shape[-1]
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - y * gy),)

    return Var(y, (x,), backward)


def square(x: Var) -> Var:
    return Var(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def mean(x: Var, axis=None) -> Var:
    """Mean with 64-bit accumulation."""
    n = x.value.size if axis is None else x.shape[axis]
    out = x.value.mean(axis=axis, dtype=np.float64)

    def backward(g):
        g = np.asarray(g) / n
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.value.dtype),)

    return Var(out, (x,), backward)


def total(x: Var, axis=None) -> Var:
    out = x.value.sum(axis=axis, dtype=np.float64)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.value.dtype),)

    return Var(out, (x,), backward)


def clip_max(x: Var, ceiling: float) -> Var:
    """``min(x, ceiling)``; the subgradient at ``x == ceiling`` is 0."""
    below = x.value < ceiling

    def backward(g):
        return (np.where(below, g, 0.0).astype(x.value.dtype),)

    return Var(np.where(below, x.value, ceiling).astype(x.value.dtype), (x,), backward)


def mlp_apply(spec: MlpSpec, pvars: Mapping[str, Var], x) -> Var:
    """Tape version of :func:`mlp_forward`."""
    x = np.asarray(x.value if isinstance(x, Var) else x)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {spec.input_dim}")
    h = _as_var(np.atleast_2d(x).astype(pvars["l0.w"].value.dtype, copy=False))
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = affine(h, pvars[f"l{i}.w"], pvars[f"l{i}.b"])
        if i != last:
            h = silu_op(h)
            if spec.use_layer_norm:
                h = layer_norm_op(h) * pvars[f"l{i}.ln_g"] + pvars[f"l{i}.ln_b"]
    return h


def _backprop(root: Var) -> None:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


def value_and_grad(loss_fn: Callable[[dict[str, Var]], Var], params: ParamSet, *args, **kwargs):
    """Evaluate ``loss_fn(vars, *args)`` and its exact gradient w.r.t. ``params``.

    Returns ``(loss_value, grads, aux)`` where ``aux`` is whatever extra value the
    loss function returned alongside the loss (``None`` if it returned a bare Var).
    """
    pvars = {k: Var(v) for k, v in params.items()}
    out = loss_fn(pvars, *args, **kwargs)
    loss, aux = (out if isinstance(out, tuple) else (out, None))
    if loss.value.size != 1:
        raise ShapeError("loss must be scalar")
    _backprop(loss)
    grads = {}
    for k, v in pvars.items():
        g = np.zeros_like(v.value) if v.grad is None else v.grad.astype(v.value.dtype)
        if not np.isfinite(g).all():
            raise NumericalOverflowError(f"non-finite gradient for {k}")
        grads[k] = g
    return float(loss.value), ParamSet(grads), aux


def gradient(loss_fn, params: ParamSet, *args, **kwargs) -> ParamSet:
    return value_and_grad(loss_fn, params, *args, **kwargs)[1]


# --------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet, **kwargs) -> "AdamState":
        zeros = params.zeros_like()
        return cls(zeros, zeros, 0, **kwargs)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    check_same_structure(params, grads)
    if not grads.is_finite():
        raise NonFiniteGradientError("gradient has non-finite entries; update rejected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.zip_map(grads, lambda m, g: b1 * m + (1 - b1) * g)
    v = state.v.zip_map(grads, lambda v, g: b2 * v + (1 - b2) * (g * g))
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = {}
    for k, p in params.items():
        upd = lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
        new[k] = (p - upd).astype(p.dtype)
    return ParamSet(new), AdamState(m, v, t, b1, b2, state.eps)


def polyak_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 1:
        return target.zip_map(online, lambda t, o: o.copy())
    # t + tau * (o - t) leaves t bit-identical when o == t
    return target.zip_map(online, lambda t, o: (t + tau * (o - t)).astype(t.dtype))


# --------------------------------------------------------------------------
# Checkpoints

MAGIC = b"POCO0001"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write tensors as little-endian float32 behind a text header."""
    lines = [f"meta {k}={v}" for k, v in (meta or {}).items()]
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor {name} {shape}")
    header = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = data[16:16 + hlen].decode("utf-8")
    offset = 16 + hlen
    tensors, meta = {}, {}
    for line in header.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, val = rest.partition("=")
            meta[key] = val
        elif kind == "tensor":
            name, shape_s = rest.rsplit(" ", 1) if " " in rest else (rest, "")
            shape = tuple(int(d) for d in shape_s.split(",") if d)
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            offset += 4 * n
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(tensors, meta)


def prefixed(params: ParamSet, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unprefixed(tensors: Mapping[str, np.ndarray], prefix: str) -> ParamSet:
    p = prefix + "/"
    return ParamSet({k[len(p):]: v for k, v in tensors.items() if k.startswith(p)})
