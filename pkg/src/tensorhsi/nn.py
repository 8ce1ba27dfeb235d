"""Minimal reverse-mode differentiation and the layers the classifier needs.

A :class:`Var` wraps a float64 array. Operations build a DAG; calling
``loss.backward()`` resets the gradients of every node reachable from
``loss`` and then propagates in reverse topological order, summing
contributions where a node is used more than once.

Convolutions take batched inputs ``[N, C, *spatial]`` (an unbatched
``[C, *spatial]`` input is also accepted and returns an unbatched result).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .hyperparams import Hyperparams


class Var:
    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["Var"] = (),
                 backward: Callable[[np.ndarray], None] | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self, grad=None) -> None:
        order = _topological(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.value)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.value.shape).copy()
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _topological(root: Var) -> list[Var]:
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
    return order


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise and structural ops -------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b))

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value - b.value, (a, b))

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b))

    def backward(g):
        a.grad += _unbroadcast(g * b.value, a.shape)
        b.grad += _unbroadcast(g * a.value, b.shape)

    out._backward = backward
    return out


def scale(a: Var, c: float) -> Var:
    out = Var(a.value * c, (a,))

    def backward(g):
        a.grad += g * c

    out._backward = backward
    return out


def total(a: Var) -> Var:
    out = Var(np.sum(a.value), (a,))

    def backward(g):
        a.grad += g

    out._backward = backward
    return out


def sum_squares(a: Var) -> Var:
    """Squared Frobenius norm."""
    out = Var(np.sum(a.value * a.value), (a,))

    def backward(g):
        a.grad += 2.0 * g * a.value

    out._backward = backward
    return out


def reshape(a: Var, shape: Sequence[int]) -> Var:
    out = Var(a.value.reshape(shape), (a,))

    def backward(g):
        a.grad += g.reshape(a.shape)

    out._backward = backward
    return out


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Var(np.transpose(a.value, axes), (a,))

    def backward(g):
        a.grad += np.transpose(g, inv)

    out._backward = backward
    return out


def flatten(a: Var) -> Var:
    """``[N, ...] -> [N, prod(...)]``."""
    return reshape(a, (a.shape[0], -1))


def einsum(subscripts: str, *operands) -> Var:
    """Differentiable ``numpy.einsum`` with an explicit ``->`` output.

    Every operand label must be distinct within that operand.
    """
    ops = [as_var(o) for o in operands]
    ins, out_spec = subscripts.replace(" ", "").split("->")
    in_specs = ins.split(",")
    if len(in_specs) != len(ops):
        raise ValueError("subscript count does not match operand count")
    for spec in in_specs:
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated label inside operand {spec!r} is not supported")
    value = np.einsum(subscripts, *[o.value for o in ops], optimize="greedy")
    out = Var(value, ops)

    def backward(g):
        for i, (spec, o) in enumerate(zip(in_specs, ops)):
            others = [(in_specs[j], ops[j].value) for j in range(len(ops)) if j != i]
            avail = set(out_spec).union(*[set(s) for s, _ in others])
            target = "".join(c for c in spec if c in avail)
            expr = ",".join([out_spec] + [s for s, _ in others]) + "->" + target
            gi = np.einsum(expr, g, *[v for _, v in others], optimize="greedy")
            if target != spec:
                # labels summed only within this operand: gradient broadcasts along them
                shape = [o.shape[spec.index(c)] if c in target else 1 for c in spec]
                gi = np.broadcast_to(gi.reshape(shape), o.shape)
            o.grad += gi

    out._backward = backward
    return out


def concat_channels(a: Var, b: Var) -> Var:
    """Concatenate along axis 1 (channels of a batched map)."""
    if a.value.ndim != b.value.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = Var(np.concatenate([a.value, b.value], axis=1), (a, b))

    def backward(g):
        a.grad += g[:, :ca]
        b.grad += g[:, ca:]

    out._backward = backward
    return out


def relu(a: Var) -> Var:
    a = as_var(a)
    mask = a.value > 0
    out = Var(np.where(mask, a.value, 0.0), (a,))

    def backward(g):
        a.grad += g * mask

    out._backward = backward
    return out


def sigmoid(a: Var) -> Var:
    a = as_var(a)
    s = np.empty_like(a.value)
    pos = a.value >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    e = np.exp(a.value[~pos])
    s[~pos] = e / (1.0 + e)
    out = Var(s, (a,))

    def backward(g):
        a.grad += g * s * (1.0 - s)

    out._backward = backward
    return out


def affine(x: Var, W: Var, b: Var | None = None) -> Var:
    """``x @ W.T + b`` for ``x`` of shape ``[N, F]`` and ``W`` of shape ``[O, F]``."""
    x, W = as_var(x), as_var(W)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"affine shape mismatch: x {x.shape}, W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {W.shape[0]} outputs")
    parents = (x, W) if b is None else (x, W, b)
    value = x.value @ W.value.T
    if b is not None:
        value = value + b.value
    out = Var(value, parents)

    def backward(g):
        x.grad += g @ W.value
        W.grad += g.T @ x.value
        if b is not None:
            b.grad += g.sum(axis=0)

    out._backward = backward
    return out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Var, labels: Sequence[int]) -> Var:
    """Batch-mean softmax cross-entropy against class ids 1..M."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2:
        raise ValueError(f"logits must be [N, M], got {logits.shape}")
    n, m = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 1) or np.any(labels > m):
        raise ValueError(f"labels must lie in [1, {m}]")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = Var(np.mean(logsum - z[rows, labels - 1]), (logits,))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels - 1] -= 1.0
        logits.grad += g * p / n

    out._backward = backward
    return out


def global_avg_pool(x: Var) -> Var:
    """``[N, C, *spatial] -> [N, C]``."""
    axes = tuple(range(2, x.value.ndim))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = Var(x.value.mean(axis=axes), (x,))

    def backward(g):
        x.grad += np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), x.shape) / count

    out._backward = backward
    return out


def channel_scale(x: Var, s: Var) -> Var:
    """Multiply every channel map of ``x`` ``[N, C, ...]`` by the gate ``s`` ``[N, C]``."""
    if s.shape != x.shape[:2]:
        raise ValueError(f"gate shape {s.shape} does not match {x.shape[:2]}")
    return mul(x, reshape(s, s.shape + (1,) * (x.value.ndim - 2)))


# -- convolution ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry.

    The output extent along an axis of input length ``L`` is
    ``(L + pad_lo + pad_hi - k) // stride + 1`` where ``same`` padding uses
    ``pad_lo = (k - 1) // 2`` and ``pad_hi = k // 2`` and ``valid`` uses none.
    """

    kernel: tuple[int, ...]
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if not self.kernel or min(self.kernel) < 1:
            raise ValueError(f"kernel extents must be >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ValueError("channels and stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def pads(self) -> list[tuple[int, int]]:
        if self.padding == "valid":
            return [(0, 0)] * len(self.kernel)
        return [((k - 1) // 2, k // 2) for k in self.kernel]

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        if len(spatial) != len(self.kernel):
            raise ValueError(f"expected {len(self.kernel)} spatial axes, got {len(spatial)}")
        out = []
        for length, k, (lo, hi) in zip(spatial, self.kernel, self.pads()):
            span = length + lo + hi - k
            if span < 0:
                raise ValueError(f"kernel {self.kernel} larger than padded input {tuple(spatial)}")
            out.append(span // self.stride + 1)
        return tuple(out)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel


def _batched(x: Var, nd: int) -> tuple[Var, bool]:
    if x.value.ndim == nd + 1:
        return reshape(x, (1,) + x.shape), True
    if x.value.ndim != nd + 2:
        raise ValueError(f"expected a [N, C, {nd} spatial] input, got shape {x.shape}")
    return x, False


def _window(xp: np.ndarray, offset, out_shape, stride) -> tuple:
    idx = [slice(None), slice(None)]
    for o, n in zip(offset, out_shape):
        idx.append(slice(o, o + stride * (n - 1) + 1, stride))
    return tuple(idx)


def conv(x: Var, W: Var, b: Var | None, spec: ConvSpec) -> Var:
    """N-d cross-correlation ``sum_c sum_offset W[o, c, offset] x[c, pos + offset] + b[o]``."""
    nd = len(spec.kernel)
    x, squeeze = _batched(as_var(x), nd)
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if W.shape != spec.weight_shape:
        raise ValueError(f"weight shape {W.shape} does not match {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} does not match {spec.out_channels} outputs")
    out_sp = spec.output_shape(x.shape[2:])
    xp = np.pad(x.value, [(0, 0), (0, 0)] + spec.pads())
    n = x.shape[0]
    acc = np.zeros((n,) + out_sp + (spec.out_channels,))
    sp_axes = list(range(2, 2 + nd))
    for off in itertools.product(*[range(k) for k in spec.kernel]):
        xs = xp[_window(xp, off, out_sp, spec.stride)]
        w = W.value[(slice(None), slice(None)) + off]
        acc += np.tensordot(np.moveaxis(xs, 1, -1), w, axes=([-1], [1]))
    value = np.moveaxis(acc, -1, 1)
    if b is not None:
        value = value + b.value.reshape((1, -1) + (1,) * nd)
    parents = (x, W) if b is None else (x, W, b)
    out = Var(np.ascontiguousarray(value), parents)

    def backward(g):
        gm = np.moveaxis(g, 1, -1)
        dxp = np.zeros_like(xp)
        red = list(range(nd + 1))
        for off in itertools.product(*[range(k) for k in spec.kernel]):
            win = _window(xp, off, out_sp, spec.stride)
            xs = np.moveaxis(xp[win], 1, -1)
            w = W.value[(slice(None), slice(None)) + off]
            W.grad[(slice(None), slice(None)) + off] += np.tensordot(gm, xs, axes=(red, red))
            dxp[win] += np.moveaxis(np.tensordot(gm, w, axes=([-1], [0])), -1, 1)
        crop = [slice(None), slice(None)] + [
            slice(lo, lo + length) for (lo, _), length in zip(spec.pads(), x.shape[2:])
        ]
        x.grad += dxp[tuple(crop)]
        if b is not None:
            b.grad += g.sum(axis=tuple([0] + sp_axes))

    out._backward = backward
    return reshape(out, out.shape[1:]) if squeeze else out


def conv3d(x: Var, W: Var, b: Var | None, spec: ConvSpec) -> Var:
    if len(spec.kernel) != 3:
        raise ValueError("conv3d needs a 3-axis kernel")
    return conv(x, W, b, spec)


def conv2d(x: Var, W: Var, b: Var | None, spec: ConvSpec) -> Var:
    if len(spec.kernel) != 2:
        raise ValueError("conv2d needs a 2-axis kernel")
    return conv(x, W, b, spec)


def depthwise_conv2d(x: Var, W: Var, kernel: Sequence[int], padding: str = "same") -> Var:
    """One ``kernel`` filter per channel; ``W`` has shape ``[C, 1, kh, kw]``."""
    x, squeeze = _batched(as_var(x), 2)
    c = x.shape[1]
    spec = ConvSpec(tuple(kernel), c, c, padding=padding)
    if W.shape != (c, 1) + spec.kernel:
        raise ValueError(f"depthwise weight shape {W.shape} does not match {(c, 1) + spec.kernel}")
    out_sp = spec.output_shape(x.shape[2:])
    xp = np.pad(x.value, [(0, 0), (0, 0)] + spec.pads())
    value = np.zeros((x.shape[0], c) + out_sp)
    for off in itertools.product(*[range(k) for k in spec.kernel]):
        w = W.value[(slice(None), 0) + off].reshape(1, c, 1, 1)
        value += w * xp[_window(xp, off, out_sp, 1)]
    out = Var(value, (x, W))

    def backward(g):
        dxp = np.zeros_like(xp)
        for off in itertools.product(*[range(k) for k in spec.kernel]):
            win = _window(xp, off, out_sp, 1)
            W.grad[(slice(None), 0) + off] += np.sum(g * xp[win], axis=(0, 2, 3))
            dxp[win] += g * W.value[(slice(None), 0) + off].reshape(1, c, 1, 1)
        lo = [p[0] for p in spec.pads()]
        x.grad += dxp[:, :, lo[0]:lo[0] + x.shape[2], lo[1]:lo[1] + x.shape[3]]

    out._backward = backward
    return reshape(out, out.shape[1:]) if squeeze else out


# -- parameterised layers ----------------------------------------------------------


def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


class Layer:
    """Owns named parameter ``Var``s; ``params()`` lists them in a fixed order."""

    def params(self) -> dict[str, Var]:
        return {}

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params().values())


class Conv(Layer):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = True):
        self.spec = spec
        ksize = int(np.prod(spec.kernel))
        self.W = Var(glorot(rng, spec.weight_shape, spec.in_channels * ksize,
                            spec.out_channels * ksize), name="W")
        self.b = Var(np.zeros(spec.out_channels), name="b") if bias else None

    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def __call__(self, x: Var) -> Var:
        return conv(x, self.W, self.b, self.spec)


class DepthwiseSeparable(Layer):
    """Depthwise ``k x k`` convolution followed by a bias-free 1x1 pointwise map.

    Parameter count is ``C * k**2 + C * C_out``.
    """

    def __init__(self, channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, padding: str = "same"):
        self.kernel = (kernel, kernel)
        self.padding = padding
        self.depthwise = Var(glorot(rng, (channels, 1, kernel, kernel), kernel * kernel,
                                    kernel * kernel), name="depthwise")
        self.point_spec = ConvSpec((1, 1), channels, out_channels)
        self.pointwise = Var(glorot(rng, self.point_spec.weight_shape, channels, out_channels),
                             name="pointwise")

    def params(self):
        return {"depthwise": self.depthwise, "pointwise": self.pointwise}

    def __call__(self, x: Var) -> Var:
        return depthwise_separable(x, self.depthwise, self.pointwise, self.kernel, self.padding)


def depthwise_separable(x: Var, depthwise: Var, pointwise: Var, kernel: Sequence[int],
                        padding: str = "same") -> Var:
    h = depthwise_conv2d(x, depthwise, kernel, padding)
    spec = ConvSpec((1, 1), pointwise.shape[1], pointwise.shape[0])
    return conv2d(h, pointwise, None, spec)


def reduced_width(channels: int, reduction: int) -> int:
    """Bottleneck width ``ceil(C / reduction)``."""
    if reduction < 1:
        raise ValueError("reduction must be >= 1")
    return max(1, -(-channels // reduction))


class ChannelAttention(Layer):
    """Squeeze-and-excitation gate: pool, FC, ReLU, FC, sigmoid, rescale."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        hidden = reduced_width(channels, reduction)
        self.W1 = Var(glorot(rng, (hidden, channels), channels, hidden), name="W1")
        self.b1 = Var(np.zeros(hidden), name="b1")
        self.W2 = Var(glorot(rng, (channels, hidden), hidden, channels), name="W2")
        self.b2 = Var(np.zeros(channels), name="b2")

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def __call__(self, x: Var) -> Var:
        return channel_attention(x, self.W1, self.b1, self.W2, self.b2)


def channel_attention(x: Var, W1: Var, b1: Var, W2: Var, b2: Var) -> Var:
    """Gate ``x`` (``[N, C, H, W]`` or unbatched ``[C, H, W]``) channel-wise."""
    x = as_var(x)
    x, squeeze = _batched(x, 2 if x.value.ndim <= 4 else x.value.ndim - 2)
    s = sigmoid(affine(relu(affine(global_avg_pool(x), W1, b1)), W2, b2))
    out = channel_scale(x, s)
    return reshape(out, out.shape[1:]) if squeeze else out


class Affine(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None, zero: bool = False):
        w = np.zeros((n_out, n_in)) if zero else glorot(rng, (n_out, n_in), n_in, n_out)
        self.W = Var(w, name="W")
        self.b = Var(np.zeros(n_out), name="b")

    def params(self):
        return {"W": self.W, "b": self.b}

    def __call__(self, x: Var) -> Var:
        return affine(x, self.W, self.b)


# -- optimisation ---------------------------------------------------------------


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], iteration: int,
             hp: Hyperparams) -> dict[str, np.ndarray]:
    """``p - lr(iteration) * g`` for every named parameter."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    lr = hp.lr(iteration)
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {np.shape(p)}")
        out[name] = p - lr * g
    return out


def iter_params(layers: Iterable[tuple[str, Layer]]) -> dict[str, Var]:
    """Flatten ``(prefix, layer)`` pairs into ``{"prefix.name": Var}``."""
    out = {}
    for prefix, layer in layers:
        for name, v in layer.params().items():
            out[f"{prefix}.{name}"] = v
    return out
