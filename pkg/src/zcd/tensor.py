"""Dense NCHW kernels with analytic backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape ``(B, C, H, W)``; float64
is used on every verification path. Each kernel has a pure forward function
and a pure backward function. :class:`Node` subclasses bind one kernel call to
its recorded inputs so a composed graph can be walked in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is requested for a node that was never forwarded."""


def as_tensor(x, name: str = "input") -> np.ndarray:
    arr = x if isinstance(x, np.ndarray) and x.dtype.kind == "f" else np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-axis (B, C, H, W), got shape {arr.shape}")
    return arr


def _float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(DTYPE)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weight: np.ndarray  # (outC, inC, kH, kW)
    bias: np.ndarray  # (outC,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-axis, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match kernel {self.weight.shape}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class LinearParams:
    weight: np.ndarray  # (outDim, inDim)
    bias: np.ndarray  # (outDim,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch"
            )

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class ConvSpec:
    """Shape-only description of a conv layer; counting needs no arrays."""

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    @property
    def param_count(self) -> int:
        k = self.kernel_size
        return k * k * self.in_channels * self.out_channels + self.out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = conv_output_size(h, self.kernel_size, self.stride, self.padding)
        ow = conv_output_size(w, self.kernel_size, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv on {h}x{w} input gives empty output {oh}x{ow}")
        return oh, ow

    def macs(self, batch: int, h: int, w: int) -> int:
        oh, ow = self.output_hw(h, w)
        k = self.kernel_size
        return k * k * self.in_channels * self.out_channels * oh * ow * batch

    def init(self, gen: np.random.Generator, rng: "RngSpec") -> ConvParams:
        k = self.kernel_size
        weight = rng.sample(gen, (self.out_channels, self.in_channels, k, k))
        return ConvParams(weight, np.zeros(self.out_channels), self.stride, self.padding)


@dataclass(frozen=True)
class LinearSpec:
    in_dim: int
    out_dim: int

    @property
    def param_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def macs(self, batch: int) -> int:
        return self.in_dim * self.out_dim * batch

    def init(self, gen: np.random.Generator, rng: "RngSpec") -> LinearParams:
        return LinearParams(rng.sample(gen, (self.out_dim, self.in_dim)), np.zeros(self.out_dim))


@dataclass(frozen=True)
class RngSpec:
    """Seed plus distribution for deterministic parameter draws.

    ``distribution`` is ``"gaussian"`` (``a`` = mean, ``b`` = std) or
    ``"uniform"`` (``a`` = low, ``b`` = high).
    """

    seed: int = 42
    distribution: str = "gaussian"
    a: float = 0.0
    b: float = 0.01

    def __post_init__(self):
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def generator(self, *stream: int) -> np.random.Generator:
        """A fresh generator; ``stream`` keys give independent sub-streams."""
        return np.random.default_rng([self.seed, *stream])

    def sample(self, gen: np.random.Generator, shape) -> np.ndarray:
        if self.distribution == "gaussian":
            return gen.normal(self.a, self.b, size=shape)
        return gen.uniform(self.a, self.b, size=shape)


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, H', W', kh, kw) view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    x = as_tensor(x)
    w = params.weight
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {x.shape[1]} channels, "
            f"kernel shape {w.shape} expects {w.shape[1]}"
        )
    _, _, kh, kw = w.shape
    s, p = params.stride, params.padding
    oh = conv_output_size(x.shape[2], kh, s, p)
    ow = conv_output_size(x.shape[3], kw, s, p)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} with kernel {w.shape} gives empty output")
    b, c = x.shape[:2]
    # im2col as (B, C*kh*kw, H'*W'); one batched GEMM is faster than tensordot over a view
    cols = _windows(_pad(x, p), kh, kw, s)[:, :, :oh, :ow].transpose(0, 1, 4, 5, 2, 3)
    cols = np.ascontiguousarray(cols).reshape(b, c * kh * kw, oh * ow)
    out = np.matmul(w.reshape(w.shape[0], -1), cols).reshape(b, w.shape[0], oh, ow)
    out += params.bias[None, :, None, None]
    return out


def conv2d_backward(dy: np.ndarray, x: np.ndarray, params: ConvParams):
    """Returns ``(dx, dweight, dbias)``."""
    w = params.weight
    _, _, kh, kw = w.shape
    s, p = params.stride, params.padding
    oh, ow = dy.shape[2], dy.shape[3]
    xp = _pad(x, p)
    cols = _windows(xp, kh, kw, s)[:, :, :oh, :ow]
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # (B, H', W', C, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dxp
    return np.ascontiguousarray(dx), dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add: shapes {a.shape} and {b.shape} differ")
    return a + b


def _resize_axis(size_in: int, size_out: int):
    """Source taps for one axis under half-pixel centers with edge clamping."""
    d = np.arange(size_out, dtype=DTYPE)
    src = (d + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size_in - 1)
    t = src - lo
    return lo, hi, t


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # a + t*(b - a) is exact when a == b; clamp stops 1-ulp overshoot
    out = a + t * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: requested size {out_h}x{out_w} is empty")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, ty = _resize_axis(h, out_h)
    x0, x1, tx = _resize_axis(w, out_w)
    ty, tx = ty.astype(x.dtype), tx.astype(x.dtype)
    rows = _lerp(x[:, :, y0, :], x[:, :, y1, :], ty[None, None, :, None])
    return _lerp(rows[:, :, :, x0], rows[:, :, :, x1], tx[None, None, None, :])


def bilinear_resize_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    b, c, h, w = in_shape
    out_h, out_w = dy.shape[2], dy.shape[3]
    if (h, w) == (out_h, out_w):
        return dy.copy()
    y0, y1, ty = _resize_axis(h, out_h)
    x0, x1, tx = _resize_axis(w, out_w)
    drows = np.zeros((b, c, out_h, w), dtype=dy.dtype)
    np.add.at(drows, (slice(None), slice(None), slice(None), x0), dy * (1.0 - tx))
    np.add.at(drows, (slice(None), slice(None), slice(None), x1), dy * tx)
    dx = np.zeros((b, c, h, w), dtype=dy.dtype)
    np.add.at(dx, (slice(None), slice(None), y0), drows * (1.0 - ty)[:, None])
    np.add.at(dx, (slice(None), slice(None), y1), drows * ty[:, None])
    return dx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C)."""
    x = as_tensor(x)
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent in {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    h, w = in_shape[2], in_shape[3]
    return np.broadcast_to(dy[:, :, None, None] / (h * w), in_shape).copy()


def linear(x: np.ndarray, params: LinearParams) -> np.ndarray:
    """Affine map on the last axis; ``x`` is ``(inDim,)`` or ``(B, inDim)``."""
    x = _float(x)
    if x.shape[-1] != params.weight.shape[1]:
        raise ShapeError(
            f"linear: input length {x.shape[-1]} != weight in-dim {params.weight.shape[1]}"
        )
    return x @ params.weight.T + params.bias


def linear_backward(dy: np.ndarray, x: np.ndarray, params: LinearParams):
    """Returns ``(dx, dweight, dbias)``."""
    dx = dy @ params.weight
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def softmax_branches(logits) -> np.ndarray:
    """Softmax across the leading (branch) axis, independently per channel."""
    z = _float(logits)
    if z.shape[0] < 2:
        raise ShapeError(f"softmax_branches needs at least 2 branches, got {z.shape[0]}")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_branches_backward(dy: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return weights * (dy - (dy * weights).sum(axis=0, keepdims=True))


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float = 1e-5):
    """Group normalization with a per-channel affine. Returns ``(y, xhat, inv_std)``."""
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, inv_std


def group_norm_backward(dy, xhat, inv_std, gamma, groups: int):
    """Returns ``(dx, dgamma, dbeta)``."""
    b, c, h, w = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = (dy * gamma[None, :, None, None]).reshape(b, groups, -1)
    xh = xhat.reshape(b, groups, -1)
    m = dxhat.shape[2]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                        - xh * (dxhat * xh).sum(axis=2, keepdims=True))
    return dx.reshape(dy.shape), dgamma, dbeta


# ---------------------------------------------------------------------------
# Recorded nodes
# ---------------------------------------------------------------------------


class Node:
    """One recorded kernel application.

    ``forward`` stores what the backward pass needs; ``backward`` returns
    ``(input_grads, param_grads)`` where ``input_grads`` is a tuple aligned
    with the forward arguments and ``param_grads`` maps names to arrays.
    """

    op = "node"

    def __init__(self):
        self._saved = None

    def forward(self, *args):
        out, self._saved = self._forward(*args)
        return out

    __call__ = forward

    def backward(self, dy):
        if self._saved is None:
            raise GraphError(f"{self.op}: backward requested before forward")
        return self._backward(dy, self._saved)

    def _forward(self, *args):
        raise NotImplementedError

    def _backward(self, dy, saved):
        raise NotImplementedError


class Conv2dNode(Node):
    op = "conv2d"

    def __init__(self, params: ConvParams):
        super().__init__()
        self.params = params

    def _forward(self, x):
        return conv2d(x, self.params), x

    def _backward(self, dy, x):
        dx, dw, db = conv2d_backward(dy, x, self.params)
        return (dx,), {"weight": dw, "bias": db}


class ReluNode(Node):
    op = "relu"

    def _forward(self, x):
        return relu(x), x

    def _backward(self, dy, x):
        return (relu_backward(dy, x),), {}


class AddNode(Node):
    op = "elementwise_add"

    def _forward(self, a, b):
        return elementwise_add(a, b), True

    def _backward(self, dy, _):
        return (dy, dy), {}


class ResizeNode(Node):
    op = "bilinear_resize"

    def __init__(self, out_h: int, out_w: int):
        super().__init__()
        self.size = (out_h, out_w)

    def _forward(self, x):
        return bilinear_resize(x, *self.size), x.shape

    def _backward(self, dy, in_shape):
        return (bilinear_resize_backward(dy, in_shape),), {}


class PoolNode(Node):
    op = "global_avg_pool"

    def _forward(self, x):
        return global_avg_pool(x), x.shape

    def _backward(self, dy, in_shape):
        return (global_avg_pool_backward(dy, in_shape),), {}


class LinearNode(Node):
    op = "linear"

    def __init__(self, params: LinearParams):
        super().__init__()
        self.params = params

    def _forward(self, x):
        return linear(x, self.params), x

    def _backward(self, dy, x):
        dx, dw, db = linear_backward(dy, x, self.params)
        return (dx,), {"weight": dw, "bias": db}


class SoftmaxBranchesNode(Node):
    op = "softmax_branches"

    def _forward(self, logits):
        w = softmax_branches(logits)
        return w, w

    def _backward(self, dy, w):
        return (softmax_branches_backward(dy, w),), {}


class GroupNormNode(Node):
    op = "group_norm"

    def __init__(self, gamma: np.ndarray, beta: np.ndarray, groups: int):
        super().__init__()
        self.gamma, self.beta, self.groups = gamma, beta, groups

    def _forward(self, x):
        y, xhat, inv_std = group_norm(x, self.gamma, self.beta, self.groups)
        return y, (xhat, inv_std)

    def _backward(self, dy, saved):
        dx, dg, dbeta = group_norm_backward(dy, *saved, self.gamma, self.groups)
        return (dx,), {"weight": dg, "bias": dbeta}


# ---------------------------------------------------------------------------
# Text dump
# ---------------------------------------------------------------------------


def dump_tensor(x: np.ndarray) -> str:
    """Header ``B C H W`` then whitespace-separated row-major values."""
    x = as_tensor(x)
    header = " ".join(str(d) for d in x.shape)
    body = " ".join(repr(float(v)) for v in x.ravel())
    return f"{header}\n{body}\n"


def load_tensor(text: str) -> np.ndarray:
    lines = text.strip().split("\n", 1)
    shape = tuple(int(t) for t in lines[0].split())
    if len(shape) != 4:
        raise ShapeError(f"tensor header must have 4 dims, got {lines[0]!r}")
    values = np.array(lines[1].split() if len(lines) > 1 else [], dtype=DTYPE)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"tensor body has {values.size} values, header says {shape}")
    return values.reshape(shape)


def tree_sum(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Left fold of :func:`elementwise_add`."""
    if not tensors:
        raise ShapeError("cannot sum an empty branch list")
    out = tensors[0]
    for t in tensors[1:]:
        out = elementwise_add(out, t)
    return out


class SumNode(Node):
    """Elementwise sum of any number of same-shaped tensors (left fold)."""

    op = "aggregate"

    def _forward(self, *xs):
        return tree_sum(xs), len(xs)

    def _backward(self, dy, n):
        return (dy,) * n, {}


class StackNode(Node):
    op = "stack"

    def _forward(self, *xs):
        return np.stack(xs), len(xs)

    def _backward(self, dy, n):
        return tuple(dy[k] for k in range(n)), {}


class Tape:
    """Records node applications over named values and replays them in reverse.

    Every value key is written once. Parameter gradients accumulate under
    ``"<param prefix>.<name>"``, so a layer applied at several pyramid levels
    collects the sum of its per-level gradients.
    """

    def __init__(self, **inputs: np.ndarray):
        self.values: dict[str, np.ndarray] = dict(inputs)
        self.entries: list[tuple[Node, tuple[str, ...], str, str | None]] = []

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[key]

    def apply(self, node: Node, inputs, output: str, param: str | None = None) -> np.ndarray:
        if isinstance(inputs, str):
            inputs = (inputs,)
        if output in self.values:
            raise GraphError(f"tape value {output!r} written twice")
        out = node.forward(*(self.values[k] for k in inputs))
        self.values[output] = out
        self.entries.append((node, tuple(inputs), output, param))
        return out

    def backward(self, seeds: dict[str, np.ndarray]):
        """Returns ``(value_grads, param_grads)`` for upstream gradients ``seeds``."""
        for key in seeds:
            if key not in self.values:
                raise GraphError(f"no recorded value {key!r} to seed")
        grads = {k: np.asarray(g, dtype=DTYPE) for k, g in seeds.items()}
        pgrads: dict[str, np.ndarray] = {}
        for node, inputs, output, param in reversed(self.entries):
            g = grads.get(output)
            if g is None:
                continue
            in_grads, p = node.backward(g)
            for key, gk in zip(inputs, in_grads):
                grads[key] = grads[key] + gk if key in grads else gk
            for name, gp in p.items():
                full = f"{param}.{name}"
                pgrads[full] = pgrads[full] + gp if full in pgrads else gp
        return grads, pgrads
