"""Dense 4-D tensors with reverse-mode differentiation.

Everything in the library flows through ``Tensor4``, a (batch, channel,
height, width) array with an optional gradient buffer.  Vectors are embedded
as (n, d, 1, 1) tensors and matrices as (out, in, 1, 1) so a single value
type serves convolutions, fully connected layers and losses alike.

Recording is explicit: ops only land on a ``Graph`` that the caller passes
in, so independent forward passes never share mutable state.  ``backward``
walks the recorded list in reverse, accumulating gradients additively across
fan-out.  ``grad_check`` compares any scalar-valued closure against central
differences and is the verification oracle the whole test suite leans on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64

# Toggle for the per-op finite check.  On by default: a NaN/Inf anywhere is
# an error state, and catching it at the op that produced it beats chasing
# it through a training step.
FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in result")


class Tensor4:
    """A dense (n, c, h, w) array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims}, requires_grad={self.requires_grad})"


def _accum(t: Tensor4, g: np.ndarray) -> None:
    """Add a gradient contribution; fan-out accumulates additively."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


@dataclass
class _Node:
    op: str
    output: Tensor4
    backward_fn: Callable[[np.ndarray], None]


@dataclass
class Graph:
    """Ordered record of one forward pass, walked in reverse by backward()."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, op: str, output: Tensor4, backward_fn) -> None:
        self.nodes.append(_Node(op, output, backward_fn))


def _result(data: np.ndarray, op: str, graph: Graph | None,
            inputs: Sequence[Tensor4], backward_fn) -> Tensor4:
    """Wrap op output, propagate requires_grad, record on the graph."""
    _check_finite(data, op)
    out = Tensor4.__new__(Tensor4)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if graph is not None and out.requires_grad:
        graph.record(op, out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor4) -> None:
    """Propagate d(loss)/d(tensor) to every requires_grad tensor in the graph.

    The recorded node list is already topologically ordered (forward order),
    so one reverse sweep visits each node exactly once.  Gradients add into
    existing buffers; zero parameter grads between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got dims {loss.dims}")
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue  # no downstream influence on the loss
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """2-D convolution parameters.

    weights: (out_channels, in_channels, kH, kW); bias: length out_channels,
    stored as a (1, out_channels, 1, 1) tensor.
    """

    weights: Tensor4
    bias: Tensor4
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        oc, _ic, kh, kw = self.weights.dims
        if kh < 1 or kw < 1:
            raise DimensionError(f"kernel must be >= 1x1, got {kh}x{kw}")
        if self.dilation < 1 or self.stride < 1 or self.pad < 0:
            raise DimensionError("stride/dilation must be >= 1, pad >= 0")
        if self.bias.dims != (1, oc, 1, 1):
            raise DimensionError(
                f"bias dims {self.bias.dims} != (1, {oc}, 1, 1)")

    @property
    def out_channels(self) -> int:
        return self.weights.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weights.dims[1]

    def tensors(self) -> list[Tensor4]:
        return [self.weights, self.bias]


@dataclass
class DenseParams:
    """Fully connected layer: weight (out, in, 1, 1), bias (1, out, 1, 1)."""

    weight: Tensor4
    bias: Tensor4

    def __post_init__(self):
        out_dim, _in, h, w = self.weight.dims
        if (h, w) != (1, 1):
            raise DimensionError("dense weight must be (out, in, 1, 1)")
        if self.bias.dims != (1, out_dim, 1, 1):
            raise DimensionError(
                f"bias dims {self.bias.dims} != (1, {out_dim}, 1, 1)")

    @property
    def out_dim(self) -> int:
        return self.weight.dims[0]

    @property
    def in_dim(self) -> int:
        return self.weight.dims[1]

    def tensors(self) -> list[Tensor4]:
        return [self.weight, self.bias]


def make_conv_params(rng: np.random.Generator, in_c: int, out_c: int,
                     kh: int, kw: int, stride: int = 1, pad: int = 0,
                     dilation: int = 1, weight_std: float | None = 0.01,
                     dtype=None) -> ConvParams:
    """Gaussian(0, weight_std) weights, zero bias.

    weight_std None selects variance-preserving scaling sqrt(2 / fan_in).
    """
    if weight_std is None:
        weight_std = math.sqrt(2.0 / (in_c * kh * kw))
    w = Tensor4(rng.normal(0.0, weight_std, (out_c, in_c, kh, kw)),
                requires_grad=True, dtype=dtype)
    b = Tensor4(np.zeros((1, out_c, 1, 1)), requires_grad=True, dtype=dtype)
    return ConvParams(w, b, stride=stride, pad=pad, dilation=dilation)


def make_dense_params(rng: np.random.Generator, in_dim: int, out_dim: int,
                      weight_std: float | None = 0.01,
                      dtype=None) -> DenseParams:
    if weight_std is None:
        weight_std = math.sqrt(2.0 / in_dim)
    w = Tensor4(rng.normal(0.0, weight_std, (out_dim, in_dim, 1, 1)),
                requires_grad=True, dtype=dtype)
    b = Tensor4(np.zeros((1, out_dim, 1, 1)), requires_grad=True, dtype=dtype)
    return DenseParams(w, b)


# ---------------------------------------------------------------------------
# im2col machinery for conv2d
# ---------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int,
                 dilation: int) -> tuple[int, int]:
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    return oh, ow


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            dilation: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            cols[:, :, i, j] = x[:, :, i0:i0 + stride * oh:stride,
                                 j0:j0 + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int,
            kw: int, stride: int, pad: int, dilation: int, oh: int,
            ow: int) -> np.ndarray:
    n, c, h, w = shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            xp[:, :, i0:i0 + stride * oh:stride,
               j0:j0 + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor4, p: ConvParams, graph: Graph | None = None) -> Tensor4:
    """2-D convolution (cross-correlation) with stride, padding, dilation."""
    n, c, h, w = x.dims
    oc, ic, kh, kw = p.weights.dims
    if c != ic:
        raise DimensionError(f"conv2d: input has {c} channels, kernel wants {ic}")
    oh, ow = _conv_out_hw(h, w, kh, kw, p.stride, p.pad, p.dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: output {oh}x{ow} collapsed for input {h}x{w} "
            f"kernel {kh}x{kw} stride {p.stride} pad {p.pad} dilation {p.dilation}")

    cols = _im2col(x.data, kh, kw, p.stride, p.pad, p.dilation, oh, ow)
    wm = p.weights.data.reshape(oc, ic * kh * kw)
    out = (wm @ cols).reshape(n, oc, oh, ow) + p.bias.data

    weights, bias = p.weights, p.bias

    def back(g: np.ndarray) -> None:
        gm = g.reshape(n, oc, oh * ow)
        _accum(bias, gm.sum(axis=(0, 2)).reshape(1, oc, 1, 1))
        gw = (gm @ cols.transpose(0, 2, 1)).sum(axis=0)
        _accum(weights, gw.reshape(weights.dims))
        if x.requires_grad:
            gcols = wm.T @ gm
            _accum(x, _col2im(gcols, x.dims, kh, kw, p.stride, p.pad,
                              p.dilation, oh, ow))

    return _result(out, "conv2d", graph, [x, weights, bias], back)


def depthwise_conv2d(x: Tensor4, kernels: Tensor4, bias: Tensor4,
                     graph: Graph | None = None) -> Tensor4:
    """Per-channel convolution, valid padding, stride 1.

    kernels: (c, 1, kH, kW), one filter per input channel; with full-extent
    kernels (kH == h, kW == w) the output is the (n, c, 1, 1) vector used by
    the channel gate.
    """
    n, c, h, w = x.dims
    kc, one, kh, kw = kernels.dims
    if kc != c or one != 1:
        raise DimensionError(
            f"depthwise kernels {kernels.dims} do not match {c} input channels")
    if kh > h or kw > w:
        raise DimensionError(
            f"depthwise kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.dims != (1, c, 1, 1):
        raise DimensionError(f"depthwise bias dims {bias.dims} != (1, {c}, 1, 1)")
    oh, ow = h - kh + 1, w - kw + 1

    if (oh, ow) == (1, 1):
        # full-extent kernels (the channel-gate path): a weighted sum over
        # all of space, cheap to express on contiguous arrays
        xf = x.data.reshape(n, c, h * w)
        kf = kernels.data.reshape(c, h * w)
        out = (xf * kf).sum(axis=2).reshape(n, c, 1, 1) + bias.data

        def back(g: np.ndarray) -> None:
            gf = g.reshape(n, c, 1)
            _accum(bias, g.sum(axis=0).reshape(1, c, 1, 1))
            _accum(kernels, (xf * gf).sum(axis=0).reshape(kernels.dims))
            if x.requires_grad:
                _accum(x, (kf[None] * gf).reshape(x.dims))

        return _result(out, "depthwise_conv2d", graph, [x, kernels, bias],
                       back)

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw),
                                                       axis=(2, 3))
    # windows: (n, c, oh, ow, kh, kw)
    out = np.einsum("ncyxkl,ckl->ncyx", windows, kernels.data[:, 0]) + bias.data

    def back(g: np.ndarray) -> None:
        _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        gk = np.einsum("ncyxkl,ncyx->ckl", windows, g)
        _accum(kernels, gk[:, None])
        if x.requires_grad:
            # full correlation: pad the output grad and convolve with the
            # spatially flipped kernels, per channel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw),
                                                            axis=(2, 3))
            flipped = kernels.data[:, 0, ::-1, ::-1]
            _accum(x, np.einsum("ncyxkl,ckl->ncyx", gwin, flipped))

    return _result(out, "depthwise_conv2d", graph, [x, kernels, bias], back)


def dense(x: Tensor4, p: DenseParams, graph: Graph | None = None) -> Tensor4:
    """Affine map on channel vectors: (n, in, 1, 1) -> (n, out, 1, 1)."""
    n, c, h, w = x.dims
    if (h, w) != (1, 1) or c != p.in_dim:
        raise DimensionError(
            f"dense: input dims {x.dims} incompatible with ({p.out_dim}, {p.in_dim})")
    wm = p.weight.data.reshape(p.out_dim, p.in_dim)
    xm = x.data.reshape(n, p.in_dim)
    out = (xm @ wm.T + p.bias.data.reshape(p.out_dim)).reshape(n, p.out_dim, 1, 1)

    weight, bias = p.weight, p.bias

    def back(g: np.ndarray) -> None:
        gm = g.reshape(n, p.out_dim)
        _accum(bias, gm.sum(axis=0).reshape(1, p.out_dim, 1, 1))
        _accum(weight, (gm.T @ xm).reshape(weight.dims))
        if x.requires_grad:
            _accum(x, (gm @ wm).reshape(x.dims))

    return _result(out, "dense", graph, [x, weight, bias], back)


def relu(x: Tensor4, graph: Graph | None = None) -> Tensor4:
    """Elementwise max(0, x); subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def back(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _result(out, "relu", graph, [x], back)


def sigmoid(x: Tensor4, graph: Graph | None = None) -> Tensor4:
    """Numerically stable logistic; saturates to 0/1 instead of overflowing."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g: np.ndarray) -> None:
        _accum(x, g * out * (1.0 - out))

    return _result(out, "sigmoid", graph, [x], back)


def broadcast_mul(features: Tensor4, gate: Tensor4,
                  graph: Graph | None = None) -> Tensor4:
    """Elementwise product with a spatial (n,1,h,w) or channel (n,c,1,1) gate.

    A full (n,c,h,w) gate is also accepted; output always matches the
    feature dims.
    """
    n, c, h, w = features.dims
    gd = gate.dims
    if gd not in ((n, 1, h, w), (n, c, 1, 1), (n, c, h, w)):
        raise DimensionError(
            f"broadcast_mul: gate dims {gd} incompatible with features {features.dims}")
    out = features.data * gate.data

    def back(g: np.ndarray) -> None:
        if features.requires_grad:
            _accum(features, g * gate.data)
        if gate.requires_grad:
            gg = g * features.data
            if gd == (n, 1, h, w):
                gg = gg.sum(axis=1, keepdims=True)
            elif gd == (n, c, 1, 1):
                gg = gg.sum(axis=(2, 3), keepdims=True)
            _accum(gate, gg)

    return _result(out, "broadcast_mul", graph, [features, gate], back)


def add(a: Tensor4, b: Tensor4, graph: Graph | None = None) -> Tensor4:
    """Elementwise sum of two identically shaped tensors."""
    if a.dims != b.dims:
        raise DimensionError(f"add: dims {a.dims} != {b.dims}")
    out = a.data + b.data

    def back(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _result(out, "add", graph, [a, b], back)


def concat_channels(parts: Sequence[Tensor4],
                    graph: Graph | None = None) -> Tensor4:
    """Stack tensors along the channel axis, in argument order."""
    if not parts:
        raise DimensionError("concat_channels: empty part list")
    n, _, h, w = parts[0].dims
    for t in parts[1:]:
        if (t.n, t.h, t.w) != (n, h, w):
            raise DimensionError(
                f"concat_channels: spatial mismatch {t.dims} vs {(n, '?', h, w)}")
    out = np.concatenate([t.data for t in parts], axis=1)
    splits = np.cumsum([t.c for t in parts])[:-1]
    parts = list(parts)

    def back(g: np.ndarray) -> None:
        for t, gp in zip(parts, np.split(g, splits, axis=1)):
            _accum(t, gp)

    return _result(out, "concat_channels", graph, parts, back)


def split_channels(x: Tensor4, sizes: Sequence[int],
                   graph: Graph | None = None) -> list[Tensor4]:
    """Inverse of concat_channels; sizes must sum to the channel count."""
    if sum(sizes) != x.c:
        raise DimensionError(f"split sizes {sizes} do not sum to {x.c} channels")
    offs = np.cumsum([0] + list(sizes))
    outs = []
    for i, s in enumerate(sizes):
        lo, hi = offs[i], offs[i + 1]
        piece = x.data[:, lo:hi].copy()

        def back(g: np.ndarray, lo=lo, hi=hi) -> None:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            _accum(x, full)

        outs.append(_result(piece, "split_channels", graph, [x], back))
    return outs


def concat_batch(parts: Sequence[Tensor4],
                 graph: Graph | None = None) -> Tensor4:
    """Stack tensors along the batch axis (per-RoI results into one batch)."""
    if not parts:
        raise DimensionError("concat_batch: empty part list")
    chw = parts[0].dims[1:]
    for t in parts[1:]:
        if t.dims[1:] != chw:
            raise DimensionError(f"concat_batch: mismatch {t.dims[1:]} vs {chw}")
    out = np.concatenate([t.data for t in parts], axis=0)
    splits = np.cumsum([t.n for t in parts])[:-1]
    parts = list(parts)

    def back(g: np.ndarray) -> None:
        for t, gp in zip(parts, np.split(g, splits, axis=0)):
            _accum(t, gp)

    return _result(out, "concat_batch", graph, parts, back)


def reshape(x: Tensor4, dims: tuple[int, int, int, int],
            graph: Graph | None = None) -> Tensor4:
    """Row-major reshape; element count must be preserved."""
    if int(np.prod(dims)) != x.data.size:
        raise DimensionError(f"reshape {x.dims} -> {dims} changes element count")
    out = x.data.reshape(dims).copy()

    def back(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.dims))

    return _result(out, "reshape", graph, [x], back)


def flatten_to_vector(x: Tensor4, graph: Graph | None = None) -> Tensor4:
    """(n, c, h, w) -> (n, c*h*w, 1, 1), row-major within each batch item."""
    n = x.n
    return reshape(x, (n, x.data.size // n, 1, 1), graph)


def scale(x: Tensor4, s: float, graph: Graph | None = None) -> Tensor4:
    """Multiply by a constant scalar."""
    out = x.data * s

    def back(g: np.ndarray) -> None:
        _accum(x, g * s)

    return _result(out, "scale", graph, [x], back)


def sum_all(x: Tensor4, graph: Graph | None = None) -> Tensor4:
    """Reduce every element to a (1, 1, 1, 1) scalar."""
    out = np.array(x.data.sum()).reshape(1, 1, 1, 1)

    def back(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, g.reshape(())))

    return _result(out, "sum_all", graph, [x], back)


def resize_nearest(x: Tensor4, out_h: int, out_w: int,
                   graph: Graph | None = None) -> Tensor4:
    """Nearest-neighbor spatial resize (used to lay k x k bins on h_g x w_g)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("resize_nearest: output dims must be >= 1")
    n, c, h, w = x.dims
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    out = x.data[:, :, ri][:, :, :, ci]

    def back(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        _accum(x, gx)

    return _result(out, "resize_nearest", graph, [x], back)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-element analytic vs central-difference comparison."""

    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    max_rel_err: float
    tol: float
    reliable: bool

    @property
    def passed(self) -> bool:
        return self.reliable and self.max_rel_err < self.tol


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(fn, inputs: Sequence[Tensor4], step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Check the gradients of a deterministic scalar-valued closure.

    ``fn(*inputs, graph=g)`` must return a scalar Tensor4.  Every input with
    requires_grad participates; the numeric side perturbs each element by
    +/- step and differences the closure's value.
    """
    # determinism probe: a closure that disagrees with itself makes both
    # sides of the comparison meaningless
    y1 = fn(*inputs, graph=None).item()
    y2 = fn(*inputs, graph=None).item()
    reliable = (y1 == y2)

    for t in inputs:
        t.zero_grad()
    g = Graph()
    loss = fn(*inputs, graph=g)
    backward(g, loss)
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in inputs if t.requires_grad]

    numeric = []
    for t in inputs:
        if not t.requires_grad:
            continue
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(*inputs, graph=None).item()
            flat[i] = orig - step
            fm = fn(*inputs, graph=None).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        numeric.append(num)

    max_err = max((_rel_err(a, n) for a, n in zip(analytic, numeric)),
                  default=0.0)
    return GradCheckReport(analytic, numeric, max_err, tol, reliable)
