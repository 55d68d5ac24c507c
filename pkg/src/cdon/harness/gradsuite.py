"""Named central-difference checks for every differentiable operator.

Each entry builds small random tensors away from kinks, runs the operator
to a scalar, and compares analytic against numeric gradients at 64-bit.
The CLI `grad-check` command and the acceptance suite both run this
registry.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import (
    ConvParams,
    DenseParams,
    Tensor4,
    broadcast_mul,
    conv2d,
    dense,
    depthwise_conv2d,
    grad_check,
    make_conv_params,
    make_dense_params,
    sigmoid,
    sum_all,
)
from ..gating import gate_forward, make_gate_params, modulate
from ..heads import detection_loss
from ..geometry import Box
from ..pooling import (
    PSRoIMaps,
    RoI,
    deformable_psroi_pool_batch,
    psroi_pool_batch,
    roi_max_pool_batch,
)


def _check_conv2d():
    rng = np.random.default_rng(100)
    x = Tensor4(rng.normal(size=(1, 3, 6, 6)), requires_grad=True)
    p = make_conv_params(rng, 3, 4, 3, 3, stride=2, pad=1, weight_std=0.4)

    def f(xx, w, b, graph):
        return sum_all(sigmoid(conv2d(xx, ConvParams(w, b, 2, 1, 1), graph),
                               graph), graph)

    return grad_check(f, [x, p.weights, p.bias])


def _check_depthwise():
    rng = np.random.default_rng(101)
    x = Tensor4(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
    k = Tensor4(rng.normal(0, 0.4, (4, 1, 5, 5)), requires_grad=True)
    b = Tensor4(rng.normal(0, 0.2, (1, 4, 1, 1)), requires_grad=True)

    def f(xx, kk, bb, graph):
        return sum_all(sigmoid(depthwise_conv2d(xx, kk, bb, graph), graph),
                       graph)

    return grad_check(f, [x, k, b])


def _check_dense():
    rng = np.random.default_rng(102)
    x = Tensor4(rng.normal(size=(2, 6, 1, 1)), requires_grad=True)
    p = make_dense_params(rng, 6, 3, weight_std=0.4)

    def f(xx, w, b, graph):
        return sum_all(sigmoid(dense(xx, DenseParams(w, b), graph), graph),
                       graph)

    return grad_check(f, [x, p.weight, p.bias])


def _check_sigmoid():
    rng = np.random.default_rng(103)
    x = Tensor4(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    return grad_check(lambda t, graph: sum_all(sigmoid(t, graph), graph), [x])


def _check_broadcast_mul():
    rng = np.random.default_rng(104)
    f = Tensor4(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    g = Tensor4(rng.uniform(0.2, 0.8, (1, 3, 1, 1)), requires_grad=True)

    def fn(ff, gg, graph):
        return sum_all(broadcast_mul(ff, gg, graph), graph)

    return grad_check(fn, [f, g])


def _check_roi_max_pool():
    rng = np.random.default_rng(105)
    x = Tensor4(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    roi = RoI(Box(0.7, 1.3, 7.1, 6.9), 1.0)

    def fn(t, graph):
        return sum_all(roi_max_pool_batch(t, [roi], 3, 3, graph), graph)

    return grad_check(fn, [x])


def _check_psroi_pool():
    rng = np.random.default_rng(106)
    k = 3
    maps = Tensor4(rng.normal(size=(1, 2 * k * k, 10, 10)),
                   requires_grad=True)
    roi = RoI(Box(1.3, 0.8, 8.6, 9.1), 1.0)

    def fn(m, graph):
        return sum_all(psroi_pool_batch(PSRoIMaps(m, k=k), [roi], graph),
                       graph)

    return grad_check(fn, [maps])


def _check_deformable_psroi_pool():
    rng = np.random.default_rng(107)
    k = 3
    maps = Tensor4(rng.normal(size=(1, 2 * k * k, 12, 12)),
                   requires_grad=True)
    off = Tensor4(rng.uniform(-0.3, 0.3, (1, 2, k, k)), requires_grad=True)
    roi = RoI(Box(2.1, 1.6, 10.4, 10.9), 1.0)

    def fn(m, o, graph):
        return sum_all(
            deformable_psroi_pool_batch(PSRoIMaps(m, k=k), [roi], o, 0.1,
                                        graph), graph)

    return grad_check(fn, [maps, off])


def _gate_check(kind):
    rng = np.random.default_rng(108 if kind == "spatio" else 109)
    x = Tensor4(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    p = make_gate_params(rng, kind, 4, (4, 4), weight_std=0.3)

    def fn(*tensors, graph):
        g = gate_forward(tensors[0], p, graph)
        return sum_all(modulate(tensors[0], g, graph), graph)

    return grad_check(fn, [x] + p.tensors())


def _check_detection_loss():
    rng = np.random.default_rng(110)
    n = 5
    logits = Tensor4(rng.normal(size=(n, 2, 1, 1)), requires_grad=True)
    deltas = Tensor4(rng.normal(size=(n, 4, 1, 1)) * 0.4, requires_grad=True)
    labels = np.array([1, 0, 1, 0, 1])
    targets = rng.normal(size=(n, 4)) * 0.4

    def fn(lg, d, graph):
        return detection_loss(lg, d, labels, targets, graph=graph).node

    return grad_check(fn, [logits, deltas])


GRAD_CHECKS = {
    "conv2d": _check_conv2d,
    "depthwise_conv2d": _check_depthwise,
    "dense": _check_dense,
    "sigmoid": _check_sigmoid,
    "broadcast_mul": _check_broadcast_mul,
    "roi_max_pool": _check_roi_max_pool,
    "psroi_pool": _check_psroi_pool,
    "deformable_psroi_pool": _check_deformable_psroi_pool,
    "gate_forward_spatio": lambda: _gate_check("spatio"),
    "gate_forward_channel": lambda: _gate_check("channel"),
    "detection_loss": _check_detection_loss,
}


def run_grad_suite(only: str | None = None):
    """Run all (or one) named checks; returns {name: GradCheckReport}."""
    names = [only] if only else list(GRAD_CHECKS)
    out = {}
    for name in names:
        if name not in GRAD_CHECKS:
            raise KeyError(f"no gradient check named {name!r}; "
                           f"options: {sorted(GRAD_CHECKS)}")
        out[name] = GRAD_CHECKS[name]()
    return out
