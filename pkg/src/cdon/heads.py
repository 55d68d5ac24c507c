"""Sub-network coupling, detection loss, OHEM selection, SGD updates.

The two per-RoI feature stacks are each normalized by a 1x1 convolution and
summed element-wise; dense heads on the sum emit 2-way class logits and 4
box deltas.  The loss is softmax cross-entropy plus alpha times a smooth-L1
regression term over (x, y, w, h), summed across the minibatch.  OHEM keeps
the top-n highest-loss RoIs; the optimizer is SGD with momentum and weight
decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ConvParams,
    DenseParams,
    Graph,
    Tensor4,
    _accum,
    _result,
    add,
    conv2d,
    dense,
    flatten_to_vector,
)
from .errors import ConfigError, NumericError, UsageError


@dataclass
class CoupleParams:
    """1x1 normalization convs for both branches plus the two dense heads."""

    normA: ConvParams
    normB: ConvParams
    head_cls: DenseParams
    head_reg: DenseParams

    def __post_init__(self):
        if self.normA.out_channels != self.normB.out_channels:
            raise ConfigError(
                f"coupling widths differ: {self.normA.out_channels} vs "
                f"{self.normB.out_channels}")
        if self.head_cls.out_dim != 2 or self.head_reg.out_dim != 4:
            raise ConfigError("heads must emit 2 class logits and 4 deltas")

    def tensors(self) -> list[Tensor4]:
        return (self.normA.tensors() + self.normB.tensors()
                + self.head_cls.tensors() + self.head_reg.tensors())


@dataclass
class LossTerms:
    """Loss breakdown; total == cls + alpha * reg by construction."""

    cls: float
    reg: float
    alpha: float
    total: float
    per_roi: np.ndarray | None = None   # per-RoI totals, feeds OHEM
    node: Tensor4 | None = None         # differentiable handle


@dataclass
class OptimState:
    """SGD-with-momentum state; velocities are keyed like the parameters."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)


def couple(feat_gate: Tensor4, feat_occ: Tensor4, p: CoupleParams,
           graph: Graph | None = None) -> Tensor4:
    """Normalize both branch features by 1x1 convs and sum element-wise."""
    a = conv2d(feat_gate, p.normA, graph)
    b = conv2d(feat_occ, p.normB, graph)
    if a.dims != b.dims:
        raise ConfigError(
            f"coupled branches disagree after normalization: {a.dims} vs {b.dims}")
    return add(a, b, graph)


def run_heads(coupled: Tensor4, p: CoupleParams,
              graph: Graph | None = None) -> tuple[Tensor4, Tensor4]:
    """Flatten the coupled feature and emit (class logits, box deltas)."""
    flat = flatten_to_vector(coupled, graph)
    return dense(flat, p.head_cls, graph), dense(flat, p.head_reg, graph)


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def _smooth_l1_vec(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1, x, np.sign(x))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def detection_loss(pred_cls: Tensor4, pred_deltas: Tensor4,
                   labels: np.ndarray, target_deltas: np.ndarray | None,
                   alpha: float = 1.0, include: np.ndarray | None = None,
                   graph: Graph | None = None) -> LossTerms:
    """Cross-entropy plus smooth-L1 loss, summed over the minibatch.

    pred_cls is (N, 2, 1, 1) raw logits, pred_deltas (N, 4, 1, 1); labels
    holds 1 for pedestrian and 0 for background.  target_deltas rows are
    read only at positive labels.  `include` restricts the loss (and the
    gradient) to a subset of RoIs, which is how OHEM filters.
    """
    n = pred_cls.n
    labels = np.asarray(labels, dtype=np.int64)
    if pred_cls.dims != (n, 2, 1, 1) or pred_deltas.dims != (n, 4, 1, 1):
        raise UsageError(
            f"expected (N,2,1,1)/(N,4,1,1) predictions, got "
            f"{pred_cls.dims} and {pred_deltas.dims}")
    if labels.shape != (n,):
        raise UsageError(f"labels shape {labels.shape} != ({n},)")

    mask = np.zeros(n, dtype=bool)
    mask[np.arange(n) if include is None else np.asarray(include)] = True
    pos = (labels == 1)
    if pos.any():
        if target_deltas is None:
            raise UsageError("positive RoIs present but no target deltas")
        target_deltas = np.asarray(target_deltas, dtype=float)
        if not np.all(np.isfinite(target_deltas[pos])):
            raise UsageError("positive RoI with missing/non-finite targets")

    logits = pred_cls.data.reshape(n, 2)
    probs = _softmax(logits)
    # log-softmax via the shifted logits for stability
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -log_probs[np.arange(n), labels]

    deltas = pred_deltas.data.reshape(n, 4)
    reg_residual = np.zeros((n, 4))
    reg_each = np.zeros(n)
    if pos.any():
        reg_residual[pos] = target_deltas[pos] - deltas[pos]
        reg_each[pos] = _smooth_l1_vec(reg_residual[pos]).sum(axis=1)

    cls_total = float(ce[mask].sum())
    reg_total = float(reg_each[mask & pos].sum()) if pos.any() else 0.0
    total = cls_total + alpha * reg_total
    per_roi = ce + alpha * reg_each

    out = np.array(total).reshape(1, 1, 1, 1)

    def back(g: np.ndarray) -> None:
        gs = float(g.reshape(()))
        if pred_cls.requires_grad:
            onehot = np.zeros((n, 2))
            onehot[np.arange(n), labels] = 1.0
            gc = (probs - onehot) * mask[:, None] * gs
            _accum(pred_cls, gc.reshape(n, 2, 1, 1))
        if pred_deltas.requires_grad:
            gd = np.zeros((n, 4))
            sel = mask & pos
            gd[sel] = -alpha * _smooth_l1_grad(reg_residual[sel]) * gs
            _accum(pred_deltas, gd.reshape(n, 4, 1, 1))

    node = _result(out, "detection_loss", graph, [pred_cls, pred_deltas], back)
    return LossTerms(cls=cls_total, reg=reg_total, alpha=alpha, total=total,
                     per_roi=per_roi, node=node)


def ohem_select(per_roi_losses, n: int = 300) -> list[int]:
    """Indices of the n largest losses, descending; ties keep lower index."""
    if n <= 0:
        raise UsageError(f"ohem n must be positive, got {n}")
    losses = list(per_roi_losses)
    order = sorted(range(len(losses)), key=lambda i: (-losses[i], i))
    return order[:n]


def sgd_step(params: dict, grads: dict, state: OptimState) -> None:
    """v <- momentum * v + (grad + wd * param); param <- param - lr * v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.velocity[name] = v
        p.data -= state.lr * v


def lr_schedule(step: int, base_lr: float, drops, warmup_steps: int = 0,
                warmup_lr: float = 1e-4) -> float:
    """Warm-up rate before warmup_steps, then base_lr times passed drops."""
    if step < warmup_steps:
        return warmup_lr
    lr = base_lr
    for drop_step, factor in drops:
        if step >= drop_step:
            lr *= factor
    return lr


def make_couple_params(rng: np.random.Generator, c_gate: int, c_occ: int,
                       width: int, pooled_size: tuple[int, int],
                       weight_std: float | None = 0.01) -> CoupleParams:
    from .autodiff import make_conv_params, make_dense_params

    h_g, w_g = pooled_size
    return CoupleParams(
        normA=make_conv_params(rng, c_gate, width, 1, 1, weight_std=weight_std),
        normB=make_conv_params(rng, c_occ, width, 1, 1, weight_std=weight_std),
        head_cls=make_dense_params(rng, width * h_g * w_g, 2,
                                   weight_std=weight_std),
        head_reg=make_dense_params(rng, width * h_g * w_g, 4,
                                   weight_std=weight_std))
