"""RoI pooling operators: max pooling, position-sensitive, and deformable.

Three poolers share this module.  ``roi_max_pool`` follows the classic
two-stage detector convention (rounded corners, floor/ceil bin edges, max
aggregation).  ``psroi_pool`` averages each class-and-grid-specific score
map over its bin; ``deformable_psroi_pool`` is the same computation with
every bin's sampling grid displaced by a learned offset and read through
bilinear interpolation, so gradients flow to the score maps and to the
offsets alike.

Bin geometry for the position-sensitive ops: the projected RoI (clamped to
at least one cell per side) is split into k x k equal continuous bins; each
bin is averaged over ceil(bin_w) x ceil(bin_h) regular sample points
(minimum one).  Sample coordinates live in cell-index space where integer
(x, y) hits a cell exactly; the undisplaced grid is clamped into the map,
and only offset displacement can move a sample outside, where it
contributes zero value and zero gradient.  Plain PSRoI pooling is the
deformable path at zero offset, which makes the two ops agree bit for bit
there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor4, _accum, _result
from .errors import DegenerateRoIError, DimensionError, NumericError
from .geometry import Box

DEFAULT_GAMMA_OFF = 0.1


@dataclass
class RoI:
    """A proposal box in image pixels plus the feature-map scale (1/stride)."""

    box: Box
    spatial_scale: float = 1.0


@dataclass
class PSRoIMaps:
    """Bank of c_cls * k^2 score maps, class-major then grid row-major.

    Channel (c, i, j) lives at index c * k^2 + i * k + j.
    """

    maps: Tensor4
    k: int
    c_cls: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise DimensionError(f"grid size k must be >= 1, got {self.k}")
        if self.maps.c != self.c_cls * self.k * self.k:
            raise DimensionError(
                f"{self.maps.c} channels cannot hold {self.c_cls} classes "
                f"x {self.k}^2 grid positions")


@dataclass
class OffsetField:
    """Per-RoI k x k offsets in normalized RoI units, (1, 2, k, k).

    Channel 0 is dx, channel 1 is dy; the pixel displacement applied while
    pooling is offset * (roi_w or roi_h) * gamma_off.
    """

    offsets: Tensor4
    gamma_off: float = DEFAULT_GAMMA_OFF

    def __post_init__(self):
        n, c, kh, kw = self.offsets.dims
        if n != 1 or c != 2 or kh != kw:
            raise DimensionError(
                f"offset field must be (1, 2, k, k), got {self.offsets.dims}")
        if not np.all(np.isfinite(self.offsets.data)):
            raise NumericError("offset field contains non-finite values")

    @property
    def k(self) -> int:
        return self.offsets.dims[2]


@dataclass
class PooledScores:
    """Per-RoI pooled grid: values (1, c_cls, k, k), per-bin sample counts."""

    values: Tensor4
    counts: np.ndarray  # (k, k) samples per bin

    @property
    def k(self) -> int:
        return self.values.dims[2]

    @property
    def c_cls(self) -> int:
        return self.values.dims[1]


def bilinear_sample(map2d: np.ndarray, x: float, y: float) -> float:
    """Bilinear read of a 2-D array at fractional (x, y) = (col, row).

    Integer coordinates return the cell exactly; neighbors that fall
    outside the array contribute zero.
    """
    m = np.asarray(map2d)
    h, w = m.shape
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    total = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w and wy * wx != 0.0:
                total += wy * wx * m[yy, xx]
    return float(total)


def _project_roi(roi: RoI, h: int, w: int) -> tuple[float, float, float, float]:
    """Project to feature space and clamp the extent to >= 1 cell per side."""
    s = roi.spatial_scale
    x1, y1 = roi.box.x1 * s, roi.box.y1 * s
    rw = max(roi.box.width * s, 1.0)
    rh = max(roi.box.height * s, 1.0)
    return x1, y1, rw, rh


# ---------------------------------------------------------------------------
# RoI max pooling
# ---------------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _roi_max_pool_one(data: np.ndarray, roi: RoI, out_h: int, out_w: int):
    """Forward + argmax bookkeeping for one RoI on a (c, h, w) slice.

    Bins are gathered into a padded (c, out_h, out_w, S) block with invalid
    slots at -inf, so the max/argmax run vectorized; argmax ties resolve to
    the first cell in row-major bin order.
    """
    c, h, w = data.shape
    s = roi.spatial_scale
    if (roi.box.x1 * s >= w or roi.box.x2 * s <= 0
            or roi.box.y1 * s >= h or roi.box.y2 * s <= 0):
        raise DegenerateRoIError(
            f"RoI {roi.box} projects outside the {h}x{w} feature map")
    start_w = min(max(_round_half_up(roi.box.x1 * s), 0), w - 1)
    start_h = min(max(_round_half_up(roi.box.y1 * s), 0), h - 1)
    end_w = min(max(_round_half_up(roi.box.x2 * s), 0), w - 1)
    end_h = min(max(_round_half_up(roi.box.y2 * s), 0), h - 1)
    roi_w = max(end_w - start_w + 1, 1)
    roi_h = max(end_h - start_h + 1, 1)
    bin_w = roi_w / out_w
    bin_h = roi_h / out_h

    ii = np.arange(out_h)
    hs = np.minimum(np.maximum(
        start_h + np.floor(ii * bin_h).astype(np.int64), 0), h)
    he = np.minimum(np.maximum(
        start_h + np.ceil((ii + 1) * bin_h).astype(np.int64), 0), h)
    jj = np.arange(out_w)
    ws = np.minimum(np.maximum(
        start_w + np.floor(jj * bin_w).astype(np.int64), 0), w)
    we = np.minimum(np.maximum(
        start_w + np.ceil((jj + 1) * bin_w).astype(np.int64), 0), w)

    sh = max(int((he - hs).max()), 1)
    sw = max(int((we - ws).max()), 1)
    rows = hs[:, None] + np.arange(sh)[None, :]          # (out_h, sh)
    rvalid = rows < he[:, None]
    cols = ws[:, None] + np.arange(sw)[None, :]          # (out_w, sw)
    cvalid = cols < we[:, None]
    rows_c = np.minimum(rows, h - 1)
    cols_c = np.minimum(cols, w - 1)

    # one gather straight to (c, out_h, out_w, sh, sw)
    sub = data[:, rows_c[:, None, :, None], cols_c[None, :, None, :]]
    valid = (rvalid[:, None, :, None] & cvalid[None, :, None, :])
    flat = np.where(valid[None], sub, -np.inf).reshape(c, out_h, out_w, -1)
    idx = flat.argmax(axis=3)
    grid = np.ogrid[:c, :out_h, :out_w]
    out = flat[grid[0], grid[1], grid[2], idx]
    nonempty = np.isfinite(out)
    out = np.where(nonempty, out, 0.0)

    arg = np.full((c, out_h, out_w, 2), -1, dtype=np.int64)
    si, sj = idx // sw, idx % sw
    i_idx = np.arange(out_h)[None, :, None]
    j_idx = np.arange(out_w)[None, None, :]
    arg[..., 0] = np.where(nonempty, rows_c[i_idx, si], -1)
    arg[..., 1] = np.where(nonempty, cols_c[j_idx, sj], -1)
    return out, arg


def roi_max_pool(features: Tensor4, roi: RoI, out_h: int, out_w: int,
                 graph: Graph | None = None) -> Tensor4:
    """Max-pool one RoI into a fixed (1, c, out_h, out_w) grid."""
    return roi_max_pool_batch(features, [roi], out_h, out_w, graph)


def roi_max_pool_batch(features: Tensor4, rois, out_h: int, out_w: int,
                       graph: Graph | None = None) -> Tensor4:
    """Max-pool a list of RoIs against one shared map: (R, c, out_h, out_w)."""
    if features.n != 1:
        raise DimensionError("roi pooling expects a single-image feature map")
    data = features.data[0]
    outs, args = [], []
    for roi in rois:
        o, a = _roi_max_pool_one(data, roi, out_h, out_w)
        outs.append(o)
        args.append(a)
    out = np.stack(outs) if outs else np.zeros(
        (0, features.c, out_h, out_w), dtype=features.data.dtype)

    def back(g: np.ndarray) -> None:
        if not features.requires_grad:
            return
        gx = np.zeros_like(features.data)
        c = features.c
        ch = np.broadcast_to(np.arange(c)[:, None, None],
                             (c, out_h, out_w))
        all_arg = np.stack(args)                  # (R, c, out_h, out_w, 2)
        valid = all_arg[..., 0] >= 0
        chs = np.broadcast_to(ch[None], valid.shape)
        np.add.at(gx[0], (chs[valid], all_arg[..., 0][valid],
                          all_arg[..., 1][valid]), g[valid])
        _accum(features, gx)

    return _result(out, "roi_max_pool", graph, [features], back)


# ---------------------------------------------------------------------------
# Position-sensitive pooling (shared sampler for plain and deformable)
# ---------------------------------------------------------------------------

def _psroi_one(data: np.ndarray, roi: RoI, k: int, c_cls: int,
               off: np.ndarray | None, gamma_off: float):
    """Pool one RoI from a (C, H, W) bank; returns values and backward state.

    off, when given, is (2, k, k) in normalized units.
    """
    cc, h, w = data.shape
    x1, y1, rw, rh = _project_roi(roi, h, w)
    bin_w, bin_h = rw / k, rh / k
    sw = max(1, math.ceil(bin_w))
    sh = max(1, math.ceil(bin_h))
    n = sh * sw

    # regular sample ladder per bin; the undisplaced grid is clamped into
    # the map (border bins read border cells), displacement alone can push
    # samples outside where they contribute zero
    xs = x1 + (np.arange(k)[:, None] * bin_w
               + (np.arange(sw)[None, :] + 0.5) * (bin_w / sw)) - 0.5  # (k, sw)
    ys = y1 + (np.arange(k)[:, None] * bin_h
               + (np.arange(sh)[None, :] + 0.5) * (bin_h / sh)) - 0.5  # (k, sh)
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)

    # X, Y: (k, k, sh, sw) coordinates for bin (i, j)
    X = np.broadcast_to(xs[None, :, None, :], (k, k, sh, sw)).copy()
    Y = np.broadcast_to(ys[:, None, :, None], (k, k, sh, sw)).copy()
    if off is not None:
        X += (off[0] * rw * gamma_off)[:, :, None, None]
        Y += (off[1] * rh * gamma_off)[:, :, None, None]

    x0 = np.floor(X).astype(np.int64)
    y0 = np.floor(Y).astype(np.int64)
    fx, fy = X - x0, Y - y0

    # channel for (c, i, j): c*k^2 + i*k + j, broadcast over samples
    chx = (np.arange(c_cls)[:, None, None] * k * k
           + np.arange(k)[None, :, None] * k
           + np.arange(k)[None, None, :])[:, :, :, None, None]

    # the four corners, with outside-the-map contributions masked to zero;
    # corner values are kept for the offset gradient
    corners, cvals = [], []
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            corners.append((yc, xc, wgt * valid))
            cvals.append(data[chx, yc[None], xc[None]] * valid[None])

    samples = np.zeros((c_cls, k, k, sh, sw), dtype=data.dtype)
    for (yc, xc, wgt), cv in zip(corners, cvals):
        # cv has the validity mask folded in already; wgt carries the
        # geometric weight (also masked, and the mask is idempotent)
        samples += cv * wgt[None]
    vals = samples.sum(axis=(3, 4)) / n

    state = (k, c_cls, n, corners, cvals, chx, (fx, fy),
             (rw, rh, gamma_off))
    return vals, np.full((k, k), n, dtype=np.int64), state


def _psroi_backward_one(state, g: np.ndarray, gmaps: np.ndarray | None,
                        want_goff: bool):
    """Scatter gradients for one RoI; returns (2, k, k) offset grad or None."""
    k, c_cls, n, corners, cvals, chx, (fx, fy), (rw, rh, gamma_off) = state
    shape = (c_cls, k, k) + corners[0][0].shape[2:]
    gs = np.broadcast_to((g / n)[:, :, :, None, None], shape)
    if gmaps is not None:
        for yc, xc, wgt in corners:
            np.add.at(gmaps, (np.broadcast_to(chx, shape),
                              np.broadcast_to(yc[None], shape),
                              np.broadcast_to(xc[None], shape)),
                      gs * wgt[None])
    if not want_goff:
        return None

    v00, v01, v10, v11 = cvals  # indexed by (dy, dx)
    dvdx = (1 - fy)[None] * (v01 - v00) + fy[None] * (v11 - v10)
    dvdy = (1 - fx)[None] * (v10 - v00) + fx[None] * (v11 - v01)
    goff = np.zeros((2, k, k))
    goff[0] = (gs * dvdx).sum(axis=(0, 3, 4)) * rw * gamma_off
    goff[1] = (gs * dvdy).sum(axis=(0, 3, 4)) * rh * gamma_off
    return goff


def psroi_pool(maps: PSRoIMaps, roi: RoI,
               graph: Graph | None = None) -> PooledScores:
    """Average each class-and-position map over its dedicated RoI bin."""
    out, counts = _ps_pool_impl(maps, [roi], None, 0.0, graph)
    return PooledScores(out, counts[0])


def psroi_pool_batch(maps: PSRoIMaps, rois,
                     graph: Graph | None = None) -> Tensor4:
    """Plain position-sensitive pooling for many RoIs: (R, c_cls, k, k)."""
    return _ps_pool_impl(maps, rois, None, 0.0, graph)[0]


def deformable_psroi_pool(maps: PSRoIMaps, roi: RoI, off: OffsetField,
                          graph: Graph | None = None) -> PooledScores:
    """PSRoI pooling over bins displaced by the learned offsets (Deltap)."""
    if off.k != maps.k:
        raise DimensionError(f"offset grid {off.k} != pooling grid {maps.k}")
    out, counts = _ps_pool_impl(maps, [roi], off.offsets, off.gamma_off, graph)
    return PooledScores(out, counts[0])


def deformable_psroi_pool_batch(maps: PSRoIMaps, rois, offsets: Tensor4,
                                gamma_off: float = DEFAULT_GAMMA_OFF,
                                graph: Graph | None = None) -> Tensor4:
    """Deformable pooling for many RoIs; offsets is (R, 2, k, k)."""
    if offsets.dims != (len(rois), 2, maps.k, maps.k):
        raise DimensionError(
            f"offsets {offsets.dims} do not match {len(rois)} RoIs, k={maps.k}")
    return _ps_pool_impl(maps, rois, offsets, gamma_off, graph)[0]


def _ps_pool_impl(maps: PSRoIMaps, rois, offsets: Tensor4 | None,
                  gamma_off: float, graph: Graph | None):
    if maps.maps.n != 1:
        raise DimensionError("psroi pooling expects a single-image map bank")
    data = maps.maps.data[0]
    k, c_cls = maps.k, maps.c_cls

    vals, counts, states = [], [], []
    for r, roi in enumerate(rois):
        off_arr = None if offsets is None else offsets.data[r]
        v, cnt, st = _psroi_one(data, roi, k, c_cls, off_arr, gamma_off)
        vals.append(v)
        counts.append(cnt)
        states.append(st)
    out = np.stack(vals) if vals else np.zeros((0, c_cls, k, k),
                                               dtype=data.dtype)

    maps_t = maps.maps

    def back(g: np.ndarray) -> None:
        gmaps = np.zeros_like(maps_t.data) if maps_t.requires_grad else None
        goffs = (np.zeros_like(offsets.data)
                 if offsets is not None and offsets.requires_grad else None)
        for r, st in enumerate(states):
            go = _psroi_backward_one(
                st, g[r], None if gmaps is None else gmaps[0],
                goffs is not None)
            if goffs is not None:
                goffs[r] = go
        if gmaps is not None:
            _accum(maps_t, gmaps)
        if goffs is not None:
            _accum(offsets, goffs)

    inputs = [maps_t] if offsets is None else [maps_t, offsets]
    return _result(out, "psroi_pool", graph, inputs, back), counts


# ---------------------------------------------------------------------------
# Offset prediction branch
# ---------------------------------------------------------------------------

def predict_offsets(maps: Tensor4, roi: RoI, branch, k: int,
                    gamma_off: float = DEFAULT_GAMMA_OFF,
                    graph: Graph | None = None) -> OffsetField:
    """Run the offset branch convolution and PSRoI-pool its 2k^2 outputs.

    The pooled (1, 2, k, k) tensor is the normalized offset field for this
    RoI; the whole path is differentiable.
    """
    from .autodiff import conv2d

    if branch.out_channels != 2 * k * k:
        raise DimensionError(
            f"offset branch emits {branch.out_channels} channels, "
            f"need {2 * k * k}")
    off_maps = conv2d(maps, branch, graph)
    bank = PSRoIMaps(off_maps, k=k, c_cls=2)
    pooled = psroi_pool_batch(bank, [roi], graph)  # (1, 2, k, k)
    return OffsetField(pooled, gamma_off)


def vote(scores: PooledScores) -> np.ndarray:
    """Average the k x k grid into one score per class."""
    return scores.values.data[0].mean(axis=(1, 2))
