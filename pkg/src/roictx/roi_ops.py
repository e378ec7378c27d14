"""RoI pooling and RoI align, forward and backward.

Both operators turn an arbitrary box on a D x H x W feature map into a
fixed D x ph x pw map.  Pooling quantizes bin boundaries to the integer
grid and takes per-bin maxima; align samples a regular sub-grid per bin
with bilinear interpolation and averages.  Forward passes retain the
routing records (argmax indices, sample coordinates) their backward
passes need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBoxError, ShapeError
from .geometry import Box

EMPTY_BIN = -1


@dataclass
class RoIMap:
    """Fixed-size map pooled from one RoI.

    data is D x ph x pw float32.  For pooling, argmax holds per-element
    flat spatial indices y*W + x into the source map (EMPTY_BIN for empty
    bins).  For align, samples holds the clamped (y, x) sample coordinates
    per bin, shape ph x pw x S^2 x 2.
    """

    data: np.ndarray
    source_roi: Box
    map_hw: tuple[int, int]
    argmax: np.ndarray | None = field(default=None, repr=False)
    samples: np.ndarray | None = field(default=None, repr=False)


def _check_feature_map(F: np.ndarray) -> tuple[int, int, int]:
    if F.ndim != 3:
        raise ShapeError(f"feature map must be rank 3 (D,H,W), got {F.shape}")
    return F.shape


def _check_grid(ph: int, pw: int) -> None:
    if ph < 1 or pw < 1:
        raise ShapeError(f"grid extents must be >= 1, got {ph}x{pw}")


def _clipped_or_raise(r: Box, width: int, height: int) -> Box:
    clipped = r.clip(width, height)
    if clipped.area <= 0.0:
        raise DegenerateBoxError(
            f"RoI {r} has no area inside the {width}x{height} map")
    return clipped


def bin_edges(lo: float, extent: float, bins: int, limit: int):
    """Integerized bin boundaries along one axis.

    Bin i spans the continuous interval [lo + (i*extent)/bins,
    lo + ((i+1)*extent)/bins); its integer range is floor of the start to
    ceil of the end, clamped to [0, limit).
    """
    idx = np.arange(bins + 1, dtype=np.float64)
    bounds = lo + (idx * extent) / bins
    starts = np.maximum(np.floor(bounds[:-1]), 0.0).astype(np.int64)
    ends = np.minimum(np.ceil(bounds[1:]), float(limit)).astype(np.int64)
    return starts, ends


def bin_edges_batch(lo: np.ndarray, extent: np.ndarray, bins: int, limit: int):
    """bin_edges for K boxes at once; lo and extent are (K,) float64.

    Element arithmetic is identical to bin_edges, so the integer ranges
    match the scalar path bit-exactly.
    """
    idx = np.arange(bins + 1, dtype=np.float64)
    bounds = lo[:, None] + (idx[None, :] * extent[:, None]) / bins
    starts = np.maximum(np.floor(bounds[:, :-1]), 0.0).astype(np.int64)
    ends = np.minimum(np.ceil(bounds[:, 1:]), float(limit)).astype(np.int64)
    return starts, ends


def roi_pool(F: np.ndarray, r: Box, ph: int, pw: int) -> RoIMap:
    """Max-pool the RoI (clipped to the map) onto a ph x pw grid.

    Empty bins emit 0 with an EMPTY_BIN argmax sentinel; within a bin,
    max ties resolve to the lowest (y, x) in row-major order.
    """
    D, H, W = _check_feature_map(F)
    _check_grid(ph, pw)
    clipped = _clipped_or_raise(r, W, H)

    ys, ye = bin_edges(clipped.y1, clipped.h, ph, H)
    xs, xe = bin_edges(clipped.x1, clipped.w, pw, W)
    data = np.zeros((D, ph, pw), dtype=np.float32)
    argmax = np.full((D, ph, pw), EMPTY_BIN, dtype=np.int64)
    for i in range(ph):
        y0, y1 = int(ys[i]), int(ye[i])
        if y0 >= y1:
            continue
        for j in range(pw):
            x0, x1 = int(xs[j]), int(xe[j])
            if x0 >= x1:
                continue
            sub = F[:, y0:y1, x0:x1].reshape(D, -1)
            flat = sub.argmax(axis=1)
            data[:, i, j] = sub[np.arange(D), flat]
            ay = y0 + flat // (x1 - x0)
            ax = x0 + flat % (x1 - x0)
            argmax[:, i, j] = ay * W + ax
    return RoIMap(data, r, (H, W), argmax=argmax)


def roi_pool_backward(grad_out: np.ndarray, roi_map: RoIMap, F_dims) -> np.ndarray:
    """Route each output gradient to its argmax source location."""
    D, H, W = F_dims
    if roi_map.argmax is None:
        raise ShapeError("RoIMap carries no argmax records (not from roi_pool)")
    if grad_out.shape != roi_map.data.shape:
        raise ShapeError(
            f"grad shape {grad_out.shape} != map shape {roi_map.data.shape}")
    if (H, W) != roi_map.map_hw or D != roi_map.data.shape[0]:
        raise ShapeError(
            f"F_dims {tuple(F_dims)} inconsistent with map "
            f"({roi_map.data.shape[0]}, {roi_map.map_hw})")
    grad = np.zeros((D, H, W), dtype=np.float32)
    valid = roi_map.argmax >= 0
    if valid.any():
        chan = np.broadcast_to(
            np.arange(D, dtype=np.int64)[:, None, None], roi_map.argmax.shape)
        flat = chan[valid] * (H * W) + roi_map.argmax[valid]
        np.add.at(grad.reshape(-1), flat, grad_out[valid].astype(np.float32))
    return grad


def _align_sample_coords(r: Box, ph: int, pw: int, s: int,
                         H: int, W: int) -> np.ndarray:
    """Clamped (y, x) sample coordinates, shape ph x pw x s^2 x 2."""
    si = (np.arange(s, dtype=np.float64) + 0.5) / s
    ys = r.y1 + (np.arange(ph, dtype=np.float64)[:, None] + si[None, :]) * r.h / ph
    xs = r.x1 + (np.arange(pw, dtype=np.float64)[:, None] + si[None, :]) * r.w / pw
    ys = np.clip(ys, 0.0, float(H - 1))
    xs = np.clip(xs, 0.0, float(W - 1))
    grid = np.empty((ph, pw, s, s, 2), dtype=np.float64)
    grid[..., 0] = ys[:, None, :, None]
    grid[..., 1] = xs[None, :, None, :]
    return grid.reshape(ph, pw, s * s, 2)


def _bilinear_corners(samples: np.ndarray, H: int, W: int):
    """Corner indices and weights for a flat (N, 2) array of (y, x) points."""
    y = samples[:, 0]
    x = samples[:, 1]
    y0 = np.clip(np.floor(y).astype(np.int64), 0, H - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ly = y - y0
    lx = x - x0
    weights = ((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx)
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    return corners, weights


def roi_align(F: np.ndarray, r: Box, ph: int, pw: int,
              samples_per_bin: int = 2) -> RoIMap:
    """Average bilinear samples on a regular per-bin grid; no quantization.

    Bins follow the unclipped RoI; sample coordinates falling outside the
    map are clamped to the border, so boundary RoIs still produce (and
    later receive) gradient.
    """
    D, H, W = _check_feature_map(F)
    _check_grid(ph, pw)
    if samples_per_bin < 1:
        raise ShapeError(f"samples_per_bin must be >= 1, got {samples_per_bin}")
    _clipped_or_raise(r, W, H)

    samples = _align_sample_coords(r, ph, pw, samples_per_bin, H, W)
    flat = samples.reshape(-1, 2)
    corners, weights = _bilinear_corners(flat, H, W)
    acc = np.zeros((D, flat.shape[0]), dtype=np.float64)
    for (cy, cx), wgt in zip(corners, weights):
        acc += F[:, cy, cx].astype(np.float64) * wgt[None, :]
    per_bin = acc.reshape(D, ph, pw, samples_per_bin ** 2).mean(axis=3)
    return RoIMap(per_bin.astype(np.float32), r, (H, W), samples=samples)


def roi_align_backward(grad_out: np.ndarray, roi_map: RoIMap, F_dims) -> np.ndarray:
    """Distribute each sample's share of the bin gradient to its 4 corners."""
    D, H, W = F_dims
    if roi_map.samples is None:
        raise ShapeError("RoIMap carries no sample records (not from roi_align)")
    if grad_out.shape != roi_map.data.shape:
        raise ShapeError(
            f"grad shape {grad_out.shape} != map shape {roi_map.data.shape}")
    if (H, W) != roi_map.map_hw or D != roi_map.data.shape[0]:
        raise ShapeError(
            f"F_dims {tuple(F_dims)} inconsistent with map "
            f"({roi_map.data.shape[0]}, {roi_map.map_hw})")
    ph, pw, s2, _ = roi_map.samples.shape
    flat = roi_map.samples.reshape(-1, 2)
    corners, weights = _bilinear_corners(flat, H, W)
    g = np.repeat(grad_out.reshape(D, ph * pw).astype(np.float64) / s2, s2, axis=1)
    grad = np.zeros((D, H, W), dtype=np.float64)
    for (cy, cx), wgt in zip(corners, weights):
        np.add.at(grad, (slice(None), cy, cx), g * wgt[None, :])
    return grad.astype(np.float32)


class RangeMaxTable:
    """Sparse-table range-max over the spatial axes of a D x H x W map.

    Answers per-channel maxima over integer rectangles in O(1) numpy
    gathers after an O(D*H*W*logH*logW) build.  Maxima are bit-exact
    equal to direct np.max over the same rectangle, so pooled values
    computed through this table match roi_pool exactly.
    """

    def __init__(self, F: np.ndarray):
        D, H, W = _check_feature_map(F)
        self.dims = (D, H, W)
        k1 = max(1, int(np.log2(H)) + 1)
        k2 = max(1, int(np.log2(W)) + 1)
        while (1 << (k1 - 1)) > H:
            k1 -= 1
        while (1 << (k2 - 1)) > W:
            k2 -= 1
        table = np.empty((k1, k2, D, H, W), dtype=np.float32)
        table[0, 0] = F
        for b in range(1, k2):
            span = 1 << b
            prev = table[0, b - 1]
            table[0, b] = prev
            n = W - span + 1
            table[0, b, :, :, :n] = np.maximum(
                prev[:, :, :n], prev[:, :, span // 2:span // 2 + n])
        for a in range(1, k1):
            span = 1 << a
            n = H - span + 1
            for b in range(k2):
                prev = table[a - 1, b]
                table[a, b] = prev
                table[a, b, :, :n, :] = np.maximum(
                    prev[:, :n, :], prev[:, span // 2:span // 2 + n, :])
        # gather-friendly layout: row (level-a, level-b, y, x) -> D channels
        self._k2 = k2
        self._flat = np.ascontiguousarray(
            table.transpose(0, 1, 3, 4, 2).reshape(-1, D))
        # floor(log2(n)) for n = 1..max(H, W)
        self._log2 = np.zeros(max(H, W) + 1, dtype=np.int64)
        for n in range(2, max(H, W) + 1):
            self._log2[n] = self._log2[n // 2] + 1

    def query(self, y0, y1, x0, x1) -> np.ndarray:
        """Per-channel max over rectangles [y0,y1) x [x0,x1); returns (N, D).

        All four arguments are equal-length integer arrays with y1 > y0,
        x1 > x0, inside the map.
        """
        _, H, W = self.dims
        y0 = np.asarray(y0, dtype=np.int64)
        y1 = np.asarray(y1, dtype=np.int64)
        x0 = np.asarray(x0, dtype=np.int64)
        x1 = np.asarray(x1, dtype=np.int64)
        ka = self._log2[y1 - y0]
        kb = self._log2[x1 - x0]
        ya = y1 - (1 << ka)
        xb = x1 - (1 << kb)
        base = ((ka * self._k2 + kb) * H) * W
        flat = self._flat
        out = flat[base + y0 * W + x0]
        np.maximum(out, flat[base + y0 * W + xb], out=out)
        np.maximum(out, flat[base + ya * W + x0], out=out)
        np.maximum(out, flat[base + ya * W + xb], out=out)
        return out

    def pool_xyxy(self, xyxy: np.ndarray, ph: int, pw: int) -> np.ndarray:
        """Max-pool K boxes given as an (K, 4) x1,y1,x2,y2 float64 array;
        returns (K, D, ph, pw).  Uses the same bin integerization as
        roi_pool; bins must be non-empty (guaranteed for positive-area
        clipped boxes)."""
        D, H, W = self.dims
        K = xyxy.shape[0]
        ys, ye = bin_edges_batch(xyxy[:, 1], xyxy[:, 3] - xyxy[:, 1], ph, H)
        xs, xe = bin_edges_batch(xyxy[:, 0], xyxy[:, 2] - xyxy[:, 0], pw, W)
        y0 = np.repeat(ys[:, :, None], pw, axis=2).reshape(-1)
        y1 = np.repeat(ye[:, :, None], pw, axis=2).reshape(-1)
        x0 = np.repeat(xs[:, None, :], ph, axis=1).reshape(-1)
        x1 = np.repeat(xe[:, None, :], ph, axis=1).reshape(-1)
        vals = self.query(y0, y1, x0, x1)              # (K*ph*pw, D)
        return vals.reshape(K, ph, pw, D).transpose(0, 3, 1, 2)

    def pool_boxes(self, boxes, ph: int, pw: int) -> np.ndarray:
        """pool_xyxy for a sequence of Box objects."""
        xyxy = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes],
                        dtype=np.float64).reshape(len(boxes), 4)
        return self.pool_xyxy(xyxy, ph, pw)
