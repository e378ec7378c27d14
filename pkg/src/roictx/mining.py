"""Context mining around object RoIs.

Given an object RoI, a 3x3 grid of equally-shaped cells is centered on
it.  In each of the 8 surrounding cells a pool of candidate boxes is
enumerated around the cell's anchor (the centered half-width/half-height
box), constrained in size and in IoU with that anchor.  A single linear
scorer, shared across all cells and all RoIs, scores every candidate's
pooled features; the argmax candidate per cell is kept and its map is
concatenated with the object map into one (9*D) x ph x pw feature.

Fixed (non-mined) context layouts - enlarged local box, whole-map global
box, 4- and 8-neighbor cells - are provided for comparison under the
same concatenation contract.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateBoxError, ShapeError
from .geometry import Box
from .roi_ops import RangeMaxTable, RoIMap, roi_align, roi_align_backward, \
    roi_pool, roi_pool_backward
from .tensor import concat_channels

DIRECTIONS = ("left-top", "top", "right-top", "left", "right",
              "left-bottom", "bottom", "right-bottom")

_OFFSETS = {"left-top": (-1, -1), "top": (0, -1), "right-top": (1, -1),
            "left": (-1, 0), "right": (1, 0),
            "left-bottom": (-1, 1), "bottom": (0, 1), "right-bottom": (1, 1)}

NEIGH4_DIRECTIONS = tuple(d for d in DIRECTIONS
                          if d in ("top", "left", "right", "bottom"))

VARIANTS = ("none", "local", "global", "neigh4", "neigh8")

FALLBACK = -1


@dataclass(frozen=True)
class ContextLayout:
    """The 3x3 grid centered at an object RoI.

    Every cell shares the object RoI's width and height; cell centers sit
    at the object center displaced by (+-w, 0), (0, +-h), (+-w, +-h).
    Each cell's anchor is centered in the cell with half its width and
    height.
    """

    object_roi: Box
    cells: dict[str, Box]
    anchors: dict[str, Box]


def build_layout(r: Box) -> ContextLayout:
    if r.w <= 0.0 or r.h <= 0.0:
        raise DegenerateBoxError(f"object RoI has no area: {r}")
    cells = {}
    anchors = {}
    for direction in DIRECTIONS:
        mx, my = _OFFSETS[direction]
        cx = r.cx + mx * r.w
        cy = r.cy + my * r.h
        cells[direction] = Box.from_center(cx, cy, r.w, r.h)
        anchors[direction] = Box.from_center(cx, cy, 0.5 * r.w, 0.5 * r.h)
    return ContextLayout(r, cells, anchors)


@dataclass(frozen=True)
class CandidateGridSpec:
    """Discretization of the candidate pool within a cell.

    Candidate centers sit at the cell center displaced by offset_fracs of
    the cell width/height; candidate sizes are size_fracs of the cell
    width/height (independently per axis).  Candidates must keep a short
    edge of at least short_edge_frac of the cell's short edge, a long
    edge no longer than the cell's long edge, and IoU with the cell
    anchor of at least anchor_iou_min.  include_anchor=False drops the
    anchor from the pool (used to pin pools to explicit candidates, e.g.
    forcing the full cell).
    """

    offset_fracs: tuple = (-0.25, -0.125, 0.0, 0.125, 0.25)
    size_fracs: tuple = (1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0)
    anchor_iou_min: float = 0.3
    short_edge_frac: float = 1.0 / 3.0
    include_anchor: bool = True

    @property
    def raw_count(self) -> int:
        return (len(self.offset_fracs) * len(self.size_fracs)) ** 2


DEFAULT_GRID = CandidateGridSpec()


@dataclass
class CandidatePool:
    """Filtered candidates for one cell; the anchor, when included, is first."""

    cell_direction: str
    candidates: list
    anchor_index: int


def _constraints_ok(x1, y1, x2, y2, ax1, ay1, ax2, ay2, cell_w: float,
                    cell_h: float, grid: CandidateGridSpec) -> np.ndarray:
    """Vectorized check of the three pool constraints for corner arrays;
    (ax1..ay2) are the anchor's corners."""
    w = x2 - x1
    h = y2 - y1
    short = np.minimum(w, h)
    long = np.maximum(w, h)
    ok = short >= grid.short_edge_frac * min(cell_w, cell_h)
    ok &= long <= max(cell_w, cell_h)
    iw = np.minimum(x2, ax2) - np.maximum(x1, ax1)
    ih = np.minimum(y2, ay2) - np.maximum(y1, ay1)
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = w * h + (ax2 - ax1) * (ay2 - ay1) - inter
    iou_vals = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    ok &= iou_vals >= grid.anchor_iou_min
    return ok


_GRID_COMBOS: dict = {}


def _grid_combos(grid: CandidateGridSpec):
    """Cell-relative (oy, ox, sh, sw) flat arrays of the raw grid, in the
    documented nested order; cached per spec."""
    combos = _GRID_COMBOS.get(grid)
    if combos is None:
        offs = np.asarray(grid.offset_fracs, dtype=np.float64)
        sizes = np.asarray(grid.size_fracs, dtype=np.float64)
        oy, ox, sh, sw = np.meshgrid(offs, offs, sizes, sizes, indexing="ij")
        combos = (oy.reshape(-1).copy(), ox.reshape(-1).copy(),
                  sh.reshape(-1).copy(), sw.reshape(-1).copy())
        _GRID_COMBOS[grid] = combos
    return combos


def _candidate_arrays(cell: Box, grid: CandidateGridSpec,
                      map_bounds) -> np.ndarray | None:
    """Core of the pool pipeline; returns the stored pool as an (K, 4)
    x1,y1,x2,y2 float64 array (anchor first when included), or None for
    the boundary fallback."""
    cw, ch = cell.w, cell.h
    if cw <= 0.0 or ch <= 0.0:
        return None
    anchor = Box.from_center(cell.cx, cell.cy, 0.5 * cw, 0.5 * ch)

    stored_anchor = anchor
    if map_bounds is not None:
        width, height = map_bounds
        stored_anchor = anchor.clip(width, height)
        if stored_anchor.area <= 0.0 or (stored_anchor.short_edge
                                         < grid.short_edge_frac * min(cw, ch)):
            return None

    oy, ox, sh, sw = _grid_combos(grid)
    cx = cell.cx + ox * cw
    cy = cell.cy + oy * ch
    w = sw * cw
    h = sh * ch
    x1 = cx - 0.5 * w
    y1 = cy - 0.5 * h
    x2 = cx + 0.5 * w
    y2 = cy + 0.5 * h

    keep = _constraints_ok(x1, y1, x2, y2, anchor.x1, anchor.y1, anchor.x2,
                           anchor.y2, cw, ch, grid)
    if map_bounds is not None:
        width, height = map_bounds
        x1 = np.clip(x1, 0.0, width)
        x2 = np.clip(x2, 0.0, width)
        y1 = np.clip(y1, 0.0, height)
        y2 = np.clip(y2, 0.0, height)
        keep &= (x2 - x1 > 0.0) & (y2 - y1 > 0.0)
        keep &= _constraints_ok(x1, y1, x2, y2, stored_anchor.x1,
                                stored_anchor.y1, stored_anchor.x2,
                                stored_anchor.y2, cw, ch, grid)

    survivors = np.stack([x1[keep], y1[keep], x2[keep], y2[keep]], axis=1)
    if grid.include_anchor:
        first = np.array([[stored_anchor.x1, stored_anchor.y1,
                           stored_anchor.x2, stored_anchor.y2]])
        return np.concatenate([first, survivors], axis=0)
    if survivors.shape[0] == 0:
        return None
    return survivors


def candidate_pool_for_cell(cell: Box, grid: CandidateGridSpec, map_bounds,
                            direction: str = "") -> CandidatePool | None:
    """Enumerate and filter the candidate pool of one cell.

    Raw candidates come from the offset x size grid in the documented
    nested order (oy, ox, sh, sw).  They are filtered by the three pool
    constraints against the raw anchor, clipped to map_bounds, and the
    constraints are re-checked on the clipped boxes against the stored
    (clipped) anchor, so every pool member satisfies them as stored.
    Edge lengths and IoU are always evaluated on corner coordinates
    (x2-x1, y2-y1), the same arithmetic any post-hoc re-verification of
    the stored boxes performs; candidates sitting exactly on a constraint
    boundary may therefore resolve differently at different absolute
    positions, by half-ulp rounding.

    Returns None when the anchor itself is lost to the map border (fully
    outside, or clipped below the short-edge floor): the caller then
    substitutes the object RoI's own map for this cell.
    """
    arr = _candidate_arrays(cell, grid, map_bounds)
    if arr is None:
        return None
    boxes = [Box(float(a), float(b), float(c), float(d)) for a, b, c, d in arr]
    return CandidatePool(direction, boxes, 0 if grid.include_anchor else FALLBACK)


@dataclass
class ContextScorer:
    """Linear scorer over flattened D*ph*pw RoI maps; one instance scores
    every cell of every RoI."""

    weights: np.ndarray
    bias: float = 0.0

    @staticmethod
    def zeros(d: int, ph: int, pw: int) -> "ContextScorer":
        return ContextScorer(np.zeros(d * ph * pw, dtype=np.float32), 0.0)

    def scaled(self, factor: float) -> "ContextScorer":
        return ContextScorer(self.weights * np.float32(factor),
                             float(self.bias) * factor)

    def score_flat(self, flat_feats: np.ndarray) -> np.ndarray:
        """Scores for a (K, D*ph*pw) feature matrix, computed in float64
        through einsum's fixed reduction order for run-to-run and
        thread-count determinism."""
        if flat_feats.shape[1] != self.weights.shape[0]:
            raise ShapeError(
                f"scorer expects {self.weights.shape[0]} features, "
                f"got {flat_feats.shape[1]}")
        return np.einsum("kn,n->k", flat_feats.astype(np.float64),
                         self.weights.astype(np.float64)) + float(self.bias)


def score_candidates(F: np.ndarray, pool: CandidatePool, scorer: ContextScorer,
                     ph: int, pw: int, backbone: str = "pool",
                     samples_per_bin: int = 2):
    """Score every candidate in a pool: dot(weights, flatten(map)) + bias.

    Returns (scores, maps); the per-candidate RoI maps are retained for
    selection and backward.
    """
    if not pool.candidates:
        raise ShapeError("cannot score an empty candidate pool")
    if backbone == "pool":
        maps = [roi_pool(F, b, ph, pw) for b in pool.candidates]
    elif backbone == "align":
        maps = [roi_align(F, b, ph, pw, samples_per_bin) for b in pool.candidates]
    else:
        raise ValueError(f"backbone must be pool|align, got {backbone!r}")
    flats = np.stack([m.data.reshape(-1) for m in maps])
    scores = scorer.score_flat(flats)
    return [float(s) for s in scores], maps


@dataclass(frozen=True)
class MiningConfig:
    """Knobs of the mining operator and the fixed-context variants."""

    ph: int = 7
    pw: int = 7
    backbone: str = "pool"
    samples_per_bin: int = 2
    grid: CandidateGridSpec = field(default_factory=CandidateGridSpec)
    lambda_ctx: float = 1.0
    local_scale: float = 1.5

    def __post_init__(self):
        if self.backbone not in ("pool", "align"):
            raise ValueError(f"backbone must be pool|align, got {self.backbone!r}")


DEFAULT_CONFIG = MiningConfig()


@dataclass
class SelectionRecord:
    """What was mined in one cell; index is FALLBACK when the pool was
    empty and the object map was substituted."""

    direction: str
    index: int
    box: Box | None
    roi_map: RoIMap | None
    score: float | None
    pool_size: int

    @property
    def fallback(self) -> bool:
        return self.index == FALLBACK


@dataclass
class MinedRoIFeature:
    """Concatenated (9*D) x ph x pw feature with its selection records.

    Channel block 0 is the object map; blocks 1..8 follow DIRECTIONS
    order.  Blocks of fallback cells repeat the object map.
    """

    feature: np.ndarray
    object_map: RoIMap
    selected: list[SelectionRecord]


class ContextMiner:
    """Reusable mining engine for one feature map.

    Builds the range-max table once (pool backbone), then mines any
    number of RoIs against it.  mine() is pure and thread-safe: the map,
    table, and scorer are only read.
    """

    def __init__(self, F: np.ndarray, scorer: ContextScorer,
                 config: MiningConfig = DEFAULT_CONFIG):
        if F.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got {F.shape}")
        d = F.shape[0]
        if scorer.weights.shape != (d * config.ph * config.pw,):
            raise ShapeError(
                f"scorer weight length {scorer.weights.shape} does not match "
                f"D*ph*pw = {d * config.ph * config.pw}")
        self.F = F
        self.scorer = scorer
        self.config = config
        self._table = RangeMaxTable(F) if config.backbone == "pool" else None

    def _op(self, box: Box) -> RoIMap:
        cfg = self.config
        if cfg.backbone == "pool":
            return roi_pool(self.F, box, cfg.ph, cfg.pw)
        return roi_align(self.F, box, cfg.ph, cfg.pw, cfg.samples_per_bin)

    def _pool_flat(self, xyxy: np.ndarray) -> np.ndarray:
        """Flattened (K, D*ph*pw) pooled features of already-clipped boxes."""
        cfg = self.config
        if self._table is not None:
            return self._table.pool_xyxy(xyxy, cfg.ph, cfg.pw).reshape(
                xyxy.shape[0], -1)
        maps = [self._op(Box(*row)) for row in xyxy]
        return np.stack([m.data.reshape(-1) for m in maps])

    def mine(self, r: Box) -> MinedRoIFeature:
        _, H, W = self.F.shape
        cfg = self.config
        object_map = self._op(r)
        layout = build_layout(r)
        blocks = [object_map.data]
        selected: list[SelectionRecord] = []
        for direction in DIRECTIONS:
            xyxy = _candidate_arrays(layout.cells[direction], cfg.grid, (W, H))
            if xyxy is None:
                selected.append(SelectionRecord(direction, FALLBACK, None,
                                                None, None, 0))
                blocks.append(object_map.data)
                continue
            scores = self.scorer.score_flat(self._pool_flat(xyxy))
            idx = int(np.argmax(scores))
            box = Box(*(float(v) for v in xyxy[idx]))
            roi_map = self._op(box)
            selected.append(SelectionRecord(direction, idx, box, roi_map,
                                            float(scores[idx]),
                                            xyxy.shape[0]))
            blocks.append(roi_map.data)
        return MinedRoIFeature(concat_channels(blocks), object_map, selected)


def mine_context(F: np.ndarray, r: Box, scorer: ContextScorer,
                 config: MiningConfig = DEFAULT_CONFIG) -> MinedRoIFeature:
    """Mine the 8 surrounding context RoIs of r and concatenate their maps."""
    return ContextMiner(F, scorer, config).mine(r)


def mine_many(F: np.ndarray, rois, scorer: ContextScorer,
              config: MiningConfig = DEFAULT_CONFIG, jobs: int = 1) -> list[MinedRoIFeature]:
    """Mine many RoIs against one shared table; output order matches input
    order regardless of the worker count."""
    miner = ContextMiner(F, scorer, config)
    if jobs <= 1:
        return [miner.mine(r) for r in rois]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(miner.mine, rois))


def _backward_one(grad_block: np.ndarray, roi_map: RoIMap, F_dims) -> np.ndarray:
    if roi_map.argmax is not None:
        return roi_pool_backward(grad_block, roi_map, F_dims)
    return roi_align_backward(grad_block, roi_map, F_dims)


def mine_context_backward(grad_feature: np.ndarray, mined: MinedRoIFeature,
                          F_dims, scorer: ContextScorer,
                          lambda_ctx: float = 1.0):
    """Backward pass of mine_context under frozen selections.

    Block 0's gradient routes through the object map; block i's routes
    through cell i's selected map (or the object map again for fallback
    cells).  The scorer receives a training signal through each selected
    candidate's score path: with u_i = <grad_block_i, selected_map_i>,
    grad_w accumulates lambda_ctx * u_i * flatten(map_i) and grad_b
    lambda_ctx * u_i.  Selection argmaxes themselves are treated as
    piecewise constant and pass no gradient.

    Returns (grad_F, (grad_weights, grad_bias)).
    """
    d = F_dims[0]
    ph, pw = mined.object_map.data.shape[1:]
    if grad_feature.shape != (9 * d, ph, pw):
        raise ShapeError(
            f"grad_feature shape {grad_feature.shape} != {(9 * d, ph, pw)}")
    if scorer.weights.shape != (d * ph * pw,):
        raise ShapeError("scorer shape inconsistent with mined feature")

    grad_F = np.zeros(tuple(F_dims), dtype=np.float32)
    grad_F += _backward_one(grad_feature[:d], mined.object_map, F_dims)
    grad_w = np.zeros(scorer.weights.shape[0], dtype=np.float64)
    grad_b = 0.0
    for i, rec in enumerate(mined.selected):
        block = grad_feature[(i + 1) * d:(i + 2) * d]
        if rec.fallback:
            grad_F += _backward_one(block, mined.object_map, F_dims)
            continue
        grad_F += _backward_one(block, rec.roi_map, F_dims)
        u = float(np.dot(block.reshape(-1).astype(np.float64),
                         rec.roi_map.data.reshape(-1).astype(np.float64)))
        grad_w += lambda_ctx * u * rec.roi_map.data.reshape(-1).astype(np.float64)
        grad_b += lambda_ctx * u
    return grad_F, (grad_w.astype(np.float32), float(grad_b))


def selection_indices(mined: MinedRoIFeature) -> tuple:
    """Per-cell selected candidate indices (FALLBACK included), in
    DIRECTIONS order; the routing record for stability probes."""
    return tuple(rec.index for rec in mined.selected)


def _cell_block(F: np.ndarray, cell: Box, fallback: np.ndarray,
                config: MiningConfig) -> np.ndarray:
    _, H, W = F.shape
    if cell.clip(W, H).area <= 0.0:
        return fallback
    if config.backbone == "pool":
        return roi_pool(F, cell, config.ph, config.pw).data
    return roi_align(F, cell, config.ph, config.pw, config.samples_per_bin).data


def fixed_context_variant(F: np.ndarray, r: Box, variant: str,
                          config: MiningConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Predefined (non-mined) context features for comparison.

    none   -> the object map alone, D x ph x pw
    local  -> object + the RoI enlarged local_scale about its center
    global -> object + the whole feature map
    neigh4 -> object + the top/left/right/bottom cells
    neigh8 -> object + all 8 surrounding cells in DIRECTIONS order

    Cells fully outside the map fall back to the object map, as in mining.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    _, H, W = F.shape
    if config.backbone == "pool":
        obj = roi_pool(F, r, config.ph, config.pw).data
    else:
        obj = roi_align(F, r, config.ph, config.pw, config.samples_per_bin).data
    if variant == "none":
        return obj.copy()
    if variant == "local":
        enlarged = r.scaled_about_center(config.local_scale)
        return concat_channels([obj, _cell_block(F, enlarged, obj, config)])
    if variant == "global":
        whole = Box(0.0, 0.0, float(W), float(H))
        return concat_channels([obj, _cell_block(F, whole, obj, config)])
    layout = build_layout(r)
    dirs = NEIGH4_DIRECTIONS if variant == "neigh4" else DIRECTIONS
    blocks = [obj] + [_cell_block(F, layout.cells[d], obj, config) for d in dirs]
    return concat_channels(blocks)


def mined_to_record(mined: MinedRoIFeature) -> dict:
    """JSON-ready summary of one mined RoI: the object box plus each
    cell's selected box, score, candidate index, and pool size."""
    obj = mined.object_map.source_roi
    cells = {}
    for rec in mined.selected:
        cells[rec.direction] = {
            "index": rec.index,
            "box": None if rec.box is None else
                   [rec.box.x1, rec.box.y1, rec.box.x2, rec.box.y2],
            "score": rec.score,
            "pool_size": rec.pool_size,
            "fallback": rec.fallback,
        }
    return {"object": [obj.x1, obj.y1, obj.x2, obj.y2], "cells": cells}
