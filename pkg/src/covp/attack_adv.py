"""Perturbation attacks on shared BEV feature maps.

Where the ray-casting fabricator edits points, this attacker edits the
feature map it transmits for intermediate fusion: a masked additive delta,
clipped per channel to the value range observed in benign traffic so the
transmitted map never leaves the plausible envelope.

The gradient of the detection loss reaches the attacker's map only through
cells where max-fusion actually selected its values, which is what makes
the black-box initialisation matter: it plants high values that both win
the fusion argmax and create (or suppress) proposals for the loss to see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox, box_iou
from .perception import (
    DetectorParams,
    FeatureMap,
    GridSpec,
    _sigmoid,
    fuse_values,
    objectness,
    objectness_backward,
    proposals_from_scores,
)

LOG_FLOOR = 1e-6  # keeps log(1 - score) finite for saturated detections
MASK_EXTEND = 0.75  # metres of slack around the target box


@dataclass
class Perturbation:
    """Masked, range-clipped additive edit of one vehicle's feature map."""

    delta: np.ndarray  # (W, H, C)
    mask: np.ndarray  # (W, H) bool; cells the attacker may touch
    clip_lo: np.ndarray  # (C,) transmitted-value floor per channel
    clip_hi: np.ndarray  # (C,) ceiling per channel

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.delta.shape[:2] != self.mask.shape:
            raise ValueError("delta and mask disagree on grid shape")
        self.clip_lo = np.asarray(self.clip_lo, dtype=float).reshape(-1)
        self.clip_hi = np.asarray(self.clip_hi, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, mask: np.ndarray, clip_lo, clip_hi, channels: int = 2):
        return cls(
            np.zeros((*mask.shape, channels)), mask, clip_lo, clip_hi
        )

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Attacked map: values + delta inside the mask, clipped to range."""
        out = values.copy()
        m = self.mask
        out[m] = np.clip(out[m] + self.delta[m], self.clip_lo, self.clip_hi)
        return out

    def copy(self) -> "Perturbation":
        return Perturbation(
            self.delta.copy(), self.mask.copy(), self.clip_lo.copy(),
            self.clip_hi.copy(),
        )


def measure_feature_range(maps: list[FeatureMap]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (min, max) observed across a corpus of benign maps."""
    if not maps:
        raise ValueError("need at least one map")
    stack = np.stack([m.values for m in maps])
    lo = stack.min(axis=(0, 1, 2))
    hi = stack.max(axis=(0, 1, 2))
    return lo, hi


def build_mask(grid: GridSpec, target: OrientedBox,
               extend: float = MASK_EXTEND) -> np.ndarray:
    """Cells whose square intersects the target box grown by `extend`."""
    geom = target.inflate(extend).footprint().shapely
    mask = np.zeros((grid.width, grid.height), dtype=bool)
    minx, miny, maxx, maxy = geom.bounds
    i0, j0 = grid.cell_of(minx, miny)
    i1, j1 = grid.cell_of(maxx, maxy)
    for i in range(max(i0, 0), min(i1 + 1, grid.width)):
        for j in range(max(j0, 0), min(j1 + 1, grid.height)):
            if geom.intersects(grid.cell_box(i, j)):
                mask[i, j] = True
    return mask


def blackbox_init(
    own_values: np.ndarray,
    grid: GridSpec,
    target: OrientedBox,
    goal: str,
    clip_lo: np.ndarray,
    clip_hi: np.ndarray,
    extend: float = MASK_EXTEND,
) -> Perturbation:
    """Query-free warm start from the fusion rule alone.

    spoof  - a dense, low blob on the target cells: near-ceiling density
             with little height, so the blob scores as an object without
             the tall-surround penalty firing on its own cells.
    remove - a tall sparse sheet over the target and its surroundings:
             ceiling height at minimal density, which drives every
             neighbouring cell's objectness down through the surround tap.
    """
    if goal not in ("spoof", "remove"):
        raise ValueError("goal must be 'spoof' or 'remove'")
    mask = build_mask(grid, target, extend)
    pert = Perturbation.zeros(mask, clip_lo, clip_hi, own_values.shape[2])
    if goal == "spoof":
        core = build_mask(grid, target, 0.0)
        crafted = np.array([clip_hi[0], min(0.4, clip_hi[1])])
        pert.delta[core] = crafted - own_values[core]
        pert.mask |= core
    else:
        crafted_c1 = clip_hi[1]
        floor_c0 = math.log(2.0)
        d = np.zeros_like(own_values)
        d[..., 0] = np.maximum(own_values[..., 0], floor_c0) - own_values[..., 0]
        d[..., 1] = crafted_c1 - own_values[..., 1]
        pert.delta[mask] = d[mask]
    return pert


def loss_and_grad(
    value_list: list[np.ndarray],
    grid: GridSpec,
    target: OrientedBox,
    goal: str,
    params: DetectorParams = DetectorParams(),
) -> tuple[float, np.ndarray]:
    """Detection loss at the target and its gradient w.r.t. map 0.

    The spoof loss is sum(IoU * log(1 - score)) over proposals overlapping
    the target (IoU held constant, scores routed through each proposal's
    argmax cell); removal negates it.  Gradients flow to the first map in
    `value_list` only where max-fusion picked its values.
    """
    fused, src = fuse_values(value_list)
    u = objectness(fused, params)
    s = _sigmoid(u)
    props = proposals_from_scores(s, grid, params.score_threshold)
    loss = 0.0
    grad_u = np.zeros_like(u)
    for p in props:
        iou = box_iou(p.box, target)
        if iou <= 0.0:
            continue
        loss += iou * math.log(max(1.0 - p.score, LOG_FLOOR))
        if 1.0 - p.score > LOG_FLOOR:
            grad_u[p.argmax_cell] += -iou * p.score
    if goal == "remove":
        loss, grad_u = -loss, -grad_u
    elif goal != "spoof":
        raise ValueError("goal must be 'spoof' or 'remove'")
    grad_vals = objectness_backward(grad_u, params)
    grad_vals[src != 0] = 0.0
    return loss, grad_vals


def pgd_step(
    pert: Perturbation,
    own_values: np.ndarray,
    other_values: list[np.ndarray],
    grid: GridSpec,
    target: OrientedBox,
    goal: str,
    params: DetectorParams = DetectorParams(),
    step: np.ndarray | None = None,
) -> tuple[Perturbation, bool]:
    """One signed-gradient descent step on the masked delta.

    Runs a single forward/backward pass through fusion and the detection
    head.  Returns the updated perturbation and a flag telling the caller
    whether the gradient inside the mask was identically zero (in which
    case the delta is returned unchanged and the caller may fall back to
    re-initialising).
    """
    if step is None:
        step = 0.25 * (pert.clip_hi - pert.clip_lo)
    attacked = pert.apply(own_values)
    _, grad = loss_and_grad([attacked, *other_values], grid, target, goal, params)
    grad = grad * pert.mask[..., None]
    if not np.any(grad):
        return pert, True
    out = pert.copy()
    moved = out.delta - np.asarray(step) * np.sign(grad)
    # keep the transmitted value inside the benign envelope
    lo = pert.clip_lo - own_values
    hi = pert.clip_hi - own_values
    out.delta = np.where(pert.mask[..., None], np.clip(moved, lo, hi), 0.0)
    return out, False


def reindex_perturbation(
    pert: Perturbation, old_grid: GridSpec, new_grid: GridSpec
) -> Perturbation:
    """Carry a perturbation onto a shifted grid (same spacing and shape).

    Cells are moved by the integer origin offset; whatever falls off the
    new grid is dropped.
    """
    if new_grid.cell_size != old_grid.cell_size:
        raise ValueError("grids must share cell size")
    if (new_grid.width, new_grid.height) != (old_grid.width, old_grid.height):
        raise ValueError("grids must share shape")
    cs = old_grid.cell_size
    fi = (old_grid.origin[0] - new_grid.origin[0]) / cs
    fj = (old_grid.origin[1] - new_grid.origin[1]) / cs
    di, dj = round(fi), round(fj)
    if abs(fi - di) > 1e-6 or abs(fj - dj) > 1e-6:
        raise ValueError("grid origins are not cell-aligned")
    out = Perturbation.zeros(
        np.zeros_like(pert.mask), pert.clip_lo, pert.clip_hi, pert.delta.shape[2]
    )
    w, h = pert.mask.shape
    src_i = slice(max(0, -di), min(w, w - di))
    dst_i = slice(max(0, di), min(w, w + di))
    src_j = slice(max(0, -dj), min(h, h - dj))
    dst_j = slice(max(0, dj), min(h, h + dj))
    out.delta[dst_i, dst_j] = pert.delta[src_i, src_j]
    out.mask[dst_i, dst_j] = pert.mask[src_i, src_j]
    return out
