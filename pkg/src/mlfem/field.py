"""Multilevel coefficient images, activity masks, and transfer operators.

A coefficient image is a plain (n, n) float64 array holding nodal FE
coefficients of one level; entry [i1, i2] belongs to the lattice node
(i1*h, i2*h).  Solution-type images are zero on the boundary (homogeneous
Dirichlet) and zero off the active set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import GridHierarchy, hat_overlap_offsets

__all__ = [
    "LevelMask",
    "MultilevelField",
    "shift",
    "make_mask",
    "full_mask",
    "empty_mask",
    "uniform_masks",
    "translate",
    "prolongate",
    "prolongate_uniform",
    "restrict_weighted",
    "restrict_uniform",
    "evaluate_field",
    "flatten_to_finest",
    "zero_field",
]


def shift(a: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """out[i1, i2] = a[i1+d1, i2+d2], zero where the source index leaves the lattice."""
    n1, n2 = a.shape[-2], a.shape[-1]
    out = np.zeros_like(a)
    dst1 = slice(max(0, -d1), n1 - max(0, d1))
    dst2 = slice(max(0, -d2), n2 - max(0, d2))
    src1 = slice(max(0, d1), n1 + min(0, d1))
    src2 = slice(max(0, d2), n2 + min(0, d2))
    out[..., dst1, dst2] = a[..., src1, src2]
    return out


@dataclass
class LevelMask:
    """Active set and its closure on one level, as 0/1 uint8 images.

    `closure` is the active set dilated by the hat-overlap stencil, clipped to
    the lattice; it may contain boundary lattice entries.  Values written at
    boundary entries are always forced to zero (interior hat functions vanish
    identically on the domain boundary), which is what `write` encodes.
    """

    active: np.ndarray
    closure: np.ndarray

    @property
    def n(self) -> int:
        return self.active.shape[0]

    def write(self) -> np.ndarray:
        """closure with the boundary frame zeroed: where operators may write."""
        w = self.closure.copy()
        w[0, :] = 0
        w[-1, :] = 0
        w[:, 0] = 0
        w[:, -1] = 0
        return w

    def copy(self) -> "LevelMask":
        return LevelMask(self.active.copy(), self.closure.copy())


def make_mask(active: np.ndarray) -> LevelMask:
    """Build a LevelMask from an active 0/1 image, computing the closure."""
    active = np.ascontiguousarray(active, dtype=np.uint8)
    closure = np.zeros_like(active)
    for d1, d2 in hat_overlap_offsets():
        closure |= shift(active, d1, d2)
    return LevelMask(active=active, closure=closure)


def full_mask(hierarchy: GridHierarchy, level: int) -> LevelMask:
    return make_mask(hierarchy.interior_mask(level))


def empty_mask(hierarchy: GridHierarchy, level: int) -> LevelMask:
    n = hierarchy.n(level)
    z = np.zeros((n, n), dtype=np.uint8)
    return LevelMask(active=z, closure=z.copy())


def uniform_masks(hierarchy: GridHierarchy) -> list[LevelMask]:
    """Full interior active sets on every level."""
    return [full_mask(hierarchy, k) for k in range(hierarchy.levels)]


@dataclass
class MultilevelField:
    """Per-level coefficient images with their activity masks.

    Represents v = sum over levels k and active nodes i of values[k][i] *
    hat_i^k.  Values are zero off the active sets and on the boundary.
    """

    hierarchy: GridHierarchy
    values: list[np.ndarray]
    masks: list[LevelMask]

    @property
    def levels(self) -> int:
        return self.hierarchy.levels

    def copy(self) -> "MultilevelField":
        return MultilevelField(
            self.hierarchy,
            [v.copy() for v in self.values],
            self.masks,
        )

    def dof_count(self) -> int:
        return int(sum(int(m.active.sum()) for m in self.masks))


def zero_field(hierarchy: GridHierarchy, masks: list[LevelMask]) -> MultilevelField:
    values = [np.zeros((hierarchy.n(k), hierarchy.n(k))) for k in range(hierarchy.levels)]
    return MultilevelField(hierarchy, values, masks)


def translate(image: np.ndarray, mask: LevelMask) -> np.ndarray:
    """Masked translation stack: out[t, i] = image[i + p_t] * active[i].

    Channel 0 (offset (0,0)) is the masked image itself.
    """
    if image.shape != mask.active.shape:
        raise ValueError(f"image {image.shape} vs mask {mask.active.shape}")
    offsets = hat_overlap_offsets()
    act = mask.active.astype(image.dtype)
    out = np.empty((len(offsets),) + image.shape, dtype=image.dtype)
    for t, (d1, d2) in enumerate(offsets):
        out[t] = shift(image, d1, d2) * act
    return out


def _interp(coarse: np.ndarray) -> np.ndarray:
    """Nodal interpolation from an n-grid onto the (2n-1)-grid, no masks."""
    n = coarse.shape[0]
    nf = 2 * n - 1
    fine = np.zeros((nf, nf), dtype=coarse.dtype)
    fine[0::2, 0::2] = coarse
    fine[1::2, 0::2] = 0.5 * (coarse[:-1, :] + coarse[1:, :])
    fine[0::2, 1::2] = 0.5 * (coarse[:, :-1] + coarse[:, 1:])
    fine[1::2, 1::2] = 0.5 * (coarse[:-1, :-1] + coarse[1:, 1:])
    return fine


def _interp_t(fine: np.ndarray) -> np.ndarray:
    """Exact transpose of _interp."""
    c = fine[0::2, 0::2].copy()
    mid_x = fine[1::2, 0::2]
    c[:-1, :] += 0.5 * mid_x
    c[1:, :] += 0.5 * mid_x
    mid_y = fine[0::2, 1::2]
    c[:, :-1] += 0.5 * mid_y
    c[:, 1:] += 0.5 * mid_y
    mid_d = fine[1::2, 1::2]
    c[:-1, :-1] += 0.5 * mid_d
    c[1:, 1:] += 0.5 * mid_d
    return c


def prolongate_uniform(coarse: np.ndarray) -> np.ndarray:
    """Uniform (unmasked) prolongation: nodal interpolation onto the next level."""
    return _interp(coarse)


def restrict_uniform(fine: np.ndarray) -> np.ndarray:
    """Transpose of prolongate_uniform."""
    return _interp_t(fine)


def prolongate(coarse: np.ndarray, coarse_mask: LevelMask, fine_mask: LevelMask) -> np.ndarray:
    """Masked prolongation P_k: interpolate, then keep only the fine closure.

    Weight 1 at the coincident fine node, 1/2 at the six edge-midpoint
    neighbors, 0 at the anti-diagonal fine nodes.  Input entries off the
    coarse closure are ignored; the output is multiplied by the fine closure
    (with the Dirichlet boundary zeroed).
    """
    if 2 * coarse.shape[0] - 1 != fine_mask.n:
        raise ValueError("fine mask is not one level below the coarse image")
    v = coarse * coarse_mask.write()
    return _interp(v) * fine_mask.write()


def restrict_weighted(fine: np.ndarray, coarse_mask: LevelMask, fine_mask: LevelMask) -> np.ndarray:
    """Weighted restriction P_k^T: the exact transpose of prolongate."""
    if 2 * coarse_mask.n - 1 != fine.shape[0]:
        raise ValueError("coarse mask is not one level above the fine image")
    w = fine * fine_mask.write()
    return _interp_t(w) * coarse_mask.write()


def _eval_level(image: np.ndarray, h: float, pts: np.ndarray) -> np.ndarray:
    """Piecewise-linear evaluation of one level's nodal image at points (m, 2)."""
    n = image.shape[0]
    cx = pts[:, 0] / h
    cy = pts[:, 1] / h
    i1 = np.clip(np.floor(cx).astype(int), 0, n - 2)
    i2 = np.clip(np.floor(cy).astype(int), 0, n - 2)
    fx = cx - i1
    fy = cy - i2
    a = image[i1, i2]
    b = image[i1 + 1, i2 + 1]
    c = image[i1, i2 + 1]
    d = image[i1 + 1, i2]
    upper = fx <= fy
    out = np.where(
        upper,
        a + (b - c) * fx + (c - a) * fy,
        a + (d - a) * fx + (b - d) * fy,
    )
    return out


def evaluate_field(field: MultilevelField, points) -> np.ndarray:
    """Evaluate the multilevel function at points inside the unit square."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("points must be (m, 2)")
    if np.any(pts < -1e-14) or np.any(pts > 1 + 1e-14):
        raise ValueError("points must lie in the unit square")
    total = np.zeros(pts.shape[0])
    for k in range(field.levels):
        total += _eval_level(field.values[k], field.hierarchy.h(k), pts)
    return total


def flatten_to_finest(field: MultilevelField) -> np.ndarray:
    """Coefficients on the finest level of the summed multilevel function.

    Uses the uniform prolongation chain (no masks): acc_{k+1} = interp(acc_k)
    + values_{k+1}; exact because nodal interpolation of a coarse hat onto the
    next grid reproduces it.
    """
    acc = field.values[0].copy()
    for k in range(1, field.levels):
        acc = _interp(acc) + field.values[k]
    return acc
