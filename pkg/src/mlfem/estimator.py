"""Residual a posteriori error estimation on the multilevel Courant mesh.

Per triangle T the local contribution is

    eta_T^2 = h_T^2 ||f_h + div(kappa_h grad u_h)||^2_{L2(T)}
            + h_T   sum over edges K of T not on the boundary of
                    ||jump of kappa_h grad u_h . n||^2_{L2(K)}.

Everything in the integrands is piecewise polynomial (u_h and kappa_h are P1,
so the divergence term collapses to the constant grad kappa_h . grad u_h per
triangle), which gives exact closed forms on the finest level.  A coarse
triangle is the union of its four children, so coarser images follow from an
exact aggregation recurrence rather than re-integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .assembly import DiffusionField, weighted_h1_seminorm
from .field import LevelMask, MultilevelField, flatten_to_finest, prolongate_uniform
from .mesh import TRI_CHILD_OFFSETS, TRI_FOOTPRINT_OFFSETS, GridHierarchy

__all__ = [
    "EstimatorField",
    "ReliabilityReport",
    "finest_estimator_images",
    "aggregate_to_level",
    "leaf_triangle_masks",
    "estimate",
    "reliability_efficiency",
]


@dataclass
class EstimatorField:
    """Per-level estimator images over the owner lattice.

    r2[k], j2[k], eta2[k] are (2, n_k, n_k) arrays indexed by triangle type
    (T^1, T^2) and owner node; the last row/column of each image is unused
    padding (nodes there own no triangle).  tri_mask[k] marks the triangles
    of the composite mesh surfaced at level k (leaves of the refinement), and
    all three value arrays are masked by it, so every physical element is
    counted exactly once across levels.
    """

    hierarchy: GridHierarchy
    r2: list[np.ndarray]
    j2: list[np.ndarray]
    eta2: list[np.ndarray]
    tri_mask: list[np.ndarray]

    def total(self) -> float:
        return float(sum(e.sum() for e in self.eta2))

    def level_totals(self) -> list[float]:
        return [float(e.sum()) for e in self.eta2]


class ReliabilityReport(NamedTuple):
    c_rel: float
    c_eff: float
    degenerate: bool


def finest_estimator_images(
    u_flat: np.ndarray, f_values: np.ndarray, diffusion: DiffusionField
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form residual and jump images on the finest level.

    u_flat and f_values are nodal images on the finest lattice (the solution
    via `flatten_to_finest`, f by interpolation).  Returns (r2, j2), each
    (2, n, n) over owner nodes.  Edges on the domain boundary contribute 0.
    """
    hier = diffusion.hierarchy
    last = hier.levels - 1
    n = hier.n(last)
    h = hier.h(last)
    if u_flat.shape != (n, n) or f_values.shape != (n, n):
        raise ValueError("images must live on the finest lattice")
    kappa = diffusion.kappa[last]
    area = h * h / 2.0

    def corners(img):
        return img[:-1, :-1], img[1:, 1:], img[:-1, 1:], img[1:, :-1]

    ua, ub, uc, ud = corners(u_flat)
    ka, kb, kc, kd = corners(kappa)
    fa, fb, fc, fd = corners(f_values)

    # strong residual: f_h + grad(kappa_h) . grad(u_h), the gradient part
    # constant per triangle
    g1 = ((ub - uc) * (kb - kc) + (uc - ua) * (kc - ka)) / (h * h)
    g2 = ((ud - ua) * (kd - ka) + (ub - ud) * (kb - kd)) / (h * h)
    int_f1 = (area / 3.0) * (fa + fb + fc)
    int_f2 = (area / 3.0) * (fa + fd + fb)
    int_ff1 = (area / 6.0) * (fa * fa + fb * fb + fc * fc + fa * fb + fb * fc + fc * fa)
    int_ff2 = (area / 6.0) * (fa * fa + fd * fd + fb * fb + fa * fd + fd * fb + fb * fa)
    r2 = np.zeros((2, n, n))
    r2[0, : n - 1, : n - 1] = (h * h) * (int_ff1 + 2.0 * g1 * int_f1 + g1 * g1 * area)
    r2[1, : n - 1, : n - 1] = (h * h) * (int_ff2 + 2.0 * g2 * int_f2 + g2 * g2 * area)

    # normal jumps of grad(u_h) across the five edge families; kappa_h enters
    # each edge integral as (|K|/3)(k_p^2 + k_p k_q + k_q^2)
    un = u_flat
    m = n - 1
    jump_left = np.zeros((m, m))
    jump_left[1:, :] = (un[2:, 1:] - un[1:-1, 1:] - un[1:-1, :-1] + un[:-2, :-1]) / h
    w_left = (h / 3.0) * (ka * ka + ka * kc + kc * kc)

    jump_top = np.zeros((m, m))
    jump_top[:, :-1] = (un[:-1, 1:-1] - un[:-1, :-2] - un[1:, 2:] + un[1:, 1:-1]) / h
    w_top = (h / 3.0) * (kc * kc + kc * kb + kb * kb)

    jump_diag = (math.sqrt(2.0) / h) * (un[1:, 1:] - un[:-1, 1:] - un[1:, :-1] + un[:-1, :-1])
    w_diag = (math.sqrt(2.0) * h / 3.0) * (ka * ka + ka * kb + kb * kb)

    jump_bottom = np.zeros((m, m))
    jump_bottom[:, 1:] = (un[1:, 2:] - un[1:, 1:-1] - un[:-1, 1:-1] + un[:-1, :-2]) / h
    w_bottom = (h / 3.0) * (ka * ka + ka * kd + kd * kd)

    jump_right = np.zeros((m, m))
    jump_right[:-1, :] = (un[1:-1, :-1] - un[:-2, :-1] - un[2:, 1:] + un[1:-1, 1:]) / h
    w_right = (h / 3.0) * (kd * kd + kd * kb + kb * kb)

    j2 = np.zeros((2, n, n))
    j2[0, : n - 1, : n - 1] = h * (
        jump_left**2 * w_left + jump_top**2 * w_top + jump_diag**2 * w_diag
    )
    j2[1, : n - 1, : n - 1] = h * (
        jump_bottom**2 * w_bottom + jump_right**2 * w_right + jump_diag**2 * w_diag
    )
    return r2, j2


def aggregate_to_level(
    fine_r2: np.ndarray, fine_j2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One level of the exact coarse-from-fine estimator recurrence.

    A coarse triangle is the union of its four children and h doubles, so
    r2 entries sum with factor 4 (h_T^2 bookkeeping) and j2 entries with
    factor 2; the children's interior edges are legitimately retained (they
    are part of the coarse triangle's refined boundary integrals by the
    definition adopted for multilevel totals).
    """
    nf = fine_r2.shape[1]
    if fine_r2.shape != (2, nf, nf) or fine_j2.shape != (2, nf, nf):
        raise ValueError("expected (2, n, n) owner images")
    nc = (nf + 1) // 2
    if 2 * nc - 1 != nf:
        raise ValueError(f"owner image size {nf} is not refinable (need odd)")
    m = nc - 1
    r2 = np.zeros((2, nc, nc))
    j2 = np.zeros((2, nc, nc))
    for q in (1, 2):
        for qc, (d1, d2) in TRI_CHILD_OFFSETS[q]:
            sl1 = slice(d1, d1 + 2 * m, 2)
            sl2 = slice(d2, d2 + 2 * m, 2)
            r2[q - 1, :m, :m] += fine_r2[qc - 1, sl1, sl2]
            j2[q - 1, :m, :m] += fine_j2[qc - 1, sl1, sl2]
    return 4.0 * r2, 2.0 * j2


def leaf_triangle_masks(
    hierarchy: GridHierarchy, masks: list[LevelMask]
) -> list[np.ndarray]:
    """Triangles of the composite mesh, per level, as (2, n, n) binary images.

    A triangle is covered when all its next-level footprint nodes that lie in
    the domain interior are active; covered triangles pass activity to their
    four children.  Level 0 triangles are all active (the root mesh tiles the
    domain); a leaf is an active triangle that is not covered.
    """
    nlev = hierarchy.levels
    active_tri: list[np.ndarray] = []
    for k in range(nlev):
        n = hierarchy.n(k)
        a = np.zeros((2, n, n), dtype=np.uint8)
        if k == 0:
            a[:, : n - 1, : n - 1] = 1
        active_tri.append(a)

    leaves: list[np.ndarray] = [a.copy() for a in active_tri]
    for k in range(nlev - 1):
        nf = hierarchy.n(k + 1)
        m = hierarchy.n(k) - 1
        # a footprint node suffices if active or pinned on the boundary
        ok = masks[k + 1].active.astype(np.uint8) | (1 - hierarchy.interior_mask(k + 1))
        covered = np.zeros((2, m, m), dtype=np.uint8)
        for q in (1, 2):
            cov = np.ones((m, m), dtype=np.uint8)
            for d1, d2 in TRI_FOOTPRINT_OFFSETS[q]:
                cov &= ok[d1 : d1 + 2 * m : 2, d2 : d2 + 2 * m : 2]
            covered[q - 1] = cov & active_tri[k][q - 1, :m, :m]
        leaves[k][:, :m, :m] = active_tri[k][:, :m, :m] & (1 - covered)
        for q in (1, 2):
            for qc, (d1, d2) in TRI_CHILD_OFFSETS[q]:
                sl1 = slice(d1, d1 + 2 * m, 2)
                sl2 = slice(d2, d2 + 2 * m, 2)
                active_tri[k + 1][qc - 1, sl1, sl2] |= covered[q - 1]
        leaves[k + 1] = active_tri[k + 1].copy()
    return leaves


def estimate(
    u: MultilevelField,
    f_values: np.ndarray,
    diffusion: DiffusionField,
    masks: list[LevelMask],
) -> EstimatorField:
    """Estimator images for every level of the composite mesh.

    Finest images come from the closed forms on the flattened solution;
    coarser levels follow by aggregation; each level is then masked to its
    leaf triangles.
    """
    hier = u.hierarchy
    if len(masks) != hier.levels:
        raise ValueError("mask list does not match the hierarchy")
    u_flat = flatten_to_finest(u)
    raw_r2: list[np.ndarray] = [np.empty(0)] * hier.levels
    raw_j2: list[np.ndarray] = [np.empty(0)] * hier.levels
    raw_r2[-1], raw_j2[-1] = finest_estimator_images(u_flat, f_values, diffusion)
    for k in range(hier.levels - 2, -1, -1):
        raw_r2[k], raw_j2[k] = aggregate_to_level(raw_r2[k + 1], raw_j2[k + 1])
    tri_mask = leaf_triangle_masks(hier, masks)
    r2 = [raw_r2[k] * tri_mask[k] for k in range(hier.levels)]
    j2 = [raw_j2[k] * tri_mask[k] for k in range(hier.levels)]
    eta2 = [r2[k] + j2[k] for k in range(hier.levels)]
    return EstimatorField(hier, r2, j2, eta2, tri_mask)


def reliability_efficiency(
    u: MultilevelField,
    f_values: np.ndarray,
    diffusion: DiffusionField,
    masks: list[LevelMask],
    reference_image: np.ndarray,
    reference_diffusion: DiffusionField,
) -> ReliabilityReport:
    """Measured reliability/efficiency constants against an overkill solution.

    The reference lives on the finest lattice of a (typically twice-refined)
    reference hierarchy; the current solution is flattened and uniformly
    interpolated onto it.  C_rel = error_A^2 / total eta^2 and
    c_eff = max_T eta_T / error_A are diagnostics, not pass/fail gates.
    """
    est = estimate(u, f_values, diffusion, masks)
    ref_hier = reference_diffusion.hierarchy
    lifted = flatten_to_finest(u)
    while lifted.shape[0] < reference_image.shape[0]:
        lifted = prolongate_uniform(lifted)
    if lifted.shape != reference_image.shape:
        raise ValueError("reference image is not a uniform refinement of the solution lattice")
    err = reference_image - lifted
    last = ref_hier.levels - 1
    err_a = weighted_h1_seminorm(err, reference_diffusion.tri_integrals[last], ref_hier.h(last))
    total = est.total()
    if err_a == 0.0 or total == 0.0:
        return ReliabilityReport(math.nan, math.nan, True)
    eta_max = math.sqrt(max(float(e.max()) for e in est.eta2))
    return ReliabilityReport(err_a * err_a / total, eta_max / err_a, False)
