"""Parametric diffusion problems on the unit square and sampling utilities.

The cookie problem: kappa(x, y) = 0.1 + y1 * chi_D1(x) + y2 * chi_D2(x) with
two closed disks of radius 0.15 centered at (0.75, 0.25) and (0.75, 0.75),
parameters y drawn uniformly from [0, 1]^2, and constant load f = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import RhsField, assemble_rhs, compute_upsilon
from .field import full_mask
from .mesh import GridHierarchy, build_hierarchy
from .solver import reference_solve


@dataclass(frozen=True)
class CookieProblem:
    base: float = 0.1
    centers: tuple[tuple[float, float], ...] = ((0.75, 0.25), (0.75, 0.75))
    radius: float = 0.15
    load: float = 1.0


@dataclass(frozen=True)
class SampleRng:
    """Counter-based per-sample random streams.

    Sample index i always sees the same stream for a given seed, regardless
    of how samples are batched over workers.
    """

    seed: int

    def sample_generator(self, index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(index,))
        return np.random.Generator(np.random.Philox(ss))


def kappa_at(problem: CookieProblem, y, x) -> np.ndarray:
    """Coefficient value at point(s) x for parameter pair y.

    x has shape (..., 2); disks are closed, so points exactly on a circle
    count as inside.
    """
    pts = np.asarray(x, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = np.full(pts.shape[:-1], problem.base)
    # A few ulps of slack keep the closed-disk convention observable at
    # representable boundary points like 0.75 + 0.15; no lattice node can
    # land exactly on a circle (r^2 = 9/400 is not dyadic), so the slack
    # never flips an interpolation node.
    r2 = problem.radius**2 * (1.0 + 4.0 * np.finfo(float).eps)
    for weight, center in zip(y, problem.centers):
        d2 = (pts[..., 0] - center[0]) ** 2 + (pts[..., 1] - center[1]) ** 2
        out = out + weight * (d2 <= r2)
    return float(out[0]) if scalar else out


def discretize_kappa(problem: CookieProblem, y, hierarchy: GridHierarchy) -> np.ndarray:
    """Nodal interpolant of kappa(., y) on the finest lattice."""
    coords = hierarchy.node_coords(hierarchy.levels - 1)
    return kappa_at(problem, y, coords)


def load_image(problem: CookieProblem, hierarchy: GridHierarchy) -> np.ndarray:
    """Nodal values of the (constant) load on the finest lattice."""
    n = hierarchy.n(hierarchy.levels - 1)
    return np.full((n, n), problem.load)


def sample_parameters(rng: SampleRng, count: int) -> np.ndarray:
    """(count, 2) array of i.i.d. uniform parameter pairs, one stream each."""
    out = np.empty((count, 2))
    for i in range(count):
        out[i] = rng.sample_generator(i).random(2)
    return out


def overkill_reference(
    problem: CookieProblem,
    y,
    hierarchy: GridHierarchy,
    extra_refinements: int = 2,
) -> tuple[np.ndarray, GridHierarchy]:
    """Galerkin solve on the uniformly refined finest lattice (error oracle).

    The coefficient is re-discretized on the refined lattice, so the
    reference carries its own (smaller) data error.  Returns the solution
    image and the single-level hierarchy it lives on.
    """
    n_ref = ((hierarchy.n(hierarchy.levels - 1) - 1) << extra_refinements) + 1
    ref_hier = build_hierarchy(n_ref, 1)
    kappa_ref = discretize_kappa(problem, y, ref_hier)
    diffusion_ref = compute_upsilon(ref_hier, kappa_ref)
    rhs_ref = assemble_rhs(ref_hier, load_image(problem, ref_hier))
    u_ref = reference_solve([full_mask(ref_hier, 0)], diffusion_ref, rhs_ref)
    return u_ref.values[0], ref_hier


def problem_rhs(problem: CookieProblem, hierarchy: GridHierarchy) -> RhsField:
    """Restricted load vectors for the problem's constant f."""
    return assemble_rhs(hierarchy, load_image(problem, hierarchy))
