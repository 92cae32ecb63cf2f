"""Levelwise multigrid sweeps, damping rules, and solver convergence."""

import math

import numpy as np
import pytest

from mlfem.adapt import empty_marks, initial_masks, refine
from mlfem.assembly import apply_A_level, assemble_rhs, compute_upsilon, energy_seminorm
from mlfem.estimator import leaf_triangle_masks
from mlfem.field import MultilevelField, uniform_masks, zero_field
from mlfem.mesh import ConfigurationError, build_hierarchy
from mlfem.solver import (
    SmootherConfig,
    choose_omega,
    llmg_solve,
    llmg_sweep,
    lmg_sweep,
    reference_solve,
    ssc_sweep,
    stack_vector,
)


def random_field(hier, masks, rng):
    values = []
    for k in range(hier.levels):
        img = rng.normal(size=(hier.n(k), hier.n(k))) * masks[k].active
        values.append(img)
    return MultilevelField(hier, values, masks)


def random_refined_masks(hier, rng, frac=0.35):
    """Admissible hierarchy: grow active sets by marking random leaf triangles.

    The masked sweep routes assume masks produced by refinement, where finer
    closures stay inside the coarser ones; independent per-level masks break
    that containment.
    """
    masks = initial_masks(hier)
    for _ in range(hier.levels - 1):
        leaves = leaf_triangle_masks(hier, masks)
        ms = empty_marks(hier)
        for k in range(hier.levels - 1):
            pick = (rng.random(leaves[k].shape) < frac).astype(np.uint8)
            ms.marks[k][...] = pick & leaves[k]
        if ms.count() == 0:
            for k in range(hier.levels - 1):
                idx = np.argwhere(leaves[k])
                if len(idx):
                    q, a, b = idx[rng.integers(len(idx))]
                    ms.marks[k][q, a, b] = 1
                    break
        masks = refine(masks, ms, hier)
    return masks


def level_matrix(hier, diff, k):
    """Dense level stiffness over interior nodes, column by column."""
    n = hier.n(k)
    cols = []
    for a in range(1, n - 1):
        for b in range(1, n - 1):
            e = np.zeros((n, n))
            e[a, b] = 1.0
            out = apply_A_level(e, diff.upsilon[k], hier.h(k))
            cols.append(out[1:-1, 1:-1].ravel())
    return np.array(cols).T


def single_dof_setup():
    hier = build_hierarchy(3, 1)
    diff = compute_upsilon(hier, np.ones((3, 3)))
    rhs = assemble_rhs(hier, np.ones((3, 3)))
    return hier, diff, rhs


# ---------------------------------------------------------------- damping


def test_gershgorin_single_dof_quarter():
    hier, diff, _ = single_dof_setup()
    sm = choose_omega(diff, uniform_masks(hier), "gershgorin")
    assert sm.omegas == (0.25,)


def test_gershgorin_below_inverse_lambda_max():
    hier = build_hierarchy(5, 2)
    rng = np.random.default_rng(5)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(9, 9)))
    masks = uniform_masks(hier)
    gersh = choose_omega(diff, masks, "gershgorin")
    power = choose_omega(diff, masks, "power-iteration")
    for k in range(2):
        lam = np.linalg.eigvalsh(level_matrix(hier, diff, k)).max()
        assert gersh.omegas[k] <= 1.0 / lam + 1e-12
        assert power.omegas[k] <= 1.0 / lam + 1e-12
        assert power.omegas[k] >= 1.0 / (1.05 * lam)


def test_smoothing_step_contracts_energy():
    hier = build_hierarchy(5, 1)
    rng = np.random.default_rng(13)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(5, 5)))
    omega = choose_omega(diff, uniform_masks(hier), "gershgorin").omegas[0]
    mat = level_matrix(hier, diff, 0)
    step = np.eye(mat.shape[0]) - omega * mat
    for _ in range(100):
        w = rng.normal(size=mat.shape[0])
        before = w @ mat @ w
        after = (step @ w) @ mat @ (step @ w)
        assert after <= before * (1.0 + 1e-12)


def test_omega_rule_validation():
    hier, diff, _ = single_dof_setup()
    masks = uniform_masks(hier)
    with pytest.raises(ConfigurationError):
        choose_omega(diff, masks, "newton")
    with pytest.raises(ConfigurationError):
        choose_omega(diff, masks, "gershgorin", omega=0.1)
    with pytest.raises(ConfigurationError):
        choose_omega(diff, masks, "fixed")
    with pytest.warns(RuntimeWarning):
        choose_omega(diff, masks, "fixed", omega=10.0)


# ---------------------------------------------------------------- sweeps


def test_single_dof_sweep_trajectory():
    hier, diff, rhs = single_dof_setup()
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "fixed", omega=0.125)
    # one Richardson visit: omega * b
    u = zero_field(hier, masks)
    ssc_sweep(u, rhs, diff, sm, [0])
    assert u.values[0][1, 1] == pytest.approx(0.03125, abs=1e-15)
    # a full sweep visits the single level twice
    u = zero_field(hier, masks)
    llmg_sweep(u, rhs, diff, sm)
    assert u.values[0][1, 1] == pytest.approx(0.046875, abs=1e-15)


def test_single_level_sweep_is_richardson():
    hier = build_hierarchy(9, 1)
    rng = np.random.default_rng(17)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(9, 9)))
    rhs = assemble_rhs(hier, rng.normal(size=(9, 9)))
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    u = random_field(hier, masks, rng)
    manual = u.values[0] + sm.omegas[0] * (
        rhs.images[0] - apply_A_level(u.values[0], diff.upsilon[0], hier.h(0))
    ) * masks[0].active
    ssc_sweep(u, rhs, diff, sm, [0])
    assert np.allclose(u.values[0], manual, rtol=1e-14, atol=1e-15)


def test_exact_solution_is_fixed_point():
    rng = np.random.default_rng(19)
    for levels, mask_fn in ((1, None), (2, None), (3, "random")):
        hier = build_hierarchy(3, levels)
        nf = hier.n(levels - 1)
        diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(nf, nf)))
        rhs = assemble_rhs(hier, np.ones((nf, nf)))
        if mask_fn is None:
            masks = uniform_masks(hier)
        else:
            masks = random_refined_masks(hier, rng)
        sm = choose_omega(diff, masks, "gershgorin")
        star = reference_solve(masks, diff, rhs)
        before = [v.copy() for v in star.values]
        scale = max(max(abs(v).max() for v in before), 1.0)
        llmg_sweep(star, rhs, diff, sm)
        for k in range(levels):
            assert np.allclose(star.values[k], before[k], rtol=0, atol=1e-11 * scale)


def test_zero_load_stays_zero():
    hier = build_hierarchy(3, 2)
    diff = compute_upsilon(hier, np.ones((5, 5)))
    rhs = assemble_rhs(hier, np.zeros((5, 5)))
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    u, report = llmg_solve(zero_field(hier, masks), rhs, diff, sm)
    assert report.converged and report.iterations <= 1
    assert all(not v.any() for v in u.values)


def test_llmg_sweep_equals_lmg_sweep():
    # the fused carried-term sweep is successive subspace correction in the
    # down-then-up level order
    hier = build_hierarchy(3, 3)
    rng = np.random.default_rng(23)
    for _ in range(5):
        diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(9, 9)))
        rhs = assemble_rhs(hier, rng.normal(size=(9, 9)))
        masks = random_refined_masks(hier, rng)
        sm = choose_omega(diff, masks, "gershgorin")
        ua = random_field(hier, masks, rng)
        ub = ua.copy()
        for _ in range(3):
            llmg_sweep(ua, rhs, diff, sm)
            lmg_sweep(ub, rhs, diff, sm)
        for k in range(3):
            assert np.allclose(ua.values[k], ub.values[k], rtol=1e-12, atol=1e-12)


def test_sweep_input_validation():
    hier = build_hierarchy(3, 2)
    diff = compute_upsilon(hier, np.ones((5, 5)))
    rhs = assemble_rhs(hier, np.ones((5, 5)))
    masks = uniform_masks(hier)
    u = zero_field(hier, masks)
    with pytest.raises(ConfigurationError):
        llmg_sweep(u, rhs, diff, SmootherConfig("fixed", (0.1,)))
    with pytest.raises(ConfigurationError):
        ssc_sweep(u, rhs, diff, SmootherConfig("fixed", (0.1, 0.1)), [2])


# ---------------------------------------------------------------- solves


def test_single_dof_solve():
    hier, diff, rhs = single_dof_setup()
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "fixed", omega=0.125)
    u, report = llmg_solve(zero_field(hier, masks), rhs, diff, sm, tol=1e-12)
    assert report.converged and report.iterations <= 60
    assert u.values[0][1, 1] == pytest.approx(0.0625, rel=1e-10)


def test_solve_matches_direct_three_levels():
    hier = build_hierarchy(5, 3)
    rng = np.random.default_rng(29)
    nf = hier.n(2)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(nf, nf)))
    rhs = assemble_rhs(hier, np.ones((nf, nf)))
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    star = reference_solve(masks, diff, rhs)
    u, report = llmg_solve(zero_field(hier, masks), rhs, diff, sm, tol=1e-12)
    assert report.converged
    delta = u.copy()
    for k in range(3):
        delta.values[k] = u.values[k] - star.values[k]
    rel = energy_seminorm(delta, diff) / energy_seminorm(star, diff)
    assert rel <= 1e-8


def test_iteration_count_obeys_contraction_bound():
    hier = build_hierarchy(5, 2)
    rng = np.random.default_rng(31)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(9, 9)))
    rhs = assemble_rhs(hier, np.ones((9, 9)))
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    tol = 1e-8
    u, report = llmg_solve(zero_field(hier, masks), rhs, diff, sm, tol=tol)
    assert report.converged
    hist = report.residual_history
    chat = max(hist[i + 1] / hist[i] for i in range(len(hist) - 1))
    assert 0.0 < chat < 1.0
    bound = math.ceil(math.log(1.0 / tol) / math.log(1.0 / chat)) + 2
    assert report.iterations <= bound


def test_contraction_below_one_and_degrades_with_depth():
    rates = []
    for levels in range(1, 6):
        hier = build_hierarchy(3, levels)
        nf = hier.n(levels - 1)
        diff = compute_upsilon(hier, np.ones((nf, nf)))
        rhs = assemble_rhs(hier, np.ones((nf, nf)))
        masks = uniform_masks(hier)
        sm = choose_omega(diff, masks, "gershgorin")
        star = reference_solve(masks, diff, rhs)
        u, report = llmg_solve(
            zero_field(hier, masks), rhs, diff, sm, tol=1e-10, exact=star
        )
        assert report.converged
        tail = report.contraction_estimates[-5:]
        rate = float(np.median(tail))
        assert rate < 1.0
        rates.append(rate)
    for a, b in zip(rates, rates[1:]):
        assert b >= a - 1e-3


def test_solve_rejects_bad_tolerance():
    hier, diff, rhs = single_dof_setup()
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    with pytest.raises(ConfigurationError):
        llmg_solve(zero_field(hier, masks), rhs, diff, sm, tol=0.0)


def test_report_histories_are_consistent():
    hier = build_hierarchy(3, 2)
    rng = np.random.default_rng(37)
    diff = compute_upsilon(hier, rng.uniform(0.5, 2.0, size=(5, 5)))
    rhs = assemble_rhs(hier, np.ones((5, 5)))
    masks = uniform_masks(hier)
    sm = choose_omega(diff, masks, "gershgorin")
    star = reference_solve(masks, diff, rhs)
    u, report = llmg_solve(zero_field(hier, masks), rhs, diff, sm, exact=star)
    assert len(report.residual_history) == report.iterations + 1
    assert len(report.energy_error_history) == report.iterations + 1
    assert all(e >= 0.0 for e in report.energy_error_history)
    # monotone decrease in energy for a symmetric positive smoother
    hist = report.energy_error_history
    assert all(b <= a * (1.0 + 1e-12) for a, b in zip(hist, hist[1:]))
