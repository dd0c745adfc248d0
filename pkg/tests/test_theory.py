import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concave_lottery.numerics import make_rng
from concave_lottery.regularizers import RegularizerSpec
from concave_lottery.theory import (
    BoundCertificate,
    GridTooLarge,
    PlantedInstance,
    certify,
    grid_minimize,
    make_planted,
    random_instance,
    solve_pgd,
    solve_relaxed,
    solve_relaxed_grid,
    solve_relaxed_l1_closed_form,
    error_bound,
)


def instance(m_bar, gamma, g, lam):
    return PlantedInstance(np.asarray(m_bar, float), gamma, np.asarray(g, float), lam)


class TestPlanted:
    def test_full_support(self, rng):
        inst = make_planted(5, 5, 1.0, 0.1, rng)
        assert np.array_equal(inst.m_bar, np.ones(5))

    def test_gradient_bounded(self, rng):
        inst = make_planted(30, 7, 1.5, 0.2, rng)
        assert inst.k == 7
        assert np.max(np.abs(inst.g)) <= 0.2
        np.testing.assert_array_equal(inst.loss_grad(inst.m_bar), inst.g)

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            make_planted(3, 4, 1.0, 0.1, rng)
        with pytest.raises(ValueError):
            make_planted(3, 1, 0.0, 0.1, rng)


class TestClosedForm:
    def test_zero_gradient(self, rng):
        inst = make_planted(10, 4, 2.0, 0.3, rng, zero_gradient=True)
        expected = np.where(inst.m_bar == 1, 1 - 0.3 / 2.0, 0.0)
        np.testing.assert_allclose(solve_relaxed_l1_closed_form(inst, 0.3), expected)

    def test_one_dimensional(self):
        inst = instance([1.0], 2.0, [0.0], 0.1)
        assert solve_relaxed_l1_closed_form(inst, 0.1)[0] == pytest.approx(0.95)

    def test_off_support_is_zero(self):
        inst = instance([0.0, 0.0], 3.0, [0.0, 0.0], 0.4)
        assert np.array_equal(solve_relaxed_l1_closed_form(inst, 0.4), [0.0, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32))
    def test_optimality(self, seed):
        # no random feasible point does better
        rng = make_rng(seed)
        inst = random_instance(rng, (1, 6))
        reg = RegularizerSpec("l1", inst.lam)
        best = inst.objective(solve_relaxed_l1_closed_form(inst, inst.lam), reg)
        pts = rng.uniform(size=(200, inst.d))
        assert all(best <= inst.objective(p, reg) + 1e-12 for p in pts)


class TestGrid:
    def test_l1_close_to_closed_form(self, rng):
        inst = make_planted(4, 2, 1.7, 0.15, rng)
        reg = RegularizerSpec("l1", inst.lam)
        diff = solve_relaxed_grid(inst, reg, 0.01) - solve_relaxed_l1_closed_form(inst, inst.lam)
        assert np.max(np.abs(diff)) <= 0.02

    def test_unregularized_recovers_target(self):
        inst = instance([1.0, 0.0, 1.0], 1.0, [0.0, 0.0, 0.0], 0.0)
        assert np.array_equal(solve_relaxed_grid(inst, RegularizerSpec("log", 0.0), 0.01), inst.m_bar)

    def test_log_beats_random_points(self, rng):
        inst = make_planted(2, 1, 1.0, 0.3, rng)
        reg = RegularizerSpec("log", inst.lam)
        best = inst.objective(solve_relaxed(inst, reg), reg)
        pts = rng.uniform(size=(10_000, 2))
        vals = [inst.objective(p, reg) for p in pts]
        assert best <= min(vals) + 1e-12

    def test_separable_equals_brute_force(self, rng):
        inst = make_planted(3, 2, 1.0, 0.3, rng)
        reg = RegularizerSpec("log", inst.lam)
        brute = grid_minimize(lambda m: inst.objective(m, reg), 3, 0.05)
        np.testing.assert_array_equal(solve_relaxed_grid(inst, reg, 0.05), brute)

    def test_brute_force_refuses_large_grids(self):
        with pytest.raises(GridTooLarge, match=r"101\^9"):
            grid_minimize(lambda m: 0.0, 9, 0.01)

    def test_step_must_divide_one(self, rng):
        with pytest.raises(ValueError):
            solve_relaxed_grid(make_planted(2, 1, 1.0, 0.1, rng), RegularizerSpec("l1", 0.1), 0.3)

    def test_pgd_refinement_not_worse(self, rng):
        for _ in range(20):
            inst = random_instance(rng, (2, 6))
            reg = RegularizerSpec("log", inst.lam)
            grid = solve_relaxed_grid(inst, reg)
            assert inst.objective(solve_relaxed(inst, reg), reg) <= inst.objective(grid, reg)


class TestCertify:
    def test_bound_arithmetic(self):
        assert error_bound(0.1, 4, 2.0) == pytest.approx(0.4)

    def test_exact_recovery_passes_everything(self, rng):
        inst = make_planted(6, 3, 2.0, 0.05, rng)
        cert = certify(inst, RegularizerSpec("log", inst.lam), inst.m_bar)
        assert cert.error == 0.0 and cert.phi == 0.0
        assert cert.bound_holds and cert.reduced_holds
        assert cert.recovery_applicable and cert.recovery_holds

    def test_l1_has_no_reduced_verdict(self, rng):
        inst = make_planted(6, 3, 2.0, 0.05, rng)
        cert = certify(inst, RegularizerSpec("l1", inst.lam), solve_relaxed_l1_closed_form(inst, inst.lam))
        assert cert.reduced_holds is None
        assert cert.row()[8] == ""

    def test_non_binary_log_solution_has_positive_gap(self, rng):
        seen = 0
        for _ in range(50):
            inst = random_instance(rng, (2, 6))
            reg = RegularizerSpec("log", inst.lam)
            m = solve_relaxed(inst, reg)
            cert = certify(inst, reg, m)
            if np.any((m > 1e-9) & (m < 1 - 1e-9)):
                seen += 1
                assert cert.phi > 0
        assert seen > 0

    def test_infeasible(self, rng):
        inst = make_planted(3, 1, 1.0, 0.1, rng)
        with pytest.raises(ValueError):
            certify(inst, RegularizerSpec("l1", 0.1), [0.0, 1.5, 0.0])
        with pytest.raises(ValueError):
            certify(inst, RegularizerSpec("l1", 0.1), [0.0, 1.0])

    def test_row_width(self, rng):
        inst = make_planted(3, 1, 1.0, 0.1, rng)
        cert = certify(inst, RegularizerSpec("l1", 0.1), inst.m_bar)
        assert len(cert.row()) == len(BoundCertificate.CSV_HEADER)


def test_pgd_solver_agrees_on_log_when_started_at_grid(rng):
    inst = make_planted(4, 2, 3.0, 0.1, rng)
    reg = RegularizerSpec("log", inst.lam)
    start = solve_relaxed_grid(inst, reg)
    assert np.max(np.abs(solve_pgd(inst, reg, m0=start) - start)) <= 0.01
