import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htquant import solver
from htquant.errors import (
    AlphaBelowGmin,
    BudgetTooSmall,
    GammaOutOfRange,
    InputError,
    InvalidEta,
    InvalidK,
    NoConvergence,
)
from htquant.tail import BodyTailDensity, DensityHistogram, PowerLawTail
from htquant.verify import bias_quadrature, lattice, random_histogram

UNI, NON, BIS = solver.UNIFORM, solver.NONUNIFORM, solver.BISCALED


def two_level(k, alpha, p1, p2):
    """Symmetric histogram with one-sided density p1 on |g| < k alpha and p2 beyond."""
    b = k * alpha
    edges = np.array([-alpha, -b, b, alpha])
    mass = np.array([p2 * (alpha - b), 2 * p1 * b, p2 * (alpha - b)])
    return DensityHistogram(edges, mass / mass.sum(), symmetric=True)


def problem(**kw):
    base = dict(N=8, B=2, d=1000, sigma2=4.0, nu=1.0, eta=0.1, T=1000, F_gap=3.0)
    base.update(kw)
    return solver.ProblemSpec(**base)


class TestQU:
    def test_all_mass_inside(self):
        assert solver.q_u(2.0, DensityHistogram.uniform(-1, 1)) == 1.0

    def test_model_form(self):
        m = BodyTailDensity(PowerLawTail(4.0, 1.0, 0.5))
        assert solver.q_u(2.0, m) == pytest.approx(0.875, abs=1e-12)

    def test_boundary(self):
        m = BodyTailDensity(PowerLawTail(4.5, 0.3, 0.5))
        assert solver.q_u(0.3 * (1 + 1e-12), m) == pytest.approx(0.0, abs=1e-9)
        m = BodyTailDensity(PowerLawTail(4.5, 0.3, 0.2))
        assert solver.q_u(0.3, m) == pytest.approx(1 - 2 * 0.2)

    @pytest.mark.parametrize("alpha", [1.2, 3.0, 10.0])
    def test_closed_form(self, alpha):
        t = PowerLawTail(3.7, 1.0, 0.15)
        want = 1 - 2 * t.rho * (t.g_min / alpha) ** (t.gamma - 1)
        assert solver.q_u(alpha, BodyTailDensity(t)) == pytest.approx(want, rel=1e-12)


class TestQN:
    def test_uniform_equality(self):
        h = DensityHistogram.uniform(-0.7, 0.7)
        assert solver.q_n(0.7, h) == pytest.approx(1.0, abs=1e-12)
        assert solver.q_n(0.7, h) == pytest.approx(solver.q_u(0.7, h), abs=1e-12)

    def test_two_level_closed_form(self):
        k, alpha, p1, p2 = 0.3, 2.0, 0.9, 0.1
        h = two_level(k, alpha, p1, p2)
        c = 1 / (2 * (p1 * k * alpha + p2 * (1 - k) * alpha))
        integral = 2 * ((c * p1) ** (1 / 3) * k * alpha + (c * p2) ** (1 / 3) * (1 - k) * alpha)
        assert solver.q_n(alpha, h) == pytest.approx(integral ** 3 / (4 * alpha ** 2), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 1.5))
    def test_holder(self, seed, frac):
        h = random_histogram(np.random.default_rng(seed))
        a = frac * h.edges[-1]
        assert solver.q_n(a, h) <= solver.q_u(a, h) + 1e-12
        assert solver.q_u(a, h) <= 1 + 1e-12


class TestQB:
    def test_k_to_one(self):
        h = BodyTailDensity(PowerLawTail(4.0, 0.5, 0.1)).histogram(3.0)
        assert solver.q_b(1.0, 1 - 1e-9, h) == pytest.approx(solver.q_u(1.0, h), rel=1e-5)

    def test_uniform_half(self):
        h = DensityHistogram.uniform(-1, 1)
        for a in (0.5, 1.0):
            assert solver.q_b(a, 0.5, h) == pytest.approx(solver.q_u(a, h), rel=1e-12)

    @pytest.mark.parametrize("k", [0.0, 1.0, -0.2, 1.5])
    def test_invalid_k(self, k):
        with pytest.raises(InvalidK):
            solver.q_b(1.0, k, DensityHistogram.uniform(-1, 1))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 1.5))
    def test_minimised_below_qu(self, seed, frac):
        h = random_histogram(np.random.default_rng(seed))
        a = frac * h.edges[-1]
        k, q = solver.best_k(a, h)
        assert 0 < k < 1
        assert q <= solver.q_u(a, h) + 1e-12 <= 1 + 2e-12


class TestSplit:
    def test_equal_densities(self):
        sa, sb = solver.biscaled_split_real(10, 0.5, 1.0, 1.0)
        assert sa == pytest.approx(5) and sb == pytest.approx(5)

    def test_empty_inner(self):
        sa, sb = solver.biscaled_split_real(7, 0.4, 0.0, 1.0)
        assert sb == 0 and sa == pytest.approx(7)

    def test_eight_to_one(self):
        sa, sb = solver.biscaled_split_real(15, 0.5, 8.0, 1.0)
        assert sb / sa == pytest.approx(2.0, rel=1e-12)

    def test_budget(self):
        with pytest.raises(BudgetTooSmall):
            solver.split_levels_biscaled(2, 0.5, DensityHistogram.uniform(-1, 1), 1.0)

    @pytest.mark.parametrize("s", [3, 7, 15, 31, 255])
    @pytest.mark.parametrize("k", [0.05, 0.3, 0.8])
    def test_integer_split(self, s, k):
        h = BodyTailDensity(PowerLawTail(4.0, 0.4, 0.1)).histogram(2.0)
        sa, sb = solver.split_levels_biscaled(s, k, h, 1.5)
        assert sa + sb == s and sa % 2 == 0 and sa >= 2 and sb >= 1


class TestSolveAlpha:
    def test_unit_q_closed_form(self):
        t = PowerLawTail(4.0, 0.01, 0.1)
        res = solver.solve_alpha(UNI, t, 7, q_mode="unit")
        assert res.converged and res.q_value == 1.0
        assert res.alpha == pytest.approx(0.01 * 4.9 ** (1 / 3), rel=1e-12)
        # the rounded figure quoted for this case
        assert res.alpha == pytest.approx(0.016993, abs=1e-5)

    @pytest.mark.parametrize("scheme", solver.SCHEMES)
    def test_stationary_with_frozen_q(self, scheme):
        # with Q held at its value at the solution, alpha minimises E_TQ exactly
        for g, rho, s in lattice():
            t = PowerLawTail(g, 1.0, rho)
            dens = BodyTailDensity(t)
            try:
                res = solver.solve_alpha(scheme, t, s, dens, q_mode="model")
            except AlphaBelowGmin:
                continue
            grid = np.geomspace(1.0001, 1e3, 10 ** 4)
            e = res.q_value * grid ** 2 / s ** 2 + solver.truncation_bias(t, grid)
            best = grid[np.argmin(e)]
            assert abs(res.alpha / best - 1) <= 0.02

    def test_fixed_point_equation(self):
        t = PowerLawTail(4.2, 0.5, 0.1)
        h = BodyTailDensity(t).histogram(20.0)
        for scheme in solver.SCHEMES:
            res = solver.solve_alpha(scheme, t, 15, h)
            assert res.alpha == pytest.approx(solver.alpha_map(t, 15, res.q_value), rel=1e-5)
            assert res.alpha > t.g_min

    @settings(max_examples=40, deadline=None)
    @given(st.floats(3.2, 5.0), st.floats(0.05, 0.4), st.sampled_from([7, 15, 31, 63]))
    def test_nonuniform_threshold_is_larger(self, gamma, rho, s):
        t = PowerLawTail(gamma, 1.0, rho)
        dens = BodyTailDensity(t)
        a_u = solver.solve_alpha(UNI, t, s, dens, q_mode="model").alpha
        a_n = solver.solve_alpha(NON, t, s, dens, q_mode="model").alpha
        assert a_n >= a_u * (1 - 1e-9)

    @pytest.mark.parametrize("scheme", solver.SCHEMES)
    def test_monotone_in_s(self, scheme):
        t = PowerLawTail(4.0, 1.0, 0.1)
        dens = BodyTailDensity(t)
        a = [solver.solve_alpha(scheme, t, s, dens, q_mode="model").alpha for s in (7, 15, 31, 63, 127)]
        assert np.all(np.diff(a) >= 0)

    @pytest.mark.parametrize("rho,s", [(0.1, 7), (0.3, 15), (0.05, 31)])
    def test_monotone_in_gamma(self, rho, s):
        a = []
        for g in (3.5, 4.0, 4.5, 5.0):
            t = PowerLawTail(g, 1.0, rho)
            a.append(solver.solve_alpha(UNI, t, s, BodyTailDensity(t), q_mode="model").alpha)
        assert np.all(np.diff(a) <= 0)

    def test_below_gmin(self):
        t = PowerLawTail(4.0, 1.0, 0.05)
        with pytest.raises(AlphaBelowGmin):
            solver.solve_alpha(UNI, t, 3, q_mode="unit")
        res = solver.solve_alpha(UNI, t, 3, q_mode="unit", floor_at_gmin=True)
        assert res.floored and res.alpha > t.g_min

    def test_no_tail_mass(self):
        with pytest.raises(AlphaBelowGmin):
            solver.solve_alpha(UNI, PowerLawTail(4.0, 1.0, 0.0), 7, q_mode="unit")

    def test_no_convergence(self):
        t = PowerLawTail(4.0, 1.0, 0.3)
        dens = BodyTailDensity(t)
        res = solver.solve_alpha(NON, t, 7, dens, q_mode="model", max_iter=1)
        assert not res.converged and res.iterations == 1
        with pytest.raises(NoConvergence) as info:
            solver.solve_alpha(NON, t, 7, dens, q_mode="model", max_iter=1, strict=True)
        assert info.value.result.alpha == res.alpha

    def test_alternate_k_mode(self):
        t = PowerLawTail(4.0, 1.0, 0.2)
        dens = BodyTailDensity(t)
        one = solver.solve_alpha(BIS, t, 15, dens, q_mode="model")
        alt = solver.solve_alpha(BIS, t, 15, dens, q_mode="model", k_mode="alternate")
        assert alt.converged
        assert alt.k == solver.best_k(alt.alpha, dens)[0]
        assert 0 < one.k < 1

    def test_bad_inputs(self):
        t = PowerLawTail(4.0, 1.0, 0.1)
        with pytest.raises(InputError):
            solver.solve_alpha("lloyd", t, 7, q_mode="unit")
        with pytest.raises(InputError):
            solver.solve_alpha(UNI, t, 7, q_mode="empirical")
        with pytest.raises(GammaOutOfRange):
            solver.solve_alpha(UNI, PowerLawTail(3.0005, 1.0, 0.1), 7, q_mode="unit")


class TestErrorTQ:
    def test_bias_example(self):
        # rho = 1 is outside the density's range; the closed form is still a formula check
        t = SimpleNamespace(gamma=4.0, g_min=1.0, rho=1.0)
        assert solver.truncation_bias(t, 1.0) == pytest.approx(2.0)

    @pytest.mark.parametrize("gamma", [3.2, 3.5, 4.0, 4.5, 5.0])
    def test_bias_quadrature(self, gamma):
        t = PowerLawTail(gamma, 0.7, 0.2)
        for alpha in (0.7 * 1.01, 1.3, 9.0):
            assert solver.truncation_bias(t, alpha) == pytest.approx(bias_quadrature(t, alpha), rel=1e-6)

    def test_quant_variance_example(self):
        t = PowerLawTail(4.0, 0.5, 0.1)
        eb = solver.error_tq(UNI, t, 1.0, 7, q_mode="unit")
        assert eb.quant_variance == pytest.approx(1 / 49)
        assert eb.e_tq == pytest.approx(eb.quant_variance + eb.trunc_bias)

    def test_large_s_limit(self):
        t = PowerLawTail(4.0, 0.5, 0.1)
        s = np.array([7, 63, 1023, 2 ** 16 - 1])
        e = []
        for x in s:
            a = solver.solve_alpha(UNI, t, int(x), q_mode="unit").alpha
            e.append(solver.error_tq(UNI, t, a, int(x), q_mode="unit").e_tq)
        assert np.all(np.diff(e) < 0)
        # optimal error decays as s^(-2(gamma-3)/(gamma-1)) when Q is fixed
        slope = np.polyfit(np.log(s), np.log(e), 1)[0]
        assert slope == pytest.approx(-2 / 3, rel=1e-9)

    def test_biscaled_terms(self):
        t = PowerLawTail(4.0, 0.5, 0.1)
        h = two_level(0.4, 1.0, 2.0, 0.5)
        eb = solver.error_tq(BIS, t, 1.0, 7, 1, 1, h, k=0.4, s_alpha=2, s_beta=5)
        p1, p2 = solver.region_densities(1.0, 0.4, h)
        want = 2 * p1 * 0.4 ** 3 / 25 + 2 * p2 * 0.6 ** 3 / 4
        assert eb.quant_variance == pytest.approx(want)

    def test_curve_matches_point(self):
        t = PowerLawTail(4.0, 0.5, 0.1)
        dens = BodyTailDensity(t)
        for scheme in (UNI, NON):
            pt = solver.error_tq(scheme, t, 1.7, 15, 10, 4, dens, "model").e_tq
            cur = solver.e_tq_curve(scheme, t, [1.7], 15, dens, 10, 4)[0]
            assert cur == pytest.approx(pt, rel=1e-12)

    def test_gamma_guard(self):
        with pytest.raises(GammaOutOfRange):
            solver.truncation_bias(PowerLawTail(3.0005, 1.0, 0.1), 2.0)


class TestConvergenceBound:
    def test_e_dsgd_limit(self):
        p = problem(T=10 ** 12)
        assert solver.e_dsgd(p) == pytest.approx(p.sigma2 / (p.N * p.B), rel=1e-9)

    def test_invalid_eta(self):
        with pytest.raises(InvalidEta):
            solver.convergence_bound(problem(eta=2.0), UNI, PowerLawTail(4, 1, 0.1), 7, q_mode="unit")

    def test_problem_validation(self):
        with pytest.raises(InputError):
            problem(N=0)
        assert problem(sigma2=0.0).sigma2 == 0.0

    @pytest.mark.parametrize("gamma", [3.5, 4.0, 5.0])
    def test_slope_with_fixed_q(self, gamma):
        t = PowerLawTail(gamma, 1.0, 0.1)
        s = np.array([7, 15, 31, 63, 127])
        terms = [solver.quant_term(t, 0.9, int(x)) for x in s]
        slope = np.polyfit(np.log(s), np.log(terms), 1)[0]
        assert slope == pytest.approx((6 - 2 * gamma) / (gamma - 1), rel=1e-9)

    def test_slope_gamma4_uniform_solution(self):
        t = PowerLawTail(4.0, 1.0, 0.1)
        dens = BodyTailDensity(t)
        s = np.array([7, 15, 31, 63, 127])
        terms = [solver.convergence_bound(problem(), UNI, t, int(x), dens, "model").extras["quant_term"] for x in s]
        slope = np.polyfit(np.log(s), np.log(terms), 1)[0]
        assert abs(slope + 2 / 3) <= 0.05 * 2 / 3

    def test_variant_gap(self):
        for g, rho, s in lattice():
            t = PowerLawTail(g, 1.0, rho)
            try:
                eb = solver.convergence_bound(problem(), UNI, t, s, BodyTailDensity(t), "model")
            except AlphaBelowGmin:
                continue
            assert abs(eb.extras["epsilon"]) <= eb.extras["epsilon_bound"] + 1e-12

    def test_ordering_and_breakdown(self):
        for g, rho, s in lattice():
            t = PowerLawTail(g, 1.0, rho)
            dens = BodyTailDensity(t)
            try:
                b = {sc: solver.convergence_bound(problem(), sc, t, s, dens, "model") for sc in solver.SCHEMES}
            except AlphaBelowGmin:
                continue
            assert b[NON].total_bound <= b[UNI].total_bound
            assert b[BIS].total_bound <= b[UNI].total_bound
            for eb in b.values():
                assert eb.e_tq == pytest.approx(eb.quant_variance + eb.trunc_bias)
                assert min(eb.quant_variance, eb.trunc_bias, eb.e_dsgd) >= 0

    def test_to_dict(self):
        eb = solver.convergence_bound(problem(), BIS, PowerLawTail(4, 1, 0.2), 7, q_mode="model")
        d = eb.to_dict()
        assert {"quant_variance", "trunc_bias", "e_tq", "e_dsgd", "total_bound", "k", "s_alpha", "s_beta"} <= set(d)
