import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfm.schedule import (
    Schedule,
    ScheduleError,
    alpha_beta,
    beta_dot,
    coeffs,
    inverse_beta,
    log_alpha_clock,
    make_blended_argmax,
    make_linear,
    make_tabulated,
    position_schedule,
    semigroup_weight,
    time_average_weight,
)

LIN = make_linear()


@pytest.fixture(scope="module")
def blended():
    return make_blended_argmax(0.9, vocab_size=8, mc_samples=50_000, rng=np.random.default_rng(0))


def ordered_triple(rng):
    return np.sort(rng.uniform(0.0, 0.999, 3))


def simpson(f, a, b, n=1000):
    u = np.linspace(a, b, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2], w[2:-1:2] = 4, 2
    return (b - a) / (3 * n) * np.dot(w, f(u))


class TestLinear:
    def test_endpoints(self):
        assert alpha_beta(LIN, 0.0) == (1.0, 0.0)
        assert alpha_beta(LIN, 1.0) == (0.0, 1.0)

    def test_interior(self):
        assert alpha_beta(LIN, 0.25) == (0.75, 0.25)
        assert alpha_beta(LIN, 0.5) == (0.5, 0.5)

    def test_rejects_out_of_range_time(self):
        for t in (-0.1, 1.1, np.nan):
            with pytest.raises(ScheduleError):
                alpha_beta(LIN, t)

    def test_closed_forms(self):
        c = coeffs(LIN, 0.0, 0.5)
        assert (c.gamma, c.xi, c.kappa) == (0.5, 0.5, 1.0)
        c = coeffs(LIN, 0.0, 1.0)
        assert (c.gamma, c.xi) == (0.0, 1.0)

    @given(st.floats(0.0, 0.98), st.floats(0.001, 1.0))
    def test_closed_forms_symbolwise(self, s, frac):
        t = s + frac * (1.0 - s)
        if t <= s:
            return
        c = coeffs(LIN, s, t)
        assert c.gamma == pytest.approx((1 - t) / (1 - s), abs=1e-12)
        assert c.xi == pytest.approx((t - s) / (1 - s), abs=1e-12)
        assert c.c_lag == pytest.approx((t - s) * (1 - t) / (1 - s), abs=1e-12)
        assert c.kappa == pytest.approx((1 - t) / ((1 - s) * (t - s)), rel=1e-10)

    def test_c_lag_finite_at_one(self):
        assert coeffs(LIN, 0.3, 1.0).c_lag == 0.0

    def test_c_lag_vanishes_on_diagonal(self):
        assert coeffs(LIN, 0.4, 0.4 + 1e-9).c_lag < 1e-8
        assert coeffs(LIN, 0.4, 0.4, allow_equal=True).c_lag == 0.0

    @pytest.mark.parametrize("s,t", [(0.5, 0.5), (0.6, 0.2)])
    def test_coeffs_need_order(self, s, t):
        with pytest.raises(ScheduleError):
            coeffs(LIN, s, t)

    def test_semigroup_weight_examples(self):
        assert semigroup_weight(LIN, 0.0, 0.5, 1.0) == 0.0
        assert semigroup_weight(LIN, 0.0, 0.25, 0.5) == pytest.approx(1 / 3, abs=1e-15)

    def test_time_average_weight_example(self):
        assert time_average_weight(LIN, 0.0, 0.5, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_time_average_weight_pole(self):
        with pytest.raises(ScheduleError):
            time_average_weight(LIN, 0.2, 1.0, 0.5)

    def test_time_average_weight_normalised(self):
        total = simpson(lambda u: time_average_weight(LIN, 0.2, 0.8, u), 0.2, 0.8)
        assert total == pytest.approx(1.0, abs=1e-8)
        rng = np.random.default_rng(8)
        for _ in range(100):
            s, t = np.sort(rng.uniform(0.0, 0.95, 2))
            assert simpson(lambda u: time_average_weight(LIN, s, t, u), s, t) == pytest.approx(1.0, abs=1e-6)

    def test_log_alpha_clock(self):
        assert log_alpha_clock(LIN, 0.5) == pytest.approx(np.log(2.0))


@pytest.mark.parametrize("which", ["linear", "blended"])
def test_composition_laws_on_grid(which, blended):
    sched = LIN if which == "linear" else blended
    tol = 1e-10 if which == "linear" else 1e-6
    g = np.linspace(0.0, 0.99, 20)
    s, u, t = np.meshgrid(g, g, g, indexing="ij")
    ok = (s < u) & (u < t)
    s, u, t = s[ok], u[ok], t[ok]
    su, ut, st_ = coeffs(sched, s, u), coeffs(sched, u, t), coeffs(sched, s, t)
    np.testing.assert_allclose(su.gamma * ut.gamma, st_.gamma, rtol=0, atol=tol)
    np.testing.assert_allclose(ut.gamma * su.xi + ut.xi, st_.xi, rtol=0, atol=tol)
    assert np.all(st_.xi >= 0)


class TestBlended:
    def test_lambda_zero_is_identity(self):
        sched = make_blended_argmax(0.0, grid_size=256)
        np.testing.assert_array_equal(sched.beta_table, sched.grid)
        t = sched.grid
        np.testing.assert_array_equal(alpha_beta(sched, t)[1], alpha_beta(LIN, t)[1])
        assert alpha_beta(sched, 0.3) == pytest.approx((0.7, 0.3), abs=1e-15)

    def test_lambda_one_endpoints(self):
        sched = make_blended_argmax(1.0, vocab_size=4, mc_samples=5000, rng=np.random.default_rng(1))
        assert sched.beta_table[0] == 0.0 and sched.beta_table[-1] == 1.0
        assert alpha_beta(sched, 1.0) == (0.0, 1.0)

    def test_monotone_table(self, blended):
        assert np.diff(blended.beta_table).min() >= 0.0

    def test_ratio_non_decreasing(self, blended):
        t = np.linspace(0.0, 0.999, 2000)
        a, b = alpha_beta(blended, t)
        assert np.all(np.diff(b / a) >= -1e-12)

    def test_differs_from_linear(self, blended):
        assert np.max(np.abs(blended.beta_table - blended.grid)) > 0.05

    @pytest.mark.parametrize("kw", [{"lambda_blend": 1.5}, {"vocab_size": 1}, {"mc_samples": 10}, {"noise_std": 0.0}])
    def test_bad_arguments(self, kw):
        with pytest.raises(ScheduleError):
            make_blended_argmax(**kw)

    def test_round_trip_dict(self, blended):
        back = Schedule.from_dict(blended.to_dict())
        np.testing.assert_array_equal(back.beta_table, blended.beta_table)
        np.testing.assert_array_equal(back.grid, blended.grid)

    def test_weight_integrates_to_one(self, blended):
        # the tabulated beta' has kinks at the knots; integrate in rho = -log(alpha) instead
        rng = np.random.default_rng(7)
        for _ in range(100):
            s, t = np.sort(rng.uniform(0.0, 0.95, 2))
            rs, rt = log_alpha_clock(blended, s), log_alpha_clock(blended, t)

            def in_rho(rho):
                u = np.clip(inverse_beta(blended, -np.expm1(-rho)), s, t)
                a, _ = alpha_beta(blended, u)
                return time_average_weight(blended, s, t, u) * a / beta_dot(blended, u)

            assert simpson(in_rho, rs, rt) == pytest.approx(1.0, abs=1e-6)

    def test_inverse_beta(self, blended):
        t = np.linspace(0.0, 1.0, 11)
        _, b = alpha_beta(blended, t)
        np.testing.assert_allclose(inverse_beta(blended, b), t, atol=1e-3)


def test_beta_dot_linear_is_one():
    np.testing.assert_array_equal(beta_dot(LIN, np.linspace(0, 1, 5)), np.ones(5))


def test_tabulated_rejects_bad_tables():
    g = np.linspace(0, 1, 5)
    with pytest.raises(ScheduleError):
        make_tabulated(g, [0, 0.5, 0.4, 0.9, 1.0])
    with pytest.raises(ScheduleError):
        make_tabulated(g, [0.1, 0.2, 0.3, 0.9, 1.0])


def test_linear_weight_positive_inside():
    u = np.linspace(0.1, 0.7, 50)
    assert np.all(time_average_weight(LIN, 0.1, 0.7, u) > 0)


@given(st.floats(0.0, 0.9), st.floats(0.0, 1.0), st.floats(0.01, 1.0))
def test_semigroup_weight_in_unit_interval(s, a, b):
    t = s + b * (0.99 - s)
    u = s + a * (t - s)
    if not s < t:
        return
    w = semigroup_weight(LIN, s, u, t)
    assert 0.0 <= w <= 1.0
    assert w + (1.0 - w) == 1.0


class TestStagger:
    def test_zero_stagger_is_base(self):
        assert position_schedule(LIN, 4, 0.0) is LIN

    def test_ordering_and_endpoints(self, blended):
        for base in (LIN, blended):
            sched = position_schedule(base, 2, 0.5)
            t = np.linspace(0, 1, 201)
            _, b = alpha_beta(sched, t)
            assert b.shape == (201, 2)
            assert np.all(b[:, 0] >= b[:, 1])
            np.testing.assert_array_equal(b[-1], [1.0, 1.0])
            np.testing.assert_array_equal(b[0], [0.0, 0.0])

    def test_many_positions_ordered(self):
        _, b = alpha_beta(position_schedule(LIN, 5, 1.0), np.linspace(0, 1, 101))
        assert np.all(np.diff(b, axis=1) <= 0)

    def test_negative_stagger(self):
        with pytest.raises(ScheduleError):
            position_schedule(LIN, 3, -0.1)

    def test_frozen_positions(self):
        sched = position_schedule(LIN, 2, 1.0)
        c = coeffs(sched, 0.9, 0.95)
        assert c.gamma[0] == 1.0 and c.xi[0] == 0.0
