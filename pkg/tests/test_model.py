import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfm.model import Arch, DenoiserModel
from dfm.schedule import make_blended_argmax, make_linear, position_schedule
from dfm.simplex import is_simplex


def make(L=3, K=4, H=16, layers=2, conditional=False, seed=0, sched=None):
    return DenoiserModel.init(Arch(H, layers, L, K, conditional), seed, sched)


def rand_inputs(model, B=5, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, model.arch.L, model.arch.K))
    s = rng.uniform(0.0, 0.5, B)
    t = s + rng.uniform(0.0, 0.45, B)
    return x, s, t


def test_param_count_formula():
    arch = Arch(64, 2, 1, 8)
    assert arch.n_params == 10120
    assert make(1, 8, 64).params.size == sum(int(np.prod(s)) for _, s in arch.param_shapes())


def test_same_seed_same_params():
    np.testing.assert_array_equal(make(seed=3).params, make(seed=3).params)
    assert not np.array_equal(make(seed=3).params, make(seed=4).params)


def test_zero_input_finite():
    m = make()
    assert np.all(np.isfinite(m.forward(np.zeros((3, 4)), 0.2, 0.2)))


@pytest.mark.parametrize("bad", [{"hidden_width": 0}, {"n_layers": 0}, {"K": 1}])
def test_bad_arch(bad):
    kw = {"hidden_width": 8, "n_layers": 1, "L": 2, "K": 3, **bad}
    with pytest.raises(ValueError):
        Arch(**kw)


def test_rejects_wrong_param_length():
    with pytest.raises(ValueError):
        DenoiserModel(Arch(4, 1, 1, 2), np.zeros(3))


def test_rejects_non_finite_and_unordered():
    m = make()
    with pytest.raises(ValueError):
        m.forward(np.full((3, 4), np.nan), 0.1, 0.2)
    with pytest.raises(ValueError):
        m.forward(np.zeros((3, 4)), 0.5, 0.2)


def test_diag_logits_equal_forward():
    m = make()
    x, _, t = rand_inputs(m)
    np.testing.assert_array_equal(m.diag_logits(x, t), m.forward(x, t, t))


def test_unbatched_matches_batched():
    m = make()
    x, s, t = rand_inputs(m)
    np.testing.assert_allclose(m.forward(x[2], s[2], t[2]), m.forward(x, s, t)[2], rtol=1e-14, atol=1e-15)


def test_probs_on_simplex():
    m = make()
    x, s, t = rand_inputs(m, B=50)
    assert is_simplex(m.probs(x, s, t))


def test_context_changes_logits():
    m = make(conditional=True)
    x, s, t = rand_inputs(m)
    a = m.forward(x, s, t, np.array([[0, 1]] * 5))
    b = m.forward(x, s, t, np.array([[0, 2]] * 5))
    assert np.abs(a - b).max() > 1e-6


def test_padding_matches_shorter_context():
    m = make(conditional=True)
    x, s, t = rand_inputs(m)
    a = m.forward(x, s, t, np.array([[-1, -1, 3, 1]] * 5))
    b = m.forward(x, s, t, np.array([[3, 1]] * 5))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(m.forward(x, s, t, np.full((5, 3), -1)), m.forward(x, s, t, None))


def test_context_limits():
    m = DenoiserModel.init(Arch(8, 1, 2, 3, conditional=True, max_context=4), 0)
    x = np.zeros((1, 2, 3))
    with pytest.raises(ValueError):
        m.forward(x, 0.1, 0.1, np.zeros((1, 5), dtype=int))
    with pytest.raises(IndexError):
        m.forward(x, 0.1, 0.1, np.array([[3]]))


def test_unconditional_rejects_context():
    m = make()
    with pytest.raises(ValueError):
        m.forward(np.zeros((3, 4)), 0.1, 0.1, np.array([1]))


# ---- forward-mode derivatives ------------------------------------------------


def central(f, h=1e-3):
    return (f(h) - f(-h)) / (2 * h)


# the tabulated beta is piecewise cubic on a 1/255 grid, so its curvature needs a finer step
@pytest.mark.parametrize(
    "sched,h", [(make_linear(), 1e-3), (make_blended_argmax(0.9, mc_samples=20000), 1e-5)], ids=["linear", "blended"]
)
def test_dz_dt_matches_central_difference(sched, h):
    m = make(sched=sched)
    x, s, t = rand_inputs(m)
    fd = central(lambda d: m.forward(x, s, t + d), h)
    np.testing.assert_allclose(m.dz_dt(x, s, t), fd, rtol=1e-5, atol=1e-7)


def test_dz_dt_zero_without_time_inputs():
    m = make()
    W = m.unpack()
    col = 2 * m.arch.K + m.arch.L
    W["W_in"][col : col + 2] = 0.0
    x, s, t = rand_inputs(m)
    assert np.abs(m.dz_dt(x, s, t)).max() == 0.0


def test_dz_dt_scales_with_output_layer():
    m = make()
    p = m.params.copy()
    W = m.unpack(p)
    W["W_out"] *= 2.0
    W["b_out"] *= 2.0
    x, s, t = rand_inputs(m)
    np.testing.assert_allclose(m.with_params(p).dz_dt(x, s, t), 2.0 * m.dz_dt(x, s, t), rtol=1e-14, atol=1e-15)


def test_total_derivative_matches_curve():
    m = make()
    x, s, t = rand_inputs(m)
    v = np.random.default_rng(2).standard_normal(x.shape)
    fd = central(lambda h: m.forward(x + h * v, s + h, t))
    np.testing.assert_allclose(m.total_derivative_s(x, s, t, v), fd, rtol=1e-5, atol=1e-7)


def test_total_derivative_zero_case():
    m = make()
    W = m.unpack()
    col = 2 * m.arch.K + m.arch.L
    W["W_in"][col : col + 2] = 0.0
    x, s, t = rand_inputs(m)
    assert np.abs(m.total_derivative_s(x, s, t, np.zeros_like(x))).max() == 0.0


def test_total_derivative_linear_in_tangent():
    m = make()
    x, s, t = rand_inputs(m)
    rng = np.random.default_rng(3)
    v1, v2 = rng.standard_normal(x.shape), rng.standard_normal(x.shape)
    lhs = m.total_derivative_s(x, s, t, v1 + v2)
    _, j1 = m.jvp(x, s, t, v1)
    _, j2 = m.jvp(x, s, t, v2)
    np.testing.assert_allclose(lhs, j1 + j2 + m.dz_ds(x, s, t), rtol=1e-12, atol=1e-13)


def test_per_position_schedule_derivative():
    sched = position_schedule(make_linear(), 3, 0.5)
    m = make(sched=sched)
    x, s, t = rand_inputs(m)
    fd = central(lambda h: m.forward(x, s, t + h), h=1e-5)
    np.testing.assert_allclose(m.dz_dt(x, s, t), fd, rtol=1e-5, atol=1e-6)


# ---- reverse mode ------------------------------------------------------------


def test_zero_upstream_zero_gradient():
    m = make()
    x, s, t = rand_inputs(m)
    g = m.backward(np.zeros((5, 3, 4)), x, s, t)
    assert np.abs(g.param_grad).max() == 0.0


def test_ce_gradient_vanishes_at_match():
    m = make()
    x, s, t = rand_inputs(m)
    p = m.probs(x, s, t)
    g = m.backward(m.probs(x, s, t) - p, x, s, t)
    assert np.abs(g.param_grad).max() < 1e-8


def test_backward_shape_mismatch():
    m = make()
    x, s, t = rand_inputs(m)
    with pytest.raises(ValueError):
        m.backward(np.zeros((5, 3, 3)), x, s, t)


def test_param_gradient_matches_finite_differences():
    m = make(H=16)
    x, s, t = rand_inputs(m, B=4)
    G = np.random.default_rng(4).standard_normal((4, 3, 4))
    grad = m.backward(G, x, s, t).param_grad
    idx = np.random.default_rng(5).choice(m.params.size, 20, replace=False)
    h = 1e-5
    for i in idx:
        p = m.params.copy()
        p[i] += h
        up = np.sum(G * m.with_params(p).forward(x, s, t))
        p[i] -= 2 * h
        dn = np.sum(G * m.with_params(p).forward(x, s, t))
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_forward_and_reverse_modes_agree(seed):
    m = make(seed=seed % 7, conditional=bool(seed % 2))
    rng = np.random.default_rng(seed)
    x, s, t = rand_inputs(m, B=3, seed=seed)
    ctx = rng.integers(-1, 4, (3, 2)) if m.arch.conditional else None
    dx = rng.standard_normal(x.shape)
    ds, dt = rng.standard_normal(3), rng.standard_normal(3)
    G = rng.standard_normal(x.shape)
    _, dz = m.jvp(x, s, t, dx, ds, dt, ctx)
    g = m.backward(G, x, s, t, ctx)
    lhs = np.sum(G * dz)
    rhs = np.sum(g.x_grad * dx) + np.sum(g.s_grad * ds) + np.sum(g.t_grad * dt)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_evaluation_is_deterministic():
    m = make()
    x, s, t = rand_inputs(m)
    np.testing.assert_array_equal(m.forward(x, s, t), m.forward(x, s, t))
