"""End-to-end acceptance checks; each records a PASS/FAIL line printed at the end of the run."""

import functools
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, special, stats

from dfm.config import build_schedule, build_source, load_config
from dfm.evaluation import identity_grid, probe_tv, tv_distance, unigram_entropy, verify_identities
from dfm.losses import (
    LossConfig,
    WeightNet,
    consistency_loss,
    diagonal_loss,
    esd_teacher,
    lsd_teacher,
    psd_teacher,
)
from dfm.model import Arch, DenoiserModel
from dfm.oracle import (
    MarkovChain,
    NoiseConfig,
    OracleDenoiser,
    ToyDistribution,
    exact_drift,
    exact_mean_denoiser,
    integrate_flow,
    make_interpolant,
)
from dfm.sampler import SamplerConfig, flow_map_step, generate
from dfm.schedule import alpha_beta, coeffs, make_blended_argmax, make_linear, time_average_weight
from dfm.simplex import kl_div, softmax
from dfm.trainer import (
    checkpoint_bytes,
    checkpoint_from_bytes,
    distill,
    distill_loss_config,
    load_checkpoint,
    save_checkpoint,
    train_diagonal,
)

ROOT = Path(__file__).resolve().parents[1]
LIN = make_linear()
NOISE = NoiseConfig(1.0)
TOY = ToyDistribution.random_product(5, 1, np.random.default_rng(0))
IDENTITY_TOL = {"diagonal": 1e-3, "semigroup": 1e-3, "lagrangian": 5e-3, "eulerian": 5e-3}


@functools.lru_cache(maxsize=None)
def schedule(kind):
    if kind == "linear":
        return LIN
    return make_blended_argmax(0.9, vocab_size=5, mc_samples=50_000, rng=np.random.default_rng(0))


# ---- 1. oracle identities ----------------------------------------------------


def bayes_posterior(dist, sched, x, t):
    """``E[I_1 | I_t = x]`` by direct enumeration of Gaussian likelihoods."""
    a, b = alpha_beta(sched, t)
    vertices = np.eye(dist.K)
    sq = ((x[:, None, 0, :] - b * vertices[None]) ** 2).sum(-1)
    logw = np.log(dist.joint_probs)[None] - sq / (2 * a**2 * NOISE.std**2)
    return np.exp(logw - special.logsumexp(logw, axis=1, keepdims=True))


@pytest.mark.parametrize("kind", ["linear", "blended"])
def test_criterion_1_oracle_identities(kind, record):
    sched = schedule(kind)
    den = OracleDenoiser(TOY, sched, NOISE, n_steps=2000)
    start = time.perf_counter()
    rep = verify_identities(den, grid_n=10, n_probe_points=50, tol=IDENTITY_TOL, rng=np.random.default_rng(1))
    seconds = time.perf_counter() - start

    # the report's diagonal compares the oracle with itself; check it against enumeration too
    states = np.random.default_rng(2).standard_normal((50, 1, 5))
    bayes_err = max(
        np.abs(den.diag_probs(states, np.full(50, t))[:, 0] - bayes_posterior(TOY, sched, states, t)).max()
        for t in identity_grid(10)
    )
    ok = rep.passed and bayes_err < 1e-3 and seconds < 300
    res = ", ".join(f"{k} {v:.1e}" for k, v in rep.residual_max.items())
    record(1, ok, f"{kind}: {res}, enumeration {bayes_err:.1e}, {seconds:.0f}s")
    assert rep.passed, rep.failures()
    assert bayes_err < 1e-3
    assert seconds < 300


# ---- 2. mean-denoiser quadrature ---------------------------------------------


def solve_flow(x, s, t):
    """Probability-flow endpoint by adaptive Runge-Kutta in ``t``."""

    def rhs(tau, y):
        return exact_drift(TOY, LIN, NOISE, y.reshape(1, 1, 5), np.array([tau]))[0].ravel()

    sol = integrate.solve_ivp(rhs, (s, t), x.ravel(), method="DOP853", rtol=1e-11, atol=1e-12)
    return sol.y[:, -1].reshape(x.shape)


def test_criterion_2_mean_denoiser_quadrature(record):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((100, 1, 5))
    s, t = np.sort(rng.uniform(0.0, 0.99, (100, 2)), axis=1).T
    psi = exact_mean_denoiser(TOY, LIN, NOISE, x, s, t, n_steps=2000)
    c = coeffs(LIN, s, t)
    recon = c.gamma[:, None, None] * x + c.xi[:, None, None] * psi
    flow_err = np.abs(recon - integrate_flow(TOY, LIN, NOISE, x, s, t, n_steps=2000)).max()
    ivp_err = max(np.abs(recon[i] - solve_flow(x[i], s[i], t[i])).max() for i in range(100))

    w_err = 0.0
    for a, b in np.sort(rng.uniform(0.0, 0.99, (100, 2)), axis=1):
        total, _ = integrate.quad(lambda u: float(time_average_weight(LIN, a, b, u)), a, b, epsabs=1e-13, epsrel=1e-13)
        w_err = max(w_err, abs(total - 1.0))

    ok = flow_err < 1e-4 and ivp_err < 1e-4 and w_err < 1e-6
    record(2, ok, f"flow map {flow_err:.1e}, adaptive ODE {ivp_err:.1e}, weight integral {w_err:.1e}")
    assert flow_err < 1e-4 and ivp_err < 1e-4
    assert w_err < 1e-6


# ---- 3. logit-teacher fixed points -------------------------------------------


@functools.lru_cache(maxsize=None)
def oracle_grid(kind):
    den = OracleDenoiser(TOY, schedule(kind), NOISE, n_steps=2000)
    g = identity_grid(10)
    si, ti = np.triu_indices(g.size, 1)
    P = 20
    x = np.tile(np.random.default_rng(4).standard_normal((P, 1, 5)), (si.size, 1, 1))
    s, t = np.repeat(g[si], P), np.repeat(g[ti], P)
    return den, x, s, t, den.probs(x, s, t)


@pytest.mark.parametrize("kind", ["linear", "blended"])
def test_criterion_3_esd_fixed_point(kind, record):
    den, x, s, t, psi = oracle_grid(kind)
    stab = esd_teacher(den, x, s, t)
    naive = esd_teacher(den, x, s, t, stabilized=False)
    kl = kl_div(stab.probs, psi).max()
    gap = np.abs(stab.probs - naive.probs).max()
    record(3, kl < 1e-3 and gap < 1e-6, f"ESD {kind}: KL {kl:.1e}, stabilised vs naive {gap:.1e}")
    assert kl < 1e-3
    assert gap < 1e-6


LSD_LINEAR_REASON = (
    "on the linear schedule the oracle posterior's minor entries underflow for t >= 0.8, and the "
    "multiplicative correction 1 + C delta would need cancellation far beyond float64"
)


@pytest.mark.parametrize(
    "kind", [pytest.param("linear", marks=pytest.mark.xfail(strict=True, reason=LSD_LINEAR_REASON)), "blended"]
)
def test_criterion_3_lsd_fixed_point(kind, record):
    den, x, s, t, psi = oracle_grid(kind)
    kl = kl_div(lsd_teacher(den, x, s, t).probs, psi)
    worst_t = t[np.argmax(kl)]
    record(3, kl.max() < 1e-3, f"LSD {kind}: KL {kl.max():.1e} (worst at t={worst_t:.1f})")
    assert kl.max() < 1e-3


# ---- 4. gradients ------------------------------------------------------------


def worst_fd_error(params, loss_of_params, grad, n_probes=20, h=1e-5, seed=0):
    idx = np.random.default_rng(seed).choice(params.size, n_probes, replace=False)
    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += h
        up = loss_of_params(p)
        p[i] -= 2 * h
        dn = loss_of_params(p)
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    return worst


def gradient_cases():
    m = DenoiserModel.init(Arch(16, 2, 2, 4), 0)
    rng = np.random.default_rng(5)
    B = 8
    x = rng.standard_normal((B, 2, 4))
    s = rng.uniform(0.0, 0.6, B)
    u = s + rng.uniform(0.0, 1.0, B) * 0.3
    t = u + rng.uniform(0.01, 1.0, B) * (0.99 - u)
    smp = make_interpolant(LIN, rng.standard_normal((B, 2, 4)), rng.integers(0, 4, (B, 2)), rng.uniform(0, 1, B), 4)
    scale = WeightNet("of_st", params=rng.normal(size=WeightNet("of_st").params.size)).weight(s, t)
    teachers = {"psd": psd_teacher(m, x, s, u, t), "lsd": lsd_teacher(m, x, s, t), "esd": esd_teacher(m, x, s, t)}

    for r in (0.0, 0.5):
        cfg = LossConfig(diag_r=r)
        gb, info = diagonal_loss(m, smp, cfg)
        w = info["weights"]
        yield f"diagonal r={r}", m.params, (lambda p, cfg=cfg, w=w: diagonal_loss(m.with_params(p), smp, cfg, weights=w)[0].loss), gb.param_grad

    variants = [(0.0, "forward", None), (0.5, "forward", None), (0.5, "reverse", None), (0.5, "forward", scale)]
    for kind, T in teachers.items():
        for r, div, sc in variants:
            cfg = LossConfig(kind, adaptive_r=r, divergence=div)
            gb, info = consistency_loss(m, x, s, t, T, cfg, scale=sc)
            w = info["weights"]
            name = f"{kind} r={r} {div}" + (" learned-scale" if sc is not None else "")

            def loss(p, cfg=cfg, w=w, T=T, sc=sc):
                return consistency_loss(m.with_params(p), x, s, t, T, cfg, weights=w, scale=sc)[0].loss

            yield name, m.params, loss, gb.param_grad

    for mode in ("of_s", "of_st"):
        net = WeightNet(mode, params=rng.normal(size=WeightNet(mode).params.size))
        losses = rng.uniform(0.1, 1.0, B)
        tt = None if mode == "of_s" else t
        _, g = net.objective(losses, s, tt)
        yield f"weight net {mode}", net.params, (lambda p, mode=mode, losses=losses, tt=tt: WeightNet(mode, params=p).objective(losses, s, tt)[0]), g


def test_criterion_4_gradients(record):
    errors = {}
    for name, params, loss, grad in gradient_cases():
        probes = min(20, params.size)
        errors[name] = worst_fd_error(params, loss, grad, n_probes=probes)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4
    record(4, ok, f"{len(errors)} gradients, worst relative error {errors[worst]:.1e} ({worst})")
    assert ok, {k: v for k, v in errors.items() if v >= 1e-4}


# ---- 5. desk-scale diagonal training -----------------------------------------


@pytest.fixture(scope="module")
def desk():
    """Diagonal checkpoint for the K=8, L=4 product toy, trained from the shipped config."""
    run = load_config(ROOT / "configs" / "toy_product.json")
    src = build_source(run)
    sched = build_schedule(run, src.L)
    model = DenoiserModel.init(run.arch(src.L, src.K, False), run.model_seed, sched)
    cfg = run.train_config(stage="diagonal")
    start = time.perf_counter()
    ck = train_diagonal(cfg, src, model)
    seconds = time.perf_counter() - start
    oracle = OracleDenoiser(src.dist, sched, NOISE, L=src.L)
    return {"run": run, "src": src, "ck": ck, "seconds": seconds, "oracle": oracle, "cfg": cfg}


@pytest.mark.slow
def test_criterion_5_diagonal_training(desk, record):
    cfg = desk["cfg"]
    assert (cfg.steps, cfg.batch_size, cfg.lr, cfg.warmup_steps) == (20000, 64, 3e-4, 2500)
    tv = probe_tv(desk["ck"].model(), desk["oracle"], np.random.default_rng(0))
    ok = tv < 0.05 and desk["seconds"] < 900
    record(5, ok, f"probe TV {tv:.4f} after {cfg.steps} steps, {desk['seconds']:.0f}s")
    assert tv < 0.05
    assert desk["seconds"] < 900


# ---- 6. distillation trend ---------------------------------------------------


class DiagonalEuler:
    """Uses ``psi_{s,s}`` for every step: the few-step sampler of the diagonal alone."""

    def __init__(self, model):
        self.m, self.sched, self.arch = model, model.sched, model.arch

    def probs(self, x, s, t, context=None):
        return self.m.probs(x, s, s, context)


NFES = (1, 2, 4)


def sample_tv(den, truth, nfe):
    return tv_distance(generate(den, SamplerConfig(nfe=nfe, seed=7), 20_000), truth)


@pytest.fixture(scope="module")
def distilled(desk):
    out = {}
    for kind in ("psd", "esd"):
        loss = distill_loss_config(kind, adaptive_r=0.0, diag_r=0.0, learnable_weight="none", skip_clamped=kind == "esd")
        cfg = desk["run"].train_config(stage="distill", steps=5000, loss=loss)
        out[kind] = distill(cfg, desk["ck"], kind, desk["src"])
    return out


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["psd", "esd"])
def test_criterion_6_distillation_beats_diagonal(desk, distilled, kind, record):
    truth = desk["src"].dist
    base = DiagonalEuler(desk["ck"].model())
    student = distilled[kind].model()
    base_tv = [sample_tv(base, truth, n) for n in NFES]
    tv = [sample_tv(student, truth, n) for n in NFES]
    wins = sum(a < b for a, b in zip(tv, base_tv))
    pairs = ", ".join(f"nfe {n}: {a:.3f} vs {b:.3f}" for n, a, b in zip(NFES, tv, base_tv))
    record(6, wins >= 2, f"{kind.upper()} wins {wins}/3 ({pairs})")
    assert wins >= 2


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["psd", "esd"])
def test_distillation_keeps_diagonal_probe(desk, distilled, kind):
    before = probe_tv(desk["ck"].model(), desk["oracle"], np.random.default_rng(0))
    after = probe_tv(distilled[kind].model(), desk["oracle"], np.random.default_rng(0))
    assert after <= 2 * before


# ---- 7. guidance trend -------------------------------------------------------


@pytest.fixture(scope="module")
def guided():
    rng = np.random.default_rng(11)
    chain = MarkovChain(rng.dirichlet(np.full(5, 0.3), size=5))
    # psi_{s,s} on every step: Euler on the guided drift, fine enough to be near exact
    den = OracleDenoiser(chain, LIN, NOISE, L=2, n_steps=200, diagonal_only=True)
    return chain, den


def guided_run(den, chain, seed, omega):
    prompts = chain.sample(np.random.default_rng(seed), 2000, 4)
    cfg = SamplerConfig(nfe=256, guidance_omega=omega, block_len=2, seed=seed)
    return generate(den, cfg, 2000, prompts, return_state=True)


@pytest.mark.slow
def test_criterion_7_guidance_lowers_entropy(guided, record):
    chain, den = guided
    H = {0.0: [], 2.0: []}
    vertex_gap = 0.0
    for seed in range(5):
        for omega in H:
            tokens, x, _ = guided_run(den, chain, seed, omega)
            H[omega].append(unigram_entropy(tokens, 5))
            vertex_gap = max(vertex_gap, np.abs(x - np.eye(5)[tokens]).max())
    for omega in (0.5, 1.0, 1.5):
        tokens, x, _ = guided_run(den, chain, 0, omega)
        vertex_gap = max(vertex_gap, np.abs(x - np.eye(5)[tokens]).max())
    p = stats.ttest_rel(H[2.0], H[0.0], alternative="less").pvalue
    ok = p < 0.05 and vertex_gap < 2e-3
    record(7, ok, f"entropy {np.mean(H[0.0]):.4f} -> {np.mean(H[2.0]):.4f} (paired p={p:.1e}), vertex gap {vertex_gap:.1e}")
    assert p < 0.05
    assert vertex_gap < 2e-3


# ---- 8. determinism and persistence ------------------------------------------


def test_criterion_8_determinism(desk, tmp_path, record):
    run, src = desk["run"], desk["src"]
    sched = build_schedule(run, src.L)

    def short_run():
        model = DenoiserModel.init(run.arch(src.L, src.K, False), run.model_seed, sched)
        return train_diagonal(run.train_config(stage="diagonal", steps=200), src, model)

    same_ckpt = checkpoint_bytes(short_run()) == checkpoint_bytes(short_run())

    ck = desk["ck"]
    save_checkpoint(ck, tmp_path / "diag.ckpt")
    first = (tmp_path / "diag.ckpt").read_bytes()
    save_checkpoint(load_checkpoint(tmp_path / "diag.ckpt"), tmp_path / "again.ckpt")
    round_trip = (tmp_path / "again.ckpt").read_bytes() == first
    weighted = distill(
        run.train_config(stage="distill", steps=10, loss=distill_loss_config("esd", skip_clamped=True)), ck, "esd", src
    )
    data = checkpoint_bytes(weighted)
    round_trip &= checkpoint_bytes(checkpoint_from_bytes(data)) == data

    model = load_checkpoint(tmp_path / "diag.ckpt").model()
    a = generate(model, SamplerConfig(nfe=2, seed=3), 500)
    b = generate(ck.model(), SamplerConfig(nfe=2, seed=3), 500)
    part = generate(model, SamplerConfig(nfe=2, seed=3), 100, offset=400)
    same_samples = np.array_equal(a, b) and np.array_equal(a[400:], part)

    ok = same_ckpt and round_trip and same_samples
    record(8, ok, f"checkpoints identical {same_ckpt}, byte-exact round trip {round_trip}, samples identical {same_samples}")
    assert same_ckpt and round_trip and same_samples


# ---- 9. randomized invariant suites ------------------------------------------


def test_criterion_9_invariant_suites(record):
    rng = np.random.default_rng(9)
    n = 1000
    fails = {"softmax shift": 0, "KL non-negative": 0, "composition": 0, "endpoint": 0}

    for _ in range(n):
        K = rng.integers(2, 13)
        z = rng.normal(0.0, 10.0, K)
        c = rng.uniform(-30.0, 30.0)
        fails["softmax shift"] += np.abs(softmax(z + c) - softmax(z)).max() > 1e-14

    for _ in range(n):
        K = rng.integers(2, 13)
        conc = rng.choice([0.1, 1.0, 10.0])
        p, q = rng.dirichlet(np.full(K, conc)), rng.dirichlet(np.full(K, conc))
        if rng.random() < 0.1:
            q = p.copy()
        raw = special.rel_entr(p, q).sum()
        kl = kl_div(p, q)
        fails["KL non-negative"] += kl < 0 or raw < -1e-15 or abs(kl - stats.entropy(p, q)) > 1e-12

    blended = schedule("blended")
    for i in range(n):
        sched, tol = (LIN, 1e-10) if i % 2 == 0 else (blended, 1e-6)
        s, u, t = np.sort(rng.uniform(0.0, 0.999, 3))
        if not s < u < t:
            fails["composition"] += 1
            continue
        su, ut, st_ = coeffs(sched, s, u), coeffs(sched, u, t), coeffs(sched, s, t)
        bad = abs(su.gamma * ut.gamma - st_.gamma) > tol or abs(ut.gamma * su.xi + ut.xi - st_.xi) > tol
        fails["composition"] += bad

    model = DenoiserModel.init(Arch(16, 2, 2, 4), 1)
    x = rng.standard_normal((n, 2, 4)) * rng.uniform(0.1, 5.0, (n, 1, 1))
    s = rng.uniform(0.0, 0.999, n)
    out = flow_map_step(model, x, s, 1.0)
    exact = model.probs(x, s, np.ones(n))
    fails["endpoint"] = int(np.sum(np.any(out != exact, axis=(1, 2))))
    c = coeffs(LIN, s, np.ones(n))
    fails["endpoint"] += int(np.sum((c.gamma != 0.0) | (c.xi != 1.0)))

    ok = not any(fails.values())
    record(9, ok, ", ".join(f"{k} {v}/{n} failures" for k, v in fails.items()))
    assert ok, fails
