"""Metrics, identity verification and serialisable reports."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import flow_map_estimate
from .oracle import OracleDenoiser, ToyDistribution
from .schedule import coeffs, semigroup_weight
from .simplex import softmax

__all__ = [
    "tv_distance",
    "empirical_distribution",
    "unigram_entropy",
    "bigram_tv",
    "bigram_counts",
    "IdentityReport",
    "EvalReport",
    "IDENTITY_NAMES",
    "DEFAULT_IDENTITY_TOL",
    "identity_grid",
    "verify_identities",
    "probe_tv",
    "report_to_text",
    "report_from_text",
    "SweepReport",
    "evaluate",
    "cfg_sweep",
]

IDENTITY_NAMES = ("diagonal", "semigroup", "lagrangian", "eulerian")
DEFAULT_IDENTITY_TOL = {"diagonal": 1e-3, "semigroup": 1e-3, "lagrangian": 5e-3, "eulerian": 5e-3}
GRID_END = 0.9


# ---- sample metrics ---------------------------------------------------------


def empirical_distribution(samples, K: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("need a non-empty (N, L) array of token sequences")
    L = samples.shape[1]
    idx = samples @ (K ** np.arange(L - 1, -1, -1))
    return np.bincount(idx, minlength=K**L) / samples.shape[0]


def tv_distance(samples, truth: ToyDistribution) -> float:
    """``0.5 * sum |p_hat - p_1|`` over all ``K**L`` sequences."""
    p_hat = empirical_distribution(samples, truth.K)
    if p_hat.size != truth.joint_probs.size:
        raise ValueError("sample length does not match the distribution")
    return float(0.5 * np.abs(p_hat - truth.joint_probs).sum())


def unigram_entropy(samples, K: int | None = None) -> float:
    """Entropy (nats) of the pooled token frequencies."""
    tokens = np.asarray(samples, dtype=np.int64).ravel()
    if tokens.size == 0:
        raise ValueError("need at least one token")
    counts = np.bincount(tokens, minlength=K or 0)
    p = counts[counts > 0] / tokens.size
    h = float(-(p * np.log(p)).sum())
    return h if h > 0.0 else 0.0


def bigram_counts(sequences, K: int) -> np.ndarray:
    seq = np.asarray(sequences, dtype=np.int64)
    if seq.ndim == 1:
        seq = seq[None]
    a = seq[:, :-1].ravel()
    b = seq[:, 1:].ravel()
    return np.bincount(a * K + b, minlength=K * K).reshape(K, K)


def bigram_tv(sequences, reference, K: int) -> float:
    """Mean over previous tokens of the TV between empirical and reference transitions.

    ``reference`` is a row-stochastic ``K x K`` matrix or a count matrix; rows
    never observed in ``sequences`` are skipped.
    """
    counts = bigram_counts(sequences, K).astype(np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    ref = ref / ref.sum(1, keepdims=True)
    seen = counts.sum(1) > 0
    if not seen.any():
        raise ValueError("no transitions observed")
    emp = counts[seen] / counts[seen].sum(1, keepdims=True)
    return float(0.5 * np.abs(emp - ref[seen]).sum(1).mean())


# ---- reports ----------------------------------------------------------------


@dataclass
class IdentityReport:
    """Max / mean residual per identity; ``passed`` iff every max is within its tolerance."""

    residual_max: dict
    residual_mean: dict
    tolerance: dict
    grid: list
    n_probe_points: int
    source: str
    schedule: str
    seconds: float = 0.0
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(self.residual_max[k] <= self.tolerance[k] for k in self.residual_max)

    def failures(self) -> list[str]:
        return [k for k in self.residual_max if self.residual_max[k] > self.tolerance[k]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "identity"
        return d

    def lines(self) -> list[str]:
        out = [f"identity report ({self.source}, schedule={self.schedule}, grid={len(self.grid)}, probes={self.n_probe_points})"]
        for k in self.residual_max:
            flag = "ok" if self.residual_max[k] <= self.tolerance[k] else "FAIL"
            out.append(
                f"  {k:<11} max {self.residual_max[k]:.3e}  mean {self.residual_mean[k]:.3e}"
                f"  tol {self.tolerance[k]:.1e}  {flag}"
            )
        out.append(f"  passed {self.passed}  ({self.seconds:.1f}s)")
        return out


@dataclass
class EvalReport:
    """Per-NFE sample metrics."""

    nfe: list
    tv_distance: list
    unigram_entropy: list
    sample_count: list
    seed: int
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "eval"
        return d

    def lines(self) -> list[str]:
        out = [f"eval report (checkpoint={self.checkpoint or '-'}, seed={self.seed})", "  nfe  tv        entropy   samples"]
        for n, tv, h, c in zip(self.nfe, self.tv_distance, self.unigram_entropy, self.sample_count):
            tv_s = "nan" if tv is None else f"{tv:.5f}"
            out.append(f"  {n:<4} {tv_s:<9} {h:.5f}   {c}")
        return out


@dataclass
class SweepReport:
    """One row per guidance strength: sample metric (TV or bigram TV) and unigram entropy."""

    omega: list
    metric: list
    unigram_entropy: list
    sample_count: list
    seed: int
    metric_name: str = "bigram_tv"
    checkpoint: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "sweep"
        return d

    def lines(self) -> list[str]:
        out = [f"cfg sweep (checkpoint={self.checkpoint or '-'}, seed={self.seed})", f"  omega  {self.metric_name:<10} entropy   samples"]
        for w, m, h, c in zip(self.omega, self.metric, self.unigram_entropy, self.sample_count):
            m_s = "nan" if m is None else f"{m:.5f}"
            out.append(f"  {w:<6g} {m_s:<10} {h:.5f}   {c}")
        return out


def report_to_text(report) -> str:
    """Human-readable lines followed by one machine-readable JSON line."""
    return "\n".join(report.lines()) + "\n" + "# json " + json.dumps(report.to_dict(), sort_keys=True) + "\n"


def report_from_text(text: str):
    for line in text.splitlines():
        if line.startswith("# json "):
            d = json.loads(line[len("# json ") :])
            kind = d.pop("kind")
            if kind == "identity":
                d.pop("passed")
                return IdentityReport(**d)
            if kind == "eval":
                return EvalReport(**d)
            if kind == "sweep":
                return SweepReport(**d)
            raise ValueError(f"unknown report kind {kind!r}")
    raise ValueError("no machine-readable payload found")


# ---- identity verification --------------------------------------------------


def identity_grid(grid_n: int) -> np.ndarray:
    """``grid_n`` points on ``[0, 0.9]``: endpoints kept clear of the ``t = 1`` pole."""
    if grid_n < 3:
        raise ValueError("identity grid needs at least 3 points")
    return np.linspace(0.0, GRID_END, grid_n)


def _prob_tangent(den, x, s, t, context, *, direction: str, v=None):
    """Derivative of ``psi_{s,t}(x)`` in ``t`` or along ``(s, x) -> (s + h, x + h v)``."""
    if isinstance(den, OracleDenoiser):
        if direction == "t":
            return den.dpsi_dt(x, s, t, context)
        return den.total_derivative_s(x, s, t, v, context, of="probs")
    if direction == "t":
        z, dz = den.jvp(x, s, t, None, 0.0, 1.0, context)
    else:
        z, dz = den.jvp(x, s, t, v, 1.0, 0.0, context)
    p = softmax(z)
    return p * (dz - (p * dz).sum(-1, keepdims=True))


def _diag(den, x, t, context):
    if isinstance(den, OracleDenoiser):
        return den.diag_probs(x, t, context)
    return den.probs(x, t, t, context)


def _col(v):
    return np.asarray(v, dtype=np.float64)[:, None, None]


def verify_identities(
    den,
    *,
    grid_n: int = 10,
    n_probe_points: int = 50,
    tol=None,
    rng: np.random.Generator | None = None,
    reference: OracleDenoiser | None = None,
    states=None,
    noise_std: float = 1.0,
) -> IdentityReport:
    """Check the diagonal, semigroup, Lagrangian and Eulerian identities of ``den``.

    ``den`` is an :class:`OracleDenoiser` or a model.  Times run over the
    ordered triples ``s < u < t`` (pairs ``s < t``) of :func:`identity_grid`;
    states are ``n_probe_points`` draws from ``N(0, noise_std^2)`` unless
    given.  Residuals are infinity norms:

    * diagonal: ``psi_{t,t}(x) - E[I_1 | I_t = x]`` (needs ``reference`` for models);
    * semigroup: ``psi_{s,t} - omega psi_{s,u} - (1 - omega) psi_{u,t}(X_{s,u})``;
    * lagrangian: ``psi_{s,t} - psi_{t,t}(X_{s,t}) + C_{s,t} d_t psi_{s,t}``;
    * eulerian: ``d_s psi_{s,t} + J_x psi_{s,t} b_s - kappa_{s,t} (psi_{s,t} - psi_{s,s})``.
    """
    start = time.perf_counter()
    rng = rng or np.random.default_rng(0)
    tol_map = dict(DEFAULT_IDENTITY_TOL)
    if isinstance(tol, dict):
        tol_map.update(tol)
    elif tol is not None:
        tol_map = {k: float(tol) for k in IDENTITY_NAMES}
    sched = den.sched
    L, K = (den.L, den.K) if isinstance(den, OracleDenoiser) else (den.arch.L, den.arch.K)
    if states is None:
        states = noise_std * rng.standard_normal((n_probe_points, L, K))
    states = np.asarray(states, dtype=np.float64)
    P = states.shape[0]
    g = identity_grid(grid_n)

    si, ti = np.triu_indices(grid_n, k=1)
    n_pair = si.size
    pair_of = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(si, ti))}
    s_p = np.repeat(g[si], P)
    t_p = np.repeat(g[ti], P)
    x_p = np.tile(states, (n_pair, 1, 1))

    psi_st = den.probs(x_p, s_p, t_p, None)
    x_st = flow_map_estimate(den, x_p, s_p, t_p, psi=psi_st)

    res = {}
    # diagonal
    diag_ref = reference if reference is not None else (den if isinstance(den, OracleDenoiser) else None)
    if diag_ref is not None:
        t_d = np.repeat(g, P)
        x_d = np.tile(states, (grid_n, 1, 1))
        mine = den.probs(x_d, t_d, t_d)
        res["diagonal"] = np.abs(mine - diag_ref.diag_probs(x_d, t_d)).reshape(grid_n * P, -1).max(1)

    # semigroup over strict triples
    tri = [(a, b, c) for a in range(grid_n) for b in range(a + 1, grid_n) for c in range(b + 1, grid_n)]
    tri = np.array(tri, dtype=np.int64).reshape(-1, 3)
    if tri.size:
        su = np.array([pair_of[(a, b)] for a, b, _ in tri])
        st = np.array([pair_of[(a, c)] for a, _, c in tri])
        rows_su = (su[:, None] * P + np.arange(P)[None]).ravel()
        rows_st = (st[:, None] * P + np.arange(P)[None]).ravel()
        s_3 = np.repeat(g[tri[:, 0]], P)
        u_3 = np.repeat(g[tri[:, 1]], P)
        t_3 = np.repeat(g[tri[:, 2]], P)
        psi_ut = den.probs(x_st[rows_su], u_3, t_3, None)
        w = np.asarray(semigroup_weight(sched, s_3, u_3, t_3))
        rhs = _col(w) * psi_st[rows_su] + _col(1.0 - w) * psi_ut
        res["semigroup"] = np.abs(psi_st[rows_st] - rhs).reshape(rows_st.size, -1).max(1)

    c = coeffs(sched, s_p, t_p)
    # Lagrangian
    dpsi = _prob_tangent(den, x_p, s_p, t_p, None, direction="t")
    lag = psi_st - _diag(den, x_st, t_p, None) + _col(c.c_lag) * dpsi
    res["lagrangian"] = np.abs(lag).reshape(lag.shape[0], -1).max(1)

    # Eulerian along the denoiser's own drift
    psi_ss = _diag(den, x_p, s_p, None)
    drift = _col(c.lam_s) * (psi_ss - x_p)
    dsd = _prob_tangent(den, x_p, s_p, t_p, None, direction="s", v=drift)
    eul = dsd - _col(c.kappa) * (psi_st - psi_ss)
    res["eulerian"] = np.abs(eul).reshape(eul.shape[0], -1).max(1)

    residual_max = {k: float(v.max()) for k, v in res.items()}
    residual_mean = {k: float(v.mean()) for k, v in res.items()}
    return IdentityReport(
        residual_max=residual_max,
        residual_mean=residual_mean,
        tolerance={k: tol_map[k] for k in residual_max},
        grid=[float(v) for v in g],
        n_probe_points=P,
        source="oracle" if isinstance(den, OracleDenoiser) else "model",
        schedule=sched.kind,
        seconds=time.perf_counter() - start,
    )


def probe_tv(model, oracle: OracleDenoiser, rng: np.random.Generator, n_t: int = 16, n_per_t: int = 64) -> float:
    """Mean per-position TV between ``psi_{t,t}`` of ``model`` and the oracle posterior.

    Probe states are drawn from the interpolant at each of ``n_t`` times in
    ``[0, 1 - eps]``.
    """
    from .oracle import make_interpolant

    dist = oracle.source
    ts = np.linspace(0.0, 1.0 - oracle.eps, n_t)
    t = np.repeat(ts, n_per_t)
    x0 = oracle.noise.std * rng.standard_normal((t.size, oracle.L, oracle.K))
    target = dist.sample(rng, t.size)
    x = make_interpolant(oracle.sched, x0, target, t, oracle.K).x
    q = model.probs(x, t, t)
    p = oracle.diag_probs(x, t)
    return float(0.5 * np.abs(q - p).sum(-1).mean())


# ---- sampling metrics -------------------------------------------------------


def evaluate(den, nfes, n_samples: int, seed: int, truth: ToyDistribution | None = None, *, checkpoint: str = "", **sampler_kw):
    """Sample at each NFE and report TV to ``truth`` (when enumerable) and unigram entropy."""
    from .sampler import SamplerConfig, generate

    K = truth.K if truth is not None else (den.arch.K if hasattr(den, "arch") else den.K)
    tvs, ents = [], []
    for n in nfes:
        tokens = generate(den, SamplerConfig(nfe=int(n), seed=seed, **sampler_kw), n_samples)
        tvs.append(None if truth is None else tv_distance(tokens, truth))
        ents.append(unigram_entropy(tokens, K))
    return EvalReport(
        nfe=[int(n) for n in nfes],
        tv_distance=tvs,
        unigram_entropy=ents,
        sample_count=[n_samples] * len(nfes),
        seed=seed,
        checkpoint=checkpoint,
    )


def cfg_sweep(den, prompts, omegas, cfg, *, reference=None, checkpoint: str = "") -> SweepReport:
    """Block generation from ``prompts`` at each guidance strength.

    ``reference`` is a row-stochastic transition matrix; the metric is the
    bigram TV of prompt-tail plus generated tokens against it.
    """
    from dataclasses import replace as _replace

    from .sampler import block_generate

    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2 or prompts.shape[0] == 0:
        raise ValueError("prompts must be a non-empty (N, C) array")
    K = den.arch.K if hasattr(den, "arch") else den.K
    metric, ents = [], []
    for w in omegas:
        tokens = block_generate(den, _replace(cfg, guidance_omega=float(w)), prompts.shape[0], prompts)
        ents.append(unigram_entropy(tokens, K))
        if reference is None:
            metric.append(None)
        else:
            seq = np.concatenate([prompts[:, -1:], tokens], axis=1) if prompts.shape[1] else tokens
            metric.append(bigram_tv(seq, reference, K))
    return SweepReport(
        omega=[float(w) for w in omegas],
        metric=metric,
        unigram_entropy=ents,
        sample_count=[int(prompts.shape[0])] * len(omegas),
        seed=cfg.seed,
        checkpoint=checkpoint,
    )
