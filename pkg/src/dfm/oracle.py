"""Exact ground truth for enumerable toy problems.

The Bayes posterior ``E[I_1 | I_t = x]`` is computed by enumerating all ``K**L``
sequences.  Trajectories of the probability-flow ODE are integrated with RK4 in
the clock ``rho = -log(alpha_t)``, where the ODE reads ``dx/drho = psi_rho(x) - x``
and the mean-denoiser weight becomes ``exp(rho)``; both are smooth up to
``t = 1 - eps``, unlike their expressions in ``t``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import special

from .schedule import Schedule, ScheduleError, alpha_beta, beta_dot, log_alpha_clock
from .simplex import one_hot

__all__ = [
    "ToyDistribution",
    "MarkovChain",
    "NoiseConfig",
    "InterpolantSample",
    "IntegrationError",
    "make_interpolant",
    "posterior_denoiser",
    "exact_drift",
    "integrate_flow",
    "exact_mean_denoiser",
    "OracleDenoiser",
    "TERMINAL_EPS",
]

TERMINAL_EPS = 1e-3
MAX_ENUMERATION = 2**20
_CHUNK = 2**22


class IntegrationError(RuntimeError):
    """Raised when a trajectory blows up or the quadrature loses normalisation."""


@dataclass(frozen=True)
class NoiseConfig:
    """Isotropic Gaussian source ``p_0 = N(0, std^2 I)`` on each position."""

    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("noise std must be positive")


@dataclass(frozen=True, eq=False)
class ToyDistribution:
    """Explicit probability table over all ``K**L`` sequences (lexicographic order).

    ``marginals`` is set for product distributions and enables a factorised
    posterior, which is exact in that case.
    """

    L: int
    K: int
    joint_probs: np.ndarray
    marginals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.L < 1 or self.K < 2:
            raise ValueError("need L >= 1 and K >= 2")
        if self.K**self.L > MAX_ENUMERATION:
            raise ValueError(f"K**L = {self.K ** self.L} exceeds the enumeration limit {MAX_ENUMERATION}")
        p = np.asarray(self.joint_probs, dtype=np.float64).reshape(-1)
        if p.size != self.K**self.L:
            raise ValueError("joint_probs must have K**L entries")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}")
        p = p / p.sum()
        p.setflags(write=False)
        object.__setattr__(self, "joint_probs", p)

    @classmethod
    def product(cls, marginals) -> "ToyDistribution":
        m = np.asarray(marginals, dtype=np.float64)
        m = m / m.sum(-1, keepdims=True)
        L, K = m.shape
        joint = m[0]
        for row in m[1:]:
            joint = np.multiply.outer(joint, row)
        return cls(L, K, joint.reshape(-1), marginals=m)

    @classmethod
    def random_product(cls, K: int, L: int, rng: np.random.Generator, concentration: float = 1.0):
        return cls.product(rng.dirichlet(np.full(K, concentration), size=L))

    @classmethod
    def random_joint(cls, K: int, L: int, rng: np.random.Generator, concentration: float = 1.0):
        return cls(L, K, rng.dirichlet(np.full(K**L, concentration)))

    @cached_property
    def sequences(self) -> np.ndarray:
        """``(K**L, L)`` table of all sequences in lexicographic order."""
        return np.array(list(itertools.product(range(self.K), repeat=self.L)), dtype=np.int64).reshape(-1, self.L)

    @cached_property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.joint_probs)

    @cached_property
    def _onehot_flat(self) -> np.ndarray:
        return one_hot(self.sequences, self.K).reshape(self.K**self.L, self.L * self.K)

    def index_of(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        weights = self.K ** np.arange(self.L - 1, -1, -1)
        return tokens @ weights

    def position_marginals(self) -> np.ndarray:
        if self.marginals is not None:
            return self.marginals
        return (self.joint_probs @ self._onehot_flat).reshape(self.L, self.K)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(self.joint_probs.size, size=n, p=self.joint_probs)
        return self.sequences[idx]

    def save(self, path) -> None:
        lines = [f"{self.L} {self.K}"]
        for seq, p in zip(self.sequences, self.joint_probs):
            lines.append(" ".join(str(int(v)) for v in seq) + f" {float(p)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ToyDistribution":
        """Read ``L K`` then one ``tokens... prob`` line per sequence (``#`` starts a comment)."""
        rows = []
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
        if not rows or len(rows[0]) != 2:
            raise ValueError("first line must be 'L K'")
        L, K = int(rows[0][0]), int(rows[0][1])
        table = np.full(K**L, np.nan)
        weights = K ** np.arange(L - 1, -1, -1)
        for row in rows[1:]:
            if len(row) != L + 1:
                raise ValueError(f"expected {L} tokens and a probability, got {row}")
            toks = np.array([int(v) for v in row[:L]])
            if np.any(toks < 0) or np.any(toks >= K):
                raise ValueError(f"token out of range in {row}")
            idx = int(toks @ weights)
            if not np.isnan(table[idx]):
                raise ValueError(f"duplicate sequence {row[:L]}")
            table[idx] = float(row[L])
        if np.isnan(table).any():
            raise ValueError("every one of the K**L sequences must be listed")
        return cls(L, K, table)


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """First-order chain used for conditional and block-generation toys."""

    transition: np.ndarray
    initial: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or np.any(P < 0):
            raise ValueError("transition must be a square non-negative matrix")
        P = P / P.sum(1, keepdims=True)
        object.__setattr__(self, "transition", P)
        init = self.stationary() if self.initial is None else np.asarray(self.initial, dtype=np.float64)
        object.__setattr__(self, "initial", init / init.sum())
        object.__setattr__(self, "_cache", {})

    @property
    def K(self) -> int:
        return self.transition.shape[0]

    def stationary(self) -> np.ndarray:
        w, v = np.linalg.eig(self.transition.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        return pi / pi.sum()

    def block_distribution(self, L: int, last_token: int | None = None) -> ToyDistribution:
        """Law of the next ``L`` tokens given the last context token (``None``: chain start)."""
        key = (L, last_token)
        cache = self._cache
        if key not in cache:
            start = self.initial if last_token is None else self.transition[last_token]
            joint = start
            for _ in range(L - 1):
                joint = _extend(joint, self.transition)
            cache[key] = ToyDistribution(L, self.K, joint.reshape(-1))
        return cache[key]

    def sample(self, rng: np.random.Generator, n: int, length: int, context: np.ndarray | None = None) -> np.ndarray:
        out = np.empty((n, length), dtype=np.int64)
        cum_p = np.cumsum(self.transition, axis=1)
        if context is None or context.shape[1] == 0:
            out[:, 0] = rng.choice(self.K, size=n, p=self.initial)
        else:
            u = rng.random(n)
            out[:, 0] = (u[:, None] > cum_p[context[:, -1]]).sum(1)
        for j in range(1, length):
            u = rng.random(n)
            out[:, j] = (u[:, None] > cum_p[out[:, j - 1]]).sum(1)
        return np.minimum(out, self.K - 1)

    def bigram_probs(self) -> np.ndarray:
        """Stationary joint law of consecutive pairs."""
        pi = self.stationary()
        return pi[:, None] * self.transition


def _extend(joint: np.ndarray, P: np.ndarray) -> np.ndarray:
    # joint over a prefix (flattened, last axis = last token) times one more transition
    flat = joint.reshape(-1, P.shape[0])
    return (flat[:, :, None] * P[None]).reshape(-1)


@dataclass
class InterpolantSample:
    """``x = alpha_t x0 + beta_t onehot(target)``."""

    x: np.ndarray
    x0: np.ndarray
    target: np.ndarray
    t: np.ndarray


def make_interpolant(sched: Schedule, x0, target, t, K: int) -> InterpolantSample:
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a, b = alpha_beta(sched, t)
    a = np.asarray(a)
    b = np.asarray(b)
    if not sched.per_position:
        a = a[..., None]
        b = b[..., None]
    x = a[..., None] * x0 + b[..., None] * one_hot(target, K)
    return InterpolantSample(x=x, x0=x0, target=np.asarray(target), t=t)


def _require_shared(sched: Schedule) -> None:
    if sched.per_position:
        raise ScheduleError("the oracle supports shared (not per-position) schedules only")


def _softmax_any(z):
    # softmax that also accepts complex-step perturbed logits (shift by the real max)
    if not np.iscomplexobj(z):
        return special.softmax(z, axis=-1)
    e = np.exp(z - z.real.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _dtype(*arrays):
    return np.result_type(np.float64, *arrays)


def _posterior_ab(dist: ToyDistribution, x: np.ndarray, alpha, beta, std: float) -> np.ndarray:
    """Posterior marginals at explicit ``(alpha, beta)`` values (broadcast over the batch).

    Complex inputs are propagated analytically, which supports complex-step derivatives.
    """
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    x = np.asarray(x)
    x = x.astype(_dtype(x, alpha, beta), copy=False)
    L, K = dist.L, dist.K
    if x.shape[-2:] != (L, K):
        raise ValueError(f"state has shape {x.shape}, expected (..., {L}, {K})")
    batch = x.shape[:-2]
    xf = x.reshape(-1, L, K)
    n = xf.shape[0]
    a = np.broadcast_to(alpha, batch).reshape(-1)
    b = np.broadcast_to(beta, batch).reshape(-1)
    out = np.empty((n, L, K), dtype=x.dtype)
    live = a.real > 0
    if not live.all():
        # alpha = 0: the state is the clean sample; snap to the nearest vertex
        out[~live] = one_hot(np.argmax(xf[~live].real, axis=-1), K)
    if live.any():
        idx = np.flatnonzero(live)
        scale = b[idx] / (a[idx] ** 2 * std**2)
        if dist.marginals is not None:
            with np.errstate(divide="ignore"):
                logm = np.log(dist.marginals)
            logits = logm[None] + scale[:, None, None] * xf[idx]
            out[idx] = _softmax_any(logits)
        else:
            N = K**L
            step = max(1, _CHUNK // N)
            seqs = dist.sequences
            for lo in range(0, idx.size, step):
                rows = idx[lo : lo + step]
                lin = np.zeros((rows.size, N), dtype=x.dtype)
                for pos in range(L):
                    lin += xf[rows, pos][:, seqs[:, pos]]
                w = _softmax_any(dist.log_probs[None] + scale[lo : lo + step, None] * lin)
                out[rows] = (w @ dist._onehot_flat).reshape(-1, L, K)
    return out.reshape(*batch, L, K)


def posterior_denoiser(dist: ToyDistribution, sched: Schedule, noise: NoiseConfig, x, t) -> np.ndarray:
    """``E[I_1 | I_t = x]`` per position, marginalised from the exact joint posterior."""
    _require_shared(sched)
    a, b = alpha_beta(sched, t)
    return _posterior_ab(dist, x, a, b, noise.std)


def exact_drift(dist: ToyDistribution, sched: Schedule, noise: NoiseConfig, x, t) -> np.ndarray:
    """``b_t(x) = ell_t x + lam_t E[I_1 | I_t = x]``."""
    _require_shared(sched)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr >= 1.0):
        raise ScheduleError("the drift has a pole at t = 1")
    a, _ = alpha_beta(sched, t_arr)
    lam = np.asarray(beta_dot(sched, t_arr)) / np.asarray(a)
    psi = posterior_denoiser(dist, sched, noise, x, t_arr)
    lam = lam[..., None, None]
    return lam * (psi - np.asarray(x, dtype=np.float64))


def _rho_range(sched: Schedule, s, t, batch, eps: float):
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), batch)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), batch)
    if np.any(t < s):
        raise ValueError("integration needs s <= t")
    if np.any(t > 1.0 - eps + 1e-15):
        raise ValueError(f"integration needs t <= 1 - eps (eps = {eps})")
    return log_alpha_clock(sched, s), log_alpha_clock(sched, t)


def _rk4_rho(dist, std, x, rho_s, rho_t, n_steps, accumulate=False):
    x = np.array(x, dtype=_dtype(x, rho_s, rho_t))
    h = (np.asarray(rho_t) - np.asarray(rho_s)) / n_steps
    hb = h[..., None, None]

    def field(state, rho):
        a = np.exp(-rho)
        return _posterior_ab(dist, state, a, -np.expm1(-rho), std) - state

    acc = np.zeros_like(x) if accumulate else None
    wsum = np.zeros_like(h) if accumulate else None
    rho = np.array(rho_s, dtype=x.dtype)
    for i in range(n_steps):
        k1 = field(x, rho)
        if accumulate:
            c = 1.0 if i == 0 else (4.0 if i % 2 else 2.0)
            wt = c * np.exp(rho)
            acc += wt[..., None, None] * (k1 + x)
            wsum += wt
        k2 = field(x + 0.5 * hb * k1, rho + 0.5 * h)
        k3 = field(x + 0.5 * hb * k2, rho + 0.5 * h)
        k4 = field(x + hb * k3, rho + h)
        x = x + hb / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"trajectory became non-finite at RK4 sub-step {i}")
        rho = np.asarray(rho_s) + (i + 1) * h
    if accumulate:
        wt = np.exp(rho)
        acc += wt[..., None, None] * _posterior_ab(dist, x, np.exp(-rho), -np.expm1(-rho), std)
        wsum += wt
        return x, acc * (hb / 3.0), wsum * h / 3.0
    return x


def integrate_flow(
    dist: ToyDistribution,
    sched: Schedule,
    noise: NoiseConfig,
    x_s,
    s,
    t,
    n_steps: int = 2000,
    eps: float = TERMINAL_EPS,
) -> np.ndarray:
    """Flow map ``X_{s,t}(x_s)`` by classical RK4 with ``n_steps`` uniform steps in ``-log alpha``.

    ``s`` and ``t`` may be scalars or arrays matching the batch shape of ``x_s``.
    """
    _require_shared(sched)
    x_s = np.asarray(x_s, dtype=np.float64)
    rho_s, rho_t = _rho_range(sched, s, t, x_s.shape[:-2], eps)
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    return _rk4_rho(dist, noise.std, x_s, rho_s, rho_t, n_steps)


def _mean_denoiser_rho(dist, std, x_s, rho_s, rho_t, n_steps):
    """Mean denoiser and endpoint between clock values (rows with equal clocks allowed)."""
    x_t, integral, wint = _rk4_rho(dist, std, x_s, rho_s, rho_t, n_steps, accumulate=True)
    diag = np.real(rho_t) <= np.real(rho_s)
    psi = np.empty_like(x_t)
    if np.any(diag):
        r = rho_s[diag]
        psi[diag] = _posterior_ab(dist, x_s[diag], np.exp(-r), -np.expm1(-r), std)
    off = ~diag
    if np.any(off):
        # the averaging density in rho is exp(rho) / (exp(rho_t) - exp(rho_s))
        norm = 1.0 / (np.exp(rho_t[off]) - np.exp(rho_s[off]))
        wnorm = np.real(wint[off] * norm)
        if np.max(np.abs(wnorm - 1.0)) > 1e-4:
            raise IntegrationError(f"averaging weight integrates to {wnorm.min()}..{wnorm.max()}, not 1")
        raw = integral[off] * norm[..., None, None]
        drift = np.max(np.abs(raw.real.sum(-1) - 1.0))
        if drift > 1e-6:
            raise IntegrationError(f"mean denoiser left the simplex by {drift:.2e}")
        if not np.iscomplexobj(raw):
            raw = np.maximum(raw, 0.0)
        psi[off] = raw / raw.sum(-1, keepdims=True)
    return psi, x_t


def exact_mean_denoiser(
    dist: ToyDistribution,
    sched: Schedule,
    noise: NoiseConfig,
    x_s,
    s,
    t,
    n_steps: int = 2000,
    eps: float = TERMINAL_EPS,
    return_endpoint: bool = False,
):
    """``psi_{s,t}(x_s)``: time average of the posterior along the trajectory.

    Composite Simpson on the RK4 nodes.  In the ``rho`` clock the averaging
    density is ``exp(rho) / (exp(rho_t) - exp(rho_s))``.  Rows with ``s == t``
    return the posterior itself.  With ``return_endpoint`` the trajectory
    endpoint ``X_{s,t}(x_s)`` is returned as well.
    """
    _require_shared(sched)
    if n_steps < 2 or n_steps % 2:
        raise ValueError("Simpson quadrature needs an even n_steps >= 2")
    x_s = np.asarray(x_s, dtype=np.float64)
    rho_s, rho_t = _rho_range(sched, s, t, x_s.shape[:-2], eps)
    psi, x_t = _mean_denoiser_rho(dist, noise.std, x_s, rho_s, rho_t, n_steps)
    if return_endpoint:
        return psi, x_t
    return psi


_STENCILS = {
    # offsets and weights (times 1/h) by accuracy order
    2: {
        "central": ((-1.0, 1.0), (-0.5, 0.5)),
        "forward": ((0.0, 1.0, 2.0), (-1.5, 2.0, -0.5)),
        "backward": ((-2.0, -1.0, 0.0), (0.5, -2.0, 1.5)),
    },
    4: {
        "central": ((-2.0, -1.0, 1.0, 2.0), (1.0 / 12, -8.0 / 12, 8.0 / 12, -1.0 / 12)),
        "forward": ((0.0, 1.0, 2.0, 3.0, 4.0), (-25.0 / 12, 4.0, -3.0, 4.0 / 3, -0.25)),
        "backward": ((-4.0, -3.0, -2.0, -1.0, 0.0), (0.25, -4.0 / 3, 3.0, -4.0, 25.0 / 12)),
    },
}
_COMPLEX_STEP = 1e-30
DERIVATIVE_MODES = ("complex", "fd2", "fd4")


def _fd_derivative(f, center, lo, hi, h, order: int = 4):
    """Finite difference of ``f(rows, offsets)`` per row, one-sided near ``[lo, hi]``.

    ``f`` evaluates the selected rows at per-row offsets and returns an array
    whose leading axis runs over those rows.
    """
    center, lo, hi, h = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (center, lo, hi, h)))
    reach = max(abs(o) for o in _STENCILS[order]["forward"][0])
    half = reach / 2
    low = center - half * h < lo
    high = center + half * h > hi
    if np.any(low & high) or np.any(h <= 0):
        raise ValueError("finite-difference step does not fit in the admissible interval")
    kind = np.where(low, 1, np.where(high, 2, 0))
    out = None
    for code, name in enumerate(("central", "forward", "backward")):
        rows = np.flatnonzero(kind == code)
        if not rows.size:
            continue
        for off, w in zip(*_STENCILS[order][name]):
            val = f(rows, off * h[rows])
            if out is None:
                out = np.zeros(center.shape + val.shape[1:], dtype=val.dtype)
            out[rows] += (w / h[rows]).reshape((-1,) + (1,) * (val.ndim - 1)) * val
    return out


def _take_context(context, rows):
    if context is None:
        return None
    ctx = np.asarray(context)
    return ctx if ctx.ndim < 2 else ctx[rows]


class OracleDenoiser:
    """Exact mean denoiser exposed through the same surface as a trained model.

    ``probs(x, s, t)`` integrates the flow; ``t`` beyond ``1 - eps`` is clamped
    and the result snapped to the posterior there, which is one-hot to machine
    precision.

    Derivatives are taken in the ``rho`` clock, where the flow does not depend
    on the schedule, and mapped back with the exact ``d rho / dt = beta_dot /
    alpha``.  ``derivative`` selects the method: ``"complex"`` perturbs the clock
    (and the state) along the imaginary axis, giving the derivative of the
    discretised oracle to rounding accuracy; ``"fd2"`` / ``"fd4"`` are central
    differences of second / fourth order with step ``fd_step`` measured in ``t``.

    ``source`` is either a :class:`ToyDistribution` or a :class:`MarkovChain`;
    with a chain the law of the ``L`` generated tokens depends on the last
    context token.  ``diagonal_only`` replaces ``psi_{s,t}`` by ``psi_{s,s}``.
    """

    def __init__(
        self,
        source,
        sched: Schedule,
        noise: NoiseConfig | None = None,
        *,
        L: int | None = None,
        n_steps: int = 2000,
        fd_step: float = 1e-3,
        derivative: str = "complex",
        eps: float = TERMINAL_EPS,
        diagonal_only: bool = False,
    ):
        _require_shared(sched)
        if n_steps < 2 or n_steps % 2:
            raise ValueError("Simpson quadrature needs an even n_steps >= 2")
        if derivative not in DERIVATIVE_MODES:
            raise ValueError(f"derivative must be one of {DERIVATIVE_MODES}")
        self.source = source
        self.sched = sched
        self.noise = noise or NoiseConfig()
        self.n_steps = n_steps
        self.fd_step = fd_step
        self.derivative = derivative
        self.eps = eps
        self.diagonal_only = diagonal_only
        self.rho_max = float(log_alpha_clock(sched, 1.0 - eps))
        if isinstance(source, ToyDistribution):
            self.L, self.K = source.L, source.K
        elif isinstance(source, MarkovChain):
            if L is None:
                raise ValueError("a Markov-chain oracle needs the block length L")
            self.L, self.K = L, source.K
        else:
            raise TypeError("source must be a ToyDistribution or a MarkovChain")

    @property
    def conditional(self) -> bool:
        return isinstance(self.source, MarkovChain)

    def _groups(self, context, n):
        if not self.conditional:
            return [(self.source, np.arange(n))]
        if context is None or np.asarray(context).shape[-1] == 0:
            return [(self.source.block_distribution(self.L, None), np.arange(n))]
        # only the last real token matters for a first-order chain; -1 marks padding
        ctx = np.broadcast_to(np.asarray(context, dtype=np.int64), (n, np.shape(context)[-1]))
        valid = ctx >= 0
        idx = ctx.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
        last = np.where(valid.any(1), ctx[np.arange(n), idx], -1)
        return [
            (self.source.block_distribution(self.L, None if k < 0 else int(k)), np.flatnonzero(last == k))
            for k in np.unique(last)
        ]

    def _apply(self, fn, x, context, *times):
        x = np.asarray(x)
        flat = x.reshape(-1, self.L, self.K)
        n = flat.shape[0]
        times = [np.broadcast_to(np.asarray(v), x.shape[:-2]).reshape(-1) for v in times]
        out = None
        for dist, rows in self._groups(context, n):
            if rows.size:
                val = fn(dist, flat[rows], *[v[rows] for v in times])
                if out is None:
                    out = np.empty(flat.shape, dtype=val.dtype)
                out[rows] = val
        return out.reshape(x.shape)

    def _rho(self, t):
        return np.asarray(log_alpha_clock(self.sched, np.asarray(t, dtype=np.float64)), dtype=np.float64)

    def _rho_rate(self, t):
        t = np.asarray(t, dtype=np.float64)
        a, _ = alpha_beta(self.sched, t)
        return np.asarray(beta_dot(self.sched, t)) / np.asarray(a)

    def _probs_rho(self, x, rho_s, rho_t, context=None):
        std = self.noise.std

        def fn(dist, xx, rs, rt):
            if self.diagonal_only:
                return _posterior_ab(dist, xx, np.exp(-rs), -np.expm1(-rs), std)
            over = rt.real > self.rho_max
            rt_c = np.where(over, self.rho_max, rt)
            rs_c = np.where(rs.real > rt_c.real, rt_c, rs)
            psi, x_end = _mean_denoiser_rho(dist, std, xx, rs_c, rt_c, self.n_steps)
            if np.any(over):
                # psi_{s,1} is the terminal vertex; at t = 1 - eps the posterior is already one-hot
                r = rt_c[over]
                psi[over] = _posterior_ab(dist, x_end[over], np.exp(-r), -np.expm1(-r), std)
            return psi

        return self._apply(fn, x, context, rho_s, rho_t)

    def diag_probs(self, x, t, context=None) -> np.ndarray:
        std = self.noise.std

        def fn(dist, xx, tt):
            return _posterior_ab(dist, xx, *alpha_beta(self.sched, tt), std)

        return self._apply(fn, x, context, t)

    def probs(self, x, s, t, context=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[:-2]
        s_f = np.broadcast_to(np.asarray(s, dtype=np.float64), batch).reshape(-1)
        t_f = np.broadcast_to(np.asarray(t, dtype=np.float64), batch).reshape(-1)
        if np.any(s_f > t_f):
            raise ValueError("oracle queries need s <= t")
        xf = x.reshape(-1, self.L, self.K)
        out = self._probs_rho(xf, self._rho(s_f), self._rho(t_f), context)
        same = s_f == t_f
        if np.any(same):
            # the diagonal is the posterior itself, evaluated at the schedule's own (alpha, beta)
            out[same] = self.diag_probs(xf[same], t_f[same], _take_context(context, same))
        return out.reshape(x.shape)

    def logits(self, x, s, t, context=None) -> np.ndarray:
        return np.log(np.maximum(self.probs(x, s, t, context), 1e-300))

    def _times(self, x, s, t):
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[:-2]
        s_b = np.broadcast_to(np.asarray(s, dtype=np.float64), batch)
        t_b = np.broadcast_to(np.asarray(t, dtype=np.float64), batch)
        return x, s_b, t_b

    def _directional(self, x, rs, rt, v_rho, ds, dt, context, as_logits, lo, hi, center):
        """Derivative along ``(x + e v_rho, rho_s + e ds, rho_t + e dt)`` at ``e = 0``."""
        if self.derivative == "complex":
            eta = _COMPLEX_STEP
            xs = x if v_rho is None else x + 1j * eta * v_rho
            p = self._probs_rho(xs, rs + 1j * eta * ds, rt + 1j * eta * dt, context)
            if as_logits:
                return np.angle(p) / eta
            return p.imag / eta
        order = 2 if self.derivative == "fd2" else 4
        rate_h = self._fd_h

        def f(rows, off):
            xx = x[rows] if v_rho is None else x[rows] + off[:, None, None] * v_rho[rows]
            p = self._probs_rho(xx, rs[rows] + off * ds, rt[rows] + off * dt, _take_context(context, rows))
            return np.log(np.maximum(p, 1e-300)) if as_logits else p

        return _fd_derivative(f, center, lo, hi, rate_h, order)

    def _d_dt(self, x, s, t, context, as_logits):
        x, s_b, t_b = self._times(x, s, t)
        if np.any(t_b >= 1.0 - self.eps):
            raise ValueError("time derivatives need t < 1 - eps")
        rs, rt = self._rho(s_b).reshape(-1), self._rho(t_b).reshape(-1)
        rate = self._rho_rate(t_b).reshape(-1)
        self._fd_h = self.fd_step * rate
        xf = x.reshape(-1, self.L, self.K)
        d = self._directional(xf, rs, rt, None, 0.0, 1.0, context, as_logits, rs, np.full_like(rt, self.rho_max), rt)
        return (d * rate[:, None, None]).reshape(x.shape)

    def dpsi_dt(self, x, s, t, context=None) -> np.ndarray:
        return self._d_dt(x, s, t, context, as_logits=False)

    def dz_dt(self, x, s, t, context=None) -> np.ndarray:
        return self._d_dt(x, s, t, context, as_logits=True)

    def drift(self, x, s, context=None) -> np.ndarray:
        x, s_b, _ = self._times(x, s, s)
        lam = self._rho_rate(s_b)[..., None, None]
        return lam * (self.diag_probs(x, s_b, context) - x)

    def total_derivative_s(self, x, s, t, v, context=None, *, of: str = "logits") -> np.ndarray:
        """``d/dh f_{s+h,t}(x + h v)`` at ``h = 0`` for ``f`` = logits or probs."""
        x, s_b, t_b = self._times(x, s, t)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape).reshape(-1, self.L, self.K)
        rs, rt = self._rho(s_b).reshape(-1), self._rho(t_b).reshape(-1)
        rate = self._rho_rate(s_b).reshape(-1)
        if np.any(rate <= 0):
            raise ValueError("the clock must advance at s (beta_dot > 0)")
        self._fd_h = self.fd_step * rate
        xf = x.reshape(-1, self.L, self.K)
        d = self._directional(
            xf, rs, rt, v / rate[:, None, None], 1.0, 0.0, context, of == "logits", np.zeros_like(rs), rt, rs
        )
        return (d * rate[:, None, None]).reshape(x.shape)
