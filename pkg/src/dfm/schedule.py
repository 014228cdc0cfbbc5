"""Interpolant schedules and the closed-form coefficients of the flow-map identities.

Every schedule built here belongs to the family ``alpha_t = 1 - beta_t`` with
``beta`` non-decreasing, ``beta(0) = 0`` and ``beta(1) = 1``.  Under that family
the schedule-dependent scalars reduce to

    ell_t = -beta'(t) / alpha_t,      lam_t = beta'(t) / alpha_t,
    Gamma_{s,t} = alpha_t / alpha_s,  Xi_{s,t} = (beta_t - beta_s) / alpha_s = 1 - Gamma_{s,t},

so the flow map ``X_{s,t}(x) = Gamma x + Xi psi`` is always a convex combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import isotonic_regression

__all__ = [
    "Schedule",
    "CoefficientSet",
    "ScheduleError",
    "make_linear",
    "make_tabulated",
    "make_blended_argmax",
    "argmax_match_curve",
    "alpha_beta",
    "beta_dot",
    "log_alpha_clock",
    "coeffs",
    "semigroup_weight",
    "time_average_weight",
    "position_schedule",
    "inverse_beta",
]

ENDPOINT_TOL = 1e-12


class ScheduleError(ValueError):
    """Raised for invalid schedule construction or out-of-domain evaluation."""


@dataclass(frozen=True, eq=False)
class Schedule:
    """Immutable interpolant schedule.

    ``kind`` is one of ``"linear"``, ``"blended-argmax"`` or ``"tabulated"``.
    Tabulated kinds carry a monotone ``(grid, beta_table)`` pair that is evaluated
    with a monotone cubic (PCHIP) interpolant, which also supplies ``beta'``.

    A non-zero ``stagger`` with ``n_positions = L`` turns the schedule into a
    per-position one: position ``l`` (0-based) sees ``beta(tau_l(t))`` with
    ``tau_l(t) = clip((t - offset_l) / (1 - delta), 0, 1)``.
    """

    kind: str = "linear"
    lambda_blend: float = 0.0
    grid: np.ndarray | None = None
    beta_table: np.ndarray | None = None
    stagger: float = 0.0
    n_positions: int | None = None
    _interp: Any = field(default=None, repr=False)
    _dinterp: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "blended-argmax", "tabulated"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.kind != "linear":
            if self.grid is None or self.beta_table is None:
                raise ScheduleError("tabulated schedules need grid and beta_table")
            grid = np.asarray(self.grid, dtype=np.float64)
            table = np.asarray(self.beta_table, dtype=np.float64)
            _check_table(grid, table)
            grid.setflags(write=False)
            table.setflags(write=False)
            object.__setattr__(self, "grid", grid)
            object.__setattr__(self, "beta_table", table)
            interp = PchipInterpolator(grid, table, extrapolate=False)
            object.__setattr__(self, "_interp", interp)
            object.__setattr__(self, "_dinterp", interp.derivative())
        if self.stagger < 0:
            raise ScheduleError("stagger must be non-negative")
        if self.stagger > 0 and (self.n_positions is None or self.n_positions < 1):
            raise ScheduleError("a staggered schedule needs n_positions >= 1")

    @property
    def per_position(self) -> bool:
        return self.stagger > 0 and self.n_positions is not None and self.n_positions > 1

    @property
    def delta(self) -> float:
        return self.stagger / (1.0 + self.stagger)

    @property
    def offsets(self) -> np.ndarray:
        """Per-position time shifts ``delta * l / (L - 1)``; zeros when not staggered."""
        if not self.per_position:
            return np.zeros(1)
        L = self.n_positions
        return self.delta * np.arange(L) / (L - 1)

    def base(self) -> "Schedule":
        """The same schedule without any per-position stagger."""
        if not self.per_position:
            return self
        return Schedule(self.kind, self.lambda_blend, self.grid, self.beta_table)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "lambda_blend": float(self.lambda_blend)}
        if self.kind != "linear":
            out["grid"] = [float(v) for v in self.grid]
            out["beta"] = [float(v) for v in self.beta_table]
        if self.stagger > 0:
            out["stagger"] = float(self.stagger)
            out["n_positions"] = int(self.n_positions)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        kind = d.get("kind", "linear")
        grid = d.get("grid")
        beta = d.get("beta")
        return cls(
            kind=kind,
            lambda_blend=float(d.get("lambda_blend", 0.0)),
            grid=None if grid is None else np.asarray(grid, dtype=np.float64),
            beta_table=None if beta is None else np.asarray(beta, dtype=np.float64),
            stagger=float(d.get("stagger", 0.0)),
            n_positions=d.get("n_positions"),
        )


@dataclass(frozen=True)
class CoefficientSet:
    """Scalars for an ordered time pair ``s < t`` (arrays broadcast like the inputs).

    ``lsd_scale * 1 + lsd_poly * delta`` and ``esd_scale * 1 - esd_poly * delta`` are
    the log arguments of the Lagrangian / Eulerian logit teachers after multiplying
    through by a positive scalar; they stay finite at ``t = 1``.
    """

    gamma: Any
    xi: Any
    ell_s: Any
    ell_t: Any
    lam_s: Any
    lam_t: Any
    c_lag: Any
    kappa: Any
    lsd_scale: Any
    lsd_poly: Any
    esd_scale: Any
    esd_poly: Any


def _check_table(grid: np.ndarray, table: np.ndarray) -> None:
    if grid.ndim != 1 or grid.shape != table.shape or grid.size < 2:
        raise ScheduleError("grid and beta table must be 1-D arrays of equal length >= 2")
    if not np.all(np.isfinite(table)) or not np.all(np.isfinite(grid)):
        raise ScheduleError("non-finite schedule table")
    if abs(grid[0]) > ENDPOINT_TOL or abs(grid[-1] - 1.0) > ENDPOINT_TOL:
        raise ScheduleError("grid must span [0, 1]")
    if np.any(np.diff(grid) <= 0):
        raise ScheduleError("grid must be strictly increasing")
    if abs(table[0]) > ENDPOINT_TOL or abs(table[-1] - 1.0) > ENDPOINT_TOL:
        raise ScheduleError("beta table must satisfy beta(0) = 0 and beta(1) = 1")
    if np.any(np.diff(table) < 0):
        raise ScheduleError("beta table must be non-decreasing")


def make_linear() -> Schedule:
    """``alpha_t = 1 - t``, ``beta_t = t``."""
    return Schedule("linear")


def make_tabulated(grid, beta, kind: str = "tabulated", lambda_blend: float = 0.0) -> Schedule:
    return Schedule(kind, lambda_blend, np.asarray(grid, float), np.asarray(beta, float))


def argmax_match_curve(
    vocab_size: int,
    noise_std: float,
    mc_samples: int,
    rng: np.random.Generator,
    n_points: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of ``P(argmax I_t = argmax I_1)`` on a uniform t grid.

    With ``I_1 = e_0`` and ``I_0 ~ N(0, std^2 I)`` the event is
    ``std * (max_{j>0} Z_j - Z_0) < t / (1 - t)``.  The same draws are reused for
    every t, so the estimate is an empirical CDF and monotone in t.
    """
    z = rng.standard_normal((mc_samples, vocab_size))
    gap = noise_std * (z[:, 1:].max(axis=1) - z[:, 0])
    gap.sort()
    t = np.linspace(0.0, 1.0, n_points)
    with np.errstate(divide="ignore"):
        ratio = np.where(t < 1.0, t / np.where(t < 1.0, 1.0 - t, 1.0), np.inf)
    prob = np.searchsorted(gap, ratio, side="left") / mc_samples
    return t, prob.astype(np.float64)


def make_blended_argmax(
    lambda_blend: float = 0.9,
    vocab_size: int = 8,
    noise_std: float = 1.0,
    mc_samples: int = 50_000,
    grid_size: int = 256,
    rng: np.random.Generator | None = None,
) -> Schedule:
    """Blend of the argmax-linearising schedule with the identity.

    ``beta_blend(t) = lambda * beta_argmax(t) + (1 - lambda) * t``, where
    ``beta_argmax`` is chosen so that the (isotonically smoothed) probability of
    recovering the clean token by argmax grows linearly in the new time.
    """
    if not 0.0 <= lambda_blend <= 1.0:
        raise ScheduleError("lambda_blend must lie in [0, 1]")
    if vocab_size < 2:
        raise ScheduleError("vocab_size must be >= 2")
    if mc_samples < 1000:
        raise ScheduleError("mc_samples must be >= 1000")
    if grid_size < 2:
        raise ScheduleError("grid_size must be >= 2")
    if noise_std <= 0:
        raise ScheduleError("noise_std must be positive")
    grid = np.linspace(0.0, 1.0, grid_size)
    if lambda_blend == 0.0:
        return Schedule("blended-argmax", 0.0, grid, grid.copy())

    rng = np.random.default_rng(0) if rng is None else rng
    t_fine, raw = argmax_match_curve(vocab_size, noise_std, mc_samples, rng, max(8 * grid_size, 2048))
    smooth = isotonic_regression(raw).x
    # isotonic smoothing should only remove sampling jitter
    if np.max(np.abs(smooth - raw)) > 5.0 * np.sqrt(0.25 / mc_samples):
        raise ScheduleError("argmax-match curve is not monotone; increase mc_samples")
    span = smooth[-1] - smooth[0]
    if span <= 0:
        raise ScheduleError("degenerate argmax-match curve")
    frac = (smooth - smooth[0]) / span
    # invert on the first time each level is reached
    keep = np.concatenate([[True], np.diff(frac) > 0])
    beta_argmax = np.interp(grid, frac[keep], t_fine[keep])
    beta_argmax[0], beta_argmax[-1] = 0.0, 1.0
    table = lambda_blend * beta_argmax + (1.0 - lambda_blend) * grid
    table = np.maximum.accumulate(np.clip(table, 0.0, 1.0))
    table[0], table[-1] = 0.0, 1.0
    return Schedule("blended-argmax", float(lambda_blend), grid, table)


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ScheduleError("time must lie in [0, 1]")
    return t


def _base_beta(sched: Schedule, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if sched.kind == "linear":
        return t.copy(), np.ones_like(t)
    beta = sched._interp(t)
    dbeta = sched._dinterp(t)
    beta = np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, beta))
    return np.clip(beta, 0.0, 1.0), np.maximum(dbeta, 0.0)


def _beta_and_dot(sched: Schedule, t) -> tuple[np.ndarray, np.ndarray]:
    t = _check_time(t)
    if not sched.per_position:
        return _base_beta(sched, t)
    delta = sched.delta
    tau_raw = (t[..., None] - sched.offsets) / (1.0 - delta)
    tau = np.clip(tau_raw, 0.0, 1.0)
    beta, dbeta = _base_beta(sched, tau)
    inside = (tau_raw > 0.0) & (tau_raw < 1.0)
    return beta, np.where(inside, dbeta / (1.0 - delta), 0.0)


def alpha_beta(sched: Schedule, t):
    """Return ``(alpha_t, beta_t)``; per-position schedules append a trailing L axis."""
    beta, _ = _beta_and_dot(sched, t)
    alpha = 1.0 - beta
    if beta.ndim == 0:
        return float(alpha), float(beta)
    return alpha, beta


def beta_dot(sched: Schedule, t):
    _, dbeta = _beta_and_dot(sched, t)
    return float(dbeta) if dbeta.ndim == 0 else dbeta


def log_alpha_clock(sched: Schedule, t):
    """``rho_t = -log(alpha_t)``; the probability-flow ODE reads ``dx/drho = psi - x``."""
    beta, _ = _beta_and_dot(sched, t)
    with np.errstate(divide="ignore"):
        rho = -np.log1p(-beta)
    return float(rho) if rho.ndim == 0 else rho


def inverse_beta(sched: Schedule, y) -> np.ndarray:
    """Smallest ``t`` with ``beta(t) = y`` (shared schedules only)."""
    y = np.asarray(y, dtype=np.float64)
    if sched.per_position:
        raise ScheduleError("inverse_beta is undefined for per-position schedules")
    if sched.kind == "linear":
        return y.copy()
    # dense monotone evaluation, then linear inversion
    t = np.linspace(0.0, 1.0, 16 * sched.grid.size + 1)
    b, _ = _base_beta(sched, t)
    b = np.maximum.accumulate(b)
    keep = np.concatenate([[True], np.diff(b) > 0])
    out = np.interp(y, b[keep], t[keep])
    return np.where(y >= 1.0, 1.0, np.where(y <= 0.0, 0.0, out))


def coeffs(sched: Schedule, s, t, *, allow_equal: bool = False) -> CoefficientSet:
    """All flow-map scalars for ``s < t`` (``s <= t`` when ``allow_equal``).

    Positions of a staggered schedule whose noise is already gone at ``s``
    (``alpha_s = 0``) are frozen: ``Gamma = 1``, ``Xi = 0`` and the remaining
    scalars are zero.
    """
    s_arr = _check_time(s)
    t_arr = _check_time(t)
    bad = (t_arr < s_arr) if allow_equal else (t_arr <= s_arr)
    if np.any(bad):
        raise ScheduleError("coefficients need s < t")
    if np.any(s_arr >= 1.0):
        raise ScheduleError("coefficients need s < 1")
    b_s, db_s = _beta_and_dot(sched, s_arr)
    b_t, db_t = _beta_and_dot(sched, t_arr)
    a_s, a_t = 1.0 - b_s, 1.0 - b_t
    gap = b_t - b_s  # = alpha_s - alpha_t, computed without cancellation
    frozen = a_s <= 0.0
    a_s_safe = np.where(frozen, 1.0, a_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(frozen, 1.0, a_t / a_s_safe)
        xi = np.where(frozen, 0.0, gap / a_s_safe)
        lam_s = np.where(frozen, 0.0, db_s / a_s_safe)
        lam_t = np.where(a_t > 0, db_t / np.where(a_t > 0, a_t, 1.0), np.inf)
        c_lag = np.where(db_t > 0, xi * a_t / np.where(db_t > 0, db_t, 1.0), np.inf)
        c_lag = np.where(xi == 0.0, 0.0, c_lag)
        kappa = np.where(gap > 0, a_t * db_s / (a_s_safe * np.where(gap > 0, gap, 1.0)), np.inf)
    out = CoefficientSet(
        gamma=gamma,
        xi=xi,
        ell_s=-lam_s,
        ell_t=-lam_t,
        lam_s=lam_s,
        lam_t=lam_t,
        c_lag=c_lag,
        kappa=np.where(frozen, 0.0, kappa),
        lsd_scale=db_t,
        lsd_poly=a_t * xi,
        esd_scale=a_t * db_s,
        esd_poly=np.where(frozen, 0.0, a_s * gap),
    )
    if np.ndim(gamma) == 0:
        return CoefficientSet(**{k: float(v) for k, v in out.__dict__.items()})
    return out


def semigroup_weight(sched: Schedule, s, u, t):
    """``omega_{s,u,t} = Gamma_{u,t} Xi_{s,u} / Xi_{s,t}``; in [0, 1] for monotone schedules.

    ``u == s`` and ``u == t`` are accepted and give 0 and 1 respectively.
    """
    s_arr, u_arr, t_arr = (np.asarray(v, dtype=np.float64) for v in (s, u, t))
    if np.any(u_arr < s_arr) or np.any(t_arr < u_arr) or np.any(t_arr <= s_arr):
        raise ScheduleError("semigroup weight needs s <= u <= t with s < t")
    c_ut = coeffs(sched, u_arr, t_arr, allow_equal=True)
    c_su = coeffs(sched, s_arr, u_arr, allow_equal=True)
    c_st = coeffs(sched, s_arr, t_arr)
    with np.errstate(invalid="ignore", divide="ignore"):
        omega = np.where(c_st.xi > 0, c_ut.gamma * c_su.xi / np.where(c_st.xi > 0, c_st.xi, 1.0), 0.0)
    omega = np.clip(omega, 0.0, 1.0)
    return float(omega) if np.ndim(omega) == 0 else omega


def time_average_weight(sched: Schedule, s, t, u):
    """Density ``w_{s,t}(u) = (alpha_t / Xi_{s,t}) * lam_u / alpha_u`` on ``[s, t]``."""
    s_arr, t_arr, u_arr = (np.asarray(v, dtype=np.float64) for v in (s, t, u))
    if np.any(u_arr < s_arr) or np.any(u_arr > t_arr):
        raise ScheduleError("need s <= u <= t")
    if np.any(t_arr >= 1.0):
        raise ScheduleError("the averaging weight has a pole at t = 1; use t <= 1 - eps")
    c = coeffs(sched, s_arr, t_arr)
    a_t, _ = alpha_beta(sched, t_arr)
    a_u, _ = alpha_beta(sched, u_arr)
    db_u = beta_dot(sched, u_arr)
    w = np.asarray(a_t) * np.asarray(db_u) / (np.asarray(c.xi) * np.asarray(a_u) ** 2)
    return float(w) if np.ndim(w) == 0 else w


def position_schedule(base: Schedule, L: int, stagger: float) -> Schedule:
    """Staggered per-position copy of ``base``: earlier positions are denoised first.

    Position ``l`` follows ``beta(clip((t - delta * l / (L - 1)) / (1 - delta), 0, 1))``
    with ``delta = stagger / (1 + stagger)``, which keeps ``beta(0) = 0``,
    ``beta(1) = 1`` and ``beta^(1) >= beta^(2) >= ... >= beta^(L)``.
    """
    if stagger < 0:
        raise ScheduleError("stagger must be non-negative")
    if L < 1:
        raise ScheduleError("L must be positive")
    b = base.base()
    if stagger == 0 or L == 1:
        return b
    return Schedule(b.kind, b.lambda_blend, b.grid, b.beta_table, stagger=float(stagger), n_positions=int(L))
