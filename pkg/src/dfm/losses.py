"""Training objectives: diagonal cross-entropy and the three consistency teachers.

Every teacher is evaluated without a tape and returned as plain probabilities,
so the only gradient path into the parameters is the student logits.  The
teachers work with any denoiser exposing ``logits``/``probs`` and the two
derivative queries ``dz_dt`` and ``total_derivative_s``: a
:class:`~dfm.model.DenoiserModel` answers them in forward mode, the oracle by
finite differences.

The logit teachers are evaluated in a rescaled form.  With
``delta = dz - <psi, dz> 1``:

* LSD: ``softmax(z_tt(X_st) - log(beta_dot_t 1 + alpha_t Xi_st delta))`` where
  ``dz = d_t z_st``; the unscaled argument is ``1 + C_st delta``.
* ESD: ``softmax(z_ss - log(alpha_t beta_dot_s 1 - alpha_s (beta_t - beta_s) delta))``
  where ``dz = d_s z_st + J_x z_st b_s``; the unscaled argument is
  ``1 - delta / kappa_st``.

Dropping the common scalar inside the log leaves the softmax unchanged and
keeps both terms bounded as ``s`` or ``t`` approach the endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import alpha_beta, beta_dot, coeffs, semigroup_weight
from .simplex import kl_div, log_softmax, softmax

__all__ = [
    "LossConfig",
    "TeacherOutput",
    "TeacherInvalidError",
    "LOG_CLAMP",
    "adaptive_weight",
    "diagonal_loss",
    "psd_teacher",
    "lsd_teacher",
    "esd_teacher",
    "weighted_kl",
    "consistency_loss",
    "WeightNet",
    "gradient_surgery",
    "flow_map_estimate",
    "model_drift",
]

LOG_CLAMP = 1e-12
_KINDS = ("diag", "psd", "lsd", "esd")
_WEIGHT_MODES = ("none", "of_s", "of_st")


class TeacherInvalidError(RuntimeError):
    """Every entry of a teacher's log argument fell below the clamp."""


@dataclass(frozen=True)
class LossConfig:
    """``adaptive_*`` weight the consistency term, ``diag_*`` the diagonal term.

    The weight is ``(||Delta||^2 + c)^(-r)`` with ``Delta`` the logit gradient
    of the unweighted loss; ``c = 1e-6`` is a common alternative to 0.01.
    """

    kind: str = "diag"
    adaptive_c: float = 0.01
    adaptive_r: float = 0.5
    diag_c: float = 0.01
    diag_r: float = 0.5
    learnable_weight: str = "none"
    surgery: bool = False
    divergence: str = "forward"
    skip_clamped: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"loss kind must be one of {_KINDS}")
        if self.learnable_weight not in _WEIGHT_MODES:
            raise ValueError(f"learnable_weight must be one of {_WEIGHT_MODES}")
        if self.divergence not in ("forward", "reverse"):
            raise ValueError("divergence must be 'forward' or 'reverse'")
        if not (self.adaptive_c > 0 and self.diag_c > 0):
            raise ValueError("adaptive c must be positive")
        if self.adaptive_r < 0 or self.diag_r < 0:
            raise ValueError("adaptive r must be non-negative")


@dataclass
class TeacherOutput:
    probs: np.ndarray
    delta_norm: np.ndarray
    clamped: np.ndarray = field(default=None)
    invalid: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.probs.shape[0]
        if self.clamped is None:
            self.clamped = np.zeros(n, dtype=bool)
        if self.invalid is None:
            self.invalid = np.zeros(n, dtype=bool)


# ---- denoiser adapters ------------------------------------------------------


def _logits(den, x, s, t, context):
    fn = getattr(den, "forward", None) or den.logits
    return fn(x, s, t, context)


def _value_and_tangent(den, x, s, t, context, *, dx=None, ds=0.0, dt=0.0):
    """Logits and their directional derivative, forward mode when available."""
    if hasattr(den, "jvp"):
        return den.jvp(x, s, t, dx, ds, dt, context)
    z = den.logits(x, s, t, context)
    if dx is None and np.all(np.asarray(ds) == 0):
        return z, den.dz_dt(x, s, t, context)
    if np.all(np.asarray(dt) == 0) and np.all(np.asarray(ds) == 1):
        return z, den.total_derivative_s(x, s, t, dx if dx is not None else np.zeros_like(x), context)
    raise NotImplementedError("finite-difference denoisers support the d/dt and D_s directions only")


def _col(v):
    # per-sample (B,) or per-position (B, L) scalars against (B, L, K) arrays
    v = np.asarray(v, dtype=np.float64)
    return v[:, None, None] if v.ndim == 1 else v[..., None]


def _batch(x, s, t=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected a batch of states with shape (B, L, K)")
    B = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    if t is None:
        return x, s
    return x, s, np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))


def flow_map_estimate(den, x, s, t, context=None, psi=None):
    """``X_{s,t}(x) = Gamma x + Xi psi_{s,t}(x)``."""
    x, s, t = _batch(x, s, t)
    c = coeffs(den.sched, s, t, allow_equal=True)
    if psi is None:
        psi = softmax(_logits(den, x, s, t, context))
    return _col(c.gamma) * x + _col(c.xi) * psi


def model_drift(den, x, s, context=None):
    """``b_s(x) = ell_s x + lam_s psi_{s,s}(x)``."""
    x, s = _batch(x, s)
    a, _ = alpha_beta(den.sched, s)
    lam = np.asarray(beta_dot(den.sched, s)) / np.asarray(a)
    psi = softmax(_logits(den, x, s, s, context))
    return _col(lam) * (psi - x)


# ---- weighting --------------------------------------------------------------


def adaptive_weight(delta, c: float, r: float) -> np.ndarray:
    """Per-sample ``(||Delta||_2^2 + c)^(-r)``, ``Delta`` flattened over positions."""
    delta = np.asarray(delta, dtype=np.float64)
    sq = (delta.reshape(delta.shape[0], -1) ** 2).sum(1)
    return (sq + c) ** (-r)


def diagonal_loss(model, samples, cfg: LossConfig | None = None, context=None, *, weights=None):
    """Weighted cross-entropy of ``psi_{t,t}(I_t)`` against the clean tokens.

    ``samples`` is an :class:`~dfm.oracle.InterpolantSample` batch.  ``weights``
    overrides the adaptive weights (they are detached either way).
    Returns ``(GradBundle, info)``.
    """
    cfg = cfg or LossConfig()
    x, t = _batch(samples.x, samples.t)
    target = np.asarray(samples.target)
    B, L, K = x.shape
    z, tape = model.forward(x, t, t, context, keep_tape=True)
    logq = log_softmax(z)
    q = np.exp(logq)
    ce = -np.take_along_axis(logq, target[..., None], axis=-1)[..., 0]
    onehot = np.eye(K)[target]
    delta = q - onehot
    w = adaptive_weight(delta, cfg.diag_c, cfg.diag_r) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float((w[:, None] * ce).mean())
    if not np.isfinite(loss):
        raise FloatingPointError("diagonal loss is not finite")
    cot = _col(w) * delta / (B * L)
    gb = model.backward(cot, tape=tape)
    gb.loss = loss
    return gb, {"weights": w, "ce": ce, "cotangent": cot}


# ---- teachers ---------------------------------------------------------------


def psd_teacher(den, x, s, u, t, context=None) -> TeacherOutput:
    """``omega psi_{s,u}(x) + (1 - omega) psi_{u,t}(X_{s,u}(x))``."""
    x, s, t = _batch(x, s, t)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), s.shape)
    if np.any(u < s) or np.any(u > t) or np.any(s >= t):
        raise ValueError("PSD teacher needs s <= u <= t with s < t")
    sched = den.sched
    psi_su = softmax(_logits(den, x, s, u, context))
    x_u = flow_map_estimate(den, x, s, u, context, psi=psi_su)
    psi_ut = softmax(_logits(den, x_u, u, t, context))
    w = np.asarray(semigroup_weight(sched, s, u, t))
    probs = _col(w) * psi_su + _col(1.0 - w) * psi_ut
    probs = probs / probs.sum(-1, keepdims=True)
    student = softmax(_logits(den, x, s, t, context))
    return TeacherOutput(probs=probs, delta_norm=_norm(student - probs))


def _norm(d):
    return np.sqrt((d.reshape(d.shape[0], -1) ** 2).sum(1))


def _corrected(base_logits, arg, student):
    clamped_entries = arg < LOG_CLAMP
    invalid = clamped_entries.all(-1).any(-1)
    clamped = clamped_entries.any((-2, -1))
    logits = base_logits - np.log(np.maximum(arg, LOG_CLAMP))
    probs = softmax(logits)
    if np.any(invalid):
        # fall back to the uncorrected target; callers drop these rows
        probs[invalid] = softmax(base_logits[invalid])
    return TeacherOutput(probs=probs, delta_norm=_norm(student - probs), clamped=clamped, invalid=invalid)


def _centered(dz, psi):
    return dz - (psi * dz).sum(-1, keepdims=True)


def lsd_teacher(den, x, s, t, context=None, *, strict: bool = False) -> TeacherOutput:
    """Lagrangian target ``softmax(z_{t,t}(X_{s,t}) - log(beta_dot_t + alpha_t Xi delta))``."""
    x, s, t = _batch(x, s, t)
    if np.any(s >= t):
        raise ValueError("LSD teacher needs s < t")
    z, dz = _value_and_tangent(den, x, s, t, context, dt=1.0)
    psi = softmax(z)
    x_t = flow_map_estimate(den, x, s, t, context, psi=psi)
    base = _logits(den, x_t, t, t, context)
    c = coeffs(den.sched, s, t)
    arg = _col(c.lsd_scale) + _col(c.lsd_poly) * _centered(dz, psi)
    out = _corrected(base, arg, psi)
    if strict and out.invalid.any():
        raise TeacherInvalidError(f"{int(out.invalid.sum())} LSD targets had an all-clamped log argument")
    return out


def esd_teacher(den, x, s, t, context=None, drift=None, *, stabilized: bool = True, strict: bool = False):
    """Eulerian target from ``z_{s,s}`` corrected by ``D_s z_{s,t}`` along ``drift``.

    ``drift`` defaults to the denoiser's own ``b_s(x)``; ``stabilized=False``
    evaluates the unscaled ``1 - delta / kappa`` argument instead.
    """
    x, s, t = _batch(x, s, t)
    if np.any(s >= t):
        raise ValueError("ESD teacher needs s < t")
    if drift is None:
        drift = model_drift(den, x, s, context)
    z, dz = _value_and_tangent(den, x, s, t, context, dx=drift, ds=1.0)
    psi = softmax(z)
    base = _logits(den, x, s, s, context)
    c = coeffs(den.sched, s, t)
    delta = _centered(dz, psi)
    if stabilized:
        arg = _col(c.esd_scale) - _col(c.esd_poly) * delta
    else:
        arg = 1.0 - delta / _col(c.kappa)
    out = _corrected(base, arg, psi)
    if strict and out.invalid.any():
        raise TeacherInvalidError(f"{int(out.invalid.sum())} ESD targets had an all-clamped log argument")
    return out


# ---- student objective ------------------------------------------------------


def weighted_kl(teacher_probs, student_logits, c: float, r: float, *, divergence: str = "forward", weights=None):
    """Per-sample weighted divergence and its gradient in the student logits.

    Returns ``(per_sample_loss, cotangent, weights)``; the loss is summed over
    positions and ``cotangent`` is the exact gradient of that per-sample loss
    with the weights held fixed.  For the forward KL this is ``w (q - p)``.
    """
    p = np.asarray(teacher_probs, dtype=np.float64)
    z = np.asarray(student_logits, dtype=np.float64)
    logq = log_softmax(z)
    q = np.exp(logq)
    delta = q - p
    w = adaptive_weight(delta, c, r) if weights is None else np.asarray(weights, dtype=np.float64)
    if divergence == "forward":
        kl = kl_div(p, q).sum(-1)
        grad = delta
    else:
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        if np.any((p <= 0) & (q > 0)):
            raise OverflowError("reverse KL is infinite: teacher has zero mass where the student does not")
        ratio = np.where(q > 0, logq - np.where(p > 0, logp, 0.0), 0.0)
        per_pos = (q * ratio).sum(-1, keepdims=True)
        kl = np.maximum(per_pos[..., 0], 0.0).sum(-1)
        grad = q * (ratio - per_pos)
    return w * kl, _col(w) * grad, w


def consistency_loss(model, x, s, t, teacher: TeacherOutput, cfg: LossConfig, context=None, *, weights=None, scale=None):
    """Mean weighted KL between the detached teacher and ``psi_{s,t}(x)``.

    Rows flagged invalid by the teacher are dropped, and so are rows with any
    clamped entry when ``cfg.skip_clamped`` is set.  ``scale`` multiplies each
    row (learnable weighting).  Returns ``(GradBundle, info)``.
    """
    x, s, t = _batch(x, s, t)
    B, L, _ = x.shape
    z, tape = model.forward(x, s, t, context, keep_tape=True)
    per, cot, w = weighted_kl(
        teacher.probs, z, cfg.adaptive_c, cfg.adaptive_r, divergence=cfg.divergence, weights=weights
    )
    keep = ~teacher.invalid
    if cfg.skip_clamped:
        keep &= ~teacher.clamped
    n_keep = max(int(keep.sum()), 1)
    row = keep.astype(np.float64) / (n_keep * L)
    if scale is not None:
        row = row * np.asarray(scale, dtype=np.float64)
    loss = float((row * per).sum())
    gb = model.backward(_col(row) * cot, tape=tape)
    gb.loss = loss
    return gb, {"per_sample": per / L, "weights": w, "kept": keep}


# ---- learnable weighting and surgery ---------------------------------------


class WeightNet:
    """Log-weight ``a(s)`` or ``a(s, t)``: one tanh hidden layer, zero-initialised output.

    The objective contribution of a row with loss ``l`` is ``exp(a) l - a``,
    which is minimised at ``exp(a) = 1 / l`` rather than at zero weight.
    """

    def __init__(self, mode: str, hidden: int = 16, seed: int = 0, params=None):
        if mode not in ("of_s", "of_st"):
            raise ValueError("WeightNet mode must be 'of_s' or 'of_st'")
        self.mode = mode
        self.hidden = hidden
        self.n_in = 1 if mode == "of_s" else 2
        n = self.n_in * hidden + hidden + hidden + 1
        if params is None:
            rng = np.random.default_rng(seed)
            W = rng.uniform(-1.0, 1.0, size=(self.n_in, hidden)) * 3.0
            b = rng.uniform(-3.0, 3.0, size=hidden)
            params = np.concatenate([W.ravel(), b, np.zeros(hidden + 1)])
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} weight-net parameters")

    def _split(self):
        H, n_in = self.hidden, self.n_in
        W = self.params[: n_in * H].reshape(n_in, H)
        b = self.params[n_in * H : n_in * H + H]
        v = self.params[n_in * H + H : n_in * H + 2 * H]
        c = self.params[-1]
        return W, b, v, c

    def _inputs(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if self.mode == "of_s":
            return s[:, None]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), s.shape)
        return np.stack([s, t], axis=1)

    def log_weight(self, s, t=None) -> np.ndarray:
        W, b, v, c = self._split()
        h = np.tanh(self._inputs(s, t) @ W + b)
        return h @ v + c

    def weight(self, s, t=None) -> np.ndarray:
        return np.exp(self.log_weight(s, t))

    def objective(self, losses, s, t=None):
        """``mean(exp(a) l - a)`` with its gradient in the weight-net parameters."""
        losses = np.asarray(losses, dtype=np.float64)
        W, b, v, c = self._split()
        inp = self._inputs(s, t)
        h = np.tanh(inp @ W + b)
        a = h @ v + c
        n = losses.shape[0]
        val = float(np.mean(np.exp(a) * losses - a))
        ga = (np.exp(a) * losses - 1.0) / n
        gv = h.T @ ga
        gc = ga.sum()
        gh = ga[:, None] * v[None, :] * (1.0 - h**2)
        gW = inp.T @ gh
        gb = gh.sum(0)
        return val, np.concatenate([gW.ravel(), gb, gv, [gc]])


def gradient_surgery(g_diag, g_cons) -> np.ndarray:
    """Sum of the two gradients with the conflicting part of ``g_cons`` removed."""
    g_diag = np.asarray(g_diag, dtype=np.float64)
    g_cons = np.asarray(g_cons, dtype=np.float64)
    if g_diag.shape != g_cons.shape:
        raise ValueError("gradients must have equal length")
    nd = float(g_diag @ g_diag)
    if nd == 0.0:
        return g_cons.copy()
    dot = float(g_cons @ g_diag)
    if dot < 0:
        return g_diag + g_cons - (dot / nd) * g_diag
    return g_diag + g_cons
