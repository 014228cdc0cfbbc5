"""Few-step generation with a flow map, classifier-free guidance and block generation.

Any denoiser with ``probs(x, s, t, context)`` and a ``sched`` attribute can
drive the sampler, so the oracle and trained models are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Schedule, alpha_beta, beta_dot, coeffs, inverse_beta
from .simplex import decode_argmax

__all__ = [
    "SamplerConfig",
    "ContextTooLongError",
    "time_grid",
    "sample_noise",
    "noise_batch",
    "flow_map_step",
    "cfg_combine",
    "guided_drift",
    "guided_probs",
    "generate",
    "block_generate",
]


class ContextTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 1
    guidance_omega: float = 0.0
    block_len: int = 1
    n_blocks: int = 1
    seed: int = 0
    time_grid: str = "beta"
    noise_std: float = 1.0

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be at least 1")
        if self.guidance_omega < 0:
            raise ValueError("guidance strength must be non-negative")
        if self.block_len < 1 or self.n_blocks < 1:
            raise ValueError("block_len and n_blocks must be positive")
        if self.time_grid not in ("beta", "t"):
            raise ValueError("time_grid must be 'beta' or 't'")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")


def time_grid(sched: Schedule, nfe: int, kind: str = "beta") -> np.ndarray:
    """``nfe + 1`` times from 0 to 1, equally spaced in ``beta`` (default) or in ``t``."""
    if nfe < 1:
        raise ValueError("nfe must be at least 1")
    u = np.linspace(0.0, 1.0, nfe + 1)
    if kind == "t":
        return u
    if kind != "beta":
        raise ValueError("time grid kind must be 'beta' or 't'")
    t = inverse_beta(sched.base() if sched.per_position else sched, u)
    t[0], t[-1] = 0.0, 1.0
    return np.maximum.accumulate(t)


def sample_noise(rng: np.random.Generator, L: int, K: int, std: float = 1.0) -> np.ndarray:
    """One ``L x K`` draw from ``N(0, std^2 I)``."""
    return std * rng.standard_normal((L, K))


def noise_batch(seed: int, n: int, L: int, K: int, std: float = 1.0, *, offset: int = 0, stream: int = 0) -> np.ndarray:
    """Noise for samples ``offset .. offset + n - 1``, each from its own stream ``(seed, stream, index)``.

    Sample ``i`` gets the same matrix regardless of batch size or order.
    """
    out = np.empty((n, L, K))
    for i in range(n):
        out[i] = sample_noise(np.random.default_rng([seed, stream, offset + i]), L, K, std)
    return out


def _col(v):
    v = np.asarray(v, dtype=np.float64)
    return v[:, None, None] if v.ndim == 1 else v[..., None]


def cfg_combine(psi_cond, psi_uncond, omega: float) -> np.ndarray:
    """Guided denoiser ``psi_u + omega (psi_c - psi_u)``; left unclamped off the simplex."""
    if omega < 0:
        raise ValueError("guidance strength must be non-negative")
    psi_cond = np.asarray(psi_cond, dtype=np.float64)
    psi_uncond = np.asarray(psi_uncond, dtype=np.float64)
    if omega == 0:
        return psi_uncond.copy()
    if omega == 1:
        return psi_cond.copy()
    return psi_uncond + omega * (psi_cond - psi_uncond)


def guided_probs(den, x, s, t, context=None, omega: float = 0.0) -> np.ndarray:
    """``psi_{s,t}`` with guidance toward ``context`` (plain conditional when ``omega == 1``)."""
    if context is None or omega == 1.0:
        return den.probs(x, s, t, context)
    uncond = den.probs(x, s, t, None)
    if omega == 0.0:
        return uncond
    return cfg_combine(den.probs(x, s, t, context), uncond, omega)


def guided_drift(den, x, s, context=None, omega: float = 0.0) -> np.ndarray:
    """``b + omega (b_cond - b)``, i.e. the drift built from the guided diagonal denoiser."""
    x = np.asarray(x, dtype=np.float64)
    s_b = np.broadcast_to(np.asarray(s, dtype=np.float64), x.shape[:1])
    a, _ = alpha_beta(den.sched, s_b)
    lam = np.asarray(beta_dot(den.sched, s_b)) / np.asarray(a)
    psi = guided_probs(den, x, s_b, s_b, context, omega)
    return _col(lam) * (psi - x)


def flow_map_step(den, x, s, t, context=None, omega: float = 0.0, *, return_probs: bool = False):
    """``Gamma_{s,t} x + Xi_{s,t} psi_{s,t}(x)``; exactly ``psi_{s,1}(x)`` at ``t = 1``."""
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    s_b = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    t_b = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    psi = guided_probs(den, x, s_b, t_b, context, omega)
    if not np.all(np.isfinite(psi)):
        raise FloatingPointError("denoiser returned non-finite probabilities")
    c = coeffs(den.sched, s_b, t_b)
    out = _col(c.gamma) * x + _col(c.xi) * psi
    end = t_b >= 1.0
    if np.any(end) and not den.sched.per_position:
        out[end] = psi[end]
    return (out, psi) if return_probs else out


def _shape(den):
    if hasattr(den, "arch"):
        return den.arch.L, den.arch.K
    return den.L, den.K


def generate(
    den,
    cfg: SamplerConfig,
    n_samples: int,
    context=None,
    *,
    offset: int = 0,
    stream: int = 0,
    return_state: bool = False,
):
    """Tokens from ``cfg.nfe`` flow-map steps on the configured grid.

    ``context`` is ``None`` or an integer array ``(n_samples, C)`` (or ``(C,)``
    shared by all samples).  With ``return_state`` the final state and the last
    denoiser output are returned as well.
    """
    L, K = _shape(den)
    x = noise_batch(cfg.seed, n_samples, L, K, cfg.noise_std, offset=offset, stream=stream)
    if context is not None:
        context = np.asarray(context, dtype=np.int64)
        if context.ndim == 1:
            context = np.broadcast_to(context, (n_samples, context.shape[0]))
    times = time_grid(den.sched, cfg.nfe, cfg.time_grid)
    psi = None
    for s, t in zip(times[:-1], times[1:]):
        x, psi = flow_map_step(den, x, s, t, context, cfg.guidance_omega, return_probs=True)
    tokens = decode_argmax(x)
    if return_state:
        return tokens, x, psi
    return tokens


def block_generate(
    den,
    cfg: SamplerConfig,
    n_samples: int,
    prompt=None,
    *,
    max_context: int | None = None,
    return_probs: bool = False,
):
    """``cfg.n_blocks`` blocks of the model's ``L`` tokens, each conditioned on all previous tokens.

    The prompt (``(C,)`` or ``(n_samples, C)``) seeds the context; an empty or
    missing prompt makes the first block unconditional.  With ``return_probs``
    the last block's final denoiser rows are returned too.
    """
    L, _ = _shape(den)
    if cfg.block_len != L:
        raise ValueError(f"block_len {cfg.block_len} does not match the model block length {L}")
    if max_context is None:
        max_context = getattr(getattr(den, "arch", None), "max_context", None)
    if prompt is None:
        ctx = np.zeros((n_samples, 0), dtype=np.int64)
    else:
        ctx = np.asarray(prompt, dtype=np.int64)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (n_samples, ctx.shape[0])).copy()
    pieces, psi = [], None
    for b in range(cfg.n_blocks):
        if max_context is not None and ctx.shape[1] > max_context:
            raise ContextTooLongError(f"context of {ctx.shape[1]} tokens exceeds the model maximum {max_context}")
        block, _, psi = generate(den, cfg, n_samples, ctx if ctx.shape[1] else None, stream=b, return_state=True)
        pieces.append(block)
        ctx = np.concatenate([ctx, block], axis=1)
    tokens = np.concatenate(pieces, axis=1)
    return (tokens, psi) if return_probs else tokens
