"""Trainable mean denoiser ``psi_{s,t}(x) = softmax(z_{s,t}(x))``.

A per-position MLP with one mean-pool mixing layer, written directly in numpy
with three evaluation paths sharing the same cached activations:

* ``forward``: logits, optionally keeping a tape for ``backward``;
* ``jvp``: forward-mode tangent for any direction ``(dx, ds, dt)``;
* ``backward``: reverse-mode gradient of ``<upstream, z>`` in parameters and inputs.

Per-position features (width ``D``)::

    x^l (K) | mean_l x (K) | onehot(l) (L) | beta(s) | beta(t)
    [conditional: onehot(last context token) (K) | mean onehot(context) (K) | has_context]

Layers, with ``H = hidden_width``::

    h = tanh(F W_in + b_in)                      D*H + H
    h = h + tanh(mean_l(h) W_mix + b_mix)        H*H + H
    h = tanh(h W_i + b_i), n_layers - 1 times    (n_layers - 1) * (H*H + H)
    z = h W_out + b_out                          H*K + K

so the parameter count is ``(D + 1) H + n_layers (H + 1) H + (H + 1) K`` with
``D = 2K + L + 2`` (plus ``2K + 1`` when conditional).  For ``H = 64``,
two layers, ``L = 1``, ``K = 8`` that is 10120.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Schedule, alpha_beta, beta_dot, make_linear
from .simplex import softmax

__all__ = ["Arch", "DenoiserModel", "GradBundle", "Tape"]


@dataclass(frozen=True)
class Arch:
    hidden_width: int
    n_layers: int
    L: int
    K: int
    conditional: bool = False
    max_context: int = 4096

    def __post_init__(self):
        if self.hidden_width < 1 or self.n_layers < 1:
            raise ValueError("hidden_width and n_layers must be positive")
        if self.L < 1 or self.K < 2:
            raise ValueError("need L >= 1 and K >= 2")

    @property
    def feature_dim(self) -> int:
        base = 2 * self.K + self.L + 2
        return base + (2 * self.K + 1 if self.conditional else 0)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        H, D, K = self.hidden_width, self.feature_dim, self.K
        shapes = [("W_in", (D, H)), ("b_in", (H,)), ("W_mix", (H, H)), ("b_mix", (H,))]
        for i in range(1, self.n_layers):
            shapes += [(f"W_{i}", (H, H)), (f"b_{i}", (H,))]
        shapes += [("W_out", (H, K)), ("b_out", (K,))]
        return shapes

    @property
    def n_params(self) -> int:
        H, D, K = self.hidden_width, self.feature_dim, self.K
        return (D + 1) * H + self.n_layers * (H + 1) * H + (H + 1) * K

    def to_dict(self) -> dict:
        return {
            "hidden_width": self.hidden_width,
            "n_layers": self.n_layers,
            "L": self.L,
            "K": self.K,
            "conditional": self.conditional,
            "max_context": self.max_context,
        }


@dataclass
class GradBundle:
    loss: float
    param_grad: np.ndarray
    x_grad: np.ndarray | None = None
    s_grad: np.ndarray | None = None
    t_grad: np.ndarray | None = None


@dataclass
class Tape:
    """Activations of one forward pass, reused by ``jvp`` and ``backward``."""

    squeeze: bool
    feats: np.ndarray
    hs: list
    g_mix: np.ndarray
    m_mix: np.ndarray
    dbeta_s: np.ndarray
    dbeta_t: np.ndarray


class DenoiserModel:
    def __init__(self, arch: Arch, params: np.ndarray, sched: Schedule | None = None):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.arch = arch
        self.params = params
        self.sched = sched if sched is not None else make_linear()
        if self.sched.per_position and self.sched.n_positions != arch.L:
            raise ValueError("per-position schedule length does not match L")

    @classmethod
    def init(cls, arch: Arch, seed: int, sched: Schedule | None = None) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        chunks = []
        fan_in = arch.feature_dim
        for name, shape in arch.param_shapes():
            if name.startswith("W"):
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
        return cls(arch, np.concatenate(chunks), sched)

    def with_params(self, params) -> "DenoiserModel":
        return DenoiserModel(self.arch, params, self.sched)

    def unpack(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.arch.param_shapes():
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    # ---- features -------------------------------------------------------

    def _prepare(self, x, s, t):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1:] != (self.arch.L, self.arch.K):
            raise ValueError(f"state has shape {x.shape}, expected (B, {self.arch.L}, {self.arch.K})")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite model input")
        B = x.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if np.any(s > t):
            raise ValueError("model queries need s <= t")
        return x, s, t, squeeze

    def _time_features(self, s, t):
        L = self.arch.L
        _, bs = alpha_beta(self.sched, s)
        _, bt = alpha_beta(self.sched, t)
        dbs = beta_dot(self.sched, s)
        dbt = beta_dot(self.sched, t)
        shape = (s.shape[0], L)
        return [np.broadcast_to(np.asarray(v).reshape(s.shape[0], -1), shape) for v in (bs, bt, dbs, dbt)]

    def _features(self, x, s, t, context):
        a = self.arch
        B, L, K = x.shape
        bs, bt, dbs, dbt = self._time_features(s, t)
        parts = [
            x,
            np.broadcast_to(x.mean(1, keepdims=True), x.shape),
            np.broadcast_to(np.eye(L), (B, L, L)),
            bs[..., None],
            bt[..., None],
        ]
        if a.conditional:
            parts.append(np.broadcast_to(self._context_features(context, B)[:, None, :], (B, L, 2 * K + 1)))
        elif context is not None and np.asarray(context).size:
            raise ValueError("unconditional model received a context")
        return np.concatenate(parts, axis=-1), dbs, dbt

    def _context_features(self, context, B):
        """Last token, token frequencies and a presence flag; ``-1`` entries are padding."""
        K = self.arch.K
        out = np.zeros((B, 2 * K + 1))
        if context is None:
            return out
        ctx = np.asarray(context, dtype=np.int64)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (B, ctx.shape[0]))
        if ctx.shape[1] == 0:
            return out
        if ctx.shape[1] > self.arch.max_context:
            raise ValueError(f"context of {ctx.shape[1]} tokens exceeds max_context {self.arch.max_context}")
        if np.any(ctx < -1) or np.any(ctx >= K):
            raise IndexError("context token out of range")
        valid = ctx >= 0
        oh = np.eye(K)[np.where(valid, ctx, 0)] * valid[..., None]
        n = valid.sum(1)
        has = n > 0
        last = np.where(has, ctx.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1), 0)
        out[has, :K] = oh[np.flatnonzero(has), last[has]]
        out[has, K : 2 * K] = oh[has].sum(1) / n[has, None]
        out[:, 2 * K] = has
        return out

    # ---- evaluation paths -----------------------------------------------

    def forward(self, x, s, t, context=None, *, keep_tape: bool = False):
        """Logits ``z_{s,t}(x)``; with ``keep_tape`` also the :class:`Tape`."""
        x, s, t, squeeze = self._prepare(x, s, t)
        p = self.unpack()
        F, dbs, dbt = self._features(x, s, t, context)
        h = np.tanh(F @ p["W_in"] + p["b_in"])
        m = h.mean(1)
        g = np.tanh(m @ p["W_mix"] + p["b_mix"])
        hs = [h]
        h = h + g[:, None, :]
        hs.append(h)
        for i in range(1, self.arch.n_layers):
            h = np.tanh(h @ p[f"W_{i}"] + p[f"b_{i}"])
            hs.append(h)
        z = h @ p["W_out"] + p["b_out"]
        out = z[0] if squeeze else z
        if keep_tape:
            return out, Tape(squeeze, F, hs, g, m, dbs, dbt)
        return out

    def probs(self, x, s, t, context=None) -> np.ndarray:
        return softmax(self.forward(x, s, t, context))

    def diag_logits(self, x, t, context=None) -> np.ndarray:
        return self.forward(x, t, t, context)

    def _feature_tangent(self, tape: Tape, dx, ds, dt):
        a = self.arch
        F = tape.feats
        B, L, K = F.shape[0], a.L, a.K
        dF = np.zeros_like(F)
        if dx is not None:
            dx = np.asarray(dx, dtype=np.float64)
            if tape.squeeze and dx.ndim == 2:
                dx = dx[None]
            dF[..., :K] = dx
            dF[..., K : 2 * K] = dx.mean(1, keepdims=True)
        col = 2 * K + L
        ds = np.broadcast_to(np.asarray(ds, dtype=np.float64), (B,))[:, None]
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (B,))[:, None]
        dF[..., col] = tape.dbeta_s * ds
        dF[..., col + 1] = tape.dbeta_t * dt
        return dF

    def jvp(self, x, s, t, dx=None, ds=0.0, dt=0.0, context=None):
        """Logits and their directional derivative along ``(dx, ds, dt)``."""
        z, tape = self.forward(x, s, t, context, keep_tape=True)
        return z, self._jvp_from_tape(tape, dx, ds, dt)

    def _jvp_from_tape(self, tape: Tape, dx, ds, dt):
        p = self.unpack()
        dF = self._feature_tangent(tape, dx, ds, dt)
        h0 = tape.hs[0]
        dh = (1.0 - h0**2) * (dF @ p["W_in"])
        dg = (1.0 - tape.g_mix**2) * (dh.mean(1) @ p["W_mix"])
        dh = dh + dg[:, None, :]
        for i in range(1, self.arch.n_layers):
            dh = (1.0 - tape.hs[i + 1] ** 2) * (dh @ p[f"W_{i}"])
        dz = dh @ p["W_out"]
        return dz[0] if tape.squeeze else dz

    def dz_dt(self, x, s, t, context=None) -> np.ndarray:
        return self.jvp(x, s, t, None, 0.0, 1.0, context)[1]

    def dz_ds(self, x, s, t, context=None) -> np.ndarray:
        return self.jvp(x, s, t, None, 1.0, 0.0, context)[1]

    def total_derivative_s(self, x, s, t, v, context=None) -> np.ndarray:
        """``D_s z = d_s z + J_x z v`` in one forward-mode pass."""
        return self.jvp(x, s, t, v, 1.0, 0.0, context)[1]

    def backward(self, upstream, x=None, s=None, t=None, context=None, *, tape: Tape | None = None) -> GradBundle:
        """Gradient of ``<upstream, z_{s,t}(x)>`` in parameters, ``x``, ``s`` and ``t``."""
        if tape is None:
            _, tape = self.forward(x, s, t, context, keep_tape=True)
        G = np.asarray(upstream, dtype=np.float64)
        if tape.squeeze and G.ndim == 2:
            G = G[None]
        B, L, K = tape.feats.shape[0], self.arch.L, self.arch.K
        if G.shape != (B, L, K):
            raise ValueError(f"upstream has shape {G.shape}, expected {(B, L, K)}")
        p = self.unpack()
        grads: dict[str, np.ndarray] = {}
        hs = tape.hs
        n = self.arch.n_layers
        h_last = hs[-1]
        grads["W_out"] = h_last.reshape(-1, h_last.shape[-1]).T @ G.reshape(-1, K)
        grads["b_out"] = G.sum((0, 1))
        gh = G @ p["W_out"].T
        for i in range(n - 1, 0, -1):
            h_out, h_in = hs[i + 1], hs[i]
            ga = gh * (1.0 - h_out**2)
            grads[f"W_{i}"] = h_in.reshape(-1, h_in.shape[-1]).T @ ga.reshape(-1, ga.shape[-1])
            grads[f"b_{i}"] = ga.sum((0, 1))
            gh = ga @ p[f"W_{i}"].T
        gam = gh.sum(1) * (1.0 - tape.g_mix**2)
        grads["W_mix"] = tape.m_mix.T @ gam
        grads["b_mix"] = gam.sum(0)
        gh = gh + (gam @ p["W_mix"].T)[:, None, :] / L
        ga = gh * (1.0 - hs[0] ** 2)
        F = tape.feats
        grads["W_in"] = F.reshape(-1, F.shape[-1]).T @ ga.reshape(-1, ga.shape[-1])
        grads["b_in"] = ga.sum((0, 1))
        gF = ga @ p["W_in"].T
        flat = np.concatenate([grads[name].ravel() for name, _ in self.arch.param_shapes()])
        gx = gF[..., :K] + gF[..., K : 2 * K].sum(1, keepdims=True) / L
        col = 2 * K + L
        gs = (gF[..., col] * tape.dbeta_s).sum(1)
        gt = (gF[..., col + 1] * tape.dbeta_t).sum(1)
        if tape.squeeze:
            gx, gs, gt = gx[0], gs[0], gt[0]
        return GradBundle(loss=float("nan"), param_grad=flat, x_grad=gx, s_grad=gs, t_grad=gt)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "schedule": self.sched.to_dict()}
