"""Diagonal training, consistency distillation, Adam and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    b"DFMC" | u32 version | u64 blob length | blob (UTF-8 JSON, sorted keys)
    then per tensor: u32 name length | name | u32 rank | u64 dims... | float64 data

The JSON blob holds the architecture, schedule descriptor, training config,
step counter and generator state; every float array is a tensor record.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .losses import (
    LossConfig,
    WeightNet,
    consistency_loss,
    diagonal_loss,
    esd_teacher,
    gradient_surgery,
    lsd_teacher,
    psd_teacher,
)
from .model import Arch, DenoiserModel
from .oracle import MarkovChain, OracleDenoiser, ToyDistribution, make_interpolant
from .schedule import Schedule

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "TrainingDivergedError",
    "TeacherInvalidRateError",
    "ToySource",
    "MarkovSource",
    "CorpusSource",
    "sample_times_diag",
    "sample_times_pair",
    "sample_times_triple",
    "adam_step",
    "train_diagonal",
    "distill",
    "distill_loss_config",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
]

log = logging.getLogger(__name__)

MAGIC = b"DFMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class TeacherInvalidRateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "diagonal"
    batch_size: int = 64
    steps: int = 20000
    lr: float = 3e-4
    warmup_steps: int = 2500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    noise_std: float = 1.0
    log_every: int = 1000
    probe_every: int = 0
    context_dropout: float = 0.1
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    invalid_window: int = 100
    max_invalid_rate: float = 0.1
    weight_lr: float = 1e-3

    def __post_init__(self):
        if self.stage not in ("diagonal", "distill"):
            raise ValueError("stage must be 'diagonal' or 'distill'")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 0.0 <= self.context_dropout <= 1.0:
            raise ValueError("context_dropout must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


# ---- data -------------------------------------------------------------------


class ToySource:
    """Unconditional batches from an enumerable distribution."""

    conditional = False

    def __init__(self, dist: ToyDistribution):
        self.dist = dist
        self.L, self.K = dist.L, dist.K

    def batch(self, rng, n):
        return self.dist.sample(rng, n), None

    def oracle(self, sched, noise, **kw):
        return OracleDenoiser(self.dist, sched, noise, L=self.L, **kw)


def _drop_context(ctx, rng, p):
    if ctx is None or p <= 0:
        return ctx
    drop = rng.random(ctx.shape[0]) < p
    ctx = ctx.copy()
    ctx[drop] = -1
    return ctx


class MarkovSource:
    """Blocks of ``L`` tokens from a stationary Markov chain with up to ``max_blocks - 1`` blocks of context.

    Shorter contexts are left-padded with ``-1``.
    """

    conditional = True

    def __init__(self, chain: MarkovChain, L: int, max_blocks: int = 4, context_dropout: float = 0.1):
        self.chain, self.L, self.K = chain, L, chain.K
        self.max_blocks = max_blocks
        self.context_dropout = context_dropout

    def batch(self, rng, n):
        C = (self.max_blocks - 1) * self.L
        seq = self.chain.sample(rng, n, C + self.L)
        n_ctx = rng.integers(0, self.max_blocks, size=n) * self.L
        ctx = seq[:, :C].copy()
        ctx[np.arange(C)[None, :] < (C - n_ctx)[:, None]] = -1
        return seq[:, C:], _drop_context(ctx, rng, self.context_dropout)

    def oracle(self, sched, noise, **kw):
        return OracleDenoiser(self.chain, sched, noise, L=self.L, **kw)


class CorpusSource:
    """Character-level crops of a text corpus; no oracle, evaluation uses bigram statistics."""

    def __init__(self, text: str, L: int, max_blocks: int = 1, context_dropout: float = 0.1, vocab: str | None = None):
        self.vocab = vocab if vocab is not None else "".join(sorted(set(text)))
        index = {c: i for i, c in enumerate(self.vocab)}
        try:
            self.tokens = np.array([index[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} missing from the vocabulary") from None
        self.L, self.K = L, len(self.vocab)
        self.max_blocks = max_blocks
        self.context_dropout = context_dropout
        self.conditional = max_blocks > 1
        if self.tokens.size < max_blocks * L:
            raise ValueError("corpus shorter than one training window")

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.vocab)}
        return np.array([index[c] for c in text], dtype=np.int64)

    def decode(self, tokens) -> str:
        return "".join(self.vocab[int(k)] for k in tokens)

    def batch(self, rng, n):
        W = self.max_blocks * self.L
        start = rng.integers(0, self.tokens.size - W + 1, size=n)
        win = self.tokens[start[:, None] + np.arange(W)[None, :]]
        if not self.conditional:
            return win, None
        C = W - self.L
        n_ctx = rng.integers(0, self.max_blocks, size=n) * self.L
        ctx = win[:, :C].copy()
        ctx[np.arange(C)[None, :] < (C - n_ctx)[:, None]] = -1
        return win[:, C:], _drop_context(ctx, rng, self.context_dropout)

    def oracle(self, sched, noise, **kw):
        return None


# ---- time sampling ----------------------------------------------------------


def sample_times_diag(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.random(n)


def sample_times_pair(rng: np.random.Generator, n: int):
    st = np.sort(rng.random((n, 2)), axis=1)
    return st[:, 0], st[:, 1]


def sample_times_triple(rng: np.random.Generator, n: int):
    sut = np.sort(rng.random((n, 3)), axis=1)
    return sut[:, 0], sut[:, 1], sut[:, 2]


# ---- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    rejected: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update with a linear warmup.

    Returns ``(params, accepted)``.  A non-finite gradient leaves parameters and
    moments untouched and increments ``state.rejected``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        state.rejected += 1
        log.warning("non-finite gradient at step %d rejected", state.step + 1)
        return params, False
    state.step += 1
    k = state.step
    lr = cfg.lr * min(1.0, k / cfg.warmup_steps) if cfg.warmup_steps > 0 else cfg.lr
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**k)
    v_hat = state.v / (1.0 - b2**k)
    return params - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), True


# ---- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    arch: Arch
    sched: Schedule
    params: np.ndarray
    adam: AdamState
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    weight_params: np.ndarray | None = None
    weight_adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.adam.step

    def model(self) -> DenoiserModel:
        return DenoiserModel(self.arch, self.params.copy(), self.sched)

    @classmethod
    def fresh(cls, model: DenoiserModel, config: dict | None = None) -> "Checkpoint":
        return cls(model.arch, model.sched, model.params.copy(), AdamState.zeros(model.params.size), dict(config or {}))


def _schedule_split(sched: Schedule):
    d = sched.to_dict()
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in d.items() if isinstance(v, (list, np.ndarray))}
    scalars = {k: v for k, v in d.items() if k not in arrays}
    return scalars, arrays


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    sched_meta, sched_arrays = _schedule_split(ck.sched)
    tensors = {"params": ck.params, "adam.m": ck.adam.m, "adam.v": ck.adam.v}
    tensors.update({f"schedule.{k}": v for k, v in sched_arrays.items()})
    if ck.weight_params is not None:
        tensors["weight.params"] = ck.weight_params
        if ck.weight_adam is not None:
            tensors["weight.adam.m"] = ck.weight_adam.m
            tensors["weight.adam.v"] = ck.weight_adam.v
    blob = {
        "arch": ck.arch.to_dict(),
        "schedule": sched_meta,
        "schedule_arrays": sorted(sched_arrays),
        "config": ck.config,
        "step": ck.adam.step,
        "rejected": ck.adam.rejected,
        "rng_state": ck.rng_state,
        "weight_step": None if ck.weight_adam is None else ck.weight_adam.step,
        "meta": ck.meta,
        "tensors": list(tensors),
    }
    text = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", VERSION, len(text)))
    out.write(text)
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def _read(buf: memoryview, pos: int, n: int):
    if pos + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    return bytes(buf[pos : pos + n]), pos + n


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = memoryview(data)
    magic, pos = _read(buf, 0, 4)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    raw, pos = _read(buf, pos, 12)
    version, n_blob = struct.unpack("<IQ", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    text, pos = _read(buf, pos, n_blob)
    blob = json.loads(text.decode("utf-8"))
    tensors = {}
    while pos < len(buf):
        raw, pos = _read(buf, pos, 4)
        (n_name,) = struct.unpack("<I", raw)
        name, pos = _read(buf, pos, n_name)
        raw, pos = _read(buf, pos, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _read(buf, pos, 8 * rank)
        shape = struct.unpack(f"<{rank}Q", raw)
        raw, pos = _read(buf, pos, 8 * int(np.prod(shape, dtype=np.int64)))
        tensors[name.decode("utf-8")] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if list(tensors) != blob["tensors"]:
        raise CheckpointError("tensor records do not match the header")
    sched_d = dict(blob["schedule"])
    for k in blob["schedule_arrays"]:
        sched_d[k] = tensors[f"schedule.{k}"]
    adam = AdamState(tensors["adam.m"], tensors["adam.v"], blob["step"], blob["rejected"])
    weight_adam = None
    if blob["weight_step"] is not None:
        weight_adam = AdamState(tensors["weight.adam.m"], tensors["weight.adam.v"], blob["weight_step"])
    return Checkpoint(
        arch=Arch(**blob["arch"]),
        sched=Schedule.from_dict(sched_d),
        params=tensors["params"],
        adam=adam,
        config=blob["config"],
        rng_state=blob["rng_state"],
        weight_params=tensors.get("weight.params"),
        weight_adam=weight_adam,
        meta=blob["meta"],
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


# ---- training loops ---------------------------------------------------------


def _rng(ck: Checkpoint, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    return rng


def _noise(rng, n, L, K, std):
    return std * rng.standard_normal((n, L, K))


class _DivergenceMonitor:
    def __init__(self, factor, patience, beta=0.99):
        self.factor, self.patience, self.beta = factor, patience, beta
        self.ema = None
        self.initial = None
        self.count = 0

    def update(self, loss, step):
        self.ema = loss if self.ema is None else self.beta * self.ema + (1 - self.beta) * loss
        if self.initial is None:
            self.initial = loss
        if self.ema > self.factor * self.initial:
            self.count += 1
            if self.count >= self.patience:
                raise TrainingDivergedError(
                    f"loss EMA {self.ema:.4g} above {self.factor}x the initial {self.initial:.4g} "
                    f"for {self.count} steps (step {step})"
                )
        else:
            self.count = 0


def _probe(model, oracle, rng_seed):
    from .evaluation import probe_tv

    return probe_tv(model, oracle, np.random.default_rng(rng_seed), n_t=8, n_per_t=32)


def train_diagonal(cfg: TrainConfig, source, model: DenoiserModel, *, oracle=None, history=None) -> Checkpoint:
    """Fit ``psi_{t,t}`` by weighted cross-entropy on interpolant samples.

    ``history`` (a list) receives one dict per logged step.
    """
    if cfg.stage != "diagonal":
        raise ValueError("train_diagonal needs stage='diagonal'")
    if (source.L, source.K) != (model.arch.L, model.arch.K):
        raise ValueError("data source and model disagree on (L, K)")
    ck = Checkpoint.fresh(model, {"train": cfg.to_dict()})
    return _run(cfg, source, ck, "diag", oracle=oracle, history=history)


def distill_loss_config(kind: str, **overrides) -> LossConfig:
    """Per-kind defaults: PSD uses surgery and an ``a(s)`` weight, ESD no surgery and ``a(s, t)``."""
    defaults = {
        "psd": {"surgery": True, "learnable_weight": "of_s"},
        "lsd": {"surgery": False, "learnable_weight": "of_st"},
        "esd": {"surgery": False, "learnable_weight": "of_st"},
    }
    if kind not in defaults:
        raise ValueError("loss kind must be psd, lsd or esd")
    return LossConfig(kind=kind, **{**defaults[kind], **overrides})


def distill(cfg: TrainConfig, init: Checkpoint, loss_kind: str, source, *, oracle=None, history=None) -> Checkpoint:
    """Consistency distillation from a diagonal checkpoint.

    The optimiser restarts from zero moments; ``cfg.loss`` supplies the
    weighting, surgery and learnable-weight settings and its ``kind`` is
    replaced by ``loss_kind``.
    """
    if cfg.stage != "distill":
        raise ValueError("distill needs stage='distill'")
    if loss_kind not in ("psd", "lsd", "esd"):
        raise ValueError("loss_kind must be psd, lsd or esd")
    cfg = replace(cfg, loss=replace(cfg.loss, kind=loss_kind))
    model = init.model()
    ck = Checkpoint.fresh(model, {"train": cfg.to_dict(), "init_step": init.step})
    ck.meta = {"distilled_from": init.meta.get("id"), "loss": loss_kind}
    return _run(cfg, source, ck, loss_kind, oracle=oracle, history=history)


def _run(cfg, source, ck, kind, *, oracle, history):
    rng = _rng(ck, cfg.seed)
    model = ck.model()
    L, K = model.arch.L, model.arch.K
    lcfg = cfg.loss
    weight_net = None
    if kind != "diag" and lcfg.learnable_weight != "none":
        weight_net = WeightNet(lcfg.learnable_weight, seed=cfg.seed)
        ck.weight_params = weight_net.params.copy()
        ck.weight_adam = AdamState.zeros(weight_net.params.size)
    wcfg = replace(cfg, lr=cfg.weight_lr)
    monitor = _DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)
    invalid = deque(maxlen=cfg.invalid_window)
    params = ck.params
    min_surgery_dot = np.inf
    ema = None
    for it in range(cfg.steps):
        model = model.with_params(params)
        target, ctx = source.batch(rng, cfg.batch_size)
        x0 = _noise(rng, cfg.batch_size, L, K, cfg.noise_std)
        t = sample_times_diag(rng, cfg.batch_size)
        gb, _ = diagonal_loss(model, make_interpolant(model.sched, x0, target, t, K), lcfg, ctx)
        grad, loss = gb.param_grad, gb.loss
        info = {}
        if kind != "diag":
            g_cons, c_loss, per, s, tt, n_bad = _consistency(model, kind, lcfg, rng, cfg, target, ctx, weight_net)
            invalid.append(n_bad / cfg.batch_size)
            if len(invalid) == invalid.maxlen and np.mean(invalid) > cfg.max_invalid_rate:
                raise TeacherInvalidRateError(
                    f"{100 * np.mean(invalid):.1f}% of {kind.upper()} teachers were invalid over the last "
                    f"{len(invalid)} steps (step {it + 1})"
                )
            if lcfg.surgery:
                combined = gradient_surgery(grad, g_cons)
                min_surgery_dot = min(min_surgery_dot, float(combined @ grad))
            else:
                combined = grad + g_cons
            grad, loss = combined, loss + c_loss
            info["consistency_loss"] = c_loss
            if weight_net is not None and per.size:
                _, g_w = weight_net.objective(per, s, None if weight_net.mode == "of_s" else tt)
                wp, _ = adam_step(weight_net.params, g_w, ck.weight_adam, wcfg)
                weight_net.params = wp
        params, _ = adam_step(params, grad, ck.adam, cfg)
        monitor.update(loss, it + 1)
        ema = loss if ema is None else 0.99 * ema + 0.01 * loss
        step = it + 1
        if history is not None and cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
            row = {"step": step, "loss": loss, "loss_ema": ema, **info}
            if oracle is not None and cfg.probe_every and step % cfg.probe_every == 0:
                row["probe_tv"] = _probe(model.with_params(params), oracle, cfg.seed)
            history.append(row)
            log.info("step %d %s", step, " ".join(f"{k}={v:.5g}" for k, v in row.items() if k != "step"))
    ck.params = params
    ck.rng_state = rng.bit_generator.state
    if weight_net is not None:
        ck.weight_params = weight_net.params.copy()
    if np.isfinite(min_surgery_dot):
        ck.meta["min_surgery_dot"] = min_surgery_dot
    ck.meta["final_loss"] = None if ema is None else ema
    return ck


def _consistency(model, kind, lcfg, rng, cfg, target, ctx, weight_net):
    B, L, K = cfg.batch_size, model.arch.L, model.arch.K
    x0 = _noise(rng, B, L, K, cfg.noise_std)
    # ties have probability zero; the teachers reject s == t
    if kind == "psd":
        s, u, t = sample_times_triple(rng, B)
    else:
        s, t = sample_times_pair(rng, B)
    x = make_interpolant(model.sched, x0, target, s, K).x
    if kind == "psd":
        teacher = psd_teacher(model, x, s, u, t, ctx)
    elif kind == "lsd":
        teacher = lsd_teacher(model, x, s, t, ctx)
    else:
        teacher = esd_teacher(model, x, s, t, ctx)
    scale = None
    if weight_net is not None:
        scale = weight_net.weight(s, None if weight_net.mode == "of_s" else t)
    gb, info = consistency_loss(model, x, s, t, teacher, lcfg, ctx, scale=scale)
    kept = info["kept"]
    return gb.param_grad, gb.loss, info["per_sample"][kept], s[kept], t[kept], int(teacher.invalid.sum())
