"""Run configuration: a JSON object with namespaced sections.

Sections are ``schedule``, ``model``, ``loss``, ``train``, ``sampler`` and
``data``.  Keys may be nested (``{"train": {"lr": 1e-4}}``) or dotted
(``{"train.lr": 1e-4}``); both forms can be mixed.  Example::

    {
      "schedule": {"kind": "linear"},
      "model": {"hidden_width": 64, "n_layers": 2, "seed": 0},
      "data": {"kind": "random_product", "K": 8, "L": 4, "seed": 1},
      "train.steps": 20000
    }

Data kinds: ``toy`` (``path`` to a distribution file), ``random_product`` and
``random_joint`` (``K``, ``L``, ``seed``, ``concentration``), ``markov``
(``transition`` matrix or ``path`` to a whitespace matrix, ``L``,
``max_blocks``) and ``corpus`` (``path`` to UTF-8 text, ``L``, ``max_blocks``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import LossConfig
from .model import Arch
from .oracle import MarkovChain, ToyDistribution
from .sampler import SamplerConfig
from .schedule import Schedule, make_blended_argmax, make_linear, position_schedule
from .trainer import CorpusSource, MarkovSource, ToySource, TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "build_schedule", "build_source"]

SECTIONS = ("schedule", "model", "loss", "train", "sampler", "data")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schedule: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def loss_config(self, **overrides) -> LossConfig:
        return _build(LossConfig, {**self.loss, **overrides}, "loss")

    def train_config(self, **overrides) -> TrainConfig:
        d = {**self.train, **overrides}
        d.setdefault("loss", self.loss_config())
        return _build(TrainConfig, d, "train")

    def sampler_config(self, **overrides) -> SamplerConfig:
        return _build(SamplerConfig, {**self.sampler, **overrides}, "sampler")

    def arch(self, L: int, K: int, conditional: bool) -> Arch:
        d = {"hidden_width": 64, "n_layers": 2, **{k: v for k, v in self.model.items() if k != "seed"}}
        d.setdefault("conditional", conditional)
        return _build(Arch, {"L": L, "K": K, **d}, "model")

    @property
    def model_seed(self) -> int:
        return int(self.model.get("seed", 0))

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _build(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} settings: {e}") from None


def parse_config(obj: dict, base_dir=".") -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    sections = {name: {} for name in SECTIONS}
    for key, value in obj.items():
        head, _, rest = key.partition(".")
        if head not in sections:
            raise ConfigError(f"unknown section {head!r}")
        if rest:
            sections[head][rest] = value
        elif isinstance(value, dict):
            sections[head].update(value)
        else:
            raise ConfigError(f"section {head!r} must be an object")
    return RunConfig(**sections, base_dir=Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(obj, path.parent)


def build_schedule(cfg: RunConfig, L: int | None = None) -> Schedule:
    d = dict(cfg.schedule)
    kind = d.pop("kind", "linear")
    stagger = float(d.pop("stagger", 0.0))
    if kind == "linear":
        if d:
            raise ConfigError(f"unknown schedule keys: {', '.join(sorted(d))}")
        sched = make_linear()
    elif kind == "blended-argmax":
        seed = d.pop("seed", 0)
        try:
            sched = make_blended_argmax(rng=np.random.default_rng(seed), **d)
        except TypeError as e:
            raise ConfigError(f"invalid schedule settings: {e}") from None
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if stagger > 0:
        if L is None:
            raise ConfigError("a staggered schedule needs the block length")
        sched = position_schedule(sched, L, stagger)
    return sched


def build_source(cfg: RunConfig, context_dropout: float | None = None):
    d = dict(cfg.data)
    kind = d.get("kind")
    drop = cfg.train.get("context_dropout", 0.1) if context_dropout is None else context_dropout
    if kind == "toy":
        return ToySource(ToyDistribution.load(cfg.resolve(d["path"])))
    if kind in ("random_product", "random_joint"):
        rng = np.random.default_rng(d.get("seed", 0))
        make = ToyDistribution.random_product if kind == "random_product" else ToyDistribution.random_joint
        return ToySource(make(int(d["K"]), int(d["L"]), rng, float(d.get("concentration", 1.0))))
    if kind == "markov":
        if "transition" in d:
            P = np.asarray(d["transition"], dtype=np.float64)
        elif "path" in d:
            P = np.loadtxt(cfg.resolve(d["path"]), ndmin=2)
        else:
            K = int(d["K"])
            P = np.random.default_rng(d.get("seed", 0)).dirichlet(np.full(K, float(d.get("concentration", 1.0))), size=K)
        return MarkovSource(MarkovChain(P), int(d["L"]), int(d.get("max_blocks", 4)), drop)
    if kind == "corpus":
        text = cfg.resolve(d["path"]).read_text(encoding="utf-8")
        return CorpusSource(text, int(d["L"]), int(d.get("max_blocks", 1)), drop, d.get("vocab"))
    raise ConfigError(f"unknown data kind {kind!r}")
