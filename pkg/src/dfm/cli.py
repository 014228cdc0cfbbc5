"""Command-line entry point ``dfm``.

Exit status: 0 on success, 1 when a verification fails, 2 on usage or input
errors.  ``DFM_THREADS`` caps the BLAS/OpenMP worker count.
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads() -> None:
    n = os.environ.get("DFM_THREADS")
    if n is None:
        return
    if not n.isdigit() or int(n) < 1:
        raise SystemExit(f"dfm: DFM_THREADS must be a positive integer, got {n!r}")
    for var in _THREAD_VARS:
        os.environ[var] = n


_cap_threads()

import argparse  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import ConfigError, build_schedule, build_source, load_config, parse_config  # noqa: E402
from .evaluation import bigram_counts, cfg_sweep, evaluate, report_to_text, verify_identities  # noqa: E402
from .model import DenoiserModel  # noqa: E402
from .oracle import NoiseConfig, OracleDenoiser, ToyDistribution  # noqa: E402
from .sampler import SamplerConfig, block_generate, generate  # noqa: E402
from .schedule import make_blended_argmax, make_linear  # noqa: E402
from .trainer import (  # noqa: E402
    CheckpointError,
    CorpusSource,
    MarkovSource,
    ToySource,
    distill,
    distill_loss_config,
    load_checkpoint,
    save_checkpoint,
    train_diagonal,
)

log = logging.getLogger("dfm")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return out


def _float_list(text: str) -> list[float]:
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("need at least one value")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfm", description="Discrete flow maps: train, distill, sample and verify.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="diagonal training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--seed", type=int, help="override train.seed")

    d = sub.add_parser("distill", help="consistency distillation from a diagonal checkpoint")
    d.add_argument("--config", required=True)
    d.add_argument("--init", required=True)
    d.add_argument("--loss", required=True, choices=("psd", "lsd", "esd"))
    d.add_argument("--out", required=True)
    d.add_argument("--steps", type=int, help="override train.steps")
    d.add_argument("--seed", type=int, help="override train.seed")

    s = sub.add_parser("sample", help="generate token sequences")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--nfe", type=int, default=1)
    s.add_argument("--num-samples", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--guidance", type=float, default=None, help="guidance strength omega")
    s.add_argument("--prompt", default=None, help="context tokens (space-separated ids, or text for char models)")
    s.add_argument("--blocks", type=int, default=1, help="number of blocks for prompted generation")
    s.add_argument("--emit-probs", action="store_true", help="print the final denoiser rows")

    v = sub.add_parser("verify", help="check the flow-map identities")
    v.add_argument("--mode", required=True, choices=("oracle", "model"))
    v.add_argument("--ckpt")
    v.add_argument("--dist", required=True, help="distribution file (L K header, one sequence per line)")
    v.add_argument("--grid", type=int, default=10)
    v.add_argument("--probes", type=int, default=50)
    v.add_argument("--tol", type=float, default=None, help="one tolerance for every identity")
    v.add_argument("--schedule", choices=("linear", "blended-argmax"), default="linear", help="oracle mode only")
    v.add_argument("--n-steps", type=int, default=2000, help="oracle RK4 steps")
    v.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="sample metrics per NFE")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--nfe", type=_int_list, default=[1, 2, 4, 8])
    e.add_argument("--num-samples", type=int, default=20000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dist", help="distribution file for TV (defaults to the training data when enumerable)")

    c = sub.add_parser("cfg-sweep", help="guidance sweep with block generation")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--omegas", type=_float_list, default=[0.0, 0.5, 1.0, 1.5, 2.0])
    c.add_argument("--num-samples", type=int, default=2000)
    c.add_argument("--nfe", type=int, default=4)
    c.add_argument("--blocks", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    return p


# ---- helpers ----------------------------------------------------------------


def _run_config(ck):
    run = ck.config.get("run")
    if run is None:
        raise UsageError("checkpoint carries no run configuration")
    return parse_config(run, ck.config.get("base_dir", "."))


def _source_of(ck):
    return build_source(_run_config(ck))


def _truth(ck, dist_path):
    if dist_path:
        return ToyDistribution.load(dist_path)
    try:
        src = _source_of(ck)
    except (UsageError, ConfigError, OSError):
        return None
    return src.dist if isinstance(src, ToySource) else None


def _parse_prompt(text, src, K):
    if isinstance(src, CorpusSource):
        try:
            return src.encode(text)
        except KeyError as e:
            raise UsageError(f"prompt character {e.args[0]!r} is not in the vocabulary") from None
    try:
        toks = np.array([int(v) for v in text.split()], dtype=np.int64)
    except ValueError:
        raise UsageError("prompt must be space-separated token ids") from None
    if toks.size and (toks.min() < 0 or toks.max() >= K):
        raise UsageError(f"prompt tokens must lie in [0, {K - 1}]")
    return toks


def _format(tokens, src):
    if isinstance(src, CorpusSource):
        return src.decode(tokens)
    return " ".join(str(int(v)) for v in tokens)


def _write(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    over = {k: v for k, v in (("steps", args.steps), ("seed", args.seed)) if v is not None}
    tcfg = cfg.train_config(stage="diagonal", **over)
    src = build_source(cfg, tcfg.context_dropout)
    sched = build_schedule(cfg, src.L)
    model = DenoiserModel.init(cfg.arch(src.L, src.K, src.conditional), cfg.model_seed, sched)
    oracle = src.oracle(sched, NoiseConfig(tcfg.noise_std), n_steps=200) if tcfg.probe_every and not sched.per_position else None
    history = []
    ck = train_diagonal(tcfg, src, model, oracle=oracle, history=history)
    ck.config["run"] = _raw(cfg)
    ck.config["base_dir"] = str(Path(args.config).resolve().parent)
    save_checkpoint(ck, args.out)
    for row in history[-1:]:
        _write(f"trained {row['step']} steps, loss EMA {row['loss_ema']:.5f}")
    return 0


def _raw(cfg) -> dict:
    return {name: getattr(cfg, name) for name in ("schedule", "model", "loss", "train", "sampler", "data")}


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    init = load_checkpoint(args.init)
    over = {k: v for k, v in (("steps", args.steps), ("seed", args.seed)) if v is not None}
    try:
        lcfg = distill_loss_config(args.loss, **{k: v for k, v in cfg.loss.items() if k != "kind"})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid loss settings: {e}") from None
    tcfg = cfg.train_config(stage="distill", loss=lcfg, **over)
    src = build_source(cfg, tcfg.context_dropout)
    if (src.L, src.K) != (init.arch.L, init.arch.K):
        raise UsageError("config data does not match the checkpoint shape")
    history = []
    ck = distill(tcfg, init, args.loss, src, history=history)
    ck.config["run"] = _raw(cfg)
    ck.config["base_dir"] = str(Path(args.config).resolve().parent)
    save_checkpoint(ck, args.out)
    for row in history[-1:]:
        _write(f"distilled {row['step']} steps ({args.loss}), loss EMA {row['loss_ema']:.5f}")
    return 0


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model()
    try:
        src = _source_of(ck)
    except (UsageError, ConfigError, OSError):
        src = None
    omega = 0.0 if args.guidance is None else args.guidance
    if args.num_samples < 1:
        raise UsageError("--num-samples must be positive")
    if args.guidance is not None and not model.arch.conditional:
        raise UsageError("guidance needs a conditional checkpoint")
    if args.prompt is not None:
        if not model.arch.conditional:
            raise UsageError("--prompt needs a conditional checkpoint")
        prompt = _parse_prompt(args.prompt, src, model.arch.K)
        scfg = SamplerConfig(nfe=args.nfe, guidance_omega=omega if args.guidance is not None else 1.0,
                             block_len=model.arch.L, n_blocks=args.blocks, seed=args.seed)
        tokens, psi = block_generate(model, scfg, args.num_samples, prompt, return_probs=True)
        psi = psi.reshape(args.num_samples, -1, model.arch.K)
    else:
        scfg = SamplerConfig(nfe=args.nfe, seed=args.seed)
        tokens, _, psi = generate(model, scfg, args.num_samples, return_state=True)
    for i, row in enumerate(tokens):
        _write(_format(row, src))
        if args.emit_probs:
            for pos, p in enumerate(psi[i]):
                _write(f"# probs {i} {pos} " + " ".join(repr(float(v)) for v in p))
    return 0


def cmd_verify(args) -> int:
    dist = ToyDistribution.load(args.dist)
    rng = np.random.default_rng(args.seed)
    if args.mode == "oracle":
        sched = make_linear() if args.schedule == "linear" else make_blended_argmax(vocab_size=dist.K)
        den = OracleDenoiser(dist, sched, NoiseConfig(1.0), L=dist.L, n_steps=args.n_steps)
        ref = None
        source = f"oracle:{Path(args.dist).name}"
    else:
        if not args.ckpt:
            raise UsageError("--mode model needs --ckpt")
        ck = load_checkpoint(args.ckpt)
        den = ck.model()
        if (den.arch.L, den.arch.K) != (dist.L, dist.K):
            raise UsageError("distribution shape does not match the checkpoint")
        if den.sched.per_position:
            raise UsageError("identity checks need a shared schedule")
        ref = OracleDenoiser(dist, den.sched, NoiseConfig(1.0), L=dist.L, n_steps=args.n_steps)
        source = f"model:{Path(args.ckpt).name}"
    report = verify_identities(den, grid_n=args.grid, n_probe_points=args.probes, tol=args.tol, rng=rng, reference=ref)
    report.source = source
    _write(report_to_text(report))
    return 0 if report.passed else 1


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model()
    if args.num_samples < 1:
        raise UsageError("--num-samples must be positive")
    truth = _truth(ck, args.dist)
    if truth is not None and (truth.L, truth.K) != (model.arch.L, model.arch.K):
        raise UsageError("distribution shape does not match the checkpoint")
    report = evaluate(model, args.nfe, args.num_samples, args.seed, truth, checkpoint=Path(args.ckpt).name)
    _write(report_to_text(report))
    return 0


def cmd_cfg_sweep(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model()
    if not model.arch.conditional:
        raise UsageError("cfg-sweep needs a conditional checkpoint")
    src = _source_of(ck)
    rng = np.random.default_rng([args.seed, 1])
    if isinstance(src, MarkovSource):
        prompts = src.chain.sample(rng, args.num_samples, src.L)
        reference = src.chain.transition
    elif isinstance(src, CorpusSource):
        start = rng.integers(0, src.tokens.size - src.L + 1, size=args.num_samples)
        prompts = src.tokens[start[:, None] + np.arange(src.L)[None, :]]
        reference = bigram_counts(src.tokens, src.K).astype(np.float64) + 1e-12
    else:
        raise UsageError("cfg-sweep needs Markov or corpus training data")
    scfg = SamplerConfig(nfe=args.nfe, block_len=model.arch.L, n_blocks=args.blocks, seed=args.seed)
    report = cfg_sweep(model, prompts, args.omegas, scfg, reference=reference, checkpoint=Path(args.ckpt).name)
    _write(report_to_text(report))
    return 0


COMMANDS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "verify": cmd_verify,
    "eval": cmd_eval,
    "cfg-sweep": cmd_cfg_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        sys.stderr.write(f"dfm {args.command}: {msg}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
