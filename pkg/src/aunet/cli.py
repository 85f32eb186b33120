"""Command-line entry point.

Subcommands: train, generate, split, flops, hparams, eval.

Exit codes: 0 success, 1 runtime failure (bad data, divergence, unreadable
checkpoint), 2 usage or configuration error. ``AUNET_CONFIG`` names the
config file used when ``--config`` is not given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import budget
from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint
from .hierarchy import count_parameters
from .numerics import ConfigError
from .splitter import SplitError, split

CONFIG_ENV = "AUNET_CONFIG"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> cfgmod.Config:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise UsageError(f"no config given (use --config or set {CONFIG_ENV})")
    return cfgmod.load(path)


def _read_input(value: str | None) -> bytes:
    if value is None or value == "-":
        return sys.stdin.buffer.read()
    p = Path(value)
    return p.read_bytes() if p.is_file() else value.encode("utf-8")


def _emit(pairs: list[tuple[str, str, str]], machine: bool) -> None:
    """Print (key, value, unit) rows aligned, or as key=value lines."""
    if machine:
        for k, v, u in pairs:
            print(f"{k}={v}" + (f" # {u}" if u else ""))
        return
    w = max(len(k) for k, _, _ in pairs)
    for k, v, u in pairs:
        print(f"{k:<{w}}  {v} {u}".rstrip())


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config(args)
    if args.steps:
        cfg.train.total_steps = args.steps
    corpus = Path(args.data).read_bytes()
    docs = corpus.split(b"\n") if args.split_lines else corpus
    result = train(cfg, docs, out_dir=args.out)
    last = result.history[-1] if result.history else {}
    _emit([("steps", str(cfg.train.total_steps), "steps"),
           ("final_loss", f"{last.get('loss', float('nan')):.4f}", "nats/byte"),
           ("heldout_bpb", f"{result.final_bpb:.4f}" if result.final_bpb is not None else "n/a", "bits/byte"),
           ("checkpoint", str(Path(args.out) / "last.aunt"), "")], args.machine)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .decode import generate

    model, _ = load_checkpoint(args.checkpoint)
    prompt = _read_input(args.prompt) if args.prompt is not None else b""
    out = generate(model, prompt, args.n, greedy=args.temp is None, temperature=args.temp or 1.0, seed=args.seed)
    sys.stdout.buffer.write(out)
    sys.stdout.buffer.flush()
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args).model.splitter if (args.config or os.environ.get(CONFIG_ENV)) else None
    data = _read_input(args.input)
    smap = split(data, cfg)
    if args.stats:
        if not data:
            return EXIT_OK
        rows = [("bytes", str(len(data)), "bytes")]
        for s, b in enumerate(smap.boundaries, start=2):
            rows.append((f"stage{s}_segments", str(len(b)), "segments"))
            if b:
                rows.append((f"stage{s}_bytes_per_segment", f"{len(data) / len(b):.3f}", "bytes/segment"))
        _emit(rows, args.machine)
        return EXIT_OK
    out = sys.stdout.buffer
    prev = -1
    for b in smap.boundaries[0]:
        out.write(data[prev + 1: b + 1] + b"\n")
        prev = b
    out.flush()
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _config(args)
    k = list(cfg.budget.contraction)
    if len(k) == 1 and cfg.model.n_stages > 1:
        raise UsageError("budget.contraction needs one factor per stage")
    f = budget.flops_for_config(cfg.model, k)
    unit = "byte" if cfg.model.vocab == 256 else "token"
    rows = [("flops_per_unit", f"{f:.4g}", f"FLOPs/{unit}"),
            ("params", str(count_parameters(cfg.model)), "parameters")]
    if args.units:
        rows.append(("compute", f"{f * args.units:.4g}", "FLOPs"))
    if args.gamma:
        n, c = budget.budget_for_gamma(f, args.gamma)
        rows += [("units_for_gamma", f"{n:.4g}", f"{unit}s"), ("compute_for_gamma", f"{c:.4g}", "FLOPs")]
    _emit(rows, args.machine)
    return EXIT_OK


def cmd_hparams(args) -> int:
    fit = budget.FITS[args.arch]
    unit = "bytes" if args.arch == "aunet" else "tokens"
    rows = [("compute", f"{args.flops:.4g}", "FLOPs"),
            ("batch_size", f"{budget.predict_bsz(args.flops, fit):.4g}", f"{unit}/step"),
            ("lr_max", f"{budget.predict_lr(args.flops, fit):.4g}", "")]
    if args.gamma_token is not None:
        rows.append(("gamma_byte", f"{budget.gamma_convert(args.gamma_token, args.k):.6g}", "bytes per FLOP/byte"))
    if args.flops_per_unit:
        rows.append(("train_units", f"{budget.tokens_for_budget(args.flops, args.flops_per_unit):.4g}", unit))
    _emit(rows, args.machine)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import bits_per_byte

    model, cfg = load_checkpoint(args.checkpoint)
    data = _read_input(args.data)
    seq = args.seq_len or cfg.train.seq_len
    bpb = bits_per_byte(model, data, seq, args.batch)
    _emit([("bytes", str(len(data)), "bytes"), ("bpb", f"{bpb:.4f}", "bits/byte")], args.machine)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aunet", description="Hierarchical byte-level language model tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
        sp.add_argument("--machine", action="store_true", help="print key=value lines")

    sp = sub.add_parser("train", help="train a model on a byte corpus")
    common(sp)
    sp.add_argument("--data", required=True, help="corpus file")
    sp.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    sp.add_argument("--steps", type=int, help="override train.total_steps")
    sp.add_argument("--split-lines", action="store_true", help="treat every line as a document")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="generate bytes from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", help="prompt file or literal text (default: empty)")
    sp.add_argument("--n", type=int, default=64, help="bytes to generate")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", help="argmax decoding (default)")
    mode.add_argument("--temp", type=float, help="sampling temperature")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("split", help="print word segments, one per line")
    common(sp)
    sp.add_argument("input", nargs="?", help="file or literal text (default: stdin)")
    sp.add_argument("--stats", action="store_true", help="print segment counts per stage instead")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("flops", help="FLOPs per input unit of a configured model")
    common(sp)
    sp.add_argument("--units", type=float, help="training units; also print total compute")
    sp.add_argument("--gamma", type=float, help="data-to-model ratio; print units and compute")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("hparams", help="batch size and learning rate predicted for a compute budget")
    common(sp, config=False)
    sp.add_argument("--arch", choices=sorted(budget.FITS), default="aunet")
    sp.add_argument("--flops", type=float, required=True, help="compute budget C in FLOPs")
    sp.add_argument("--gamma-token", type=float, help="token data-to-model ratio to convert")
    sp.add_argument("--k", type=float, default=budget.BYTES_PER_TOKEN, help="bytes per token")
    sp.add_argument("--flops-per-unit", type=float, help="F, to print N = C / F")
    sp.set_defaults(func=cmd_hparams)

    sp = sub.add_parser("eval", help="bits per byte of a checkpoint on a file")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="file or literal text")
    sp.add_argument("--seq-len", type=int)
    sp.add_argument("--batch", type=int, default=8)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SplitError) as e:
        print(f"aunet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"aunet: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
