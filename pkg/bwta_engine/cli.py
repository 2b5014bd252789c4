"""
Command-line entry point: verify | bench | pack | inspect | train-demo | throughput.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import structlog

from . import get_default_config, get_version
from .bench import format_csv, format_markdown, load_presets, measure_throughput, run_benches
from .bitpack import pack_bool, pack_sign, pack_ternary, unpack
from .checkpoint import load_checkpoint
from .diagnostics import convergence_report
from .errors import BwtaError, DomainError
from .loader import TrainConfigLoader
from .logging_config import configure_logging
from .models import BenchCase, BenchSpec, KernelConfig, QuantMode, QuantState
from .quant import quantize
from .schedule import schedule_from_config
from .serialization import read_bwta, write_bwta
from .trainer import build_model, build_task, train, transition_spikes
from .verify import run_verification

logger = structlog.get_logger(__name__)


def read_matrix(path: str) -> np.ndarray:
    """Whitespace- or comma-separated float grid, one matrix row per line."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Input file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line for line in handle.read().splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise DomainError(f"{path} holds no matrix rows")
    rows = []
    for line_number, line in enumerate(lines, start=1):
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError:
            raise DomainError(f"{path}: row {line_number} is not a list of numbers") from None
    if len({len(row) for row in rows}) != 1:
        raise DomainError(f"{path}: rows have different lengths")
    return np.asarray(rows, dtype=np.float32)


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = KernelConfig(parallel=args.parallel)
    result = run_verification(seed=args.seed, trials=args.trials, cfg=cfg)
    print(result.summary())
    return 0 if result.passed else 1


def cmd_bench(args: argparse.Namespace) -> int:
    if args.preset:
        presets = load_presets(args.presets_file)
        if args.preset not in presets:
            raise DomainError(f"unknown preset '{args.preset}', have {', '.join(sorted(presets))}")
        specs = presets[args.preset]
    else:
        specs = [BenchSpec(BenchCase(args.case), args.m, args.n, args.k)]

    overrides = {"check": args.check, "parallel": args.parallel, "seed": args.seed}
    if args.repeats is not None:
        overrides["repeats"] = args.repeats
    if args.warmup is not None:
        overrides["warmup"] = args.warmup
    specs = [BenchSpec(**{**spec.__dict__, **overrides}) for spec in specs]

    report = run_benches(specs, cfg=KernelConfig(parallel=args.parallel), max_bytes=args.max_bytes)
    print(format_csv(report) if args.format == "csv" else format_markdown(report), end="")
    return 0 if all(row.check is not False for row in report.rows) else 1


def cmd_pack(args: argparse.Namespace) -> int:
    a = read_matrix(args.input)
    if args.mode == "ternary":
        packed = pack_ternary(a, args.scale)
    elif args.mode == "bool":
        packed = pack_bool(a, args.scale)
    else:
        packed = pack_sign(quantize(a, QuantState(args.scale, QuantMode.sign_binary())))
    write_bwta(args.output, packed, args.scale)
    print(f"[✔] Packed {packed.rows}x{packed.cols} {args.mode} matrix to {args.output}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    packed, scale = read_bwta(args.input)
    ints = unpack(packed)
    print(f"kind={packed.kind.name} rows={packed.rows} cols={packed.cols} scale={scale!r}")
    values = np.float32(scale) * ints.astype(np.float32) if args.dequantize else ints
    for row in values:
        print(" ".join(str(v) for v in row))
    return 0


def cmd_train_demo(args: argparse.Namespace) -> int:
    config = TrainConfigLoader(args.config).load()
    if args.metrics_csv:
        config.metrics_csv = args.metrics_csv
    if args.checkpoint_dir:
        config.checkpoint_dir = args.checkpoint_dir
    schedule = schedule_from_config(config)
    task = build_task(config)
    state = train(build_model(config), task, schedule, config)

    final = state.history[-1]
    report = convergence_report(state)
    spikes = transition_spikes(state)
    print(f"[✔] Trained {schedule.total_epochs} epochs over stages L={schedule.levels}")
    print(f"    final acc={final.acc:.4f} loss={final.loss:.4f} zero_frac={final.zero_frac:.4f}")
    print(f"    non-converged scales={report.fraction_non_converged:.3f}")
    if spikes:
        print(f"    mean transition spike={np.mean(spikes):.4f}")
    if config.metrics_csv:
        print(f"    metrics: {config.metrics_csv}")
    if config.checkpoint_dir:
        print(f"    checkpoint: {config.checkpoint_dir}")
    return 0


def cmd_throughput(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    batch = rng.standard_normal((args.batch, args.seq_len, model.d_in)).astype(np.float32)
    result = measure_throughput(model, batch, repeats=args.repeats)
    print(f"tokens={int(result['tokens'])}")
    print(f"packed tokens/s={result['packed_tokens_per_s']:.1f}")
    print(f"fp tokens/s={result['fp_tokens_per_s']:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    defaults = get_default_config()
    parser = argparse.ArgumentParser(prog="bwta", description="Binary-weight ternary-activation kernels and training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--json-logs", action="store_true", help="emit logs as JSON lines")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run the kernel oracle-equivalence suite")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--trials", type=int, default=defaults["verify_trials"])
    verify.add_argument("--parallel", action="store_true")
    verify.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="time kernels and packers")
    bench.add_argument("--case", choices=[c.value for c in BenchCase], default=BenchCase.CASE1.value)
    bench.add_argument("--m", type=int, default=2048)
    bench.add_argument("--n", type=int, default=2048)
    bench.add_argument("--k", type=int, default=2048)
    bench.add_argument("--preset", help="named shape list from the presets file, e.g. paper")
    bench.add_argument("--presets-file", default=defaults["presets_file"])
    bench.add_argument("--repeats", type=int, default=None, help=f"default {defaults['bench_repeats']}")
    bench.add_argument("--warmup", type=int, default=None, help=f"default {defaults['bench_warmup']}")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--format", choices=["csv", "md"], default="csv")
    bench.add_argument("--check", action=argparse.BooleanOptionalAction, default=True)
    bench.add_argument("--allow-unchecked", action="store_true", help="permit --no-check")
    bench.add_argument("--parallel", action="store_true")
    bench.add_argument("--max-bytes", type=int, default=defaults["max_bench_bytes"])
    bench.set_defaults(func=cmd_bench)

    pack = sub.add_parser("pack", help="quantize and pack a float grid into a .bwta file")
    pack.add_argument("--input", required=True)
    pack.add_argument("--mode", choices=["sign", "bool", "ternary"], default="ternary")
    pack.add_argument("--scale", type=float, default=1.0)
    pack.add_argument("--output", required=True)
    pack.set_defaults(func=cmd_pack)

    inspect = sub.add_parser("inspect", help="print the integers stored in a .bwta file")
    inspect.add_argument("--input", required=True)
    inspect.add_argument("--dequantize", action="store_true")
    inspect.set_defaults(func=cmd_inspect)

    demo = sub.add_parser("train-demo", help="smooth multi-stage training on the synthetic task")
    demo.add_argument("--config", required=True)
    demo.add_argument("--metrics-csv")
    demo.add_argument("--checkpoint-dir")
    demo.set_defaults(func=cmd_train_demo)

    throughput = sub.add_parser("throughput", help="tokens/s of a checkpoint, packed vs full precision")
    throughput.add_argument("--checkpoint", default=defaults["checkpoint_dir"])
    throughput.add_argument("--batch", type=int, default=8)
    throughput.add_argument("--seq-len", type=int, default=8)
    throughput.add_argument("--repeats", type=int, default=5)
    throughput.add_argument("--seed", type=int, default=0)
    throughput.set_defaults(func=cmd_throughput)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.WARNING, json=args.json_logs)

    if args.command == "bench" and not args.check and not args.allow_unchecked:
        parser.error("--no-check skips the oracle gate; pass --allow-unchecked to confirm")
    if args.command == "train-demo" and not os.path.exists(args.config):
        parser.print_usage(sys.stderr)
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2

    try:
        return args.func(args)
    except (BwtaError, FileNotFoundError) as e:
        logger.error("command failed", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return 1
