"""
Micro-benchmarks for the popcount kernels, the fused packers and the fp32 baseline.

Only the kernel (or packer) call sits inside the timed region. Every repeat's output
is hashed, so a report row also proves the result did not change between repeats.
"""

import csv
import hashlib
import io
import os
import platform
import statistics
import time
from typing import Any, Callable, Dict, List, Optional, Tuple

import numba
import numpy as np
import structlog
import yaml

from .bitpack import pack_bool, pack_sign, pack_ternary, pack_ternary_ints, unpack
from .errors import BenchSizeError, ConfigError, DomainError
from .kernels import logic_ops_per_output, run_kernel
from .layers import ToyModel
from .models import (
    BenchCase,
    BenchReport,
    BenchRow,
    BenchSpec,
    KernelConfig,
    PackedBinaryMatrix,
    PackedTernaryMatrix,
    QuantMode,
    QuantState,
    words_per_row,
)
from .quant import quantize
from .tensor import Distribution, gemm_f32, gemm_int_oracle, random_matrix, random_signs, random_ternary

logger = structlog.get_logger(__name__)

DEFAULT_MAX_BYTES = 4 * 2**30
PACK_SCALE = 1.0

Prepared = Tuple[Callable[[], Any], Callable[[Any], bool]]


def load_presets(path: str) -> Dict[str, List[BenchSpec]]:
    """Named lists of bench specs from a YAML file (`presets: {name: [ {case, m, n, k, ...} ]}`)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Preset file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle)
    if not data or not isinstance(data.get("presets"), dict):
        raise ConfigError(f"{path}: expected a top-level 'presets' mapping")

    presets: Dict[str, List[BenchSpec]] = {}
    for name, entries in data["presets"].items():
        if not isinstance(entries, list):
            raise ConfigError(f"preset '{name}' must be a list", key=name)
        specs = []
        for i, entry in enumerate(entries):
            try:
                specs.append(BenchSpec(**entry))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"preset '{name}' entry {i}: {e}", key=name) from None
        presets[name] = specs
    logger.info("loaded bench presets", path=path, presets=sorted(presets))
    return presets


def estimate_bytes(spec: BenchSpec) -> int:
    """Peak working set: dense sources, packed operands, output and (when checking) the oracle."""
    m, n, k = spec.m, spec.n, spec.k
    words = words_per_row(k) * 8
    if spec.case is BenchCase.FP32:
        total = 4 * (m * k + n * k + m * n)
        if spec.check:
            total += 8 * (m * k + n * k + m * n)
        return total
    if spec.case.is_pack:
        return 4 * m * k * 3 + 2 * m * words
    total = 4 * (m * k + n * k) + 2 * words * (m + n) + 4 * m * n
    if spec.check:
        total += 8 * (m * k + n * k + m * n)
    return total


def check_size(spec: BenchSpec, max_bytes: int = DEFAULT_MAX_BYTES) -> int:
    estimate = estimate_bytes(spec)
    if estimate > max_bytes:
        raise BenchSizeError(estimate, max_bytes, (spec.m, spec.n, spec.k))
    return estimate


def checksum(result: Any) -> str:
    digest = hashlib.sha256()
    if isinstance(result, PackedTernaryMatrix):
        digest.update(np.ascontiguousarray(result.pos, dtype="<u8").tobytes())
        digest.update(np.ascontiguousarray(result.neg, dtype="<u8").tobytes())
    elif isinstance(result, PackedBinaryMatrix):
        digest.update(np.ascontiguousarray(result.words, dtype="<u8").tobytes())
    else:
        arr = np.asarray(result)
        digest.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return digest.hexdigest()[:16]


def _bool_ints(rows: int, cols: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=(rows, cols)).astype(np.int32)


def prepare(spec: BenchSpec, cfg: KernelConfig) -> Prepared:
    """Build operands once; returns (timed call, oracle check)."""
    m, n, k, seed = spec.m, spec.n, spec.k, spec.seed
    case = spec.case

    if case is BenchCase.FP32:
        a = random_matrix(m, k, Distribution.normal(), seed)
        b = random_matrix(n, k, Distribution.normal(), seed + 1)

        def check_fp(out) -> bool:
            ref = a.astype(np.float64) @ b.astype(np.float64).T
            return bool(np.allclose(out, ref, rtol=1e-3, atol=1e-4 * np.sqrt(k)))

        return (lambda: gemm_f32(a, b)), check_fp

    if case.is_pack:
        a = random_matrix(m, k, Distribution.normal(), seed)
        if case is BenchCase.PACK_TERNARY:
            state = QuantState(PACK_SCALE, QuantMode.ternary())
            return (lambda: pack_ternary(a, PACK_SCALE)), lambda p: bool(np.array_equal(unpack(p), quantize(a, state)))
        state = QuantState(PACK_SCALE, QuantMode.bool_())
        return (lambda: pack_bool(a, PACK_SCALE)), lambda p: bool(np.array_equal(unpack(p), quantize(a, state)))

    if case in (BenchCase.CASE1, BenchCase.CASE1_NAIVE_AND):
        left_ints, right_ints = random_signs(m, k, seed), random_ternary(n, k, seed + 1)
        left, right = pack_sign(left_ints), pack_ternary_ints(right_ints)
    elif case is BenchCase.CASE2:
        left_ints, right_ints = _bool_ints(m, k, seed), random_ternary(n, k, seed + 1)
        left = pack_bool(left_ints, 1.0)
        right = pack_ternary_ints(right_ints)
    elif case is BenchCase.CASE3:
        left_ints, right_ints = random_ternary(m, k, seed), random_ternary(n, k, seed + 1)
        left, right = pack_ternary_ints(left_ints), pack_ternary_ints(right_ints)
    else:
        raise DomainError(f"no operands for {case.value}")

    def check_int(out) -> bool:
        return bool(np.array_equal(out, gemm_int_oracle(left_ints, right_ints)))

    return (lambda: run_kernel(case, left, right, cfg)), check_int


def run_bench(
    spec: BenchSpec,
    cfg: Optional[KernelConfig] = None,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> BenchRow:
    check_size(spec, max_bytes)
    cfg = cfg or KernelConfig(parallel=spec.parallel)
    call, check = prepare(spec, cfg)

    # first call also triggers compilation
    result = call()
    passed: Optional[bool] = None
    if spec.check:
        passed = check(result)
        if not passed:
            logger.error("oracle check failed", case=spec.case.value, m=spec.m, n=spec.n, k=spec.k)

    for _ in range(spec.warmup):
        call()

    timings_ns: List[int] = []
    sums = set()
    for _ in range(spec.repeats):
        start = time.perf_counter_ns()
        result = call()
        timings_ns.append(time.perf_counter_ns() - start)
        sums.add(checksum(result))
    if len(sums) != 1:
        logger.error("checksum changed between repeats", case=spec.case.value, distinct=len(sums))
        passed = False

    median_us = statistics.median(timings_ns) / 1e3
    row = BenchRow(
        case=spec.case.value,
        m=spec.m,
        n=spec.n,
        k=spec.k,
        median_us=median_us,
        min_us=min(timings_ns) / 1e3,
        max_us=max(timings_ns) / 1e3,
        gops=spec.ops / (max(median_us, 1e-3) * 1e3),
        checksum=sums.pop() if len(sums) == 1 else "unstable",
        check=passed,
        parallel=cfg.parallel,
    )
    logger.info("bench row", **row.to_dict())
    return row


def machine_info() -> Dict[str, Any]:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
    }


def run_benches(
    specs: List[BenchSpec],
    cfg: Optional[KernelConfig] = None,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> BenchReport:
    report = BenchReport(machine=machine_info())
    for spec in specs:
        report.rows.append(run_bench(spec, cfg, max_bytes))
    return report


def speedups(report: BenchReport) -> List[Dict[str, Any]]:
    """fp32-over-kernel and naive-over-xor latency ratios for every shape that has both rows."""
    by_shape: Dict[Tuple[int, int, int], Dict[str, BenchRow]] = {}
    for row in report.rows:
        by_shape.setdefault((row.m, row.n, row.k), {})[row.case] = row

    out = []
    for (m, n, k), rows in by_shape.items():
        pairs = [(BenchCase.FP32.value, c.value) for c in (BenchCase.CASE1, BenchCase.CASE2, BenchCase.CASE3)]
        pairs.append((BenchCase.CASE1_NAIVE_AND.value, BenchCase.CASE1.value))
        for base, target in pairs:
            if base in rows and target in rows:
                entry = {
                    "shape": f"{m}x{n}x{k}",
                    "baseline": base,
                    "case": target,
                    "speedup": rows[base].median_us / rows[target].median_us,
                }
                if base == BenchCase.CASE1_NAIVE_AND.value:
                    words = words_per_row(k)
                    entry["logic_ops"] = (
                        logic_ops_per_output(BenchCase.CASE1_NAIVE_AND, words),
                        logic_ops_per_output(BenchCase.CASE1, words),
                    )
                out.append(entry)
    return out


def format_csv(report: BenchReport) -> str:
    buffer = io.StringIO()
    for key, value in report.machine.items():
        buffer.write(f"# {key}: {value}\n")
    if not report.rows:
        return buffer.getvalue()
    writer = csv.DictWriter(buffer, fieldnames=list(report.rows[0].to_dict()), lineterminator="\n")
    writer.writeheader()
    for row in report.rows:
        writer.writerow(row.to_dict())
    for entry in speedups(report):
        buffer.write(f"# speedup {entry['case']} vs {entry['baseline']} at {entry['shape']}: {entry['speedup']:.2f}x\n")
    return buffer.getvalue()


def format_markdown(report: BenchReport) -> str:
    lines = [f"- {key}: {value}" for key, value in report.machine.items()]
    if report.rows:
        header = list(report.rows[0].to_dict())
        lines += ["", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in report.rows:
            lines.append("| " + " | ".join(str(v) for v in row.to_dict().values()) + " |")
    entries = speedups(report)
    if entries:
        lines.append("")
        for entry in entries:
            lines.append(f"- {entry['case']} vs {entry['baseline']} at {entry['shape']}: **{entry['speedup']:.2f}x**")
    return "\n".join(lines) + "\n"


def measure_throughput(model: ToyModel, batch: np.ndarray, repeats: int = 5) -> Dict[str, float]:
    """Tokens per second of the packed path and the full-precision path on one batch."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 3:
        raise DomainError(f"batch must be [B x T x d_in], got {batch.ndim}-D")
    tokens = batch.shape[0] * batch.shape[1]
    result: Dict[str, float] = {"tokens": float(tokens)}
    for label, quantized in (("packed", True), ("fp", False)):
        model.forward_batch(batch[:1], quantized)
        timings = []
        for _ in range(repeats):
            start = time.perf_counter_ns()
            model.forward_batch(batch, quantized)
            timings.append(time.perf_counter_ns() - start)
        seconds = statistics.median(timings) / 1e9
        result[f"{label}_tokens_per_s"] = tokens / max(seconds, 1e-9)
    logger.info("throughput", **result)
    return result
