import os

from .bitpack import pack_bool, pack_sign, pack_ternary, pack_ternary_ints, unpack
from .errors import (
    BenchSizeError, BwtaError, ConfigError, CorruptPackError, DomainError,
    KindError, ScheduleError, ShapeMismatchError, TrainingDivergedError
)
from .kernels import gemm_case1, gemm_case1_naive_and, gemm_case2, gemm_case3, run_kernel
from .layers import BwtaLinear, ToyModel, attention_context, attention_scores, bwta_linear_forward
from .loader import CheckpointLoader, TrainConfigLoader
from .models import (
    BenchCase, BenchSpec, KernelConfig, PackKind, PackedBinaryMatrix, PackedTernaryMatrix,
    QuantKind, QuantMode, QuantState, Schedule, Stage, Strategy, TrainConfig
)
from .quant import activation_scale_init, dequantize, quantize, ste_backward, weight_sign_quantize
from .schedule import build_bitwise_schedule, build_schedule, build_schedule_from_levels
from .serialization import read_bwta, write_bwta
from .tensor import gemm_f32, gemm_int_oracle

# Package metadata
__version__ = '0.3.0'
__author__ = 'Inference Kernels Team'
__description__ = 'Binary-weight ternary-activation kernels, layers and smooth multi-stage training'

# Public API
__all__ = [
    # Quantization and packing
    'quantize', 'dequantize', 'ste_backward', 'weight_sign_quantize', 'activation_scale_init',
    'pack_sign', 'pack_bool', 'pack_ternary', 'pack_ternary_ints', 'unpack',
    'read_bwta', 'write_bwta',

    # Kernels and layers
    'gemm_f32', 'gemm_int_oracle',
    'gemm_case1', 'gemm_case1_naive_and', 'gemm_case2', 'gemm_case3', 'run_kernel',
    'BwtaLinear', 'ToyModel', 'bwta_linear_forward', 'attention_scores', 'attention_context',

    # Schedules and loaders
    'build_schedule', 'build_bitwise_schedule', 'build_schedule_from_levels',
    'TrainConfigLoader', 'CheckpointLoader',

    # Data models
    'QuantKind', 'QuantMode', 'QuantState', 'PackKind', 'PackedBinaryMatrix', 'PackedTernaryMatrix',
    'KernelConfig', 'Stage', 'Schedule', 'Strategy', 'TrainConfig', 'BenchCase', 'BenchSpec',

    # Errors
    'BwtaError', 'ShapeMismatchError', 'DomainError', 'CorruptPackError', 'KindError',
    'ScheduleError', 'ConfigError', 'TrainingDivergedError', 'BenchSizeError',

    # Package info
    '__version__',
    '__author__',
    '__description__'
]

_REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Package-level configuration
DEFAULT_CONFIG = {
    'row_tile': 4,
    'col_tile': 4,
    'bench_repeats': 50,
    'bench_warmup': 5,
    'verify_trials': 200,
    'scale_floor': 1e-6,
    'grad_scale': True,
    'max_bench_bytes': 4 * 2**30,
    'presets_file': os.path.join(_REPO_ROOT, 'configs', 'bench_presets.yaml'),
    'checkpoint_dir': os.path.join('checkpoints', 'latest'),
}

def get_version():
    """Get package version string."""
    return __version__

def get_default_config():
    """Get default configuration dictionary."""
    return DEFAULT_CONFIG.copy()
