"""
Loaders for the line-oriented key=value files: the training config and the
checkpoint manifest. Both report the offending line number on every error.
"""

import os
from datetime import datetime
from typing import Any, Callable, Dict, Iterator, List, Tuple

import structlog

from .errors import ConfigError
from .models import LevelConvention, ScheduleKind, Strategy, TrainConfig

logger = structlog.get_logger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_key_values(text: str) -> Iterator[Tuple[int, str, str]]:
    """Yield (line_number, key, value); '#' starts a comment, blank lines are skipped."""
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", line_number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line_number)
        yield line_number, key, value


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_int_list(value: str) -> Tuple[int, ...]:
    items = [item.strip() for item in value.split(",") if item.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(item) for item in items)


def _optional_path(value: str):
    return value or None


class TrainConfigLoader:
    """Reads a training config file into a TrainConfig."""

    POSITIVE_INTS = {
        "L0", "stride", "total_epochs", "batch_size", "n_samples", "seq_len",
        "dim", "d_in", "heads", "ffn_dim", "calib_size",
    }
    NON_NEGATIVE_INTS = {"warmup_epochs", "fp_epochs", "early_stop_patience", "seed"}
    POSITIVE_FLOATS = {"lr_scale", "lr_weight", "lr_fp"}
    NON_NEGATIVE_FLOATS = {"weight_decay"}

    PARSERS: Dict[str, Callable[[str], Any]] = {
        "strategy": Strategy,
        "schedule": ScheduleKind,
        "level_convention": LevelConvention,
        "stages": _parse_int_list,
        "grad_scale": _parse_bool,
        "parallel": _parse_bool,
        "metrics_csv": _optional_path,
        "checkpoint_dir": _optional_path,
    }

    def __init__(self, config_file: str):
        self.config_file = config_file

    @classmethod
    def known_keys(cls) -> List[str]:
        return sorted(
            cls.POSITIVE_INTS | cls.NON_NEGATIVE_INTS | cls.POSITIVE_FLOATS | cls.NON_NEGATIVE_FLOATS
            | set(cls.PARSERS) | {"n_classes"}
        )

    def load(self) -> TrainConfig:
        if not os.path.exists(self.config_file):
            raise FileNotFoundError(f"Config file not found: {self.config_file}")
        with open(self.config_file, "r", encoding="utf-8") as handle:
            text = handle.read()
        try:
            config = self.loads(text)
        except ConfigError as e:
            logger.error("config validation failed", path=self.config_file, error=str(e))
            raise
        logger.info("loaded training config", path=self.config_file)
        return config

    def loads(self, text: str) -> TrainConfig:
        values: Dict[str, Any] = {}
        seen: Dict[str, int] = {}
        for line_number, key, raw in parse_key_values(text):
            if key in seen:
                raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", line_number, key)
            seen[key] = line_number
            values[key] = self._validate_value(key, raw, line_number)
        config = TrainConfig(**values)
        self._validate_config(config, seen)
        return config

    def _validate_value(self, key: str, raw: str, line_number: int) -> Any:
        if key not in self.known_keys():
            raise ConfigError(f"unknown key '{key}'", line_number, key)
        try:
            if key in self.PARSERS:
                return self.PARSERS[key](raw)
            if key in self.POSITIVE_INTS or key in self.NON_NEGATIVE_INTS or key == "n_classes":
                value = int(raw)
                floor = 1 if key in self.POSITIVE_INTS else 0
                if key == "n_classes":
                    floor = 2
                if value < floor:
                    raise ValueError(f"must be >= {floor}")
                return value
            value = float(raw)
            if key in self.POSITIVE_FLOATS and not value > 0:
                raise ValueError("must be > 0")
            if value < 0:
                raise ValueError("must be >= 0")
            return value
        except ValueError as e:
            raise ConfigError(f"bad value {raw!r} for '{key}': {e}", line_number, key) from None

    def _validate_config(self, config: TrainConfig, seen: Dict[str, int]) -> None:
        if config.dim % config.heads:
            raise ConfigError(
                f"dim={config.dim} is not divisible by heads={config.heads}", seen.get("heads", seen.get("dim")), "heads"
            )
        if config.stages and "L0" in seen:
            logger.warning("both 'stages' and 'L0' given; 'stages' wins", line=seen["stages"])

    def get_config_info(self) -> Dict[str, Any]:
        if not os.path.exists(self.config_file):
            return {"exists": False}
        stat = os.stat(self.config_file)
        return {
            "exists": True,
            "path": self.config_file,
            "size_bytes": stat.st_size,
            "last_modified": datetime.fromtimestamp(stat.st_mtime).isoformat(),
            "readable": os.access(self.config_file, os.R_OK),
        }


class CheckpointLoader:
    """Validates the manifest of a checkpoint directory."""

    MANIFEST = "manifest.cfg"
    FORMAT_VERSION = 1
    INT_KEYS = ("format_version", "d_in", "dim", "heads", "ffn_dim", "n_classes", "stage_L")
    LINEARS = ("q_proj", "k_proj", "v_proj", "o_proj", "ffn1", "ffn2")
    ATTENTION_SCALES = ("q", "k", "v", "att")

    def __init__(self, checkpoint_dir: str):
        self.checkpoint_dir = checkpoint_dir

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.checkpoint_dir, self.MANIFEST)

    def required_keys(self) -> List[str]:
        return (
            list(self.INT_KEYS) + ["eps"]
            + [f"scale.{name}" for name in self.LINEARS + self.ATTENTION_SCALES]
        )

    def load_manifest(self) -> Dict[str, Any]:
        if not os.path.exists(self.manifest_path):
            raise FileNotFoundError(f"Checkpoint manifest not found: {self.manifest_path}")
        with open(self.manifest_path, "r", encoding="utf-8") as handle:
            text = handle.read()
        try:
            manifest = self._validate_manifest(text)
        except ConfigError as e:
            logger.error("manifest validation failed", path=self.manifest_path, error=str(e))
            raise
        logger.info("loaded checkpoint manifest", path=self.manifest_path)
        return manifest

    def _validate_manifest(self, text: str) -> Dict[str, Any]:
        manifest: Dict[str, Any] = {}
        for line_number, key, raw in parse_key_values(text):
            try:
                if key in self.INT_KEYS:
                    manifest[key] = int(raw)
                elif key == "eps" or key.startswith(("scale.", "mu.", "sw.")):
                    manifest[key] = float(raw)
                else:
                    logger.warning("unknown manifest key", key=key, line=line_number)
                    continue
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for '{key}'", line_number, key) from None
            if key.startswith("scale.") and not manifest[key] > 0:
                raise ConfigError(f"scale '{key}' must be positive", line_number, key)

        missing = [key for key in self.required_keys() if key not in manifest]
        if missing:
            raise ConfigError(f"manifest is missing {', '.join(missing)}")
        if manifest["format_version"] != self.FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {manifest['format_version']}", key="format_version")
        if manifest["dim"] % manifest["heads"]:
            raise ConfigError("dim is not divisible by heads", key="heads")
        return manifest

    def weight_path(self, name: str) -> str:
        return os.path.join(self.checkpoint_dir, f"{name}.bwta")

    def fp_params_path(self) -> str:
        return os.path.join(self.checkpoint_dir, "fp_params.npz")
