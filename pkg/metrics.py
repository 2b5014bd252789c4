"""
Metrics collection for the BWTA inference service.
Tracks request counts, token throughput, latency distribution and errors.
"""

from datetime import datetime, timezone
from threading import Lock
from typing import Any, Dict

import structlog

logger = structlog.get_logger(__name__)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class MetricsCollector:

    def __init__(self):
        """Initialize the metrics collector."""
        self._lock = Lock()
        self._start_time = _utcnow()

        # Core metrics
        self._total_inferences = 0
        self._sequences = 0
        self._tokens = 0
        self._total_latency_ms = 0.0

        # Error tracking
        self._validation_errors = 0
        self._inference_errors = 0
        self._checkpoint_errors = 0
        self._checkpoint_reloads = 0

        # Performance tracking
        self._latency_buckets = {
            '0-10ms': 0,
            '10-50ms': 0,
            '50-100ms': 0,
            '100-500ms': 0,
            '500ms+': 0
        }

    def record_inference(self, latency_ms: float, sequences: int, tokens: int):
        with self._lock:
            self._total_inferences += 1
            self._sequences += sequences
            self._tokens += tokens
            self._total_latency_ms += latency_ms
            self._update_latency_bucket(latency_ms)

    def record_validation_error(self):
        """Record a malformed request."""
        with self._lock:
            self._validation_errors += 1

    def record_inference_error(self):
        with self._lock:
            self._inference_errors += 1

    def record_checkpoint_error(self):
        with self._lock:
            self._checkpoint_errors += 1

    def record_checkpoint_reload(self):
        with self._lock:
            self._checkpoint_reloads += 1

    def _update_latency_bucket(self, latency_ms: float):
        if latency_ms < 10:
            self._latency_buckets['0-10ms'] += 1
        elif latency_ms < 50:
            self._latency_buckets['10-50ms'] += 1
        elif latency_ms < 100:
            self._latency_buckets['50-100ms'] += 1
        elif latency_ms < 500:
            self._latency_buckets['100-500ms'] += 1
        else:
            self._latency_buckets['500ms+'] += 1

    def get_metrics(self) -> Dict[str, Any]:
        with self._lock:
            uptime_seconds = (_utcnow() - self._start_time).total_seconds()
            average_latency = self._total_latency_ms / self._total_inferences if self._total_inferences > 0 else 0.0
            busy_seconds = self._total_latency_ms / 1000.0
            tokens_per_second = self._tokens / busy_seconds if busy_seconds > 0 else 0.0

            return {
                'total_inferences': self._total_inferences,
                'sequences_processed': self._sequences,
                'tokens_processed': self._tokens,
                'average_latency_ms': round(average_latency, 3),
                'tokens_per_second': round(tokens_per_second, 1),
                'uptime_seconds': round(uptime_seconds, 2),
                'latency_distribution': self._latency_buckets.copy(),
                'checkpoint_reloads': self._checkpoint_reloads,
                'errors': {
                    'validation_errors': self._validation_errors,
                    'inference_errors': self._inference_errors,
                    'checkpoint_errors': self._checkpoint_errors
                },
                'service_start_time': self._start_time.isoformat(),
                'metrics_generated_at': _utcnow().isoformat()
            }

    def reset_metrics(self):
        """Reset all metrics (useful for testing or maintenance)."""
        with self._lock:
            logger.warning("Resetting all metrics")

            self._start_time = _utcnow()
            self._total_inferences = 0
            self._sequences = 0
            self._tokens = 0
            self._total_latency_ms = 0.0

            self._validation_errors = 0
            self._inference_errors = 0
            self._checkpoint_errors = 0
            self._checkpoint_reloads = 0

            for bucket in self._latency_buckets:
                self._latency_buckets[bucket] = 0
