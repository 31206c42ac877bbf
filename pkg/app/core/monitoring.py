"""
Run monitoring: prometheus metrics for rounds and party updates, plus
OpenTelemetry spans around rounds and local training.

Recording is skipped when FEDSIM_ENABLE_METRICS is false. Spans are no-ops
unless the host process installs a tracer provider.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Union

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile

from app.config import settings

try:
    from opentelemetry import trace
    OTEL_AVAILABLE = True
except ImportError:
    OTEL_AVAILABLE = False

logger = logging.getLogger(__name__)

# Global metrics registry to prevent duplicate registration
_METRICS_REGISTRY: Dict[str, Any] = {}


class DummyMetric:
    """Dummy metric that does nothing but prevents errors."""

    def inc(self, amount: float = 1) -> None:
        pass

    def observe(self, amount: float) -> None:
        pass

    def labels(self, **kwargs) -> "DummyMetric":
        return self

    def set(self, value: float) -> None:
        pass


class _NoopSpan:
    def __enter__(self):
        return self

    def __exit__(self, *exc) -> bool:
        return False

    def set_attribute(self, key: str, value: Any) -> None:
        pass


def _get_or_create_metric(metric_class, name: str, description: str, **kwargs) -> Any:
    """
    Get or create a metric, preventing duplicate registration errors.

    Returns the metric instance or a dummy metric if creation fails.
    """
    registry_key = f"{metric_class.__name__}_{name}"
    if registry_key in _METRICS_REGISTRY:
        return _METRICS_REGISTRY[registry_key]

    try:
        metric = metric_class(name, description, **kwargs)
    except ValueError as e:
        if "Duplicated timeseries" in str(e) or "already registered" in str(e):
            logger.warning(f"Metric {name} already registered, returning dummy metric: {e}")
            metric = DummyMetric()
        else:
            logger.error(f"Failed to create metric {name}: {e}")
            raise
    _METRICS_REGISTRY[registry_key] = metric
    return metric


ROUNDS_TOTAL = _get_or_create_metric(
    Counter,
    "fedsim_rounds_total",
    "Completed communication rounds",
    labelnames=["algorithm"],
)

PARTY_UPDATES_TOTAL = _get_or_create_metric(
    Counter,
    "fedsim_party_updates_total",
    "Local training runs whose model entered aggregation",
    labelnames=["algorithm"],
)

ROUND_DURATION = _get_or_create_metric(
    Histogram,
    "fedsim_round_duration_seconds",
    "Wall time of one communication round",
    labelnames=["algorithm"],
    buckets=[0.01, 0.05, 0.1, 0.25, 0.5, 1, 2.5, 5, 10, 30, 60],
)

GLOBAL_ACCURACY = _get_or_create_metric(
    Gauge,
    "fedsim_global_accuracy",
    "Top-1 test accuracy after the latest evaluated round",
    labelnames=["algorithm"],
)


def record_round(algorithm: str, duration: float, party_updates: int) -> None:
    if not settings.FEDSIM_ENABLE_METRICS:
        return
    ROUNDS_TOTAL.labels(algorithm=algorithm).inc()
    PARTY_UPDATES_TOTAL.labels(algorithm=algorithm).inc(party_updates)
    ROUND_DURATION.labels(algorithm=algorithm).observe(duration)


def record_accuracy(algorithm: str, accuracy: float) -> None:
    if not settings.FEDSIM_ENABLE_METRICS:
        return
    GLOBAL_ACCURACY.labels(algorithm=algorithm).set(accuracy)


def write_metrics_snapshot(path: Union[str, Path]) -> None:
    """Dump the registry in the text exposition format."""
    write_to_textfile(str(path), REGISTRY)


def span(name: str, **attributes):
    """Context manager opening a tracing span (no-op without OpenTelemetry)."""
    if not OTEL_AVAILABLE:
        return _NoopSpan()
    return trace.get_tracer(__name__).start_as_current_span(name, attributes=attributes)
