"""
Beamsim Monitoring Service
Prometheus metrics for training and evaluation runs
"""

from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest

# Private registry so repeated runs in one process do not collide with the default one
REGISTRY = CollectorRegistry()

SGD_STEPS = Counter('beamsim_sgd_steps_total', 'Optimizer steps', ['network'], registry=REGISTRY)
EPOCH_DURATION = Histogram('beamsim_epoch_duration_seconds', 'Training epoch duration', ['stage'], registry=REGISTRY)
KD_WEIGHT = Gauge('beamsim_kd_alpha', 'Current knowledge-distillation weight', registry=REGISTRY)
EVALUATED_SAMPLES = Counter('beamsim_evaluated_samples_total', 'Test samples evaluated', ['baseline'],
                            registry=REGISTRY)
GRADCHECK_FAILURES = Counter('beamsim_gradcheck_failures_total', 'Failed gradient-check suites', ['suite'],
                             registry=REGISTRY)


def record_sgd_step(network: str) -> None:
    SGD_STEPS.labels(network=network).inc()


def record_epoch(stage: str, duration: float, alpha: float | None = None) -> None:
    """Record epoch timing and the KD weight"""
    EPOCH_DURATION.labels(stage=stage).observe(duration)
    if alpha is not None:
        KD_WEIGHT.set(alpha)


def record_evaluation(baseline: str, samples: int) -> None:
    EVALUATED_SAMPLES.labels(baseline=baseline).inc(samples)


def record_gradcheck_failure(suite: str) -> None:
    GRADCHECK_FAILURES.labels(suite=suite).inc()


def get_metrics() -> str:
    """Get Prometheus metrics"""
    return generate_latest(REGISTRY).decode('utf-8')


def export_metrics(path: Union[str, Path]) -> Path:
    """Write the text exposition next to the run outputs"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(get_metrics(), encoding='utf-8')
    return path
