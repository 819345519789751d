"""
Beamsim Gradient Check Service
Finite-difference oracle suites for the rate gradient, the unrolled pullback,
network backward passes and the end-to-end training pipeline
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from models.experiment import FeedbackChannelModel, GeometryScenario, NetConfig, ScenarioConfig, SystemConfig
from services.logging import get_logger, log_processing_step
from services.monitoring import record_gradcheck_failure
from services.nets import Mlp, PowerNormalization, build_mlp, build_networks
from services.numerics import (
    complex_gaussian,
    frobenius_sq,
    inner_real,
    real_fd_gradient,
    relative_error,
    wirtinger_fd_oracle,
)
from services.rate import grad_sum_rate, refine, sum_rate, unrolled_pullback
from services.scenario import ScenarioSampler
from services.training import backward_pipeline, forward_pipeline, kd_loss

logger = get_logger(__name__)

RATE_TOLERANCE = 1e-6
PIPELINE_TOLERANCE = 1e-5
DENSE_TOLERANCE = 1e-8
KD_GRID = [(alpha, q) for alpha in (0.0, 0.5, 1.0) for q in (0, 1, 3)]


@dataclass
class SuiteReport:
    """Outcome of one oracle suite"""
    name: str
    tolerance: float
    max_relative_error: float = 0.0
    cases: int = 0
    issues: List[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.issues and self.max_relative_error <= self.tolerance

    def check(self, label: str, estimate, reference, tolerance: Optional[float] = None) -> None:
        error = relative_error(estimate, reference)
        self.cases += 1
        self.max_relative_error = max(self.max_relative_error, error)
        if error > (self.tolerance if tolerance is None else tolerance):
            self.issues.append(f"{label}: relative error {error:.3e}")

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, max relative error {self.max_relative_error:.3e}"


def _timed(name: str, tolerance: float, body: Callable[[SuiteReport], None]) -> SuiteReport:
    report = SuiteReport(name=name, tolerance=tolerance)
    start_time = time.time()
    body(report)
    report.seconds = time.time() - start_time
    if not report.passed:
        record_gradcheck_failure(name)
    log_processing_step(logger, "gradcheck_suite", report.seconds, suite=name, passed=report.passed,
                        cases=report.cases, max_relative_error=report.max_relative_error)
    return report


def check_rate_gradient(rng: np.random.Generator, instances: int = 20) -> SuiteReport:
    """Analytical sum-rate gradient against the Wirtinger finite-difference oracle"""
    def body(report: SuiteReport) -> None:
        for kind in ("miso", "mimo"):
            for i in range(instances):
                N = int(rng.integers(2, 9))
                K = int(rng.integers(1, 4))
                M = 1 if kind == "miso" else int(rng.integers(1, 3))
                H = complex_gaussian(rng, (K, M, N))
                W = 0.5 * complex_gaussian(rng, (N, K * M))
                oracle = wirtinger_fd_oracle(lambda w: float(sum_rate(H, w)), W)
                report.check(f"{kind} #{i} (N={N}, K={K}, M={M})", grad_sum_rate(H, W).grad, oracle.grad)
    return _timed("rate_gradient", RATE_TOLERANCE, body)


def _kd_objective(H, teacher, alpha: float, eta_ga: float, q: int) -> Callable:
    def objective(W0):
        W = refine(W0, H, eta_ga, q).final
        return float(kd_loss(alpha, sum_rate(H, W), frobenius_sq(teacher - W)))
    return objective


def check_unrolled_pullback(rng: np.random.Generator, N: int = 4, K: int = 2, eta_ga: float = 1e-2) -> SuiteReport:
    """Reverse accumulation against dense Jacobian blocks and finite differences of the KD loss"""
    def body(report: SuiteReport) -> None:
        H = complex_gaussian(rng, (K, 1, N))
        teacher = 0.5 * complex_gaussian(rng, (N, K))
        W0 = 0.5 * complex_gaussian(rng, (N, K))
        for alpha, q in KD_GRID:
            trace = refine(W0, H, eta_ga, q)
            W = trace.final
            grad_WQ = -alpha * grad_sum_rate(H, W).grad + (1.0 - alpha) * 2.0 * (W - teacher)
            reverse = unrolled_pullback(H, trace, grad_WQ).grad
            oracle = wirtinger_fd_oracle(_kd_objective(H, teacher, alpha, eta_ga, q), W0)
            report.check(f"alpha={alpha}, Q={q} vs finite differences", reverse, oracle.grad, PIPELINE_TOLERANCE)
            if q > 0:
                dense = unrolled_pullback(H, trace, grad_WQ, method="dense").grad
                report.check(f"alpha={alpha}, Q={q} reverse vs dense", reverse, dense, DENSE_TOLERANCE)
    return _timed("unrolled_pullback", PIPELINE_TOLERANCE, body)


def _parameter_fd(net: Mlp, key: str, loss: Callable[[], float], entries: np.ndarray) -> np.ndarray:
    """Finite differences of loss() with respect to selected entries of one parameter"""
    param = dict(net.named_parameters())[key]
    flat = param.reshape(-1)
    original = flat[entries].copy()

    def objective(x):
        flat[entries] = x
        return loss()

    try:
        return real_fd_gradient(objective, original)
    finally:
        flat[entries] = original


def check_network_backward(rng: np.random.Generator) -> SuiteReport:
    """Mlp backward (batchnorm, dropout, tanh head) and the hybrid normalization layer"""
    def body(report: SuiteReport) -> None:
        descriptor = {"name": "gradcheck-net", "in": 6, "hidden": [8, 5], "out": 4, "head": "tanh", "slope": 0.01,
                      "batchnorm": True, "bn_momentum": 0.1, "bn_eps": 1e-5, "dropout": 0.2}
        net = build_mlp(descriptor, rng)
        x = rng.standard_normal((7, 6))
        c = rng.standard_normal((7, 4))
        net.forward(x, training=True, rng=rng)

        def loss() -> float:
            return float(np.sum(c * net.forward(x, training=True, rng=rng, reuse_masks=True)))

        loss()
        net.zero_grad()
        grad_x = net.backward(c)
        report.check("input gradient", grad_x, real_fd_gradient(
            lambda v: float(np.sum(c * net.forward(v, training=True, rng=rng, reuse_masks=True))), x))
        loss()
        net.backward(c)
        grads = net.named_grads()
        for key, value in net.named_parameters():
            entries = rng.choice(value.size, size=min(5, value.size), replace=False)
            report.check(f"parameter {key}", grads[key].reshape(-1)[entries], _parameter_fd(net, key, loss, entries))

        # Digital, shared analog matrix, per-sample analog matrices
        for analog_shape in (None, (6, 3), (2, 6, 3)):
            W_tilde = complex_gaussian(rng, (2, 3, 2))
            analog = None
            if analog_shape is not None:
                analog = np.exp(1j * rng.uniform(0, 2 * np.pi, analog_shape)) / np.sqrt(6)
            G = complex_gaussian(rng, W_tilde.shape)
            layer = PowerNormalization(2.0)
            layer.forward(W_tilde, analog)
            analytic = layer.backward(G)
            oracle = wirtinger_fd_oracle(lambda w: inner_real(G, PowerNormalization(2.0).forward(w, analog)), W_tilde)
            label = "digital" if analog is None else f"analog {analog_shape}"
            report.check(f"power normalization ({label})", analytic, oracle.grad)
    return _timed("network_backward", RATE_TOLERANCE, body)


def _tiny_scenario() -> ScenarioConfig:
    return ScenarioConfig(system=SystemConfig(N=4, K=2, M=1), geometry=GeometryScenario(kind="spatial-division"))


def check_end_to_end(rng: np.random.Generator, batch_size: int = 3, eta_ga: float = 1e-2) -> SuiteReport:
    """backward_pipeline against finite differences of the batch KD loss on sampled network weights"""
    def body(report: SuiteReport) -> None:
        scenario = _tiny_scenario()
        nets = NetConfig(d_latent=4, encoder_hidden=[8], beamdec_hidden=[16], chandec_hidden=[8])
        feedback = FeedbackChannelModel(sigma2_z=0.1)
        seed = int(rng.integers(0, 2 ** 31))
        encoder, beamdec, _ = build_networks(scenario, nets, seed)
        batch = ScenarioSampler(scenario).sample(batch_size, rng, sigma2=1.0)
        teacher = 0.5 * complex_gaussian(rng, (batch_size, 4, 2))
        for alpha, q in KD_GRID:
            state = forward_pipeline(encoder, beamdec, batch, teacher, 1.0, alpha, q, eta_ga, feedback, rng)
            grads = backward_pipeline(state, encoder, beamdec)

            def loss() -> float:
                return forward_pipeline(encoder, beamdec, batch, teacher, 1.0, alpha, q, eta_ga, feedback, rng,
                                        delta_z=state.delta_z, reuse_masks=True).loss

            for net, analytic in ((beamdec, grads.beamdec), (encoder, grads.encoder)):
                key = "0.weight"
                entries = rng.choice(analytic[key].size, size=4, replace=False)
                numeric = _parameter_fd(net, key, loss, entries)
                report.check(f"alpha={alpha}, Q={q}, {net.descriptor['name']}.{key}",
                             analytic[key].reshape(-1)[entries], numeric)
    return _timed("end_to_end", PIPELINE_TOLERANCE, body)


SUITES: Dict[str, Callable[[np.random.Generator], SuiteReport]] = {
    "rate_gradient": check_rate_gradient,
    "unrolled_pullback": check_unrolled_pullback,
    "network_backward": check_network_backward,
    "end_to_end": check_end_to_end,
}


def run_gradcheck(seed: int = 0, suites: Optional[List[str]] = None) -> List[SuiteReport]:
    """Run the selected suites (all by default), each on its own derived stream"""
    names = list(SUITES) if suites is None else suites
    streams = np.random.SeedSequence(seed).spawn(len(SUITES))
    seeds = dict(zip(SUITES, streams))
    return [SUITES[name](np.random.default_rng(seeds[name])) for name in names]
