"""
Beamsim Training Service
Knowledge-distillation loss, the end-to-end pipeline with its manual backward
pass, alternating encoder/decoder training, channel-decoder training and
inference
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from tqdm import tqdm

from config.settings import get_settings
from models.experiment import ExperimentSpec, FeedbackChannelModel, TrainConfig
from models.results import CHANDEC_HEADER, METRICS_HEADER, ChannelDecoderLoss, EpochMetrics, ResultTable
from services.errors import NumericFailureError, StateError
from services.feedback import apply_feedback_error, gaussian_error
from services.hybrid import hybrid_power_normalize
from services.logging import get_logger, log_processing_step
from services.monitoring import record_epoch, record_sgd_step
from services.nets import (
    Mlp,
    Optimizer,
    PowerNormalization,
    build_networks,
    decode_beamformer,
    decode_channel,
    encode,
    make_optimizer,
)
from services.numerics import ComplexArray, RealArray, derealify, frobenius_sq, realify
from services.rate import RefinementTrace, mmse_beamformer, rate_and_grad, refine, sum_rate, unrolled_pullback
from services.records import load_checkpoint, save_checkpoint
from services.scenario import ScenarioBatch, ScenarioSampler, redraw_errors

logger = get_logger(__name__)

KdMode = Literal["schedule", "unsupervised", "supervised"]


def kd_loss(alpha: float, rate_value, mse_value):
    """alpha * (-R_sum) + (1 - alpha) * ||W_teacher - W_Q||^2"""
    return alpha * (-np.asarray(rate_value)) + (1.0 - alpha) * np.asarray(mse_value)


def alpha_schedule(epoch: int, step: float = 0.01, every: int = 1, mode: KdMode = "schedule") -> float:
    """KD weight: ramps from 0 by step every `every` epochs, clamped to 1"""
    if mode == "unsupervised":
        return 1.0
    if mode == "supervised":
        return 0.0
    return float(min(1.0, (epoch // every) * step))


def teacher_beamformer(batch: ScenarioBatch, P: float) -> ComplexArray:
    """MMSE beamformer on the true working channels, hybrid-normalized behind an analog matrix"""
    W = mmse_beamformer(batch.H, P)
    if batch.analog is not None:
        W = hybrid_power_normalize(W, batch.analog, P)
    return W


@dataclass
class PipelineState:
    """Intermediates of one forward pass, consumed by backward_pipeline"""
    batch: ScenarioBatch
    teacher: ComplexArray
    z: RealArray
    delta_z: RealArray
    W0: ComplexArray
    trace: RefinementTrace
    norm_layer: PowerNormalization
    rates: RealArray
    mse: RealArray
    alpha: float
    loss: float

    @property
    def W_Q(self) -> ComplexArray:
        return self.trace.final


@dataclass
class PipelineGradients:
    encoder: Dict[str, RealArray]
    beamdec: Dict[str, RealArray]
    grad_W0: ComplexArray
    grad_z: RealArray


def forward_pipeline(
    encoder: Mlp,
    beamdec: Mlp,
    batch: ScenarioBatch,
    teacher: ComplexArray,
    P: float,
    alpha: float,
    q_t: int,
    eta_ga: float,
    feedback: FeedbackChannelModel,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    delta_z: Optional[RealArray] = None,
    reuse_masks: bool = False,
) -> PipelineState:
    """H_tilde -> z -> z + dz -> W_0 -> Q_t ascent steps on the true channels -> KD loss

    The training path always injects Gaussian latent errors; quantizer modes
    apply at inference only.
    """
    B, K, M, n_eff = batch.H_tilde.shape
    z = encode(encoder, batch.H_tilde, training, rng, reuse_masks)
    if delta_z is None:
        delta_z = gaussian_error(z.shape, feedback.sigma2_z, feedback.gaussian, rng)
    z_hat = (z + delta_z).reshape(B, K * encoder.out_dim)

    y = beamdec.forward(z_hat, training, rng, reuse_masks)
    norm_layer = PowerNormalization(P)
    W0 = norm_layer.forward(derealify(y, n_eff, K * M), batch.analog)

    trace = refine(W0, batch.H, eta_ga, q_t)
    rates = np.asarray(sum_rate(batch.H, trace.final))
    mse = frobenius_sq(teacher - trace.final)
    loss = float(np.mean(kd_loss(alpha, rates, mse)))
    return PipelineState(batch=batch, teacher=teacher, z=z, delta_z=delta_z, W0=W0, trace=trace,
                         norm_layer=norm_layer, rates=rates, mse=mse, alpha=alpha, loss=loss)


def backward_pipeline(state: PipelineState, encoder: Mlp, beamdec: Mlp) -> PipelineGradients:
    """Gradients of the batch-mean KD loss for both networks

    The KD gradient at W_Q is pulled back through the unrolled refinement,
    the normalization layer, the beamformer decoder and the latent.
    """
    H = state.batch.H
    B = H.shape[0]
    _, grad_rate = rate_and_grad(H, state.W_Q)
    grad_WQ = (-state.alpha * grad_rate + (1.0 - state.alpha) * 2.0 * (state.W_Q - state.teacher)) / B
    grad_W0 = unrolled_pullback(H, state.trace, grad_WQ).grad
    grad_W_tilde = state.norm_layer.backward(grad_W0)

    beamdec.zero_grad()
    grad_latent = beamdec.backward(realify(grad_W_tilde))
    grad_z = grad_latent.reshape(state.z.shape)
    encoder.zero_grad()
    encoder.backward(grad_z)
    return PipelineGradients(encoder=encoder.named_grads(), beamdec=beamdec.named_grads(),
                             grad_W0=grad_W0, grad_z=grad_z)


@dataclass
class InferenceResult:
    """Beamformers produced by the inference stage"""
    W0: ComplexArray
    trace: RefinementTrace
    H_hat: Optional[ComplexArray]
    z_hat: RealArray

    @property
    def W(self) -> ComplexArray:
        return self.trace.final


class BeamformingSystem:
    """Encoder, beamformer decoder and channel decoder of one scenario"""

    def __init__(self, spec: ExperimentSpec, encoder: Optional[Mlp] = None, beamdec: Optional[Mlp] = None,
                 chandec: Optional[Mlp] = None):
        self.spec = spec
        self.scenario = spec.scenario
        if encoder is None or beamdec is None or chandec is None:
            encoder, beamdec, chandec = build_networks(self.scenario, spec.nets, spec.seed)
        self.encoder = encoder
        self.beamdec = beamdec
        self.chandec = chandec
        self.beamformer_trained = False
        self.channel_decoder_trained = False
        self.epoch = 0
        self.alpha = 0.0

    def networks(self) -> Dict[str, Mlp]:
        return {"encoder": self.encoder, "beamformer_decoder": self.beamdec, "channel_decoder": self.chandec}

    def descriptors(self) -> Dict[str, dict]:
        return {name: net.descriptor for name, net in self.networks().items()}

    def replica(self) -> "BeamformingSystem":
        """Same weights and stage flags on fresh networks, so forward caches are private"""
        clone = BeamformingSystem(self.spec, self.encoder.copy(), self.beamdec.copy(), self.chandec.copy())
        clone.beamformer_trained = self.beamformer_trained
        clone.channel_decoder_trained = self.channel_decoder_trained
        clone.epoch = self.epoch
        clone.alpha = self.alpha
        return clone

    def infer(
        self,
        batch: ScenarioBatch,
        q_i: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        refine_on: Literal["reconstructed", "estimated"] = "reconstructed",
        feedback: Optional[FeedbackChannelModel] = None,
    ) -> InferenceResult:
        """H_tilde -> z_hat -> (W_0, H_hat) -> W_{Q_i} refined on the reconstructed channels"""
        if not self.beamformer_trained:
            raise StateError("inference before the encoder and beamformer decoder are trained")
        q_i = self.spec.train.q_i if q_i is None else q_i
        feedback = self.spec.feedback if feedback is None else feedback
        rng = np.random.default_rng(self.spec.seed) if rng is None else rng
        system = self.scenario.system
        B, K, M, n_eff = batch.H_tilde.shape

        z = encode(self.encoder, batch.H_tilde)
        z_hat = apply_feedback_error(z, feedback, rng)
        W0 = decode_beamformer(self.beamdec, z_hat.reshape(B, K * self.encoder.out_dim), system.P,
                               (n_eff, K * M), batch.analog)
        H_hat = None
        if q_i > 0:
            if refine_on == "estimated":
                H_hat = batch.H_tilde
            else:
                if not self.channel_decoder_trained:
                    raise StateError("refinement on reconstructed channels needs a trained channel decoder")
                H_hat = decode_channel(self.chandec, z_hat, M, n_eff).reshape(B, K, M, n_eff)
        trace = refine(W0, H_hat if H_hat is not None else batch.H_tilde, self.spec.train.eta_ga, q_i,
                       project=self.spec.train.project, P=system.P)
        return InferenceResult(W0=W0, trace=trace, H_hat=H_hat, z_hat=z_hat)

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "seed": self.spec.seed,
            "epoch": self.epoch,
            "alpha": self.alpha,
            "beamformer_trained": self.beamformer_trained,
            "channel_decoder_trained": self.channel_decoder_trained,
            "spec": self.spec.model_dump(mode="json"),
        }
        return save_checkpoint(path, self.networks(), meta)

    @classmethod
    def load(cls, path: Union[str, Path], spec: ExperimentSpec) -> "BeamformingSystem":
        """Rebuild from a checkpoint; the architecture must match spec"""
        system = cls(spec)
        states, header = load_checkpoint(path, system.descriptors())
        for name, net in system.networks().items():
            net.load_state_dict(states[name])
        meta = header.get("meta", {})
        system.epoch = meta.get("epoch", 0)
        system.alpha = meta.get("alpha", 0.0)
        system.beamformer_trained = meta.get("beamformer_trained", False)
        system.channel_decoder_trained = meta.get("channel_decoder_trained", False)
        return system


class Trainer:
    """Alternating encoder/decoder training of one BeamformingSystem"""

    def __init__(self, system: BeamformingSystem, sampler: Optional[ScenarioSampler] = None):
        self.system = system
        self.spec = system.spec
        self.config: TrainConfig = system.spec.train
        self.sampler = sampler or ScenarioSampler(system.scenario)
        streams = np.random.SeedSequence(self.spec.seed).spawn(3)
        self.rng = np.random.default_rng(streams[0])
        self.enc_opt: Optimizer = make_optimizer(self.config.optimizer, system.encoder, self.config.lr)
        self.dec_opt: Optimizer = make_optimizer(self.config.optimizer, system.beamdec, self.config.lr)
        self.monitor_batch = self.sampler.sample(self.config.monitor_size, np.random.default_rng(streams[1]))
        self.monitor_teacher = teacher_beamformer(self.monitor_batch, system.scenario.system.P)
        self._monitor_seed = streams[2]
        self.metrics = ResultTable(header=METRICS_HEADER)

    def _step(self, batch: ScenarioBatch, teacher: ComplexArray, alpha: float, network: str,
              epoch: int, step: int) -> float:
        system, config = self.system, self.config
        state = forward_pipeline(system.encoder, system.beamdec, batch, teacher, system.scenario.system.P, alpha,
                                 config.q_t, config.eta_ga, self.spec.feedback, self.rng, training=True)
        if not np.isfinite(state.loss):
            raise NumericFailureError(
                f"non-finite training loss at epoch {epoch}, {network} step {step}: loss={state.loss}, "
                f"max |W_Q|={np.max(np.abs(state.W_Q)):.3e}")
        backward_pipeline(state, system.encoder, system.beamdec)
        if network == "encoder":
            self.enc_opt.step()
        else:
            self.dec_opt.step()
        record_sgd_step(network)
        return state.loss

    def _step_batch(self, batch: ScenarioBatch, teacher: ComplexArray) -> tuple[ScenarioBatch, ComplexArray]:
        if self.config.fresh_channels_per_step:
            fresh = self.sampler.sample(self.config.batch_size, self.rng)
            return fresh, teacher_beamformer(fresh, self.system.scenario.system.P)
        return redraw_errors(batch, self.system.scenario.system.sigma2_h, self.rng), teacher

    def train_epoch(self, epoch: int) -> EpochMetrics:
        """N_en encoder steps with the decoder fixed, then N_de decoder steps with the encoder fixed"""
        config = self.config
        alpha = alpha_schedule(epoch, config.alpha_step, config.alpha_every, config.kd_mode)
        batch = self.sampler.sample(config.batch_size, self.rng)
        teacher = teacher_beamformer(batch, self.system.scenario.system.P)
        for step in range(config.n_en):
            step_batch, step_teacher = self._step_batch(batch, teacher)
            self._step(step_batch, step_teacher, alpha, "encoder", epoch, step)
        for step in range(config.n_de):
            step_batch, step_teacher = self._step_batch(batch, teacher)
            self._step(step_batch, step_teacher, alpha, "beamformer_decoder", epoch, step)
        self.system.epoch = epoch + 1
        self.system.alpha = alpha
        return self.monitor(epoch, alpha)

    def monitor(self, epoch: int, alpha: float) -> EpochMetrics:
        """Deterministic evaluation pass (dropout off, fixed latent errors)"""
        system = self.system
        rng = np.random.default_rng(self._monitor_seed)
        state = forward_pipeline(system.encoder, system.beamdec, self.monitor_batch, self.monitor_teacher,
                                 system.scenario.system.P, alpha, self.config.q_t, self.config.eta_ga,
                                 self.spec.feedback, rng, training=False)
        metrics = EpochMetrics(
            epoch=epoch,
            alpha=alpha,
            loss_unsupervised=float(-np.mean(state.rates)),
            loss_supervised=float(np.mean(state.mse)),
            mean_sum_rate=float(np.mean(state.rates)),
            mean_power=float(np.mean(_digital_power(state.W_Q, self.monitor_batch.analog))),
        )
        self.metrics.add(metrics)
        return metrics


def _digital_power(W: ComplexArray, analog: Optional[ComplexArray]) -> RealArray:
    """||W||_F^2, or ||W^a W^D||_F^2 behind an analog matrix"""
    return frobenius_sq(W if analog is None else analog @ W)


def train_channel_decoder(
    chandec: Mlp,
    encoder: Mlp,
    data: Union[ScenarioSampler, ScenarioBatch],
    config: TrainConfig,
    feedback: FeedbackChannelModel,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    sigma2_h: Optional[float] = None,
    optimizer: Optional[Optimizer] = None,
) -> List[float]:
    """Supervised reconstruction of H from the frozen encoder's noisy latents

    Loss per sample is sum_k ||H_k - J(G(H_k + dH_k) + dz_k)||_F^2; returns
    the mean loss of every epoch.
    """
    epochs = config.chandec_epochs if epochs is None else epochs
    optimizer = optimizer or make_optimizer(config.optimizer, chandec, config.chandec_lr)
    curve = []
    for epoch in range(epochs):
        if isinstance(data, ScenarioBatch):
            batch = data
        else:
            batch = data.sample(config.batch_size, rng)
            sigma2_h = data.system.sigma2_h if sigma2_h is None else sigma2_h
        losses = []
        for _ in range(config.chandec_steps):
            step_batch = batch if not sigma2_h else redraw_errors(batch, sigma2_h, rng)
            B, K, M, n_eff = step_batch.H.shape
            z = encode(encoder, step_batch.H_tilde)
            z_hat = z + gaussian_error(z.shape, feedback.sigma2_z, feedback.gaussian, rng)
            y = chandec.forward(z_hat, training=True, rng=rng)
            residual = derealify(y, M, n_eff) - step_batch.H.reshape(B * K, M, n_eff)
            loss = float(np.sum(np.abs(residual) ** 2) / B)
            if not np.isfinite(loss):
                raise NumericFailureError(f"non-finite channel decoder loss at epoch {epoch}")
            chandec.zero_grad()
            chandec.backward(realify(2.0 * residual) / B)
            optimizer.step()
            record_sgd_step("channel_decoder")
            losses.append(loss)
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return curve


@dataclass
class TrainingReport:
    metrics: ResultTable
    channel_decoder_curve: List[float] = field(default_factory=list)
    seconds: float = 0.0

    def channel_decoder_table(self) -> ResultTable:
        table = ResultTable(header=CHANDEC_HEADER)
        for epoch, loss in enumerate(self.channel_decoder_curve):
            table.add(ChannelDecoderLoss(epoch=epoch, loss=loss))
        return table


def run_algorithm1(
    spec: ExperimentSpec,
    out_dir: Optional[Union[str, Path]] = None,
    system: Optional[BeamformingSystem] = None,
) -> tuple[BeamformingSystem, TrainingReport]:
    """Stage 1 trains encoder and beamformer decoder with KD; stage 2 trains the channel decoder"""
    start_time = time.time()
    system = system or BeamformingSystem(spec)
    trainer = Trainer(system)
    out = Path(out_dir) if out_dir is not None else None
    config = spec.train
    show_progress = get_settings().progress

    for epoch in tqdm(range(config.epochs), desc="kd-edn", disable=not show_progress):
        epoch_start = time.time()
        metrics = trainer.train_epoch(epoch)
        duration = time.time() - epoch_start
        record_epoch("beamformer", duration, metrics.alpha)
        log_processing_step(logger, "epoch_complete", duration, epoch=epoch, alpha=metrics.alpha,
                            mean_sum_rate=round(metrics.mean_sum_rate, 6),
                            loss_supervised=round(metrics.loss_supervised, 6))
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            system.save(out / f"checkpoint_epoch{epoch + 1:05d}.bsck")
    system.beamformer_trained = True

    chandec_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(4)[3])
    stage_start = time.time()
    curve = train_channel_decoder(system.chandec, system.encoder, trainer.sampler, config, spec.feedback,
                                  chandec_rng)
    record_epoch("channel_decoder", time.time() - stage_start)
    system.channel_decoder_trained = True
    if curve:
        logger.info("channel_decoder_trained", epochs=len(curve), final_loss=round(curve[-1], 6))

    report = TrainingReport(metrics=trainer.metrics, channel_decoder_curve=curve, seconds=time.time() - start_time)
    if out is not None:
        trainer.metrics.write(out / "metrics.csv")
        report.channel_decoder_table().write(out / "chandec_loss.csv")
        system.save(out / "checkpoint.bsck")
    return system, report
