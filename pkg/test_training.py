#!/usr/bin/env python3
"""
Tests for KD training: the loss and schedule, end-to-end gradients,
alternating updates, channel-decoder training and inference
"""

import numpy as np
import pytest

from config.presets import build_preset, load_spec
from models.experiment import (
    EvalConfig,
    ExperimentSpec,
    FeedbackChannelModel,
    GeometryScenario,
    HybridConfig,
    NetConfig,
    SystemConfig,
    TrainConfig,
)
from models.results import CHANDEC_HEADER, METRICS_HEADER
from services.channel import ChannelSample
from services.errors import NumericFailureError, StateError
from services.gradcheck import check_end_to_end
from services.numerics import frobenius_sq
from services.rate import mmse_beamformer, refine
from services.scenario import ScenarioBatch, ScenarioSampler, error_free
from services.training import (
    BeamformingSystem,
    Trainer,
    alpha_schedule,
    backward_pipeline,
    forward_pipeline,
    kd_loss,
    run_algorithm1,
    teacher_beamformer,
    train_channel_decoder,
)

SMALL_NETS = NetConfig(d_latent=4, encoder_hidden=[16], beamdec_hidden=[32], chandec_hidden=[16])


def small_spec(**train_overrides) -> ExperimentSpec:
    train = dict(batch_size=8, epochs=2, n_en=1, n_de=2, q_t=2, q_i=3, eta_ga=1e-2, optimizer="adam", lr=1e-3,
                 chandec_epochs=2, chandec_steps=2, monitor_size=8)
    train.update(train_overrides)
    return ExperimentSpec(
        seed=3,
        system=SystemConfig(N=4, K=2),
        nets=SMALL_NETS,
        train=TrainConfig(**train),
        eval=EvalConfig(test_size=6, seeds=[0], snr_db=[10.0], chunk_size=4),
    )


def _parameters(net):
    return {k: v.copy() for k, v in net.named_parameters()}


def _assert_same(net, snapshot):
    for key, value in net.named_parameters():
        np.testing.assert_array_equal(value, snapshot[key])


def test_kd_loss_examples():
    assert kd_loss(1.0, 7.0, 3.0) == -7.0
    assert kd_loss(0.0, 7.0, 3.0) == 3.0
    assert kd_loss(0.5, 10.0, 4.0) == pytest.approx(-3.0)


def test_kd_loss_is_affine_in_alpha():
    values = [kd_loss(a, 5.5, 2.25) for a in (0.0, 0.3, 0.6)]
    assert values[2] - values[1] == pytest.approx(values[1] - values[0])


def test_alpha_schedule():
    assert alpha_schedule(0) == 0.0
    assert alpha_schedule(50) == pytest.approx(0.5)
    assert alpha_schedule(1000) == 1.0
    assert alpha_schedule(25, step=0.1, every=10) == pytest.approx(0.2)
    assert alpha_schedule(3, mode="unsupervised") == 1.0
    assert alpha_schedule(300, mode="supervised") == 0.0


def test_teacher_is_the_mmse_solution(rng):
    spec = small_spec()
    batch = ScenarioSampler(spec.scenario).sample(5, rng)
    teacher = teacher_beamformer(batch, spec.system.P)
    np.testing.assert_allclose(teacher, mmse_beamformer(batch.H, spec.system.P))
    np.testing.assert_allclose(frobenius_sq(teacher), spec.system.P)


def test_end_to_end_gradients_match_finite_differences():
    report = check_end_to_end(np.random.default_rng(11))
    assert report.passed, report.issues
    assert report.cases == 18


@pytest.fixture
def pipeline_batch():
    return ScenarioSampler(small_spec().scenario).sample(4, np.random.default_rng(0))


def _forward(system, batch, rng, q_t=2, eta_ga=1e-2, alpha=0.5, teacher=None, delta_z=None, reuse=False):
    teacher = teacher_beamformer(batch, 1.0) if teacher is None else teacher
    return forward_pipeline(system.encoder, system.beamdec, batch, teacher, 1.0, alpha, q_t, eta_ga,
                            system.spec.feedback, rng, delta_z=delta_z, reuse_masks=reuse)


def test_gradients_vanish_at_the_teacher(pipeline_batch, rng):
    system = BeamformingSystem(small_spec())
    first = _forward(system, pipeline_batch, rng, alpha=0.0)
    state = _forward(system, pipeline_batch, rng, alpha=0.0, teacher=first.W_Q, delta_z=first.delta_z, reuse=True)
    grads = backward_pipeline(state, system.encoder, system.beamdec)
    for value in list(grads.encoder.values()) + list(grads.beamdec.values()):
        np.testing.assert_allclose(value, 0.0, atol=1e-14)


def test_zero_step_refinement_matches_no_refinement(pipeline_batch, rng):
    system = BeamformingSystem(small_spec())
    frozen = _forward(system, pipeline_batch, rng, q_t=3, eta_ga=0.0)
    grads_frozen = backward_pipeline(frozen, system.encoder, system.beamdec)
    direct = _forward(system, pipeline_batch, rng, q_t=0, delta_z=frozen.delta_z, reuse=True)
    grads_direct = backward_pipeline(direct, system.encoder, system.beamdec)
    for key, value in grads_direct.beamdec.items():
        np.testing.assert_allclose(grads_frozen.beamdec[key], value, rtol=1e-12, atol=1e-15)
    for key, value in grads_direct.encoder.items():
        np.testing.assert_allclose(grads_frozen.encoder[key], value, rtol=1e-12, atol=1e-15)


def test_encoder_steps_leave_the_decoder_alone():
    spec = small_spec(n_en=2, n_de=0)
    system = BeamformingSystem(spec)
    decoder = _parameters(system.beamdec)
    encoder = _parameters(system.encoder)
    Trainer(system).train_epoch(0)
    _assert_same(system.beamdec, decoder)
    assert any(not np.array_equal(v, encoder[k]) for k, v in system.encoder.named_parameters())


def test_decoder_steps_leave_the_encoder_alone():
    spec = small_spec(n_en=0, n_de=2)
    system = BeamformingSystem(spec)
    encoder = _parameters(system.encoder)
    Trainer(system).train_epoch(0)
    _assert_same(system.encoder, encoder)


def test_epoch_without_steps_only_reports():
    spec = small_spec(n_en=0, n_de=0)
    system = BeamformingSystem(spec)
    encoder, decoder = _parameters(system.encoder), _parameters(system.beamdec)
    trainer = Trainer(system)
    metrics = trainer.train_epoch(0)
    _assert_same(system.encoder, encoder)
    _assert_same(system.beamdec, decoder)
    assert metrics.epoch == 0 and metrics.alpha == 0.0
    assert len(trainer.metrics.rows) == 1


def test_fresh_channels_per_step():
    spec = small_spec(fresh_channels_per_step=True, epochs=1)
    metrics = Trainer(BeamformingSystem(spec)).train_epoch(0)
    assert np.isfinite(metrics.loss_supervised)


def test_non_finite_loss_aborts(monkeypatch, rng):
    spec = small_spec(fresh_channels_per_step=True)
    trainer = Trainer(BeamformingSystem(spec))
    batch = trainer.sampler.sample(8, rng)
    s = batch.sample
    broken = ScenarioBatch(sample=ChannelSample(H_bar=s.H_bar, sigma2=s.sigma2, H=s.H,
                                                H_tilde=np.full_like(s.H, np.nan), delta_H=s.delta_H))
    monkeypatch.setattr(trainer.sampler, "sample", lambda size, rng: broken)
    with pytest.raises(NumericFailureError):
        trainer.train_epoch(0)


def test_training_is_deterministic(tmp_path):
    spec = small_spec()
    run_algorithm1(spec, tmp_path / "a")
    run_algorithm1(spec, tmp_path / "b")
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "b" / "metrics.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) == 1 + spec.train.epochs


def test_run_algorithm1_outputs(tmp_path):
    spec = small_spec(checkpoint_every=1)
    system, report = run_algorithm1(spec, tmp_path)
    assert system.beamformer_trained and system.channel_decoder_trained
    assert (tmp_path / "checkpoint.bsck").is_file()
    assert (tmp_path / "checkpoint_epoch00002.bsck").is_file()
    assert len(report.channel_decoder_curve) == spec.train.chandec_epochs
    assert all(loss >= 0 for loss in report.channel_decoder_curve)
    lines = (tmp_path / "chandec_loss.csv").read_text().splitlines()
    assert lines[0] == ",".join(CHANDEC_HEADER)
    assert len(lines) == 1 + spec.train.chandec_epochs
    assert [float(line.split(",")[1]) for line in lines[1:]] == pytest.approx(report.channel_decoder_curve, abs=1e-9)


def test_channel_decoder_learns_a_fixed_batch(rng):
    spec = ExperimentSpec(system=SystemConfig(N=2, K=1), nets=NetConfig(d_latent=4, encoder_hidden=[16],
                                                                         beamdec_hidden=[16], chandec_hidden=[32, 32]))
    system = BeamformingSystem(spec)
    batch = error_free(ScenarioSampler(spec.scenario).sample(8, rng, sigma2=1.0))
    config = TrainConfig(optimizer="adam", chandec_lr=1e-2, chandec_steps=50)
    curve = train_channel_decoder(system.chandec, system.encoder, batch, config,
                                  FeedbackChannelModel(sigma2_z=0.0), rng, epochs=6)
    assert len(curve) == 6
    assert all(loss >= 0 for loss in curve)
    assert curve[-1] < 0.5 * curve[0]


def test_inference_needs_training(rng):
    spec = small_spec()
    system = BeamformingSystem(spec)
    batch = ScenarioSampler(spec.scenario).sample(3, rng)
    with pytest.raises(StateError):
        system.infer(batch)
    system.beamformer_trained = True
    with pytest.raises(StateError):
        system.infer(batch, q_i=2)
    result = system.infer(batch, q_i=0, rng=rng)
    np.testing.assert_array_equal(result.W, result.W0)
    np.testing.assert_allclose(frobenius_sq(result.W0), spec.system.P, atol=1e-9)


def test_inference_on_estimated_channels_is_plain_refinement(rng):
    spec = small_spec()
    system = BeamformingSystem(spec)
    system.beamformer_trained = True
    batch = ScenarioSampler(spec.scenario).sample(3, rng)
    exact = FeedbackChannelModel(sigma2_z=0.0)
    result = system.infer(batch, q_i=4, rng=rng, refine_on="estimated", feedback=exact)
    expected = refine(result.W0, batch.H_tilde, spec.train.eta_ga, 4).final
    np.testing.assert_allclose(result.W, expected)


def test_checkpoint_roundtrip_preserves_inference(tmp_path, rng):
    spec = small_spec()
    system, _ = run_algorithm1(spec)
    system.save(tmp_path / "ck.bsck")
    loaded = BeamformingSystem.load(tmp_path / "ck.bsck", spec)
    assert loaded.channel_decoder_trained and loaded.epoch == spec.train.epochs
    batch = ScenarioSampler(spec.scenario).sample(3, rng)
    a = system.infer(batch, rng=np.random.default_rng(1))
    b = loaded.infer(batch, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a.W, b.W)


def test_far_field_hybrid_training(tmp_path, rng):
    spec = ExperimentSpec(
        system=SystemConfig(N=8, K=2),
        geometry=GeometryScenario(kind="single-cell"),
        hybrid=HybridConfig(mode="far-field", n_rf=3),
        nets=SMALL_NETS,
        train=TrainConfig(batch_size=8, epochs=1, n_en=1, n_de=1, q_t=1, q_i=2, chandec_epochs=1,
                          chandec_steps=1, monitor_size=8, optimizer="adam", lr=1e-3),
    )
    system, report = run_algorithm1(spec, tmp_path)
    assert np.isfinite(report.metrics.rows[0].mean_power)
    batch = ScenarioSampler(spec.scenario).sample(4, rng)
    result = system.infer(batch, q_i=0, rng=rng)
    assert result.W.shape == (4, 3, 2)
    np.testing.assert_allclose(frobenius_sq(batch.analog @ result.W0), 1.0, atol=1e-9)


def test_near_field_hybrid_training(rng):
    spec = ExperimentSpec(
        system=SystemConfig(N=4, K=2),
        hybrid=HybridConfig(mode="near-field", n_rf=2, S=2, n_sub=2, wavelength=0.1, r_c=0.4, sigma_r=0.1),
        nets=SMALL_NETS,
        train=TrainConfig(batch_size=8, epochs=1, n_en=1, n_de=1, q_t=1, q_i=2, chandec_epochs=1,
                          chandec_steps=1, monitor_size=8),
    )
    system, _ = run_algorithm1(spec)
    batch = ScenarioSampler(spec.scenario).sample(4, rng)
    assert batch.analog.shape == (4, 4, 2)
    result = system.infer(batch, rng=rng)
    np.testing.assert_allclose(frobenius_sq(batch.analog @ result.W0), 1.0, atol=1e-9)
    assert np.all(np.isfinite(result.W))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_desk_training_improves_the_sum_rate(seed):
    spec = build_preset("miso-sd", "desk").model_copy(update={"seed": seed})
    spec = spec.model_copy(update={"train": spec.train.model_copy(update={"epochs": 200})})
    trainer = Trainer(BeamformingSystem(spec))
    first = trainer.train_epoch(0)
    for epoch in range(1, spec.train.epochs):
        last = trainer.train_epoch(epoch)
    assert last.mean_sum_rate > first.mean_sum_rate



def _channel_decoder_tail_loss(preset: str, seed: int) -> float:
    spec = load_spec(preset, "desk", seed=seed, overrides={"train": {"epochs": 30, "chandec_epochs": 100}})
    _, report = run_algorithm1(spec)
    return float(np.mean(report.channel_decoder_curve[-10:]))


@pytest.mark.slow
def test_spatial_division_channels_reconstruct_better_than_single_cell():
    wins = [
        _channel_decoder_tail_loss("miso-sd", seed) < _channel_decoder_tail_loss("miso-sc", seed)
        for seed in (0, 1, 2)
    ]
    assert sum(wins) >= 2


def test_projected_inference_respects_the_budget(rng):
    spec = small_spec(project=True, eta_ga=0.5)
    system = BeamformingSystem(spec)
    system.beamformer_trained = True
    batch = ScenarioSampler(spec.scenario).sample(4, rng)
    result = system.infer(batch, q_i=5, rng=rng, refine_on="estimated")
    assert result.trace.projected
    assert np.all(frobenius_sq(result.W) <= spec.system.P + 1e-12)


def test_replica_shares_weights_but_not_networks(rng):
    spec = small_spec()
    system = BeamformingSystem(spec)
    system.beamformer_trained = system.channel_decoder_trained = True
    clone = system.replica()
    assert clone.channel_decoder_trained and clone.encoder is not system.encoder
    batch = ScenarioSampler(spec.scenario).sample(4, rng)
    expected = system.infer(batch, q_i=2, rng=np.random.default_rng(5)).W
    np.testing.assert_array_equal(clone.infer(batch, q_i=2, rng=np.random.default_rng(5)).W, expected)
    clone.beamdec.layers[0].params["weight"] += 1.0
    np.testing.assert_array_equal(system.infer(batch, q_i=2, rng=np.random.default_rng(5)).W, expected)
