#!/usr/bin/env python3
"""
Tests for the subnetworks, their manual backward passes, the normalization
layer and the optimizers
"""

import math

import numpy as np
import pytest

from models.experiment import HybridConfig, NetConfig, ScenarioConfig, SystemConfig
from services.errors import DegenerateOutputError, InvalidArgumentError, StateError
from services.gradcheck import check_network_backward
from services.nets import (
    SGD,
    Adam,
    PowerNormalization,
    build_mlp,
    build_networks,
    decode_beamformer,
    decode_channel,
    encode,
    make_optimizer,
)
from services.numerics import complex_gaussian, frobenius_sq

SMALL_NETS = NetConfig(d_latent=4, encoder_hidden=[8], beamdec_hidden=[16], chandec_hidden=[8])


def _descriptor(**overrides):
    descriptor = {"name": "toy", "in": 3, "hidden": [5], "out": 2, "head": "identity", "slope": 0.01,
                  "batchnorm": False, "bn_momentum": 0.1, "bn_eps": 1e-5, "dropout": 0.0}
    descriptor.update(overrides)
    return descriptor


def test_network_shapes_follow_the_scenario():
    scenario = ScenarioConfig(system=SystemConfig(N=6, K=2, M=2))
    encoder, beamdec, chandec = build_networks(scenario, SMALL_NETS, seed=0)
    assert (encoder.in_dim, encoder.out_dim) == (24, 4)
    assert (beamdec.in_dim, beamdec.out_dim) == (8, 48)
    assert (chandec.in_dim, chandec.out_dim) == (4, 24)


def test_hybrid_networks_use_the_rf_chain_width():
    scenario = ScenarioConfig(system=SystemConfig(N=16, K=2), hybrid=HybridConfig(mode="far-field", n_rf=4))
    encoder, beamdec, _ = build_networks(scenario, SMALL_NETS, seed=0)
    assert encoder.in_dim == 2 * 4
    assert beamdec.out_dim == 2 * 4 * 2


def test_build_networks_is_seeded():
    scenario = ScenarioConfig(system=SystemConfig(N=4, K=2))
    first = build_networks(scenario, SMALL_NETS, seed=5)
    second = build_networks(scenario, SMALL_NETS, seed=5)
    for a, b in zip(first, second):
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(x, y)


def test_encoder_output_is_bounded(rng):
    scenario = ScenarioConfig(system=SystemConfig(N=4, K=3))
    encoder, _, _ = build_networks(scenario, SMALL_NETS, seed=1)
    z = encode(encoder, 100 * complex_gaussian(rng, (5, 3, 1, 4)))
    assert z.shape == (15, 4)
    assert np.all(np.abs(z) <= 1.0)


def test_encoder_rejects_wrong_channel_size(rng):
    scenario = ScenarioConfig(system=SystemConfig(N=4, K=3))
    encoder, _, _ = build_networks(scenario, SMALL_NETS, seed=1)
    with pytest.raises(InvalidArgumentError):
        encode(encoder, complex_gaussian(rng, (5, 3, 1, 5)))


def test_decoders(rng):
    scenario = ScenarioConfig(system=SystemConfig(N=4, K=2, P=2.0))
    _, beamdec, chandec = build_networks(scenario, SMALL_NETS, seed=2)
    W = decode_beamformer(beamdec, rng.standard_normal((3, 8)), 2.0, (4, 2))
    assert W.shape == (3, 4, 2)
    np.testing.assert_allclose(frobenius_sq(W), 2.0, rtol=1e-12)
    H_hat = decode_channel(chandec, rng.standard_normal((6, 4)), 1, 4)
    assert H_hat.shape == (6, 1, 4)
    with pytest.raises(InvalidArgumentError):
        decode_beamformer(beamdec, rng.standard_normal((3, 8)), 1.0, (4, 3))


def test_backward_before_forward():
    net = build_mlp(_descriptor(), np.random.default_rng(0))
    with pytest.raises(StateError):
        net.backward(np.ones((1, 2)))


def test_input_width_is_checked():
    net = build_mlp(_descriptor(), np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        net.forward(np.ones((2, 4)))


def test_linear_backward_by_hand():
    net = build_mlp(_descriptor(hidden=[]), np.random.default_rng(0))
    x = np.array([[1.0, 2.0, 3.0]])
    net.forward(x)
    grad_x = net.backward(np.array([[1.0, -1.0]]))
    weight = net.layers[0].params["weight"]
    np.testing.assert_allclose(grad_x, [weight[0] - weight[1]])
    np.testing.assert_allclose(net.named_grads()["0.weight"], [[1, 2, 3], [-1, -2, -3]])


def test_gradient_oracle_suite_passes():
    report = check_network_backward(np.random.default_rng(3))
    assert report.passed, report.issues


def test_dropout_is_identity_outside_training(rng):
    net = build_mlp(_descriptor(dropout=0.5), np.random.default_rng(0))
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(net.forward(x), net.forward(x))
    trained = net.forward(x, training=True, rng=rng)
    np.testing.assert_array_equal(net.forward(x, training=True, rng=rng, reuse_masks=True), trained)


def test_dropout_preserves_the_expected_output(rng):
    # slope 1 makes every activation the identity, so the net is linear
    net = build_mlp(_descriptor(hidden=[6], dropout=0.2, slope=1.0), np.random.default_rng(1))
    x = rng.standard_normal((1, 3))
    expected = net.forward(x)[0]
    samples = net.forward(np.repeat(x, 10_000, axis=0), training=True, rng=rng)
    stderr = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    assert np.all(np.abs(samples.mean(axis=0) - expected) <= 3.0 * stderr + 1e-12)


def test_batchnorm_running_stats(rng):
    net = build_mlp(_descriptor(batchnorm=True), np.random.default_rng(0))
    x = rng.standard_normal((16, 3))
    net.forward(x, training=True, rng=rng)
    stats = {k: v.copy() for k, v in net.named_buffers()}
    assert not np.allclose(stats["1.running_mean"], 0.0)
    net.forward(x, training=True, rng=rng, reuse_masks=True)
    net.forward(x)
    for key, value in net.named_buffers():
        np.testing.assert_array_equal(value, stats[key])


def test_state_dict_roundtrip(rng):
    net = build_mlp(_descriptor(batchnorm=True), np.random.default_rng(0))
    net.forward(rng.standard_normal((8, 3)), training=True, rng=rng)
    clone = net.copy()
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(clone.forward(x), net.forward(x))
    assert clone.parameter_count() == net.parameter_count() == 3 * 5 + 5 + 5 + 5 + 5 * 2 + 2
    bad = net.state_dict()
    bad["0.weight"] = np.zeros((2, 2))
    with pytest.raises(InvalidArgumentError):
        clone.load_state_dict(bad)


def test_power_normalization(rng):
    layer = PowerNormalization(3.0)
    W = layer.forward(complex_gaussian(rng, (5, 4, 2)))
    np.testing.assert_allclose(frobenius_sq(W), 3.0, rtol=1e-12)
    analog = np.exp(1j * rng.uniform(0, 2 * math.pi, (8, 4))) / math.sqrt(8)
    W_D = layer.forward(complex_gaussian(rng, (5, 4, 2)), analog)
    np.testing.assert_allclose(frobenius_sq(analog @ W_D), 3.0, rtol=1e-12)
    with pytest.raises(DegenerateOutputError):
        layer.forward(np.zeros((4, 2), dtype=np.complex128))
    with pytest.raises(InvalidArgumentError):
        PowerNormalization(0.0)


def test_power_normalization_backward_needs_forward():
    with pytest.raises(StateError):
        PowerNormalization(1.0).backward(np.ones((2, 2), dtype=np.complex128))


def _trained_toy_net(rng, optimizer_kind, lr):
    net = build_mlp(_descriptor(), np.random.default_rng(0))
    before = {k: v.copy() for k, v in net.named_parameters()}
    net.forward(rng.standard_normal((4, 3)))
    net.backward(np.ones((4, 2)))
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    make_optimizer(optimizer_kind, net, lr).step()
    return net, before, grads


def test_sgd_step(rng):
    net, before, grads = _trained_toy_net(rng, "sgd", 0.1)
    for key, value in net.named_parameters():
        np.testing.assert_allclose(value, before[key] - 0.1 * grads[key])


def test_zero_learning_rate_leaves_parameters(rng):
    for kind in ("sgd", "adam"):
        net, before, _ = _trained_toy_net(rng, kind, 0.0)
        for key, value in net.named_parameters():
            np.testing.assert_array_equal(value, before[key])


def test_adam_first_step_is_sign_like(rng):
    net, before, grads = _trained_toy_net(rng, "adam", 0.01)
    for key, value in net.named_parameters():
        g = grads[key]
        expected = before[key] - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(value, expected, atol=1e-9)


def test_optimizer_validation():
    net = build_mlp(_descriptor(), np.random.default_rng(0))
    assert isinstance(make_optimizer("sgd", net, 0.1), SGD)
    assert isinstance(make_optimizer("adam", net, 0.1), Adam)
    with pytest.raises(InvalidArgumentError):
        make_optimizer("rmsprop", net, 0.1)
    with pytest.raises(InvalidArgumentError):
        SGD(net, -1.0)
