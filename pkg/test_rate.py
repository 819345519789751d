#!/usr/bin/env python3
"""
Tests for sum rates, their gradients, the MMSE teacher and unrolled
refinement
"""

import math

import numpy as np
import pytest
import scipy.linalg
from scipy.stats import unitary_group

from services.errors import DegenerateChannelError, InvalidArgumentError, UnsupportedError
from services.numerics import complex_gaussian, frobenius_sq, relative_error, wirtinger_fd_oracle
from services.rate import (
    Beamformer,
    grad_sum_rate,
    mmse_beamformer,
    per_user_rates,
    project_power,
    rate_and_grad,
    refine,
    sum_rate,
    sum_rate_hvp,
    sum_rate_mimo,
    sum_rate_miso,
    unrolled_jacobian_blocks,
    unrolled_pullback,
)


def _instance(rng, N=4, K=2, M=1, batch=()):
    H = complex_gaussian(rng, batch + (K, M, N))
    W = 0.5 * complex_gaussian(rng, batch + (N, K * M))
    return H, W


def test_miso_and_mimo_formulas_agree(rng):
    H, W = _instance(rng, N=6, K=3, batch=(5,))
    np.testing.assert_allclose(sum_rate_miso(H, W), sum_rate_mimo(H, W), rtol=1e-12)


def test_single_user_rate(rng):
    H, W = _instance(rng, N=4, K=1)
    expected = math.log2(1 + np.linalg.norm(H[0] @ W) ** 2)
    assert sum_rate(H, W) == pytest.approx(expected, rel=1e-12)


def test_mimo_rate_matches_determinant_formula(rng):
    H, W = _instance(rng, N=5, K=2, M=2)
    total = 0.0
    for k in range(2):
        Hk = H[k]
        Wk = W[:, 2 * k:2 * k + 2]
        Wi = W[:, 2 * (1 - k):2 * (1 - k) + 2]
        sigma = np.eye(2) + Hk @ Wi @ Wi.conj().T @ Hk.conj().T
        signal = Hk @ Wk @ Wk.conj().T @ Hk.conj().T
        total += np.log2(np.real(scipy.linalg.det(np.eye(2) + np.linalg.solve(sigma, signal))))
    assert sum_rate(H, W) == pytest.approx(total, rel=1e-10)
    assert per_user_rates(H, W).sum() == pytest.approx(total, rel=1e-10)


def test_zero_beamformer_has_zero_rate(rng):
    H, _ = _instance(rng, N=4, K=3)
    assert sum_rate(H, np.zeros((4, 3), dtype=np.complex128)) == 0.0


def test_rate_is_batched(rng):
    H, W = _instance(rng, N=4, K=2, batch=(3,))
    rates = sum_rate(H, W)
    assert rates.shape == (3,)
    assert rates[1] == pytest.approx(sum_rate(H[1], W[1]))


def test_shape_mismatch_is_rejected(rng):
    H, _ = _instance(rng, N=4, K=2)
    with pytest.raises(InvalidArgumentError):
        sum_rate(H, np.zeros((4, 3), dtype=np.complex128))


@pytest.mark.parametrize("N,K,M", [(4, 2, 1), (8, 3, 1), (3, 2, 2), (5, 1, 2)])
def test_gradient_matches_finite_differences(rng, N, K, M):
    H, W = _instance(rng, N=N, K=K, M=M)
    oracle = wirtinger_fd_oracle(lambda w: float(sum_rate(H, w)), W)
    assert relative_error(grad_sum_rate(H, W).grad, oracle.grad) <= 1e-6


def test_rate_and_grad_agree_with_separate_calls(rng):
    H, W = _instance(rng, N=4, K=2, M=2, batch=(2,))
    rate, grad = rate_and_grad(H, W)
    np.testing.assert_allclose(rate, sum_rate(H, W))
    np.testing.assert_allclose(grad, grad_sum_rate(H, W).grad)


def test_hvp_matches_gradient_differences(rng):
    H, W = _instance(rng, N=4, K=2, M=2)
    V = complex_gaussian(rng, W.shape)
    h = 1e-6
    numeric = (grad_sum_rate(H, W + h * V).grad - grad_sum_rate(H, W - h * V).grad) / (2 * h)
    assert relative_error(sum_rate_hvp(H, W, V), numeric) <= 1e-6


def test_mmse_single_user_is_mrt(rng):
    H = complex_gaussian(rng, (1, 1, 6))
    W = mmse_beamformer(H, 2.0)
    mrt = math.sqrt(2.0) * H[0].conj().T / np.linalg.norm(H[0])
    np.testing.assert_allclose(W, mrt, atol=1e-12)


def test_mmse_block_norms(rng):
    H = complex_gaussian(rng, (4, 3, 2, 8))
    W = mmse_beamformer(H, 1.5)
    blocks = W.reshape(4, 8, 3, 2)
    np.testing.assert_allclose(np.sum(np.abs(blocks) ** 2, axis=(1, 3)), 0.5, rtol=1e-12)
    np.testing.assert_allclose(frobenius_sq(W), 1.5, rtol=1e-12)
    assert Beamformer(W=W[0], power_budget=1.5).is_feasible()


def test_mmse_orthogonal_channels_are_matched_filters(rng):
    Q, _ = np.linalg.qr(complex_gaussian(rng, (6, 6)))
    H = (Q[:3] * np.array([[1.0], [2.0], [0.5]]))[:, None, :]
    W = mmse_beamformer(H, 1.0)
    for k in range(3):
        w = W[:, k]
        h = H[k, 0].conj()
        cosine = abs(np.vdot(w, h)) / (np.linalg.norm(w) * np.linalg.norm(h))
        assert cosine >= 1 - 1e-10


def test_mmse_rejects_zero_channel(rng):
    H = complex_gaussian(rng, (2, 1, 4))
    H[1] = 0
    with pytest.raises(DegenerateChannelError):
        mmse_beamformer(H, 1.0)


def test_project_power():
    W = np.full((2, 2), 1.0 + 0j)
    np.testing.assert_allclose(frobenius_sq(project_power(W, 1.0)), 1.0)
    np.testing.assert_array_equal(project_power(W, 10.0), W)


def test_refine_without_steps_returns_initial(rng):
    H, W = _instance(rng)
    trace = refine(W, H, 1e-3, 0)
    assert trace.steps == 0
    assert trace.final is W
    frozen = refine(W, H, 0.0, 3)
    np.testing.assert_array_equal(frozen.final, W)


def test_refine_rejects_negative_arguments(rng):
    H, W = _instance(rng)
    with pytest.raises(InvalidArgumentError):
        refine(W, H, -1.0, 2)
    with pytest.raises(InvalidArgumentError):
        refine(W, H, 1e-3, 2, project=True)


def test_small_step_refinement_increases_rate(rng):
    H, W = _instance(rng, N=8, K=3, batch=(20,))
    trace = refine(W, H, 1e-3, 10)
    rates = np.stack([sum_rate(H, W_q) for W_q in trace.iterates])
    assert np.all(np.diff(rates, axis=0) >= -1e-12)


def test_projected_refinement_stays_feasible(rng):
    H, W = _instance(rng, N=4, K=2)
    trace = refine(W / np.linalg.norm(W), H, 0.5, 5, project=True, P=1.0)
    assert all(frobenius_sq(W_q) <= 1.0 + 1e-12 for W_q in trace.iterates)
    with pytest.raises(UnsupportedError):
        unrolled_pullback(H, trace, np.ones_like(W))


def test_pullback_reverse_matches_dense(rng):
    H, W = _instance(rng, N=3, K=2, M=1)
    trace = refine(W, H, 0.05, 3)
    G = complex_gaussian(rng, W.shape)
    reverse = unrolled_pullback(H, trace, G).grad
    dense = unrolled_pullback(H, trace, G, method="dense").grad
    assert relative_error(reverse, dense) <= 1e-8


def test_pullback_matches_finite_differences(rng):
    H, W0 = _instance(rng, N=4, K=2, M=2)
    eta, Q = 0.02, 3
    trace = refine(W0, H, eta, Q)
    oracle = wirtinger_fd_oracle(lambda w: float(sum_rate(H, refine(w, H, eta, Q).final)), W0)
    pulled = unrolled_pullback(H, trace, grad_sum_rate(H, trace.final))
    assert relative_error(pulled.grad, oracle.grad) <= 1e-5


def test_pullback_with_zero_step_is_identity(rng):
    H, W = _instance(rng)
    G = complex_gaussian(rng, W.shape)
    np.testing.assert_array_equal(unrolled_pullback(H, refine(W, H, 0.0, 4), G).grad, G)


def test_jacobian_blocks_need_single_instance(rng):
    H, W = _instance(rng, batch=(2,))
    with pytest.raises(InvalidArgumentError):
        unrolled_jacobian_blocks(H, refine(W, H, 0.01, 1))
    H1, W1 = _instance(rng, N=2, K=1)
    blocks = unrolled_jacobian_blocks(H1, refine(W1, H1, 0.01, 2))
    assert len(blocks) == 2
    assert blocks[0].shape == (4, 4)


@pytest.mark.parametrize("M", [1, 2])
def test_sum_rate_ignores_per_user_rotations(rng, M):
    K = 3
    H, W = _instance(rng, N=6, K=K, M=M)
    if M == 1:
        blocks = [np.exp(1j * rng.uniform(0, 2 * np.pi)) * np.eye(1) for _ in range(K)]
    else:
        blocks = [unitary_group.rvs(M, random_state=rng) for _ in range(K)]
    U = scipy.linalg.block_diag(*blocks)
    assert sum_rate(H, W @ U) == pytest.approx(sum_rate(H, W), abs=1e-9)
    np.testing.assert_allclose(per_user_rates(H, W @ U), per_user_rates(H, W), atol=1e-9)


@pytest.mark.parametrize("M", [1, 2])
def test_sum_rate_depends_only_on_channel_beamformer_products(rng, M):
    N = 5
    H, W = _instance(rng, N=N, K=2, M=M)
    V = unitary_group.rvs(N, random_state=rng)
    assert sum_rate(H @ V.conj().T, V @ W) == pytest.approx(sum_rate(H, W), abs=1e-9)
