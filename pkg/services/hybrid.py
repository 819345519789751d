"""
Beamsim Hybrid Beamforming Service
Pre-determined far-field analog beams, near-field subarray channels with
TTD + phase-shifter focusing, effective channels and hybrid normalization

Near-field channels are returned as columns h_bar (..., N); the row that
multiplies the beamformer is h_bar^H, matching the beamforming gain
|h_bar^H v| / (sqrt(N) |alpha|).
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt

from models.experiment import GeometryScenario, HybridConfig
from services.channel import sample_user_angles
from services.errors import DegenerateGeometryError, InvalidArgumentError, UnsupportedError
from services.logging import get_logger
from services.nets import PowerNormalization
from services.numerics import ComplexArray, RealArray, array_response, steering_matrix

logger = get_logger(__name__)

MAX_REDRAWS = 1000


@dataclass(frozen=True)
class NearFieldUser:
    """User position and its subarray-wise distances and angles, trailing axis S"""
    r: RealArray
    theta: RealArray
    r_s: RealArray
    sin_theta_s: RealArray

    @property
    def theta_s(self) -> RealArray:
        return np.arcsin(np.clip(self.sin_theta_s, -1.0, 1.0))

    @property
    def mu(self) -> RealArray:
        """Optimal TTD path-length compensation (m), zero at the farthest subarray"""
        return self.r_s.max(axis=-1, keepdims=True) - self.r_s

    @property
    def eta(self) -> RealArray:
        """Optimal phase-shifter angles"""
        return -self.theta_s


@dataclass(frozen=True)
class EffectiveChannel:
    """G = H_bar W^a / sigma^2 and the analog matrix that produced it"""
    G: ComplexArray
    analog: ComplexArray
    provenance: str


def rayleigh_distance(cfg: HybridConfig) -> float:
    """N^2 lambda / 2"""
    return cfg.N ** 2 * cfg.wavelength / 2.0


def analog_farfield(scenario: GeometryScenario, N: int, n_rf: int, K: int, M: int = 1,
                    d_over_lambda: float = 0.5) -> ComplexArray:
    """Steering columns spread over the coverage sector, shape (N, n_rf)"""
    if n_rf < 1:
        raise InvalidArgumentError(f"RF chain count must be >= 1, got {n_rf}")
    if scenario.kind == "single-cell":
        n = np.arange(n_rf)
        beta = -scenario.phi / 2 + (n + 0.5) * scenario.phi / n_rf
    else:
        if n_rf != K * M:
            raise UnsupportedError(f"spatial-division analog beams need n_rf = K*M = {K * M}, got {n_rf}")
        centers = np.array([GeometryScenario.sector_center(k, K) for k in range(K)])
        m = np.arange(M)
        beta = (centers[:, None] - scenario.psi / 2 + (m[None, :] + 0.5) * scenario.psi / M).reshape(-1)
    return steering_matrix(N, beta, d_over_lambda)


def nearfield_subarray_geometry(r: npt.ArrayLike, theta: npt.ArrayLike, cfg: HybridConfig) -> NearFieldUser:
    """Distance and angle from the first element of every subarray to the user"""
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(r <= 0):
        raise InvalidArgumentError("user distances must be positive")
    offset = np.arange(cfg.S) * cfg.n_sub * cfg.d
    sin_theta = np.sin(theta)[..., None]
    r_col = r[..., None]
    r_s = np.sqrt(np.maximum(r_col ** 2 + offset ** 2 - 2.0 * offset * r_col * sin_theta, 0.0))
    if np.any(r_s == 0):
        raise DegenerateGeometryError("user is located on a subarray element")
    return NearFieldUser(r=r, theta=theta, r_s=r_s, sin_theta_s=(r_col * sin_theta - offset) / r_s)


def _subarray_responses(sin_values: RealArray, cfg: HybridConfig) -> ComplexArray:
    """a_n at each subarray angle, shape (..., S, n)"""
    return array_response(cfg.n_sub, np.arcsin(np.clip(sin_values, -1.0, 1.0)), cfg.d / cfg.wavelength)


def nearfield_channel(user: NearFieldUser, alpha: npt.ArrayLike, cfg: HybridConfig) -> ComplexArray:
    """Column channel h_bar (..., N): subvector s is sqrt(n) alpha e^{-j2pi r_s/lambda} conj(a_n(theta_s))"""
    alpha = np.asarray(alpha, dtype=np.complex128)[..., None, None]
    phase = np.exp(-2j * np.pi * user.r_s / cfg.wavelength)[..., None]
    sub = math.sqrt(cfg.n_sub) * alpha * phase * np.conj(_subarray_responses(user.sin_theta_s, cfg))
    return sub.reshape(*sub.shape[:-2], cfg.N)


def nearfield_channel_exact(r: npt.ArrayLike, theta: npt.ArrayLike, alpha: npt.ArrayLike,
                            cfg: HybridConfig) -> ComplexArray:
    """Per-element spherical-wavefront channel alpha e^{-j2pi r_sq/lambda}

    Element q of subarray s sits at (s n - q) d on the array axis, the
    placement whose first-order expansion is r_s + q d sin(theta_s).
    """
    r = np.asarray(r, dtype=np.float64)[..., None]
    theta = np.asarray(theta, dtype=np.float64)[..., None]
    s = np.repeat(np.arange(cfg.S), cfg.n_sub)
    q = np.tile(np.arange(cfg.n_sub), cfg.S)
    y = (s * cfg.n_sub - q) * cfg.d
    distance = np.sqrt((r * np.cos(theta)) ** 2 + (r * np.sin(theta) - y) ** 2)
    alpha = np.asarray(alpha, dtype=np.complex128)[..., None]
    return alpha * np.exp(-2j * np.pi * distance / cfg.wavelength)


def nearfield_analog(user: NearFieldUser, cfg: HybridConfig) -> ComplexArray:
    """Focusing beamformer v (..., N) with eta_s = -theta_s and mu_s = max r - r_s"""
    ttd = np.exp(2j * np.pi * user.mu / cfg.wavelength)[..., None]
    sub = math.sqrt(cfg.n_sub / cfg.N) * ttd * _subarray_responses(-user.sin_theta_s, cfg)
    return sub.reshape(*sub.shape[:-2], cfg.N)


def nearfield_analog_matrix(users: NearFieldUser, cfg: HybridConfig) -> ComplexArray:
    """W^a(P) = [v_1, ..., v_K], shape (..., N, K) for users with trailing axis K"""
    return np.swapaxes(nearfield_analog(users, cfg), -1, -2)


def beamforming_gain(h_bar: ComplexArray, v: ComplexArray, alpha: npt.ArrayLike) -> RealArray:
    """|h_bar^H v| / (sqrt(N) |alpha|)"""
    N = h_bar.shape[-1]
    inner = np.abs(np.sum(np.conj(h_bar) * v, axis=-1))
    return inner / (math.sqrt(N) * np.abs(alpha))


def sample_nearfield_users(
    scenario: GeometryScenario,
    K: int,
    cfg: HybridConfig,
    rng: np.random.Generator,
    batch: Optional[int] = None,
) -> NearFieldUser:
    """r ~ N(r_c, sigma_r^2) redrawn outside [r_min, Rayleigh distance]; angles as in the far field"""
    limit = rayleigh_distance(cfg)
    if not cfg.r_min < limit:
        raise InvalidArgumentError(f"r_min {cfg.r_min} m is beyond the Rayleigh distance {limit:.4f} m")
    theta = sample_user_angles(scenario, K, rng, batch=batch)
    r = cfg.r_c + cfg.sigma_r * rng.standard_normal(theta.shape)
    redraws = 0
    outside = (r < cfg.r_min) | (r > limit)
    while np.any(outside):
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise InvalidArgumentError(
                f"user distances N({cfg.r_c}, {cfg.sigma_r}^2) rarely fall in [{cfg.r_min}, {limit:.4f}] m")
        r[outside] = cfg.r_c + cfg.sigma_r * rng.standard_normal(int(outside.sum()))
        outside = (r < cfg.r_min) | (r > limit)
    if redraws:
        logger.debug("nearfield_users_redrawn", rounds=redraws)
    return nearfield_subarray_geometry(r, theta, cfg)


def effective_channel(H_bar: ComplexArray, analog: ComplexArray, sigma2: Optional[npt.ArrayLike] = None,
                      provenance: str = "far-field") -> EffectiveChannel:
    """G_k = H_bar_k W^a / sigma_k^2 for channels (..., K, M, N)"""
    if H_bar.ndim < 3 or analog.ndim < 2 or H_bar.shape[-1] != analog.shape[-2]:
        raise InvalidArgumentError(f"cannot combine channels {H_bar.shape} with analog matrix {analog.shape}")
    a = analog if analog.ndim == 2 else analog[..., None, :, :]
    G = H_bar @ a
    if sigma2 is not None:
        sigma2 = np.asarray(sigma2, dtype=np.float64)
        if np.any(sigma2 <= 0):
            raise InvalidArgumentError("noise variances must be positive")
        G = G / np.broadcast_to(sigma2, H_bar.shape[:-2])[..., None, None]
    return EffectiveChannel(G=G, analog=analog, provenance=provenance)


def hybrid_power_normalize(W_D_raw: ComplexArray, analog: ComplexArray, P: float) -> ComplexArray:
    """sqrt(P) W^D / ||W^a W^D||_F"""
    if analog.shape[-1] != W_D_raw.shape[-2]:
        raise InvalidArgumentError(f"analog matrix {analog.shape} does not match digital beamformer {W_D_raw.shape}")
    return PowerNormalization(P).forward(W_D_raw, analog)
