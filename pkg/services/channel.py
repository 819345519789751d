"""
Beamsim Channel Service
Far-field sparse mmWave channels, user geometries, estimation errors and
noise-variance mixtures

Channel arrays use shape (..., K, M, N): row m of H[k] is the m-th receive
antenna of user k, so the rate uses the products H_k W_j directly.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, TypeVar

import numpy as np
import numpy.typing as npt

from models.experiment import GeometryScenario, SystemConfig
from services.errors import InvalidArgumentError
from services.logging import get_logger
from services.numerics import ComplexArray, RealArray, array_response, complex_gaussian, derive_seeds

logger = get_logger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class PathSet:
    """Per-path gains and angles of the K users, shape (..., K, L)"""
    gains: ComplexArray
    aod: RealArray
    aoa: RealArray
    sigma_aod: float
    sigma_aoa: float

    @property
    def L(self) -> int:
        return self.gains.shape[-1]


@dataclass(frozen=True)
class ChannelSample:
    """True, normalized and estimated channels for one or more draws of K users"""
    H_bar: ComplexArray
    sigma2: RealArray
    H: ComplexArray
    H_tilde: ComplexArray
    delta_H: ComplexArray
    user_angles: Optional[RealArray] = None
    extras: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.H.shape[0] if self.H.ndim == 4 else 1


@dataclass(frozen=True)
class NoiseVarianceSet:
    """Noise variances sigma^2 = 10^(-SNR/10) at evenly spaced SNR levels"""
    snr_db: RealArray
    sigma2: RealArray

    def draw(self, rng: np.random.Generator, size: int) -> RealArray:
        """One variance per sample, uniform over the set"""
        return self.sigma2[rng.integers(0, len(self.sigma2), size=size)]


def sample_user_angles(
    scenario: GeometryScenario,
    K: int,
    rng: np.random.Generator,
    batch: Optional[int] = None,
) -> RealArray:
    """User azimuths zeta_k, shape (K,) or (batch, K)"""
    shape = (K,) if batch is None else (batch, K)
    if scenario.kind == "single-cell":
        half = scenario.phi / 2
        return rng.uniform(-half, half, size=shape)
    centers = np.array([GeometryScenario.sector_center(k, K) for k in range(K)])
    half = scenario.psi / 2
    return centers + rng.uniform(-half, half, size=shape)


def sample_path_angles(
    zeta: npt.ArrayLike,
    L: int,
    sigma_aod: float,
    sigma_aoa: float,
    rng: np.random.Generator,
) -> PathSet:
    """Gaussian path angles around the user azimuth with CN(0, 1) gains

    Mean AOD is zeta and mean AOA is pi + zeta; angles are not truncated.
    """
    if L < 1:
        raise InvalidArgumentError(f"path count must be >= 1, got {L}")
    zeta = np.asarray(zeta, dtype=np.float64)
    shape = zeta.shape + (L,)
    aod = zeta[..., None] + sigma_aod * rng.standard_normal(shape)
    aoa = math.pi + zeta[..., None] + sigma_aoa * rng.standard_normal(shape)
    gains = complex_gaussian(rng, shape)
    return PathSet(gains=gains, aod=aod, aoa=aoa, sigma_aod=sigma_aod, sigma_aoa=sigma_aoa)


def gen_channel_farfield(cfg: SystemConfig, paths: PathSet) -> ComplexArray:
    """Geometric channel sqrt(MN/L) sum_l alpha_l a_M(aoa_l) a_N(aod_l)^H, shape (..., M, N)

    With M = 1 the receive response is the scalar 1.
    """
    a_rx = array_response(cfg.M, paths.aoa, cfg.d_over_lambda)  # (..., L, M)
    a_tx = array_response(cfg.N, paths.aod, cfg.d_over_lambda)  # (..., L, N)
    scale = math.sqrt(cfg.M * cfg.N / paths.L)
    return scale * np.einsum("...l,...lm,...ln->...mn", paths.gains, a_rx, np.conj(a_tx))


def normalize_and_estimate(
    H_bar: ComplexArray,
    sigma2: npt.ArrayLike,
    sigma2_h: float,
    rng: np.random.Generator,
    user_angles: Optional[RealArray] = None,
) -> ChannelSample:
    """H = H_bar / sigma^2 per user, plus i.i.d. CN(0, sigma2_h) estimation error"""
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), H_bar.shape[:-2])
    if np.any(sigma2 <= 0):
        raise InvalidArgumentError("noise variances must be positive")
    H = H_bar / sigma2[..., None, None]
    delta_H = complex_gaussian(rng, H.shape, sigma2_h)
    return ChannelSample(
        H_bar=H_bar,
        sigma2=np.array(sigma2),
        H=H,
        H_tilde=H + delta_H,
        delta_H=delta_H,
        user_angles=user_angles,
    )


def make_snr_mixture(snr_db_min: float, snr_db_max: float, count: int) -> NoiseVarianceSet:
    """Evenly spaced SNR levels over [snr_db_min, snr_db_max]"""
    if count < 1 or snr_db_max < snr_db_min:
        raise InvalidArgumentError(f"empty SNR range [{snr_db_min}, {snr_db_max}] with {count} levels")
    snr_db = np.linspace(snr_db_min, snr_db_max, count)
    return NoiseVarianceSet(snr_db=snr_db, sigma2=10.0 ** (-snr_db / 10.0))


def snr_to_sigma2(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 10.0)


class ChannelGenerator:
    """Vectorised far-field channel batches for one system and geometry"""

    def __init__(self, cfg: SystemConfig, scenario: GeometryScenario):
        self.cfg = cfg
        self.scenario = scenario
        self.snr_set = make_snr_mixture(cfg.snr_db_min, cfg.snr_db_max, cfg.snr_levels)

    def sample_physical(self, batch: int, rng: np.random.Generator) -> tuple[ComplexArray, RealArray]:
        """Unnormalized channels (batch, K, M, N) and user angles (batch, K)"""
        zeta = sample_user_angles(self.scenario, self.cfg.K, rng, batch=batch)
        paths = sample_path_angles(zeta, self.cfg.L, self.cfg.sigma_aod, self.cfg.sigma_aoa, rng)
        return gen_channel_farfield(self.cfg, paths), zeta

    def sample(
        self,
        batch: int,
        rng: np.random.Generator,
        sigma2: Optional[float] = None,
        sigma2_h: Optional[float] = None,
    ) -> ChannelSample:
        """Draw a batch; sigma^2 comes from the SNR mixture unless fixed"""
        H_bar, zeta = self.sample_physical(batch, rng)
        if sigma2 is None:
            noise = self.snr_set.draw(rng, batch)
        else:
            noise = np.full(batch, float(sigma2))
        per_user = np.repeat(noise[:, None], self.cfg.K, axis=1)
        error = self.cfg.sigma2_h if sigma2_h is None else sigma2_h
        return normalize_and_estimate(H_bar, per_user, error, rng, user_angles=zeta)


def concatenate_samples(samples: List[ChannelSample]) -> ChannelSample:
    """Join batched samples along the leading axis"""
    def cat(name: str):
        values = [getattr(s, name) for s in samples]
        if any(v is None for v in values):
            return None
        return np.concatenate(values, axis=0)

    extras = {}
    for key in samples[0].extras:
        extras[key] = np.concatenate([s.extras[key] for s in samples], axis=0)
    return ChannelSample(
        H_bar=cat("H_bar"),
        sigma2=cat("sigma2"),
        H=cat("H"),
        H_tilde=cat("H_tilde"),
        delta_H=cat("delta_H"),
        user_angles=cat("user_angles"),
        extras=extras,
    )


def generate_chunks(
    draw: Callable[[int, np.random.Generator], T],
    count: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = 256,
) -> List[T]:
    """Fixed-size chunks with derived seeds, so the result does not depend on workers"""
    if count < 1:
        raise InvalidArgumentError(f"dataset size must be >= 1, got {count}")
    if chunk_size < 1:
        raise InvalidArgumentError(f"chunk size must be >= 1, got {chunk_size}")
    start_time = time.time()
    sizes = [min(chunk_size, count - start) for start in range(0, count, chunk_size)]
    seeds = derive_seeds(seed, len(sizes))

    def work(index: int) -> T:
        return draw(sizes[index], np.random.default_rng(seeds[index]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            chunks = list(executor.map(work, range(len(sizes))))
    else:
        chunks = [work(i) for i in range(len(sizes))]

    logger.info("dataset_generated", samples=count, chunks=len(sizes), workers=workers,
                seconds=round(time.time() - start_time, 4))
    return chunks


def generate_dataset(
    generator: ChannelGenerator,
    count: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = 256,
    sigma2: Optional[float] = None,
) -> ChannelSample:
    """Far-field dataset of count samples"""
    chunks = generate_chunks(lambda size, rng: generator.sample(size, rng, sigma2=sigma2),
                             count, seed, workers, chunk_size)
    return concatenate_samples(chunks)
