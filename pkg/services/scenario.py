"""
Beamsim Scenario Service
Draws the working channels of a scenario: normalized channels H for fully
digital systems, or effective channels G = H W^a with their analog matrix
for hybrid systems
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from models.experiment import ScenarioConfig
from services.channel import (
    ChannelGenerator,
    ChannelSample,
    concatenate_samples,
    generate_chunks,
    normalize_and_estimate,
)
from services.hybrid import (
    analog_farfield,
    effective_channel,
    nearfield_analog_matrix,
    nearfield_channel,
    sample_nearfield_users,
)
from services.numerics import ComplexArray, complex_gaussian


@dataclass(frozen=True)
class ScenarioBatch:
    """Working channels plus the analog matrix the digital beamformer sits behind"""
    sample: ChannelSample
    analog: Optional[ComplexArray] = None

    @property
    def H(self) -> ComplexArray:
        return self.sample.H

    @property
    def H_tilde(self) -> ComplexArray:
        return self.sample.H_tilde

    @property
    def batch_size(self) -> int:
        return self.sample.H.shape[0]

    def analog_for(self, index) -> Optional[ComplexArray]:
        """Analog matrix for a subset of samples (shared matrices pass through)"""
        if self.analog is None or self.analog.ndim == 2:
            return self.analog
        return self.analog[index]

    def subset(self, index) -> "ScenarioBatch":
        s = self.sample
        angles = None if s.user_angles is None else s.user_angles[index]
        return ScenarioBatch(
            sample=ChannelSample(
                H_bar=s.H_bar[index], sigma2=s.sigma2[index], H=s.H[index], H_tilde=s.H_tilde[index],
                delta_H=s.delta_H[index], user_angles=angles,
                extras={k: v[index] for k, v in s.extras.items()},
            ),
            analog=self.analog_for(index),
        )


def concatenate_batches(batches: List[ScenarioBatch]) -> ScenarioBatch:
    analog = batches[0].analog
    if analog is not None and analog.ndim == 3:
        analog = np.concatenate([b.analog for b in batches], axis=0)
    return ScenarioBatch(sample=concatenate_samples([b.sample for b in batches]), analog=analog)


class ScenarioSampler:
    """Channel batches for fully digital, far-field hybrid and near-field hybrid scenarios"""

    def __init__(self, scenario: ScenarioConfig):
        self.scenario = scenario
        self.system = scenario.system
        self.generator = ChannelGenerator(scenario.system, scenario.geometry)
        self.shared_analog: Optional[ComplexArray] = None
        hybrid = scenario.hybrid
        if hybrid is not None and hybrid.mode == "far-field":
            self.shared_analog = analog_farfield(scenario.geometry, self.system.N, hybrid.n_rf,
                                                 self.system.K, self.system.M, self.system.d_over_lambda)

    @property
    def mode(self) -> str:
        return "digital" if self.scenario.hybrid is None else self.scenario.hybrid.mode

    def sample(self, batch: int, rng: np.random.Generator, sigma2: Optional[float] = None) -> ScenarioBatch:
        if self.mode == "digital":
            return ScenarioBatch(sample=self.generator.sample(batch, rng, sigma2=sigma2))

        if self.mode == "far-field":
            H_bar, angles = self.generator.sample_physical(batch, rng)
            analog = self.shared_analog
        else:
            hybrid = self.scenario.hybrid
            users = sample_nearfield_users(self.scenario.geometry, self.system.K, hybrid, rng, batch=batch)
            alpha = complex_gaussian(rng, users.r.shape)
            # Row used for the rate is h_bar^H
            H_bar = np.conj(nearfield_channel(users, alpha, hybrid))[..., None, :]
            analog = nearfield_analog_matrix(users, hybrid)
            angles = users.theta

        noise = self.generator.snr_set.draw(rng, batch) if sigma2 is None else np.full(batch, float(sigma2))
        per_user = np.repeat(noise[:, None], self.system.K, axis=1)
        G_bar = effective_channel(H_bar, analog, provenance=self.mode).G
        sample = normalize_and_estimate(G_bar, per_user, self.system.sigma2_h, rng, user_angles=angles)
        return ScenarioBatch(sample=sample, analog=analog)

    def dataset(self, count: int, seed: int, workers: int = 1, chunk_size: int = 256,
                sigma2: Optional[float] = None) -> ScenarioBatch:
        chunks = generate_chunks(lambda size, rng: self.sample(size, rng, sigma2=sigma2),
                                 count, seed, workers, chunk_size)
        return concatenate_batches(chunks)


def error_free(batch: ScenarioBatch) -> ScenarioBatch:
    """Same batch with H_tilde = H"""
    s = batch.sample
    zero = np.zeros_like(s.H)
    return ScenarioBatch(
        sample=ChannelSample(H_bar=s.H_bar, sigma2=s.sigma2, H=s.H, H_tilde=s.H.copy(), delta_H=zero,
                             user_angles=s.user_angles, extras=s.extras),
        analog=batch.analog,
    )


def redraw_errors(batch: ScenarioBatch, sigma2_h: float, rng: np.random.Generator) -> ScenarioBatch:
    """Fresh CN(0, sigma2_h) estimation errors on the same channels"""
    s = batch.sample
    delta = complex_gaussian(rng, s.H.shape, sigma2_h)
    return ScenarioBatch(
        sample=ChannelSample(H_bar=s.H_bar, sigma2=s.sigma2, H=s.H, H_tilde=s.H + delta, delta_H=delta,
                             user_angles=s.user_angles, extras=s.extras),
        analog=batch.analog,
    )
