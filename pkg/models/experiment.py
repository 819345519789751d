"""
Beamsim Experiment Models
Pydantic models for every configuration section and the experiment spec
"""

import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

BASELINES = ("kd-edn", "unsupervised", "supervised", "kd-edn-q0", "mmse")


class SystemConfig(BaseModel):
    """Antenna counts, power budget and far-field path statistics"""
    N: int = Field(..., ge=1, description="BS antenna count")
    M: int = Field(default=1, ge=1, description="Antennas per user")
    K: int = Field(..., ge=1, description="User count")
    P: float = Field(default=1.0, gt=0, description="Total transmit power")
    d_over_lambda: float = Field(default=0.5, gt=0, description="Antenna spacing in wavelengths")
    L: int = Field(default=10, ge=1, description="Scattering paths per user")
    sigma_aod: float = Field(default=0.1, ge=0, description="AOD spread (rad)")
    sigma_aoa: float = Field(default=0.1, ge=0, description="AOA spread (rad)")
    sigma2_h: float = Field(default=0.1, ge=0, description="Channel estimation error variance")
    snr_db_min: float = Field(default=5.0, description="Lowest SNR of the training mixture (dB)")
    snr_db_max: float = Field(default=20.0, description="Highest SNR of the training mixture (dB)")
    snr_levels: int = Field(default=4, ge=1, description="Evenly spaced SNR levels in the mixture")

    @model_validator(mode="after")
    def _check_snr_range(self) -> "SystemConfig":
        if self.snr_db_max < self.snr_db_min:
            raise ValueError("snr_db_max must be >= snr_db_min")
        return self


class GeometryScenario(BaseModel):
    """User placement scenario"""
    kind: Literal["single-cell", "spatial-division"] = Field(default="spatial-division")
    phi: float = Field(default=math.pi / 2, ge=0, le=math.pi, description="Sector angle (single-cell)")
    psi: float = Field(default=math.pi / 16, ge=0, le=math.pi, description="Per-user sector width (spatial-division)")

    @staticmethod
    def sector_center(k: int, K: int) -> float:
        """Center angle of sector k (0-based) out of K"""
        return -math.pi / 2 + (k + 0.5) * math.pi / K


class HybridConfig(BaseModel):
    """Hybrid analog/digital front end"""
    mode: Literal["far-field", "near-field"] = Field(default="far-field")
    n_rf: int = Field(..., ge=1, description="RF chain count")
    S: int = Field(default=1, ge=1, description="Subarray count (near-field)")
    n_sub: int = Field(default=1, ge=1, description="Antennas per subarray (near-field)")
    wavelength: float = Field(default=3e-3, gt=0, description="Carrier wavelength (m)")
    spacing: Optional[float] = Field(default=None, gt=0, description="Antenna spacing (m); half wavelength if unset")
    r_c: float = Field(default=3.0, gt=0, description="Mean user distance (m)")
    sigma_r: float = Field(default=1.0, ge=0, description="User distance std (m)")
    r_min: float = Field(default=0.1, gt=0, description="Users closer than this are redrawn (m)")

    @property
    def d(self) -> float:
        return self.spacing if self.spacing is not None else self.wavelength / 2

    @property
    def N(self) -> int:
        return self.S * self.n_sub


class NetConfig(BaseModel):
    """Widths and regularisation of the three subnetworks"""
    d_latent: int = Field(default=32, ge=1, description="Latent dimension per user")
    encoder_hidden: List[int] = Field(default_factory=lambda: [512, 256])
    beamdec_hidden: List[int] = Field(default_factory=lambda: [1024, 1024])
    chandec_hidden: List[int] = Field(default_factory=lambda: [256, 512])
    leaky_slope: float = Field(default=0.01, ge=0)
    beamdec_dropout: float = Field(default=0.2, ge=0, lt=1)
    encoder_batchnorm: bool = False
    beamdec_batchnorm: bool = False
    chandec_batchnorm: bool = True
    bn_momentum: float = Field(default=0.1, gt=0, le=1)
    bn_eps: float = Field(default=1e-5, gt=0)


class TrainConfig(BaseModel):
    """Training stage hyperparameters"""
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    n_en: int = Field(default=2, ge=0, description="Encoder SGD steps per epoch")
    n_de: int = Field(default=8, ge=0, description="Decoder SGD steps per epoch")
    q_t: int = Field(default=5, ge=0, description="Refinement steps during training")
    q_i: int = Field(default=10, ge=0, description="Refinement steps at inference")
    eta_ga: float = Field(default=1e-3, ge=0, description="Gradient-ascent step size")
    epochs: int = Field(default=300, ge=0)
    kd_mode: Literal["schedule", "unsupervised", "supervised"] = Field(default="schedule")
    alpha_step: float = Field(default=0.01, ge=0)
    alpha_every: int = Field(default=1, ge=1, description="Epochs between KD weight increments")
    optimizer: Literal["sgd", "adam"] = Field(default="sgd")
    fresh_channels_per_step: bool = Field(default=False)
    chandec_epochs: int = Field(default=100, ge=0)
    chandec_steps: int = Field(default=4, ge=0, description="Channel decoder SGD steps per epoch")
    chandec_lr: float = Field(default=1e-3, gt=0)
    checkpoint_every: int = Field(default=0, ge=0, description="0 disables periodic checkpoints")
    project: bool = Field(default=False, description="Project inference refinement onto the power ball (digital only)")
    monitor_size: int = Field(default=64, ge=1, description="Samples in the deterministic monitoring pass")


class FeedbackChannelModel(BaseModel):
    """Latent feedback error model"""
    mode: Literal["additive-gaussian", "uniform-quantizer", "quantizer-plus-gaussian"] = Field(default="additive-gaussian")
    sigma2_z: float = Field(default=0.1, ge=0)
    bits: int = Field(default=8, ge=1, le=24, description="Bits per latent entry in quantizer modes")
    gaussian: Literal["real", "complex-real-part"] = Field(default="real")


class EvalConfig(BaseModel):
    """Evaluation grid and baselines"""
    baselines: List[str] = Field(default_factory=lambda: ["kd-edn", "mmse"])
    snr_db: List[float] = Field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0])
    test_size: int = Field(default=200, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    q_t_list: List[int] = Field(default_factory=lambda: [0, 5])
    q_i_grid: List[int] = Field(default_factory=lambda: [0, 1, 2, 5, 10])
    chunk_size: int = Field(default=50, ge=1, description="Samples per evaluation work item")

    @field_validator("baselines")
    @classmethod
    def _check_baselines(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one baseline is required")
        unknown = sorted(set(value) - set(BASELINES))
        if unknown:
            raise ValueError(f"unknown baselines {unknown}; valid: {list(BASELINES)}")
        return value

    @field_validator("snr_db", "seeds")
    @classmethod
    def _nonempty(cls, value: list) -> list:
        if not value:
            raise ValueError("must not be empty")
        return value

    @field_validator("q_t_list", "q_i_grid")
    @classmethod
    def _nonnegative_counts(cls, value: List[int]) -> List[int]:
        if any(q < 0 for q in value):
            raise ValueError("refinement step counts must be >= 0")
        return value


class ScenarioConfig(BaseModel):
    """Physical scenario: system, geometry and optional hybrid front end"""
    system: SystemConfig
    geometry: GeometryScenario = Field(default_factory=GeometryScenario)
    hybrid: Optional[HybridConfig] = None

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        system, geometry, hybrid = self.system, self.geometry, self.hybrid
        if geometry.kind == "spatial-division" and geometry.psi > math.pi / system.K + 1e-12:
            raise ValueError(f"psi must be <= pi/K = {math.pi / system.K:.6f}")
        if hybrid is None:
            return self
        if hybrid.mode == "far-field":
            if not system.K * system.M <= hybrid.n_rf <= system.N:
                raise ValueError("far-field hybrid needs K*M <= n_rf <= N")
        else:
            if system.M != 1:
                raise ValueError("near-field hybrid supports single-antenna users only")
            if hybrid.N != system.N:
                raise ValueError(f"near-field hybrid needs N = S*n_sub ({hybrid.N}), got N={system.N}")
            if hybrid.n_rf != system.K:
                raise ValueError("near-field hybrid needs n_rf = K")
        return self

    @property
    def n_eff(self) -> int:
        """Width of the channel seen by the digital beamformer"""
        return self.hybrid.n_rf if self.hybrid is not None else self.system.N

    @property
    def is_hybrid(self) -> bool:
        return self.hybrid is not None


class ExperimentSpec(BaseModel):
    """Everything needed to train and evaluate one scenario"""
    preset: str = Field(default="custom")
    scale: Literal["desk", "paper"] = Field(default="desk")
    seed: int = Field(default=0, ge=0)
    system: SystemConfig
    geometry: GeometryScenario = Field(default_factory=GeometryScenario)
    hybrid: Optional[HybridConfig] = None
    nets: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    feedback: FeedbackChannelModel = Field(default_factory=FeedbackChannelModel)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_scenario(self) -> "ExperimentSpec":
        # Builds (and so validates) the combined scenario
        self.scenario
        if self.train.project and self.hybrid is not None:
            raise ValueError("power projection of the refinement is only defined for fully digital systems")
        return self

    @property
    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(system=self.system, geometry=self.geometry, hybrid=self.hybrid)

    def snr_range(self) -> Tuple[float, float]:
        return self.system.snr_db_min, self.system.snr_db_max
