"""
Beamsim Result Models
Rows, tables and manifests written by the experiment harness
"""

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field

SNR_HEADER = ["baseline", "snr_db", "mean_rate", "std_rate", "n_samples", "seconds"]
Q_HEADER = ["model", "q_t", "q_i", "mean_rate", "std_rate", "n_samples", "seconds"]
METRICS_HEADER = ["epoch", "alpha", "loss_unsupervised", "loss_supervised", "mean_sum_rate", "mean_power"]
CHANDEC_HEADER = ["epoch", "loss"]


class SnrRow(BaseModel):
    """One (baseline, SNR) evaluation"""
    baseline: str
    snr_db: float
    mean_rate: float
    std_rate: float
    n_samples: int
    seconds: float = Field(default=0.0, description="Wall time; excluded from reproducibility checks")

    def values(self) -> list:
        return [self.baseline, f"{self.snr_db:g}", f"{self.mean_rate:.10f}", f"{self.std_rate:.10f}",
                self.n_samples, f"{self.seconds:.3f}"]


class QRow(BaseModel):
    """One (model, Q_t, Q_i) evaluation"""
    model: str
    q_t: int
    q_i: int
    mean_rate: float
    std_rate: float
    n_samples: int
    seconds: float = 0.0

    def values(self) -> list:
        return [self.model, self.q_t, self.q_i, f"{self.mean_rate:.10f}", f"{self.std_rate:.10f}",
                self.n_samples, f"{self.seconds:.3f}"]


class EpochMetrics(BaseModel):
    """Deterministic per-epoch training metrics"""
    epoch: int
    alpha: float
    loss_unsupervised: float
    loss_supervised: float
    mean_sum_rate: float
    mean_power: float

    def values(self) -> list:
        return [self.epoch, f"{self.alpha:.4f}", f"{self.loss_unsupervised:.10f}",
                f"{self.loss_supervised:.10f}", f"{self.mean_sum_rate:.10f}", f"{self.mean_power:.10f}"]


class ChannelDecoderLoss(BaseModel):
    """Mean channel-reconstruction loss of one channel decoder epoch"""
    epoch: int
    loss: float

    def values(self) -> list:
        return [self.epoch, f"{self.loss:.10f}"]


class PowerStats(BaseModel):
    """Post-refinement ||W||_F^2 statistics"""
    mean: float
    max: float
    min: float


class ResultTable(BaseModel):
    """Figure-data container written as CSV"""
    header: List[str]
    rows: List[Union[SnrRow, QRow, EpochMetrics, ChannelDecoderLoss]] = Field(default_factory=list)

    def add(self, row: Union[SnrRow, QRow, EpochMetrics, ChannelDecoderLoss]) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow(row.values())
        return buffer.getvalue()

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


class RunManifest(BaseModel):
    """JSON manifest written next to every result table"""
    spec: dict
    seeds: List[int]
    versions: Dict[str, str]
    test_set_sha256: Dict[str, str] = Field(default_factory=dict)
    power: Dict[str, PowerStats] = Field(default_factory=dict)
    command: Optional[str] = None
