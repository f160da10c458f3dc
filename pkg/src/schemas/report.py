from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from .config import TrainConfig


class BaselineMetrics(BaseModel):
    er: float = Field(ge=0, le=1)
    mr: float = Field(ge=1)


class SeedMetrics(BaseModel):
    seed: int
    er: float = Field(ge=0, le=1)
    mr: float = Field(ge=1)
    nll: float


class MetricsReport(BaseModel):
    """Output of ``logictree eval``: mean and std over seeds plus baselines."""

    split: str
    n_sequences: int
    n_samples: int
    er: float = Field(ge=0, le=1)
    mr: float = Field(ge=1)
    nll: float
    er_std: float = 0.0
    mr_std: float = 0.0
    nll_std: float = 0.0
    baselines: Dict[str, BaselineMetrics]
    per_seed: List[SeedMetrics]


class PredictionRow(BaseModel):
    seq_id: Optional[str] = None
    label: str
    rank: int = Field(ge=1)
    ranking: List[str]
    scores: List[float]


class RunManifest(BaseModel):
    """Written once at the start of a run, never modified."""

    command: str
    config: Optional[TrainConfig] = None
    seed: int
    input_hash: str
    inputs: List[str]
    outputs: Dict[str, str]
    started_at: str
