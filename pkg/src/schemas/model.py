from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from .config import TrainConfig
from .dataset import PredicateEntry


class RuleEntry(BaseModel):
    path: List[str] = Field(min_length=2)
    weight: float


class GroundTruthModel(BaseModel):
    """Input of ``logictree gen``: rules as predicate-name paths with weights."""

    vocabulary: List[str] = Field(min_length=1)
    targets: List[str] = Field(min_length=1)
    rules: List[RuleEntry] = Field(default_factory=list)
    base: Dict[str, float] = Field(default_factory=dict)
    horizon: float = Field(gt=0, allow_inf_nan=False)


class PolicyBundle(BaseModel):
    conditional: bool
    params: List[List[float]]


class WeightsBundle(BaseModel):
    rules: List[RuleEntry] = Field(default_factory=list)
    base: Dict[str, float] = Field(default_factory=dict)


class HistoryEntry(BaseModel):
    epoch: int
    step: int
    ema_subtb: Optional[float] = None
    dev_nll: Optional[float] = None
    dev_er: Optional[float] = None
    dev_mr: Optional[float] = None


class ModelCheckpoint(BaseModel):
    """JSON bundle of a trained model."""

    vocabulary: List[PredicateEntry]
    targets: List[int]
    config: TrainConfig
    theta: PolicyBundle
    phi: PolicyBundle
    weights: WeightsBundle
    step: int = 0
    epoch: int = 0
    ema_subtb: Optional[float] = None
    history: List[HistoryEntry] = Field(default_factory=list)
