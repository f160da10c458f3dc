from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from .dataset import EventEntry, PredicateRef


class PredictRequest(BaseModel):
    events: List[EventEntry] = Field(default_factory=list)
    horizon: float
    n_samples: int = Field(default=8, ge=1, le=1000)
    seed: int = 0


class RankedTarget(BaseModel):
    name: str
    score: float


class PredictResponse(BaseModel):
    ranking: List[RankedTarget]


class SampleRequest(BaseModel):
    events: List[EventEntry] = Field(default_factory=list)
    horizon: float
    # Root every sample at this target; a forest over all targets when omitted.
    label: Optional[PredicateRef] = None
    n: int = Field(default=10, ge=1, le=1000)
    seed: int = 0
    format: Literal["json", "dot"] = "json"


class SampleResponse(BaseModel):
    trees: Optional[Dict[str, Any]] = None
    dot: Optional[str] = None
