from typing import List, Literal, Optional, Union

from pydantic import BaseModel, Field, StrictInt, StrictStr

# Predicates may be referenced by id or by name in files.
PredicateRef = Union[StrictInt, StrictStr]

SplitTag = Literal["train", "dev", "test"]


class PredicateEntry(BaseModel):
    id: StrictInt
    name: str = Field(min_length=1)


class EventEntry(BaseModel):
    t: float
    type: PredicateRef


class SequenceEntry(BaseModel):
    id: Optional[str] = None
    events: List[EventEntry] = Field(default_factory=list)
    horizon: float
    label: PredicateRef
    split: Optional[SplitTag] = None


class DatasetFile(BaseModel):
    vocabulary: List[PredicateEntry] = Field(min_length=1)
    targets: List[PredicateRef] = Field(min_length=1)
    sequences: List[SequenceEntry] = Field(default_factory=list)
