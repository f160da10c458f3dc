from typing import Optional

from pydantic import BaseModel


class StatusResponse(BaseModel):
    status: str
    version: str
    checkpoint: Optional[str] = None
    step: Optional[int] = None
    n_predicates: Optional[int] = None
