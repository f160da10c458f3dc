import logging
import os
from typing import Optional

import numpy as np
from fastapi import Depends, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from .schemas.api import PredictRequest, PredictResponse, RankedTarget, SampleRequest, SampleResponse
from .schemas.dataset import SequenceEntry
from .schemas.status import StatusResponse
from .services.checkpoint import TrainedModel
from .services.errors import DatasetError, LogicTreeError
from .services.evaluation import predict
from .services.events import EventSequence, build_sequence
from .services.export import sample_explanations, to_dot, to_json
from .services.utils import configure_logging

VERSION = "0.1.0"

logger = logging.getLogger(__name__)

app = FastAPI(title="event-logic-trees")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

_model: Optional[TrainedModel] = None


def get_model() -> TrainedModel:
    """Checkpoint named by ``MODEL_CHECKPOINT``, loaded once per process."""
    global _model
    if _model is None:
        path = os.environ.get("MODEL_CHECKPOINT")
        if not path:
            raise HTTPException(status_code=503, detail="MODEL_CHECKPOINT is not set")
        try:
            _model = TrainedModel.load(path)
        except (OSError, LogicTreeError) as e:
            logger.error(f"Error loading checkpoint {path}: {str(e)}", exc_info=True)
            raise HTTPException(status_code=503, detail=f"Error loading checkpoint: {str(e)}")
        logger.info(f"Loaded checkpoint {path} at step {_model.step}")
    return _model


def _sequence(model: TrainedModel, request, label) -> EventSequence:
    # Prediction never reads the label; any target keeps the sequence valid.
    entry = SequenceEntry(events=request.events, horizon=request.horizon, label=label)
    return build_sequence(model.vocabulary, entry, "request")


@app.on_event("startup")
async def startup_event():
    configure_logging(os.environ.get("LOG_DIR", "logs"))
    logger.info("Starting up application")


@app.on_event("shutdown")
async def shutdown_event():
    logger.info("Shutting down application")


@app.get("/status", response_model=StatusResponse)
async def get_status() -> StatusResponse:
    """Get service status."""
    if _model is None:
        return StatusResponse(status="OK", version=VERSION, checkpoint=os.environ.get("MODEL_CHECKPOINT"))
    return StatusResponse(
        status="OK",
        version=VERSION,
        checkpoint=os.environ.get("MODEL_CHECKPOINT"),
        step=_model.step,
        n_predicates=_model.vocabulary.size,
    )


@app.post("/predict", response_model=PredictResponse)
def post_predict(request: PredictRequest, model: TrainedModel = Depends(get_model)) -> PredictResponse:
    """Rank the target predicates for an event history."""
    try:
        logger.info(f"Predicting for {len(request.events)} events (n_samples={request.n_samples})")
        X = _sequence(model, request, model.targets[0])
        record = predict(X, model, request.n_samples, np.random.default_rng(request.seed))
        return PredictResponse(
            ranking=[
                RankedTarget(name=model.vocabulary.name_of(k), score=s)
                for k, s in zip(record.ranking, record.scores)
            ]
        )
    except DatasetError as e:
        logger.warning(f"Rejected prediction request: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error predicting: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Error predicting: {str(e)}")


@app.post("/sample", response_model=SampleResponse)
def post_sample(request: SampleRequest, model: TrainedModel = Depends(get_model)) -> SampleResponse:
    """Sample explanation trees for an event history."""
    try:
        logger.info(f"Sampling {request.n} trees for {len(request.events)} events")
        X = _sequence(model, request, request.label if request.label is not None else model.targets[0])
        label = X.label if request.label is not None else None
        samples = sample_explanations(model, X, request.n, np.random.default_rng(request.seed), label=label)
        if request.format == "dot":
            return SampleResponse(dot=to_dot(samples, model.vocabulary, model.weights).to_string())
        return SampleResponse(trees=to_json(samples, model.vocabulary, model.weights))
    except DatasetError as e:
        logger.warning(f"Rejected sampling request: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Error sampling trees: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Error sampling trees: {str(e)}")
