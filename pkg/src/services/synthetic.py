"""Synthetic datasets drawn from a ground-truth logic point process."""

import logging
from typing import List, Optional

import numpy as np

from .errors import SimulationError
from .events import Dataset, EventSequence, Vocabulary
from .tlpp import DEFAULT_MAX_EVENTS, GroundTruth, simulate

logger = logging.getLogger(__name__)

# Draws per requested sequence before giving up on finding target events.
MAX_ATTEMPTS_PER_SEQUENCE = 20


def holdout_last_target(seq: EventSequence, vocab: Vocabulary, seq_id: Optional[str] = None) -> Optional[EventSequence]:
    """Turn a simulated run into a labelled example.

    The label is the last target-type event; the history keeps the events
    strictly before it and the horizon is its time. Returns None when the run
    has no target event.
    """
    is_target = np.array([vocab.is_target(int(k)) for k in seq.types], dtype=bool)
    if not is_target.any():
        return None
    j = int(np.flatnonzero(is_target)[-1])
    t_label = float(seq.times[j])
    keep = seq.times < t_label
    return EventSequence(seq.times[keep], seq.types[keep], t_label, int(seq.types[j]), seq_id=seq_id)


def generate_dataset(
    truth: GroundTruth,
    n_sequences: int,
    rng: np.random.Generator,
    horizon: Optional[float] = None,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> Dataset:
    """Simulate until ``n_sequences`` labelled sequences are collected.

    Runs without any target event are discarded.

    Raises:
        SimulationError: When a run exceeds ``max_events`` or too many runs
            contain no target event
    """
    T = horizon if horizon is not None else truth.horizon
    vocab = truth.vocabulary
    sequences: List[EventSequence] = []
    dropped = 0
    while len(sequences) < n_sequences:
        if dropped > MAX_ATTEMPTS_PER_SEQUENCE * max(n_sequences, 1):
            raise SimulationError(f"gave up after {dropped} runs without a target event; raise the horizon or target rates")
        run = simulate(truth.weights, truth.rules, vocab, T, rng, max_events)
        labelled = holdout_last_target(run, vocab, seq_id=f"s{len(sequences)}")
        if labelled is None:
            dropped += 1
            continue
        sequences.append(labelled)
    if dropped:
        logger.warning(f"Discarded {dropped} simulated runs without a target event")
    if sequences:
        mean_len = float(np.mean([len(s) for s in sequences]))
        logger.info(f"Generated {len(sequences)} sequences, mean length {mean_len:.2f}")
    return Dataset(vocab, tuple(sequences))
