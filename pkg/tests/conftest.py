import json

import numpy as np
import pytest

from src.schemas.config import TrainConfig
from src.services.checkpoint import TrainedModel
from src.services.events import Event, EventSequence, Vocabulary
from src.services.logic_tree import TreeSpace


@pytest.fixture
def abc_vocab() -> Vocabulary:
    """A, B, C with A as the only target."""
    return Vocabulary.from_names(["A", "B", "C"], ["A"])


@pytest.fixture
def make_seq():
    """Build an EventSequence from (time, type) pairs."""

    def build(pairs, horizon, label=0, seq_id=None):
        return EventSequence.from_events([Event(t, k) for t, k in pairs], horizon, label, seq_id=seq_id)

    return build


@pytest.fixture
def small_space(abc_vocab) -> TreeSpace:
    return TreeSpace(abc_vocab, max_depth=2, max_width=2)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        epochs=1,
        batch_size=2,
        d=1,
        W=2,
        m_step_samples=2,
        eval_samples=2,
        init_stop_bias=0.0,
    )


@pytest.fixture
def untrained_model(abc_vocab, tiny_config) -> TrainedModel:
    return TrainedModel.initialize(abc_vocab, tiny_config)


@pytest.fixture
def dataset_doc():
    """Dataset document with 12 sequences over {A, B, C}, targets {A, C}."""
    rng = np.random.default_rng(7)
    sequences = []
    for i in range(12):
        n = int(rng.integers(0, 6))
        times = np.sort(rng.uniform(0, 5, size=n))
        types = rng.choice(["A", "B", "C"], size=n)
        sequences.append(
            {
                "id": f"q{i}",
                "events": [{"t": float(t), "type": str(k)} for t, k in zip(times, types)],
                "horizon": 5.0,
                "label": "A" if i % 3 else "C",
            }
        )
    return {
        "vocabulary": [{"id": 0, "name": "A"}, {"id": 1, "name": "B"}, {"id": 2, "name": "C"}],
        "targets": ["A", "C"],
        "sequences": sequences,
    }


@pytest.fixture
def dataset_file(tmp_path, dataset_doc):
    path = tmp_path / "data.json"
    path.write_text(json.dumps(dataset_doc), encoding="utf-8")
    return path
