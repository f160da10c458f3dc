from pathlib import Path

import numpy as np
import pytest

from src.services.errors import SimulationError
from src.services.events import Vocabulary
from src.services.synthetic import generate_dataset, holdout_last_target
from src.services.tlpp import GroundTruth, RuleWeights, load_ground_truth

A, B, C = 0, 1, 2
SYNTHETIC5 = Path(__file__).resolve().parent.parent / "configs" / "synthetic5.json"


def test_holdout_keeps_events_before_last_target(make_seq):
    vocab = Vocabulary.from_names(["A", "B", "C"], ["A", "C"])
    run = make_seq([(0.1, B), (0.4, A), (0.6, B), (0.9, C), (1.2, B)], 2.0)
    labelled = holdout_last_target(run, vocab, seq_id="r")
    assert labelled.label == C
    assert labelled.horizon == 0.9
    np.testing.assert_array_equal(labelled.types, [B, A, B])
    assert labelled.seq_id == "r"


def test_holdout_without_target(make_seq):
    vocab = Vocabulary.from_names(["A", "B"], ["A"])
    assert holdout_last_target(make_seq([(0.1, B)], 1.0), vocab) is None


def test_synthetic5_sequence_lengths():
    truth = load_ground_truth(SYNTHETIC5)
    assert truth.vocabulary.size == 5
    dataset = generate_dataset(truth, 200, np.random.default_rng(0))
    assert len(dataset.sequences) == 200
    assert 20 <= np.mean([len(s) for s in dataset.sequences]) <= 45
    assert all(truth.vocabulary.is_target(s.label) for s in dataset.sequences)
    assert [s.seq_id for s in dataset.sequences[:3]] == ["s0", "s1", "s2"]


def test_generation_is_deterministic():
    truth = load_ground_truth(SYNTHETIC5)
    first = generate_dataset(truth, 20, np.random.default_rng(3))
    second = generate_dataset(truth, 20, np.random.default_rng(3))
    for a, b in zip(first.sequences, second.sequences):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.types, b.types)
        assert a.label == b.label


def test_zero_sequences():
    truth = load_ground_truth(SYNTHETIC5)
    assert generate_dataset(truth, 0, np.random.default_rng(0)).sequences == ()


def test_gives_up_without_target_events():
    vocab = Vocabulary.from_names(["A", "B"], ["A"])
    truth = GroundTruth(vocab, [], RuleWeights(base={A: -30.0, B: 0.0}), horizon=1.0)
    with pytest.raises(SimulationError, match="without a target event"):
        generate_dataset(truth, 2, np.random.default_rng(0))
