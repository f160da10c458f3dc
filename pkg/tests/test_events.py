import json
import logging

import numpy as np
import pytest

from src.services.errors import DatasetError
from src.services.events import (
    Dataset,
    EventSequence,
    Vocabulary,
    load_dataset,
    parse_dataset,
    save_dataset,
    split_dataset,
)


def _doc(events, label="A", horizon=1.0, targets=("A",)):
    return json.dumps(
        {
            "vocabulary": [{"id": 0, "name": "A"}, {"id": 1, "name": "B"}, {"id": 2, "name": "C"}],
            "targets": list(targets),
            "sequences": [{"events": events, "horizon": horizon, "label": label}],
        }
    )


def test_load_single_sequence(tmp_path):
    path = tmp_path / "one.json"
    path.write_text(_doc([{"t": 0.2, "type": "B"}, {"t": 0.5, "type": "C"}]), encoding="utf-8")
    dataset = load_dataset(path)
    assert dataset.vocabulary.size == 3
    assert len(dataset.sequences) == 1
    seq = dataset.sequences[0]
    np.testing.assert_array_equal(seq.times, [0.2, 0.5])
    np.testing.assert_array_equal(seq.types, [1, 2])
    assert seq.horizon == 1.0
    assert seq.label == 0
    assert seq.seq_id == "0"


def test_ids_and_names_both_resolve():
    dataset = parse_dataset(_doc([{"t": 0.1, "type": 1}, {"t": 0.3, "type": "C"}], label=0, targets=(0,)))
    np.testing.assert_array_equal(dataset.sequences[0].types, [1, 2])


def test_out_of_order_events_are_sorted_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        dataset = parse_dataset(_doc([{"t": 0.5, "type": "C"}, {"t": 0.2, "type": "B"}]))
    seq = dataset.sequences[0]
    np.testing.assert_array_equal(seq.times, [0.2, 0.5])
    np.testing.assert_array_equal(seq.types, [1, 2])
    assert "out of order" in caplog.text


def test_label_not_target():
    with pytest.raises(DatasetError) as err:
        parse_dataset(_doc([], label="B"))
    assert err.value.code == "label-not-target"
    assert err.value.location == "sequences[0].label"


@pytest.mark.parametrize(
    "events, code",
    [
        ([{"t": 0.1, "type": "Z"}], "unknown-predicate"),
        ([{"t": 0.1, "type": 9}], "unknown-predicate"),
        ([{"t": -0.1, "type": "B"}], "negative-time"),
        ([{"t": 3.0, "type": "B"}], "horizon-before-event"),
    ],
)
def test_invalid_events(events, code):
    with pytest.raises(DatasetError) as err:
        parse_dataset(_doc(events))
    assert err.value.code == code
    assert err.value.location.startswith("sequences[0]")


@pytest.mark.parametrize(
    "events, horizon, code, location",
    [
        ([], -5.0, "negative-horizon", "sequences[0].horizon"),
        ([], float("nan"), "non-finite-time", "sequences[0].horizon"),
        ([{"t": 0.2, "type": "B"}], float("inf"), "non-finite-time", "sequences[0].horizon"),
        ([{"t": float("nan"), "type": "B"}], 1.0, "non-finite-time", "sequences[0].events[0]"),
        ([{"t": 0.1, "type": "C"}, {"t": float("-inf"), "type": "B"}], 1.0, "non-finite-time", "sequences[0].events[1]"),
    ],
)
def test_invalid_times(events, horizon, code, location):
    with pytest.raises(DatasetError) as err:
        parse_dataset(_doc(events, horizon=horizon))
    assert err.value.code == code
    assert err.value.location == location


@pytest.mark.parametrize(
    "times, horizon",
    [([], -1.0), ([0.1, np.nan], 1.0), ([0.1], np.inf)],
)
def test_sequence_rejects_bad_times(times, horizon):
    with pytest.raises(ValueError):
        EventSequence(np.array(times), np.zeros(len(times), dtype=np.int64), horizon, 0)


def test_malformed_json_reports_offset():
    with pytest.raises(DatasetError) as err:
        parse_dataset('{"vocabulary": [')
    assert err.value.code == "malformed-json"
    assert err.value.location.startswith("offset ")


def test_schema_violation():
    with pytest.raises(DatasetError) as err:
        parse_dataset(json.dumps({"vocabulary": [], "targets": ["A"], "sequences": []}))
    assert err.value.code == "schema"


def test_duplicate_names_rejected():
    doc = {
        "vocabulary": [{"id": 0, "name": "A"}, {"id": 1, "name": "A"}],
        "targets": [0],
        "sequences": [],
    }
    with pytest.raises(DatasetError) as err:
        parse_dataset(json.dumps(doc))
    assert err.value.code == "bad-vocabulary"


def test_empty_sequence_is_legal():
    seq = parse_dataset(_doc([])).sequences[0]
    assert len(seq) == 0
    np.testing.assert_array_equal(seq.type_frequencies(3), [0.0, 0.0, 0.0])


def test_save_load_roundtrip(tmp_path, dataset_file):
    original = load_dataset(dataset_file)
    out = tmp_path / "copy.json"
    save_dataset(original, out)
    again = load_dataset(out)
    assert again.vocabulary == original.vocabulary
    assert len(again.sequences) == len(original.sequences)
    for a, b in zip(original.sequences, again.sequences):
        np.testing.assert_allclose(a.times, b.times, rtol=1e-12)
        np.testing.assert_array_equal(a.types, b.types)
        assert (a.horizon, a.label, a.split, a.seq_id) == (b.horizon, b.label, b.split, b.seq_id)


def _n_sequences(n: int) -> Dataset:
    vocab = Vocabulary.from_names(["A", "B"], ["A"])
    doc = {
        "vocabulary": [{"id": 0, "name": "A"}, {"id": 1, "name": "B"}],
        "targets": ["A"],
        "sequences": [{"events": [], "horizon": 1.0, "label": "A"} for _ in range(n)],
    }
    dataset = parse_dataset(json.dumps(doc))
    assert dataset.vocabulary == vocab
    return dataset


def test_split_ten_sequences():
    counts = split_dataset(_n_sequences(10), seed=0).split_counts()
    assert counts == {"train": 8, "dev": 1, "test": 1}


def test_split_hundred_sequences():
    counts = split_dataset(_n_sequences(100), seed=3).split_counts()
    assert counts == {"train": 80, "dev": 10, "test": 10}


def test_split_is_deterministic():
    dataset = _n_sequences(37)
    first = [s.split for s in split_dataset(dataset, seed=11).sequences]
    second = [s.split for s in split_dataset(dataset, seed=11).sequences]
    other = [s.split for s in split_dataset(dataset, seed=12).sequences]
    assert first == second
    assert first != other
    assert all(s.split is None for s in dataset.sequences)


def test_split_needs_ten_sequences():
    with pytest.raises(DatasetError) as err:
        split_dataset(_n_sequences(9), seed=0)
    assert err.value.code == "too-few-sequences"
