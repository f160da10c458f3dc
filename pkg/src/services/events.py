"""Event and dataset domain model: vocabulary, sequences, file I/O and splits."""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from ..schemas.dataset import DatasetFile, PredicateRef, SequenceEntry
from .errors import DatasetError
from .utils import write_json_atomic

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MIN_SPLIT_SEQUENCES = 10


@dataclass(frozen=True)
class Predicate:
    id: int
    name: str


@dataclass(frozen=True)
class Vocabulary:
    predicates: Tuple[Predicate, ...]
    targets: Tuple[int, ...]
    _by_name: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.predicates:
            raise ValueError("vocabulary must be nonempty")
        for i, p in enumerate(self.predicates):
            if p.id != i:
                raise ValueError(f"predicate ids must be dense 0..N-1, got {p.id} at position {i}")
            if not p.name:
                raise ValueError(f"predicate {i} has an empty name")
        by_name = {p.name: p.id for p in self.predicates}
        if len(by_name) != len(self.predicates):
            raise ValueError("predicate names must be unique")
        if not self.targets:
            raise ValueError("targets must be nonempty")
        if any(not 0 <= k < len(self.predicates) for k in self.targets):
            raise ValueError(f"targets {self.targets} are not all predicate ids")
        object.__setattr__(self, "_by_name", by_name)
        object.__setattr__(self, "targets", tuple(sorted(set(self.targets))))

    @classmethod
    def from_names(cls, names: Sequence[str], targets: Sequence[str]) -> "Vocabulary":
        predicates = tuple(Predicate(i, n) for i, n in enumerate(names))
        index = {n: i for i, n in enumerate(names)}
        return cls(predicates, tuple(index[t] for t in targets))

    @property
    def size(self) -> int:
        return len(self.predicates)

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.predicates]

    def name_of(self, pid: int) -> str:
        return self.predicates[pid].name

    def id_of(self, name: str) -> int:
        return self._by_name[name]

    def has_name(self, name: str) -> bool:
        return name in self._by_name

    def is_target(self, pid: int) -> bool:
        return pid in self.targets


@dataclass(frozen=True)
class Event:
    time: float
    type_id: int


@dataclass(frozen=True, eq=False)
class EventSequence:
    """Events sorted by time over ``[0, horizon]`` plus the held-out label."""

    times: np.ndarray
    types: np.ndarray
    horizon: float
    label: int
    split: Optional[str] = None
    seq_id: Optional[str] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).copy()
        types = np.asarray(self.types, dtype=np.int64).copy()
        if times.shape != types.shape or times.ndim != 1:
            raise ValueError("times and types must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(times)) and math.isfinite(self.horizon)):
            raise ValueError("event times and horizon must be finite")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if times.size and np.any(np.diff(times) < 0):
            raise ValueError("events must be sorted by time")
        if times.size and times[0] < 0:
            raise ValueError("event times must be nonnegative")
        if times.size and self.horizon < times[-1]:
            raise ValueError("horizon precedes the last event")
        times.setflags(write=False)
        types.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "label", int(self.label))

    @classmethod
    def from_events(
        cls,
        events: Iterable[Event],
        horizon: float,
        label: int,
        split: Optional[str] = None,
        seq_id: Optional[str] = None,
    ) -> "EventSequence":
        ordered = sorted(events, key=lambda e: e.time)
        return cls(
            np.array([e.time for e in ordered], dtype=np.float64),
            np.array([e.type_id for e in ordered], dtype=np.int64),
            horizon,
            label,
            split,
            seq_id,
        )

    @property
    def events(self) -> List[Event]:
        return [Event(float(t), int(k)) for t, k in zip(self.times, self.types)]

    def __len__(self) -> int:
        return int(self.times.size)

    def with_split(self, split: Optional[str]) -> "EventSequence":
        return replace(self, split=split)

    def type_frequencies(self, n_types: int) -> np.ndarray:
        """Per-type event counts normalized by sequence length (zeros when empty)."""
        counts = np.bincount(self.types, minlength=n_types).astype(np.float64)
        return counts / len(self) if len(self) else counts


@dataclass(frozen=True)
class Dataset:
    vocabulary: Vocabulary
    sequences: Tuple[EventSequence, ...]

    def by_split(self, split: str) -> List[EventSequence]:
        return [s for s in self.sequences if s.split == split]

    def split_counts(self) -> Dict[str, int]:
        return {name: len(self.by_split(name)) for name in SPLITS}

    def find(self, seq_id: str) -> EventSequence:
        for s in self.sequences:
            if s.seq_id == seq_id:
                return s
        raise KeyError(seq_id)


def _resolve(vocab: Vocabulary, ref: PredicateRef, location: str) -> int:
    if isinstance(ref, str):
        if not vocab.has_name(ref):
            raise DatasetError("unknown-predicate", f"no predicate named {ref!r}", location)
        return vocab.id_of(ref)
    if not 0 <= ref < vocab.size:
        raise DatasetError("unknown-predicate", f"no predicate with id {ref}", location)
    return ref


def _build_vocabulary(doc: DatasetFile) -> Vocabulary:
    for i, entry in enumerate(doc.vocabulary):
        if entry.id != i:
            raise DatasetError(
                "bad-vocabulary", f"ids must follow file order, found {entry.id}", f"vocabulary[{i}]"
            )
    names = [e.name for e in doc.vocabulary]
    if len(set(names)) != len(names):
        raise DatasetError("bad-vocabulary", "predicate names must be unique", "vocabulary")
    provisional = Vocabulary(tuple(Predicate(i, n) for i, n in enumerate(names)), (0,))
    targets = tuple(
        _resolve(provisional, ref, f"targets[{i}]") for i, ref in enumerate(doc.targets)
    )
    return Vocabulary(provisional.predicates, targets)


def build_sequence(vocab: Vocabulary, entry: SequenceEntry, where: str, source: str = "<string>") -> EventSequence:
    """Validate one sequence entry against ``vocab``.

    Raises:
        DatasetError: On unknown predicates, negative or non-finite times, a
            negative horizon, a non-target label or a horizon before the
            last event
    """
    events = []
    for j, ev in enumerate(entry.events):
        if not math.isfinite(ev.t):
            raise DatasetError("non-finite-time", f"event time {ev.t} is not finite", f"{where}.events[{j}]")
        if ev.t < 0:
            raise DatasetError("negative-time", f"event time {ev.t} < 0", f"{where}.events[{j}]")
        events.append(Event(ev.t, _resolve(vocab, ev.type, f"{where}.events[{j}].type")))
    if not math.isfinite(entry.horizon):
        raise DatasetError("non-finite-time", f"horizon {entry.horizon} is not finite", f"{where}.horizon")
    if entry.horizon < 0:
        raise DatasetError("negative-horizon", f"horizon {entry.horizon} < 0", f"{where}.horizon")
    label = _resolve(vocab, entry.label, f"{where}.label")
    if not vocab.is_target(label):
        raise DatasetError(
            "label-not-target", f"label {vocab.name_of(label)!r} is not a target", f"{where}.label"
        )
    if any(a.time > b.time for a, b in zip(events, events[1:])):
        logger.warning(f"{source}: events of {where} were out of order and have been sorted")
    if events and entry.horizon < max(e.time for e in events):
        raise DatasetError("horizon-before-event", "horizon precedes an event", f"{where}.horizon")
    return EventSequence.from_events(events, entry.horizon, label, entry.split, entry.id)


def parse_dataset(text: str, source: str = "<string>") -> Dataset:
    """Parse and validate a dataset document.

    Args:
        text: JSON document following the dataset schema
        source: Name used in log messages

    Returns:
        Dataset with every type invariant checked

    Raises:
        DatasetError: On malformed JSON or any invariant violation
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError("malformed-json", e.msg, f"offset {e.pos}") from e
    try:
        doc = DatasetFile.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise DatasetError("schema", err["msg"], loc) from e

    vocab = _build_vocabulary(doc)
    sequences = []
    for i, entry in enumerate(doc.sequences):
        if entry.id is None:
            entry = entry.model_copy(update={"id": str(i)})
        sequences.append(build_sequence(vocab, entry, f"sequences[{i}]", source))
    return Dataset(vocab, tuple(sequences))


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset JSON file (UTF-8, one document per file)."""
    path = Path(path)
    dataset = parse_dataset(path.read_text(encoding="utf-8"), source=str(path))
    logger.info(
        f"Loaded {len(dataset.sequences)} sequences over {dataset.vocabulary.size} predicates from {path}"
    )
    return dataset


def dataset_to_dict(dataset: Dataset) -> dict:
    vocab = dataset.vocabulary
    return {
        "vocabulary": [{"id": p.id, "name": p.name} for p in vocab.predicates],
        "targets": list(vocab.targets),
        "sequences": [
            {
                "id": s.seq_id,
                "events": [{"t": float(t), "type": int(k)} for t, k in zip(s.times, s.types)],
                "horizon": s.horizon,
                "label": s.label,
                "split": s.split,
            }
            for s in dataset.sequences
        ],
    }


def save_dataset(dataset: Dataset, path: str | Path):
    write_json_atomic(path, dataset_to_dict(dataset))


def split_dataset(dataset: Dataset, seed: int) -> Dataset:
    """Assign train/dev/test tags 80/10/10 by a seeded permutation.

    Raises:
        DatasetError: With fewer than 10 sequences
    """
    n = len(dataset.sequences)
    if n < MIN_SPLIT_SEQUENCES:
        raise DatasetError(
            "too-few-sequences", f"need at least {MIN_SPLIT_SEQUENCES} sequences, got {n}"
        )
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_dev = int(round(SPLIT_FRACTIONS[1] * n))
    order = np.random.default_rng(seed).permutation(n)
    tags: List[str] = [""] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    sequences = tuple(s.with_split(tag) for s, tag in zip(dataset.sequences, tags))
    return Dataset(dataset.vocabulary, sequences)
