"""Temporal-logic point process.

Each target type k has intensity

    lambda_k(t) = exp(clip(sum_{f: head(f) = k} w_f * phi_f(t) + b_k, -30, 30))

where phi_f(t) counts time-ordered event tuples before t that match the body
of rule path f. With constant base rates every intensity is piecewise constant
between events, so the likelihood integral is a finite sum and sampling is
exact.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import log_softmax

from ..schemas.model import GroundTruthModel
from .errors import DatasetError, SimulationError
from .events import EventSequence, Vocabulary
from .logic_tree import LogicTree, RulePath, paths

logger = logging.getLogger(__name__)

EXPONENT_CLAMP = 30.0
DEFAULT_MAX_EVENTS = 10_000

CountTransform = Literal["identity", "log1p"]
Rules = Union[LogicTree, Sequence[LogicTree], Sequence[RulePath]]


@dataclass
class RuleWeights:
    """Rule weights w_f keyed by rule path and base log-rates b_k keyed by type."""

    weights: Dict[RulePath, float] = field(default_factory=dict)
    base: Dict[int, float] = field(default_factory=dict)

    def weight(self, path: RulePath) -> float:
        return self.weights.get(path, 0.0)

    def base_rate(self, k: int) -> float:
        return self.base.get(k, 0.0)

    def copy(self) -> "RuleWeights":
        return RuleWeights(dict(self.weights), dict(self.base))

    def ensure(self, rule_paths: Iterable[RulePath]):
        """Create missing weights at 0 (intensity-neutral)."""
        for p in rule_paths:
            self.weights.setdefault(p, 0.0)

    def add_scaled(self, other: "RuleWeights", scale: float):
        for p, g in other.weights.items():
            self.weights[p] = self.weights.get(p, 0.0) + scale * g
        for k, g in other.base.items():
            self.base[k] = self.base.get(k, 0.0) + scale * g


def rule_paths(rules: Rules) -> List[RulePath]:
    """Distinct rule paths from a tree, a forest of trees, or a path list."""
    if isinstance(rules, LogicTree):
        return paths(rules)
    out: List[RulePath] = []
    for item in rules:
        out.extend(paths(item) if isinstance(item, LogicTree) else [tuple(item)])
    return list(dict.fromkeys(out))


class ChainCounter:
    """Incremental count of time-ordered tuples matching a rule body.

    For path (z_0, z_1, ..., z_j) the body is matched in time order
    z_j, z_{j-1}, ..., z_1. ``counts[i]`` holds the number of chains matching
    the first i+1 body predicates; events fed in one ``advance`` call share a
    timestamp and cannot chain with each other.
    """

    def __init__(self, path: RulePath):
        self.order = tuple(reversed(path[1:]))
        self.counts = [0] * len(self.order)

    @property
    def value(self) -> int:
        return self.counts[-1] if self.counts else 1

    def advance(self, types: Iterable[int]):
        inc = [0] * len(self.order)
        for x in types:
            for i, z in enumerate(self.order):
                if z == x:
                    inc[i] += 1 if i == 0 else self.counts[i - 1]
        for i, v in enumerate(inc):
            self.counts[i] += v


def _time_groups(history: EventSequence) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Distinct event times and the types occurring at each."""
    if len(history) == 0:
        return np.empty(0), []
    uniq, idx = np.unique(history.times, return_inverse=True)
    groups = [history.types[idx == g] for g in range(uniq.size)]
    return uniq, groups


def logic_feature(path: RulePath, history: EventSequence, t: float) -> int:
    """Number of strictly time-increasing tuples before ``t`` matching the body of ``path``."""
    counter = ChainCounter(path)
    uniq, groups = _time_groups(history)
    for u, g in zip(uniq, groups):
        if u >= t:
            break
        counter.advance(g.tolist())
    return counter.value


def transform_counts(counts: np.ndarray, transform: CountTransform = "identity") -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return np.log1p(counts) if transform == "log1p" else counts


@dataclass
class _Segments:
    """Piecewise-constant view of a history on [0, horizon].

    Segment 0 is [0, u_0); segment g+1 is [u_g, u_{g+1}) with the horizon
    closing the last one. ``event_segment[j]`` is the segment just before
    event j, i.e. where lambda(t_j-) is read.
    """

    lengths: np.ndarray
    phi: np.ndarray
    event_segment: np.ndarray
    horizon_segment: int


def _segments(history: EventSequence, rule_list: Sequence[RulePath], transform: CountTransform) -> _Segments:
    uniq, groups = _time_groups(history)
    bounds = np.concatenate([[0.0], uniq, [history.horizon]])
    lengths = np.diff(bounds)
    raw = np.zeros((uniq.size + 1, len(rule_list)), dtype=np.float64)
    for f, path in enumerate(rule_list):
        counter = ChainCounter(path)
        for g, types in enumerate(groups):
            counter.advance(types.tolist())
            raw[g + 1, f] = counter.value
    event_segment = np.searchsorted(uniq, history.times) if len(history) else np.empty(0, dtype=int)
    horizon_segment = int(np.searchsorted(uniq, history.horizon, side="left"))
    return _Segments(lengths, transform_counts(raw, transform), event_segment, horizon_segment)


def _exponents(
    phi: np.ndarray, rule_list: Sequence[RulePath], w: RuleWeights, targets: Sequence[int]
) -> np.ndarray:
    """Unclamped exponents, one column per target, one row per feature row."""
    col = {k: i for i, k in enumerate(targets)}
    expo = np.tile(np.array([w.base_rate(k) for k in targets], dtype=np.float64), (phi.shape[0], 1))
    for f, path in enumerate(rule_list):
        if path[0] in col:
            expo[:, col[path[0]]] += w.weight(path) * phi[:, f]
    return expo


def _clamp(expo: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(expo, -EXPONENT_CLAMP, EXPONENT_CLAMP)
    active = (expo > -EXPONENT_CLAMP) & (expo < EXPONENT_CLAMP)
    return clamped, active


def intensity(
    k: int,
    t: float,
    w: RuleWeights,
    rules: Rules,
    history: EventSequence,
    transform: CountTransform = "identity",
) -> float:
    """lambda_k(t), using events strictly before ``t``."""
    expo = w.base_rate(k)
    for path in rule_paths(rules):
        if path[0] == k:
            phi = transform_counts(logic_feature(path, history, t), transform)
            expo += w.weight(path) * float(phi)
    return float(np.exp(np.clip(expo, -EXPONENT_CLAMP, EXPONENT_CLAMP)))


def _target_columns(history: EventSequence, targets: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """(event indices whose type is a target, matching target columns)."""
    col = {k: i for i, k in enumerate(targets)}
    idx = [j for j, k in enumerate(history.types.tolist()) if k in col]
    cols = [col[int(history.types[j])] for j in idx]
    return np.array(idx, dtype=int), np.array(cols, dtype=int)


def nll(
    history: EventSequence,
    w: RuleWeights,
    rules: Rules,
    targets: Sequence[int],
    transform: CountTransform = "identity",
) -> float:
    """Negative log-likelihood of the target events of ``history`` on [0, horizon].

    Non-target events enter only through the logic features.
    """
    rule_list = rule_paths(rules)
    seg = _segments(history, rule_list, transform)
    clamped, _ = _clamp(_exponents(seg.phi, rule_list, w, targets))
    integral = float(np.sum(np.exp(clamped) * seg.lengths[:, None]))
    idx, cols = _target_columns(history, targets)
    log_terms = float(np.sum(clamped[seg.event_segment[idx], cols])) if idx.size else 0.0
    return integral - log_terms


def grad_nll_w(
    history: EventSequence,
    w: RuleWeights,
    rules: Rules,
    targets: Sequence[int],
    transform: CountTransform = "identity",
) -> RuleWeights:
    """Gradient of ``nll`` with respect to every rule weight in ``rules`` and every target base rate.

    Segments whose exponent sits on the clamp contribute zero gradient.
    """
    rule_list = rule_paths(rules)
    seg = _segments(history, rule_list, transform)
    clamped, active = _clamp(_exponents(seg.phi, rule_list, w, targets))
    # d(integral)/d(exponent) per segment and target
    d_int = np.exp(clamped) * seg.lengths[:, None] * active
    d_log = np.zeros_like(d_int)
    idx, cols = _target_columns(history, targets)
    if idx.size:
        rows = seg.event_segment[idx]
        np.add.at(d_log, (rows, cols), active[rows, cols].astype(np.float64))
    d_expo = d_int - d_log

    col = {k: i for i, k in enumerate(targets)}
    grad = RuleWeights(base={k: float(d_expo[:, col[k]].sum()) for k in targets})
    for f, path in enumerate(rule_list):
        grad.weights[path] = float(seg.phi[:, f] @ d_expo[:, col[path[0]]]) if path[0] in col else 0.0
    return grad


def _horizon_exponents(
    history: EventSequence,
    w: RuleWeights,
    rule_list: Sequence[RulePath],
    targets: Sequence[int],
    transform: CountTransform,
) -> Tuple[np.ndarray, np.ndarray]:
    seg = _segments(history, rule_list, transform)
    phi_T = seg.phi[seg.horizon_segment]
    expo = _exponents(phi_T[None, :], rule_list, w, targets)[0]
    return expo, phi_T


def predict_label_dist(
    history: EventSequence,
    rules: Rules,
    w: RuleWeights,
    targets: Sequence[int],
    transform: CountTransform = "identity",
) -> np.ndarray:
    """p(Y = k) proportional to lambda_k at the horizon (left limit), in ``targets`` order."""
    expo, _ = _horizon_exponents(history, w, rule_paths(rules), targets, transform)
    clamped, _ = _clamp(expo)
    return np.exp(log_softmax(clamped))


def log_label_prob(
    history: EventSequence,
    rules: Rules,
    w: RuleWeights,
    targets: Sequence[int],
    label: int,
    transform: CountTransform = "identity",
) -> float:
    expo, _ = _horizon_exponents(history, w, rule_paths(rules), targets, transform)
    clamped, _ = _clamp(expo)
    return float(log_softmax(clamped)[list(targets).index(label)])


def grad_log_label_prob(
    history: EventSequence,
    rules: Rules,
    w: RuleWeights,
    targets: Sequence[int],
    label: int,
    transform: CountTransform = "identity",
) -> RuleWeights:
    """Gradient of ``log_label_prob`` with respect to rule weights and base rates."""
    rule_list = rule_paths(rules)
    expo, phi_T = _horizon_exponents(history, w, rule_list, targets, transform)
    clamped, active = _clamp(expo)
    probs = np.exp(log_softmax(clamped))
    onehot = np.array([1.0 if k == label else 0.0 for k in targets])
    d_expo = (onehot - probs) * active
    col = {k: i for i, k in enumerate(targets)}
    grad = RuleWeights(base={k: float(d_expo[col[k]]) for k in targets})
    for f, path in enumerate(rule_list):
        grad.weights[path] = float(phi_T[f] * d_expo[col[path[0]]]) if path[0] in col else 0.0
    return grad


class _RateState:
    """Intensities of every simulated type given the events emitted so far."""

    def __init__(self, rule_list: Sequence[RulePath], w: RuleWeights, types: Sequence[int], transform: CountTransform):
        self.types = list(types)
        self.transform = transform
        self.counters = [ChainCounter(p) for p in rule_list]
        pos = {k: i for i, k in enumerate(self.types)}
        self.terms = [(pos[p[0]], w.weight(p)) if p[0] in pos else (None, 0.0) for p in rule_list]

    def exponents(self, base: np.ndarray) -> np.ndarray:
        expo = np.array(base, dtype=np.float64)
        for counter, (i, weight) in zip(self.counters, self.terms):
            if i is not None and weight != 0.0:
                expo[i] += weight * float(transform_counts(counter.value, self.transform))
        return expo

    def rates(self, base: np.ndarray) -> np.ndarray:
        return np.exp(np.clip(self.exponents(base), -EXPONENT_CLAMP, EXPONENT_CLAMP))

    def emit(self, k: int):
        for counter in self.counters:
            counter.advance([k])


def _simulated_types(w: RuleWeights, vocab: Vocabulary) -> List[int]:
    return sorted(set(vocab.targets) | {k for k in w.base if 0 <= k < vocab.size})


def _as_sequence(times: List[float], types: List[int], horizon: float, vocab: Vocabulary) -> EventSequence:
    target_events = [k for k in types if vocab.is_target(k)]
    label = target_events[-1] if target_events else vocab.targets[0]
    return EventSequence(np.array(times), np.array(types, dtype=np.int64), horizon, label)


def simulate(
    w: RuleWeights,
    rules: Rules,
    vocab: Vocabulary,
    T: float,
    rng: np.random.Generator,
    max_events: int = DEFAULT_MAX_EVENTS,
    transform: CountTransform = "identity",
) -> EventSequence:
    """Draw one sequence on [0, T] by competing exponentials.

    Every target type, and every type with an entry in ``w.base``, emits
    events. The returned label is the type of the last target event (the
    first target when there is none).

    Raises:
        SimulationError: When more than ``max_events`` events are generated
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    types = _simulated_types(w, vocab)
    base = np.array([w.base_rate(k) for k in types])
    state = _RateState(rule_paths(rules), w, types, transform)
    t = 0.0
    times: List[float] = []
    kinds: List[int] = []
    while True:
        rates = state.rates(base)
        total = rates.sum()
        t += rng.exponential(1.0 / total)
        if t > T:
            break
        k = types[rng.choice(len(types), p=rates / total)]
        times.append(t)
        kinds.append(k)
        state.emit(k)
        if len(times) > max_events:
            raise SimulationError(f"simulation exceeded {max_events} events before T={T}")
    return _as_sequence(times, kinds, T, vocab)


def simulate_thinning(
    w: RuleWeights,
    rules: Rules,
    vocab: Vocabulary,
    T: float,
    rng: np.random.Generator,
    base_fn: Callable[[float], Dict[int, float]],
    rate_bound: float,
    max_events: int = DEFAULT_MAX_EVENTS,
    transform: CountTransform = "identity",
) -> EventSequence:
    """Ogata thinning for time-varying base log-rates ``base_fn(t)``.

    ``rate_bound`` must dominate the total intensity over the whole run.

    Raises:
        SimulationError: If the total intensity exceeds ``rate_bound`` or the
            event cap is hit
    """
    if T <= 0 or rate_bound <= 0:
        raise ValueError("horizon and rate bound must be positive")
    types = _simulated_types(w, vocab)
    state = _RateState(rule_paths(rules), w, types, transform)
    t = 0.0
    times: List[float] = []
    kinds: List[int] = []
    while True:
        t += rng.exponential(1.0 / rate_bound)
        if t > T:
            break
        b = base_fn(t)
        rates = state.rates(np.array([b.get(k, 0.0) for k in types]))
        total = rates.sum()
        if total > rate_bound * (1 + 1e-12):
            raise SimulationError(f"total intensity {total:.4g} exceeds bound {rate_bound:.4g} at t={t:.4g}")
        if rng.uniform() * rate_bound <= total:
            k = types[rng.choice(len(types), p=rates / total)]
            times.append(t)
            kinds.append(k)
            state.emit(k)
            if len(times) > max_events:
                raise SimulationError(f"simulation exceeded {max_events} events before T={T}")
    return _as_sequence(times, kinds, T, vocab)


@dataclass
class GroundTruth:
    vocabulary: Vocabulary
    rules: List[RulePath]
    weights: RuleWeights
    horizon: float


def ground_truth_from_schema(doc: GroundTruthModel) -> GroundTruth:
    """Resolve predicate names of a ground-truth model file.

    Raises:
        DatasetError: If a name is not in the vocabulary
    """
    known = set(doc.vocabulary)
    for where, name in (
        [("targets", n) for n in doc.targets]
        + [("base", n) for n in doc.base]
        + [(f"rules[{i}]", n) for i, r in enumerate(doc.rules) for n in r.path]
    ):
        if name not in known:
            raise DatasetError("unknown-predicate", f"no predicate named {name!r}", where)
    vocab = Vocabulary.from_names(doc.vocabulary, doc.targets)
    weights = RuleWeights(base={vocab.id_of(n): b for n, b in doc.base.items()})
    rules = []
    for rule in doc.rules:
        path = tuple(vocab.id_of(n) for n in rule.path)
        rules.append(path)
        weights.weights[path] = rule.weight
    return GroundTruth(vocab, rules, weights, doc.horizon)


def load_ground_truth(path: str | Path) -> GroundTruth:
    """Load a ground-truth model file.

    Raises:
        DatasetError: On malformed JSON, a schema violation or an unknown predicate
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError("malformed-json", e.msg, f"offset {e.pos}") from e
    try:
        doc = GroundTruthModel.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise DatasetError("schema", err["msg"], loc) from e
    return ground_truth_from_schema(doc)
