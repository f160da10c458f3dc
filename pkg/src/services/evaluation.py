"""Prediction, metrics (ER, MR, NLL, ELBO), planted-rule recovery and baselines."""

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from ..schemas.report import BaselineMetrics, MetricsReport, PredictionRow, SeedMetrics
from .checkpoint import TrainedModel
from .errors import EvaluationError
from .events import EventSequence
from .logic_tree import LogicTree, RulePath, enumerate_terminal_trees, paths
from .policy import condition_vector
from .tlpp import log_label_prob, nll, predict_label_dist

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictionRecord:
    """Targets ranked by predicted probability for one sequence."""

    seq_id: Optional[str]
    ranking: Tuple[int, ...]
    scores: Tuple[float, ...]
    label: int

    @property
    def rank(self) -> int:
        return self.ranking.index(self.label) + 1

    @property
    def top1(self) -> int:
        return self.ranking[0]


def rank_targets(scores: np.ndarray, targets: Sequence[int]) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
    """Targets by nonincreasing score; equal scores keep predicate-id order."""
    order = sorted(range(len(targets)), key=lambda i: (-scores[i], targets[i]))
    return tuple(targets[i] for i in order), tuple(float(scores[i]) for i in order)


def sample_forest(model: TrainedModel, X: EventSequence, rng: np.random.Generator) -> List[LogicTree]:
    """One tree per target from theta, with the label slot of the condition left empty."""
    condition = condition_vector(X, None, model.vocabulary.size)
    return [model.theta.sample_tree(k, condition, rng) for k in model.targets]


def predict(X: EventSequence, model: TrainedModel, n_samples: int, rng: np.random.Generator) -> PredictionRecord:
    """Average the label distribution over ``n_samples`` sampled forests and rank the targets."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    targets = model.targets
    transform = model.config.count_transform
    total = np.zeros(len(targets))
    for _ in range(n_samples):
        forest = sample_forest(model, X, rng)
        total += predict_label_dist(X, forest, model.weights, targets, transform)
    ranking, scores = rank_targets(total / n_samples, targets)
    return PredictionRecord(X.seq_id, ranking, scores, X.label)


def error_rate(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise EvaluationError("error rate of an empty record set")
    return float(np.mean([r.top1 != r.label for r in records]))


def mean_rank(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise EvaluationError("mean rank of an empty record set")
    return float(np.mean([r.rank for r in records]))


@dataclass
class EvalResult:
    records: List[PredictionRecord]
    er: float
    mr: float
    nll: float


def evaluate(
    model: TrainedModel, sequences: Sequence[EventSequence], n_samples: int, rng: np.random.Generator
) -> EvalResult:
    """Predictions plus ER, MR and the sampled-explanation NLL E_R[nll(X, w, R)].

    Each sequence draws from its own child generator.

    Raises:
        EvaluationError: With no sequences
    """
    if not sequences:
        raise EvaluationError("no sequences to evaluate")
    targets = model.targets
    transform = model.config.count_transform
    records = []
    nlls = []
    for X, stream in zip(sequences, rng.spawn(len(sequences))):
        total = np.zeros(len(targets))
        seq_nll = 0.0
        for _ in range(n_samples):
            forest = sample_forest(model, X, stream)
            total += predict_label_dist(X, forest, model.weights, targets, transform)
            seq_nll += nll(X, model.weights, forest, targets, transform)
        ranking, scores = rank_targets(total / n_samples, targets)
        records.append(PredictionRecord(X.seq_id, ranking, scores, X.label))
        nlls.append(seq_nll / n_samples)
    return EvalResult(records, error_rate(records), mean_rank(records), float(np.mean(nlls)))


# -- exact inference on enumerable spaces -------------------------------------


def tree_log_joint(X: EventSequence, Y: int, model: TrainedModel, trees: Sequence[LogicTree]) -> np.ndarray:
    """log p(X | R) + log p(Y | X, R) + log p_phi(R) for each tree."""
    targets = model.targets
    transform = model.config.count_transform
    return np.array(
        [
            -nll(X, model.weights, R, targets, transform)
            + log_label_prob(X, R, model.weights, targets, Y, transform)
            + model.phi.tree_logprob(R)
            for R in trees
        ]
    )


def enumerate_for(model: TrainedModel, Y: int) -> List[LogicTree]:
    """Raises SpaceTooLargeError past ``config.enumeration_cap``."""
    return enumerate_terminal_trees(model.space, Y, model.config.enumeration_cap)


def sampler_log_q(X: EventSequence, Y: int, model: TrainedModel, trees: Sequence[LogicTree]) -> np.ndarray:
    """Exact, normalized terminating log-distribution of theta over ``trees``."""
    condition = condition_vector(X, Y, model.vocabulary.size)
    logq = np.array([model.theta.tree_logprob(R, condition) for R in trees])
    return logq - logsumexp(logq)


def log_marginal(X: EventSequence, Y: int, model: TrainedModel) -> float:
    """log sum_R p(X, Y | R) p_phi(R) by enumeration."""
    return float(logsumexp(tree_log_joint(X, Y, model, enumerate_for(model, Y))))


def posterior_log(X: EventSequence, Y: int, model: TrainedModel) -> np.ndarray:
    """Exact log-posterior over ``enumerate_for(model, Y)``."""
    joint = tree_log_joint(X, Y, model, enumerate_for(model, Y))
    return joint - logsumexp(joint)


def elbo(X: EventSequence, Y: int, model: TrainedModel, q_log: Optional[np.ndarray] = None) -> float:
    """sum_R q(R) [log p(X, Y | R) p_phi(R) - log q(R)] over the enumerated space.

    ``q_log`` (aligned with ``enumerate_for(model, Y)``) replaces theta's
    terminating distribution when given.

    Raises:
        SpaceTooLargeError: If the tree space exceeds the enumeration cap
    """
    trees = enumerate_for(model, Y)
    joint = tree_log_joint(X, Y, model, trees)
    if q_log is None:
        q_log = sampler_log_q(X, Y, model, trees)
    q_log = np.asarray(q_log, dtype=np.float64)
    if q_log.shape != joint.shape:
        raise ValueError(f"q_log has {q_log.size} entries for {joint.size} trees")
    q = np.exp(q_log)
    support = q > 0
    return float(np.sum(q[support] * (joint[support] - q_log[support])))


# -- rule recovery -------------------------------------------------------------


def path_frequencies(samples: Sequence[Sequence[LogicTree]]) -> Dict[RulePath, float]:
    """Fraction of samples (each a tree list) that contain each rule path."""
    counts: Counter = Counter()
    for forest in samples:
        counts.update({p for tree in forest for p in paths(tree)})
    n = max(len(samples), 1)
    return {p: c / n for p, c in counts.items()}


def rule_recovery(
    model: TrainedModel,
    planted: Sequence[RulePath],
    k: int,
    sequences: Sequence[EventSequence] = (),
    n_samples: int = 4,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """(precision@k, recall@k) of planted rules among learned paths.

    Learned paths are ranked by |w_f| times their frequency in posterior
    samples of theta over ``sequences`` (frequency 1 without sequences).
    """
    if k <= 0:
        return 0.0, 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    freq: Optional[Dict[RulePath, float]] = None
    if sequences:
        samples = []
        n = model.vocabulary.size
        for X in sequences:
            condition = condition_vector(X, X.label, n)
            samples.extend([model.theta.sample_tree(X.label, condition, rng)] for _ in range(n_samples))
        freq = path_frequencies(samples)
    scored = [
        (abs(w) * (freq.get(p, 0.0) if freq is not None else 1.0), p)
        for p, w in model.weights.weights.items()
    ]
    scored = [(s, p) for s, p in scored if s > 0]
    scored.sort(key=lambda sp: (-sp[0], sp[1]))
    top = {p for _, p in scored[:k]}
    planted_set = {tuple(p) for p in planted}
    hits = len(top & planted_set)
    precision = hits / k
    recall = hits / len(planted_set) if planted_set else 0.0
    return precision, recall


# -- baselines -----------------------------------------------------------------


def uniform_baseline(n_targets: int) -> Dict[str, float]:
    """Expected ER and MR of a uniformly random ranking."""
    return {"er": 1.0 - 1.0 / n_targets, "mr": (n_targets + 1) / 2.0}


def majority_baseline(
    train: Sequence[EventSequence], sequences: Sequence[EventSequence], targets: Sequence[int]
) -> Dict[str, float]:
    """ER and MR of ranking targets by train-label frequency."""
    freq = Counter(s.label for s in train)
    scores = np.array([freq.get(k, 0) for k in targets], dtype=np.float64)
    ranking, ranked_scores = rank_targets(scores, targets)
    records = [PredictionRecord(s.seq_id, ranking, ranked_scores, s.label) for s in sequences]
    return {"er": error_rate(records), "mr": mean_rank(records)}


# -- reports -------------------------------------------------------------------


def build_report(
    model: TrainedModel,
    sequences: Sequence[EventSequence],
    train: Sequence[EventSequence],
    n_samples: int,
    seeds: Sequence[int],
    split: str,
) -> Tuple[MetricsReport, List[PredictionRecord]]:
    """Evaluate under each seed; returns the report and the first seed's records."""
    if not seeds:
        raise EvaluationError("at least one seed is required")
    runs = [(seed, evaluate(model, sequences, n_samples, np.random.default_rng(seed))) for seed in seeds]
    per_seed = [SeedMetrics(seed=s, er=r.er, mr=r.mr, nll=r.nll) for s, r in runs]
    ers = np.array([m.er for m in per_seed])
    mrs = np.array([m.mr for m in per_seed])
    nlls = np.array([m.nll for m in per_seed])
    baselines = {"uniform": BaselineMetrics(**uniform_baseline(len(model.targets)))}
    if train:
        baselines["majority"] = BaselineMetrics(**majority_baseline(train, sequences, model.targets))
    report = MetricsReport(
        split=split,
        n_sequences=len(sequences),
        n_samples=n_samples,
        er=float(ers.mean()),
        mr=float(mrs.mean()),
        nll=float(nlls.mean()),
        er_std=float(ers.std()),
        mr_std=float(mrs.std()),
        nll_std=float(nlls.std()),
        baselines=baselines,
        per_seed=per_seed,
    )
    logger.info(f"Evaluated {len(sequences)} {split} sequences over {len(seeds)} seed(s): ER {report.er:.4f} MR {report.mr:.4f}")
    return report, runs[0][1].records


def prediction_rows(records: Sequence[PredictionRecord], model: TrainedModel) -> List[PredictionRow]:
    name = model.vocabulary.name_of
    return [
        PredictionRow(
            seq_id=r.seq_id,
            label=name(r.label),
            rank=r.rank,
            ranking=[name(k) for k in r.ranking],
            scores=list(r.scores),
        )
        for r in records
    ]


def write_predictions_csv(path, rows: Sequence[PredictionRow]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_id", "label", "rank", "ranking", "scores"])
        for row in rows:
            writer.writerow(
                [row.seq_id, row.label, row.rank, ";".join(row.ranking), ";".join(f"{s:.6g}" for s in row.scores)]
            )
