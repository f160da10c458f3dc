"""Export sampled logic trees as DOT graphs and JSON documents."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pydot

from .checkpoint import TrainedModel
from .evaluation import path_frequencies, sample_forest
from .events import EventSequence, Vocabulary
from .logic_tree import LogicTree, RulePath, paths
from .policy import condition_vector
from .tlpp import RuleWeights
from .utils import write_json_atomic

logger = logging.getLogger(__name__)

POSITIVE_COLOR = "#1f77b4"
NEGATIVE_COLOR = "#d62728"


def sample_explanations(
    model: TrainedModel,
    X: EventSequence,
    n: int,
    rng: np.random.Generator,
    label: Optional[int] = None,
) -> List[List[LogicTree]]:
    """``n`` samples from theta for ``X``: a single tree rooted at ``label`` when given, a forest otherwise."""
    if label is None:
        return [sample_forest(model, X, rng) for _ in range(n)]
    condition = condition_vector(X, label, model.vocabulary.size)
    return [[model.theta.sample_tree(label, condition, rng)] for _ in range(n)]


def _node_id(path: RulePath) -> str:
    return "n_" + "_".join(str(p) for p in path)


def to_dot(samples: Sequence[Sequence[LogicTree]], vocab: Vocabulary, weights: RuleWeights) -> pydot.Dot:
    """Union of the sampled trees; each edge carries the frequency of its rule path.

    Edges point from a body predicate to the node it explains. ``freq`` is the
    fraction of samples containing the path, ``penwidth`` grows with it and the
    color gives the sign of the rule weight.
    """
    freq = path_frequencies(samples)
    dot = pydot.Dot(graph_type="digraph", rankdir="BT")
    heads = sorted({tree.head for forest in samples for tree in forest})
    for head in heads:
        dot.add_node(pydot.Node(_node_id((head,)), label=vocab.name_of(head), shape="box"))
    for path in sorted(freq):
        f = freq[path]
        w = weights.weight(path)
        dot.add_node(pydot.Node(_node_id(path), label=vocab.name_of(path[-1])))
        dot.add_edge(
            pydot.Edge(
                _node_id(path),
                _node_id(path[:-1]),
                freq=f"{f:.6g}",
                penwidth=f"{1.0 + 4.0 * f:.4g}",
                color=NEGATIVE_COLOR if w < 0 else POSITIVE_COLOR,
                label=f"{w:.3g}",
            )
        )
    return dot


def to_json(
    samples: Sequence[Sequence[LogicTree]], vocab: Vocabulary, weights: RuleWeights, seq_id: Optional[str] = None
) -> Dict:
    name = vocab.name_of
    freq = path_frequencies(samples)
    return {
        "sequence": seq_id,
        "samples": [
            [{"head": name(tree.head), "paths": [[name(p) for p in path] for path in paths(tree)]} for tree in forest]
            for forest in samples
        ],
        "frequencies": [
            {"path": [name(p) for p in path], "freq": freq[path], "weight": weights.weight(path)}
            for path in sorted(freq)
        ],
    }


def write_trees(
    samples: Sequence[Sequence[LogicTree]],
    model: TrainedModel,
    out: str | Path,
    fmt: str,
    seq_id: Optional[str] = None,
) -> List[Path]:
    """Write one file per sample plus a summary (``summary.dot`` or ``summary.json``) into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    vocab, weights = model.vocabulary, model.weights
    written = []
    for i, forest in enumerate(samples):
        path = out / f"tree_{i:04d}.{fmt}"
        if fmt == "dot":
            to_dot([forest], vocab, weights).write_raw(str(path))
        else:
            write_json_atomic(path, to_json([forest], vocab, weights, seq_id))
        written.append(path)
    summary = out / f"summary.{fmt}"
    if fmt == "dot":
        to_dot(samples, vocab, weights).write_raw(str(summary))
    else:
        write_json_atomic(summary, to_json(samples, vocab, weights, seq_id))
    written.append(summary)
    logger.info(f"Wrote {len(samples)} sampled trees to {out}")
    return written
