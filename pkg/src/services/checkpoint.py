"""Trained model bundle: sampler theta, prior phi, rule weights, and their JSON checkpoint."""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from ..schemas.config import TrainConfig
from ..schemas.dataset import PredicateEntry
from ..schemas.model import HistoryEntry, ModelCheckpoint, PolicyBundle, RuleEntry, WeightsBundle
from .errors import DatasetError
from .events import EventSequence, Predicate, Vocabulary
from .logic_tree import TreeSpace
from .policy import LinearSoftmaxPolicy
from .tlpp import RuleWeights
from .utils import write_json_atomic

logger = logging.getLogger(__name__)

# Base log-rate for types that never occur in the training split.
EMPTY_RATE_LOG = -5.0


def empirical_base_rates(sequences: Sequence[EventSequence], types: Sequence[int]) -> dict:
    """log(events per unit time) of each type over ``sequences``."""
    exposure = sum(s.horizon for s in sequences)
    out = {}
    for k in types:
        count = sum(int(np.sum(s.types == k)) for s in sequences)
        out[k] = float(np.log(count / exposure)) if count and exposure > 0 else EMPTY_RATE_LOG
    return out


@dataclass
class TrainedModel:
    vocabulary: Vocabulary
    config: TrainConfig
    theta: LinearSoftmaxPolicy
    phi: LinearSoftmaxPolicy
    weights: RuleWeights
    step: int = 0
    epoch: int = 0
    ema_subtb: Optional[float] = None
    history: List[HistoryEntry] = field(default_factory=list)

    @property
    def space(self) -> TreeSpace:
        return self.theta.space

    @property
    def targets(self) -> List[int]:
        return list(self.vocabulary.targets)

    @classmethod
    def initialize(
        cls,
        vocabulary: Vocabulary,
        config: TrainConfig,
        train: Optional[Sequence[EventSequence]] = None,
    ) -> "TrainedModel":
        """Fresh model: phi is the stop-biased prior, theta copies it, no rules yet.

        Base rates start at the empirical target rates of ``train`` (0 without data).
        """
        space = TreeSpace(vocabulary, config.d, config.W, config.allow_self_loops)
        phi = LinearSoftmaxPolicy.prior(space, config.init_stop_bias)
        theta = LinearSoftmaxPolicy.from_prior(phi)
        targets = list(vocabulary.targets)
        base = empirical_base_rates(train, targets) if train else {k: 0.0 for k in targets}
        return cls(vocabulary, config, theta, phi, RuleWeights(base=base))

    def snapshot(self) -> "TrainedModel":
        return TrainedModel(
            self.vocabulary,
            self.config,
            self.theta.copy(),
            self.phi.copy(),
            self.weights.copy(),
            self.step,
            self.epoch,
            self.ema_subtb,
            copy.deepcopy(self.history),
        )

    def to_schema(self) -> ModelCheckpoint:
        vocab = self.vocabulary
        rules = [
            RuleEntry(path=[vocab.name_of(p) for p in path], weight=w)
            for path, w in self.weights.weights.items()
        ]
        return ModelCheckpoint(
            vocabulary=[PredicateEntry(id=p.id, name=p.name) for p in vocab.predicates],
            targets=list(vocab.targets),
            config=self.config,
            theta=PolicyBundle(conditional=self.theta.conditional, params=self.theta.params.tolist()),
            phi=PolicyBundle(conditional=self.phi.conditional, params=self.phi.params.tolist()),
            weights=WeightsBundle(
                rules=rules, base={vocab.name_of(k): b for k, b in self.weights.base.items()}
            ),
            step=self.step,
            epoch=self.epoch,
            ema_subtb=self.ema_subtb,
            history=self.history,
        )

    @classmethod
    def from_schema(cls, doc: ModelCheckpoint) -> "TrainedModel":
        vocab = Vocabulary(tuple(Predicate(p.id, p.name) for p in doc.vocabulary), tuple(doc.targets))
        config = doc.config
        space = TreeSpace(vocab, config.d, config.W, config.allow_self_loops)
        weights = RuleWeights(
            weights={tuple(vocab.id_of(n) for n in r.path): r.weight for r in doc.weights.rules},
            base={vocab.id_of(n): b for n, b in doc.weights.base.items()},
        )
        return cls(
            vocab,
            config,
            LinearSoftmaxPolicy(space, doc.theta.conditional, np.array(doc.theta.params)),
            LinearSoftmaxPolicy(space, doc.phi.conditional, np.array(doc.phi.params)),
            weights,
            doc.step,
            doc.epoch,
            doc.ema_subtb,
            list(doc.history),
        )

    def save(self, path: str | Path):
        write_json_atomic(path, self.to_schema().model_dump(mode="json"))
        logger.info(f"Checkpoint written to {path} (step {self.step}, epoch {self.epoch})")

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        """Read a checkpoint file.

        Raises:
            DatasetError: If the file is not valid JSON or not a checkpoint
        """
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            doc = ModelCheckpoint.model_validate(json.loads(text))
        except json.JSONDecodeError as e:
            raise DatasetError("malformed-json", e.msg, f"offset {e.pos}") from e
        except ValidationError as e:
            raise DatasetError("schema", str(e), str(path)) from e
        try:
            return cls.from_schema(doc)
        except (KeyError, ValueError) as e:
            raise DatasetError("schema", f"inconsistent checkpoint: {e}", str(path)) from e
