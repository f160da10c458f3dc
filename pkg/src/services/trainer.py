"""Amortized EM: alternate SubTB E-steps on theta with M-steps on (w, phi)."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..schemas.config import TrainConfig
from ..schemas.model import HistoryEntry
from .checkpoint import TrainedModel
from .errors import ConfigError, DatasetError, DivergenceError
from .evaluation import evaluate
from .events import Dataset, EventSequence
from .gflownet import EStepState, PosteriorReward, epsilon_schedule, estep_update
from .logic_tree import LogicTree, paths
from .policy import AutoregressivePolicy, LinearSoftmaxPolicy, condition_vector
from .remote import RemoteLogprobClient, RemotePolicy
from .tlpp import EXPONENT_CLAMP, RuleWeights, grad_log_label_prob, grad_nll_w, nll
from .utils import CsvLog

logger = logging.getLogger(__name__)

SUBTB_FIELDS = ["step", "ema_subtb", "batch_mean_log_reward", "trees_sampled", "mean_tree_size"]
NLL_FIELDS = ["step", "epoch", "mean_nll", "n_rules"]
RMS_EPS = 1e-8


@dataclass
class MStepResult:
    weights: RuleWeights
    phi: LinearSoftmaxPolicy
    mean_nll: float
    n_trees: int


def warmup_scale(warmup_steps: int, updates: int) -> float:
    """Linear learning-rate ramp: (updates + 1) / warmup_steps, capped at 1."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (updates + 1) / warmup_steps)


@dataclass
class LogicStep:
    """Step control for the (w, phi) updates of the M-step.

    Each gradient coordinate on w is clipped to ``logic_grad_clip``. With the
    rmsprop optimizer every step is divided by a bias-corrected running RMS of
    its own gradient history. Rule weights stay within
    ``[-logic_weight_clip, logic_weight_clip]`` and base rates within the
    intensity clamp. Survives across M-steps of a run.
    """

    config: TrainConfig
    updates: int = 0
    w_square: Dict[Tuple[str, object], Tuple[float, int]] = field(default_factory=dict)
    phi_square: Optional[np.ndarray] = None

    def learning_rate(self) -> float:
        return self.config.lr_logic * warmup_scale(self.config.warmup_steps, self.updates)

    def _rms_w(self, keys: List[Tuple[str, object]], g: np.ndarray) -> np.ndarray:
        decay = self.config.rms_decay
        out = np.empty_like(g)
        for i, key in enumerate(keys):
            square, n = self.w_square.get(key, (0.0, 0))
            square = decay * square + (1 - decay) * g[i] ** 2
            n += 1
            self.w_square[key] = (square, n)
            out[i] = g[i] / (np.sqrt(square / (1 - decay**n)) + RMS_EPS)
        return out

    def _rms_phi(self, g: np.ndarray) -> np.ndarray:
        decay = self.config.rms_decay
        if self.phi_square is None:
            self.phi_square = np.zeros_like(g)
        self.phi_square = decay * self.phi_square + (1 - decay) * g**2
        return g / (np.sqrt(self.phi_square / (1 - decay**self.updates)) + RMS_EPS)

    def apply(
        self, w: RuleWeights, grad_w: RuleWeights, phi: LinearSoftmaxPolicy, grad_phi: np.ndarray
    ) -> Tuple[RuleWeights, LinearSoftmaxPolicy]:
        """One ascent step; returns updated copies."""
        cfg = self.config
        lr = self.learning_rate()
        self.updates += 1

        keys = [("w", p) for p in grad_w.weights] + [("b", k) for k in grad_w.base]
        g = np.array([grad_w.weights[p] for p in grad_w.weights] + [grad_w.base[k] for k in grad_w.base])
        if cfg.logic_grad_clip is not None:
            g = np.clip(g, -cfg.logic_grad_clip, cfg.logic_grad_clip)
        if cfg.logic_optimizer == "rmsprop":
            g = self._rms_w(keys, g)
            grad_phi = self._rms_phi(grad_phi)

        w = w.copy()
        bound = cfg.logic_weight_clip
        for (kind, key), step in zip(keys, lr * g):
            if kind == "w":
                w.weights[key] = float(np.clip(w.weight(key) + step, -bound, bound))
            else:
                w.base[key] = float(np.clip(w.base_rate(key) + step, -EXPONENT_CLAMP, EXPONENT_CLAMP))
        phi = phi.copy()
        phi.params = phi.params + lr * grad_phi
        return w, phi


def _objective_grad(
    samples: Sequence[Tuple[EventSequence, int, LogicTree]],
    w: RuleWeights,
    phi: LinearSoftmaxPolicy,
    targets: Sequence[int],
    transform: str,
) -> Tuple[RuleWeights, np.ndarray, float]:
    scale = 1.0 / len(samples)
    grad_w = RuleWeights()
    grad_phi = np.zeros_like(phi.params)
    nlls = []
    for X, Y, tree in samples:
        nlls.append(nll(X, w, tree, targets, transform))
        grad_w.add_scaled(grad_nll_w(X, w, tree, targets, transform), -scale)
        grad_w.add_scaled(grad_log_label_prob(X, tree, w, targets, Y, transform), scale)
        grad_phi += scale * phi.grad_logprob(tree)
    return grad_w, grad_phi, float(np.mean(nlls))


def m_step_on_trees(
    samples: Sequence[Tuple[EventSequence, int, LogicTree]],
    w: RuleWeights,
    phi: LinearSoftmaxPolicy,
    config: TrainConfig,
    targets: Sequence[int],
    step: Optional[LogicStep] = None,
) -> MStepResult:
    """``config.logic_update_steps`` gradient-ascent steps on the Monte Carlo objective over fixed (X, Y, R) samples.

    The objective is mean[-nll(X, w, R) + log p(Y | X, R) + log p_phi(R)].
    Rule weights for unseen paths start at 0. ``mean_nll`` is taken before
    the last step. Pass the run's ``step`` to carry warmup and RMS state
    across M-steps; a fresh one is used otherwise.
    """
    step = step if step is not None else LogicStep(config)
    w = w.copy()
    for _, _, tree in samples:
        w.ensure(paths(tree))

    mean_nll = math.nan
    for _ in range(config.logic_update_steps):
        grad_w, grad_phi, mean_nll = _objective_grad(samples, w, phi, targets, config.count_transform)
        if config.lr_logic > 0:
            w, phi = step.apply(w, grad_w, phi, grad_phi)
    return MStepResult(w, phi.copy(), mean_nll, len(samples))


def m_step(
    batch: Sequence[Tuple[EventSequence, int]],
    theta: AutoregressivePolicy,
    w: RuleWeights,
    phi: LinearSoftmaxPolicy,
    config: TrainConfig,
    rng: np.random.Generator,
    targets: Sequence[int],
    step: Optional[LogicStep] = None,
) -> MStepResult:
    """Sample ``config.m_step_samples`` fresh trees per pair from theta, then update (w, phi)."""
    n = theta.space.n_predicates
    samples = []
    for X, Y in batch:
        condition = condition_vector(X, Y, n)
        for _ in range(config.m_step_samples):
            samples.append((X, Y, theta.sample_tree(Y, condition, rng)))
    return m_step_on_trees(samples, w, phi, config, targets, step)


def _check_dataset(dataset: Dataset) -> Tuple[List[EventSequence], List[EventSequence]]:
    train = dataset.by_split("train")
    if not train:
        raise DatasetError("empty-split", "dataset has no train sequences", "split=train")
    targets = set(dataset.vocabulary.targets)
    for i, s in enumerate(train):
        if s.label not in targets:
            raise DatasetError("label-not-target", f"label {s.label} is not a target", f"sequences[{i}]")
    return train, dataset.by_split("dev")


def _better(entry: HistoryEntry, best: Optional[HistoryEntry]) -> bool:
    if best is None or entry.dev_er is None:
        return True
    return (entry.dev_er, entry.dev_mr, entry.dev_nll) < (best.dev_er, best.dev_mr, best.dev_nll)


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Optional[str | Path] = None,
    resume: Optional[TrainedModel] = None,
    prior_client: Optional[RemoteLogprobClient] = None,
) -> TrainedModel:
    """Run ``config.epochs`` epochs of amortized EM and return the best-dev model.

    After every E-step an M-step follows when the SubTB moving average is
    below ``alpha`` or the step count is a multiple of ``alternate_every``.
    With a dev split the returned model is the epoch with the lowest dev ER
    (ties by MR, then NLL); otherwise the last one. Both learning rates ramp
    up over ``warmup_steps`` updates, and one ``LogicStep`` carries the
    M-step RMS state through the run.

    Args:
        dataset: Tagged dataset with a nonempty train split
        config: Training configuration
        out_dir: Run directory for ``subtb.csv``, ``nll.csv``, ``last.json``
            and ``best.json``; nothing is written when None
        resume: Model to continue from; its step and epoch counters carry on
        prior_client: Scorer behind the prior when ``config.prior`` is "remote"

    Raises:
        DatasetError: Without train sequences or with a non-target label
        ConfigError: If a remote prior is configured without a client
        DivergenceError: If the SubTB moving average becomes non-finite
    """
    train_seqs, dev_seqs = _check_dataset(dataset)
    targets = list(dataset.vocabulary.targets)
    if resume is not None:
        if resume.vocabulary != dataset.vocabulary:
            raise DatasetError("bad-vocabulary", "dataset vocabulary differs from the resumed model's", "vocabulary")
        if any(getattr(resume.config, k) != getattr(config, k) for k in ("d", "W", "allow_self_loops")):
            raise ConfigError("d, W and allow_self_loops must match the resumed model")
    model = resume.snapshot() if resume is not None else TrainedModel.initialize(dataset.vocabulary, config, train_seqs)
    model.config = config
    prior: Optional[AutoregressivePolicy] = None
    if config.prior == "remote":
        if prior_client is None:
            raise ConfigError('prior = "remote" needs a scoring client')
        prior = RemotePolicy(model.space, prior_client)
        logger.info(f"Prior p(R) is scored remotely by {prior_client.endpoint}; phi stays frozen")
    rng = np.random.default_rng([config.seed, model.step])

    out = Path(out_dir) if out_dir is not None else None
    subtb_log = CsvLog(out / "subtb.csv", SUBTB_FIELDS) if out else None
    nll_log = CsvLog(out / "nll.csv", NLL_FIELDS) if out else None

    estep = EStepState.create(model.theta, config)
    estep.ema_loss = model.ema_subtb
    estep.step = model.step
    logic = LogicStep(config)

    steps_per_epoch = math.ceil(len(train_seqs) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    local_step = 0
    best: Optional[TrainedModel] = None
    best_entry: Optional[HistoryEntry] = None
    logger.info(
        f"Training on {len(train_seqs)} sequences ({len(dev_seqs)} dev) for {config.epochs} epochs, "
        f"{steps_per_epoch} steps per epoch"
    )

    for _ in range(config.epochs):
        order = rng.permutation(len(train_seqs))
        for start in range(0, len(order), config.batch_size):
            batch = [(train_seqs[i], train_seqs[i].label) for i in order[start : start + config.batch_size]]
            reward = PosteriorReward(
                model.weights,
                prior if prior is not None else model.phi,
                targets,
                config.count_transform,
                config.reward_floor,
            )
            eps = epsilon_schedule(config, local_step, total_steps)
            estep.optimizer.lr = config.lr_policy * warmup_scale(config.warmup_steps, local_step)
            estep_update(estep, batch, reward, config, rng, eps)
            local_step += 1

            stats = estep.last
            if estep.ema_loss is None or not math.isfinite(estep.ema_loss):
                raise DivergenceError(
                    f"SubTB moving average became non-finite at step {estep.step}",
                    {
                        "step": estep.step,
                        "epoch": model.epoch,
                        "batch_loss": stats.loss,
                        "batch_mean_log_reward": stats.mean_log_reward,
                        "mean_tree_size": stats.mean_tree_size,
                    },
                )
            if subtb_log:
                subtb_log.write(
                    {
                        "step": estep.step,
                        "ema_subtb": estep.ema_loss,
                        "batch_mean_log_reward": stats.mean_log_reward,
                        "trees_sampled": stats.trees_sampled,
                        "mean_tree_size": stats.mean_tree_size,
                    }
                )

            if estep.ema_loss < config.alpha or estep.step % config.alternate_every == 0:
                result = m_step(batch, model.theta, model.weights, model.phi, config, rng, targets, logic)
                model.weights = result.weights
                if prior is None:
                    model.phi = result.phi
                if nll_log:
                    nll_log.write(
                        {
                            "step": estep.step,
                            "epoch": model.epoch,
                            "mean_nll": result.mean_nll,
                            "n_rules": len(model.weights.weights),
                        }
                    )

        model.epoch += 1
        model.step = estep.step
        model.ema_subtb = estep.ema_loss
        entry = HistoryEntry(epoch=model.epoch, step=model.step, ema_subtb=model.ema_subtb)
        if dev_seqs:
            result = evaluate(model, dev_seqs, config.eval_samples, np.random.default_rng([config.seed, model.epoch]))
            entry.dev_nll, entry.dev_er, entry.dev_mr = result.nll, result.er, result.mr
        model.history.append(entry)
        logger.info(
            f"Epoch {model.epoch}: step {model.step}, EMA SubTB {model.ema_subtb:.4g}, "
            f"dev ER {entry.dev_er}, dev MR {entry.dev_mr}, dev NLL {entry.dev_nll}"
        )
        if out:
            model.save(out / "last.json")
        if _better(entry, best_entry):
            best, best_entry = model.snapshot(), entry

    if best is None:
        best = model.snapshot()
        if out:
            model.save(out / "last.json")
    best.history = list(model.history)
    if out:
        best.save(out / "best.json")
    return best
