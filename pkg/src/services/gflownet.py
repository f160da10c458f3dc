"""E-step: train the tree sampler so that terminating probabilities follow the reward.

The reward of a tree R for a pair (X, Y) is the unnormalized posterior
p(Y | X, R) p_w(X | R) p_phi(R). Intermediate states are scored as if every
open leaf stopped there (forward-looking rewards), and the sampler is fit with
the sub-trajectory balance loss. Level-wise growth gives every state a unique
parent, so backward probabilities are one.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..schemas.config import TrainConfig
from .errors import TreeError
from .events import EventSequence
from .logic_tree import LogicTree, Trajectory
from .policy import AutoregressivePolicy, LinearSoftmaxPolicy, condition_vector
from .tlpp import CountTransform, RuleWeights, log_label_prob, nll

logger = logging.getLogger(__name__)

DEFAULT_REWARD_FLOOR = -1e6

# (state tree, X, Y) -> log reward
RewardFn = Callable[[LogicTree, EventSequence, int], float]


def log_reward(
    state: LogicTree,
    X: EventSequence,
    Y: int,
    w: RuleWeights,
    phi: AutoregressivePolicy,
    targets: Sequence[int],
    transform: CountTransform = "identity",
    floor: float = DEFAULT_REWARD_FLOOR,
) -> float:
    """log p_w(X | R) + log p(Y | X, R) + log p_phi(R) for ``state`` closed at its frontier."""
    tree = state.terminated()
    value = (
        -nll(X, w, tree, targets, transform)
        + log_label_prob(X, tree, w, targets, Y, transform)
        + phi.tree_logprob(tree)
    )
    return max(value, floor)


@dataclass
class PosteriorReward:
    """``log_reward`` bound to the current (w, phi); both are read-only inside an E-step."""

    w: RuleWeights
    phi: AutoregressivePolicy
    targets: Sequence[int]
    transform: CountTransform = "identity"
    floor: float = DEFAULT_REWARD_FLOOR

    def __call__(self, state: LogicTree, X: EventSequence, Y: int) -> float:
        return log_reward(state, X, Y, self.w, self.phi, self.targets, self.transform, self.floor)


@dataclass
class RewardTrace:
    log_rewards: np.ndarray

    @classmethod
    def along(cls, traj: Trajectory, reward_fn: RewardFn, X: EventSequence, Y: int) -> "RewardTrace":
        return cls(np.array([reward_fn(s, X, Y) for s in traj.states], dtype=np.float64))


def subtb_loss(
    traj: Trajectory,
    rewards: RewardTrace,
    theta: AutoregressivePolicy,
    condition: Optional[np.ndarray] = None,
    with_grad: bool = True,
) -> Tuple[float, Optional[np.ndarray]]:
    """Sub-trajectory balance loss over every pair of states i < j and its gradient.

    Each residual is
        log r_i + sum_{k=i+1..j} log q(R_k | R_{k-1}) + log q(stop | R_j) - log r_j - log q(stop | R_i).

    Raises:
        TreeError: If the reward trace is not aligned with the trajectory's states
    """
    n = len(traj.states)
    if rewards.log_rewards.shape != (n,):
        raise TreeError(f"reward trace has {rewards.log_rewards.size} entries for {n} states")

    trans = [theta.transition_score(s, c, condition, with_grad) for s, c in zip(traj.states, traj.choices)]
    stops = [theta.stop_score(s, condition, with_grad) for s in traj.states]

    cum_lp = np.concatenate([[0.0], np.cumsum([lp for lp, _ in trans])])
    cum_g: List[Optional[np.ndarray]] = [theta._zero_grad() if with_grad else None]
    for _, g in trans:
        cum_g.append(cum_g[-1] + g if with_grad else None)

    r = rewards.log_rewards
    loss = 0.0
    grad = theta._zero_grad() if with_grad else None
    for i in range(n):
        for j in range(i + 1, n):
            delta = r[i] + (cum_lp[j] - cum_lp[i]) + stops[j][0] - r[j] - stops[i][0]
            loss += delta**2
            if with_grad:
                grad += 2.0 * delta * (cum_g[j] - cum_g[i] + stops[j][1] - stops[i][1])
    return float(loss), grad


@dataclass
class AdaptiveStep:
    """Gradient-descent step, optionally scaled by a running mean of squared gradients."""

    kind: str = "rmsprop"
    lr: float = 5e-4
    decay: float = 0.99
    eps: float = 1e-8
    mean_square: Optional[np.ndarray] = None

    def direction(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return grad
        if self.mean_square is None:
            self.mean_square = np.zeros_like(grad)
        self.mean_square = self.decay * self.mean_square + (1 - self.decay) * grad**2
        return grad / (np.sqrt(self.mean_square) + self.eps)

    def apply(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * self.direction(grad)


@dataclass
class EStepStats:
    loss: float
    mean_log_reward: float
    trees_sampled: int
    mean_tree_size: float


@dataclass
class EStepState:
    theta: LinearSoftmaxPolicy
    optimizer: AdaptiveStep
    ema_loss: Optional[float] = None
    step: int = 0
    last: Optional[EStepStats] = None

    @classmethod
    def create(cls, theta: LinearSoftmaxPolicy, config: TrainConfig) -> "EStepState":
        return cls(theta, AdaptiveStep(config.optimizer, config.lr_policy, config.rms_decay))


def epsilon_schedule(config: TrainConfig, step: int, total_steps: int) -> float:
    """Exploration rate decayed linearly from ``epsilon`` to ``epsilon_final``."""
    ex = config.exploration
    frac = min(1.0, step / total_steps) if total_steps > 0 else 1.0
    return ex.epsilon + (ex.epsilon_final - ex.epsilon) * frac


def _one_trajectory(
    theta: LinearSoftmaxPolicy,
    X: EventSequence,
    Y: int,
    reward_fn: RewardFn,
    config: TrainConfig,
    rng: np.random.Generator,
    epsilon: float,
) -> Tuple[float, np.ndarray, float, int]:
    condition = condition_vector(X, Y, theta.space.n_predicates)
    traj = theta.sample_trajectory(Y, condition, rng, config.exploration, epsilon)
    trace = RewardTrace.along(traj, reward_fn, X, Y)
    loss, grad = subtb_loss(traj, trace, theta, condition)
    return loss, grad, float(trace.log_rewards[-1]), traj.terminal.size


def estep_update(
    state: EStepState,
    batch: Sequence[Tuple[EventSequence, int]],
    reward_fn: RewardFn,
    config: TrainConfig,
    rng: np.random.Generator,
    epsilon: Optional[float] = None,
) -> EStepState:
    """Sample one trajectory per pair, average SubTB gradients, take one step on theta.

    Batch elements draw from independent child generators and are reduced in
    batch order, so results do not depend on ``config.threads``.
    """
    eps = config.exploration.epsilon if epsilon is None else epsilon
    theta = state.theta
    streams = rng.spawn(len(batch))

    def run(i: int):
        X, Y = batch[i]
        return _one_trajectory(theta, X, Y, reward_fn, config, streams[i], eps)

    if config.threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, range(len(batch))))
    else:
        results = [run(i) for i in range(len(batch))]

    losses = np.array([r[0] for r in results])
    grad = sum(r[1] for r in results) / len(results)
    theta.params = state.optimizer.apply(theta.params, grad)

    loss = float(losses.mean())
    state.ema_loss = loss if state.ema_loss is None else config.ema_beta * state.ema_loss + (1 - config.ema_beta) * loss
    state.step += 1
    state.last = EStepStats(
        loss=loss,
        mean_log_reward=float(np.mean([r[2] for r in results])),
        trees_sampled=len(results),
        mean_tree_size=float(np.mean([r[3] for r in results])),
    )
    return state
