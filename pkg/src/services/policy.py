"""Autoregressive predicate policies over logic trees.

A policy scores the next token for one frontier path given its parent
predicate, depth, the siblings already emitted in the current slot sequence
and, for the posterior sampler, a summary of (X, Y). Tokens are the N
predicates plus the stop symbol at index N.

Sibling sets are unordered, so the probability of a state transition sums
over every order in which each sibling set could have been emitted. That sum
is computed by a dynamic programme over subsets of the chosen set.
"""

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp

from ..schemas.config import ExplorationConfig
from .errors import TreeError
from .events import EventSequence
from .logic_tree import STOP, LevelChoice, LogicTree, RulePath, Trajectory, TreeSpace, expand

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PolicyContext:
    parent: int
    depth: int
    chosen_siblings: FrozenSet[int] = frozenset()
    condition: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Log-probabilities over predicates + stop; masked tokens hold -inf."""

    logprobs: np.ndarray

    @property
    def stop_index(self) -> int:
        return self.logprobs.size - 1

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.logprobs)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def logprob(self, token: int) -> float:
        return float(self.logprobs[self.stop_index if token == STOP else token])


def condition_vector(history: EventSequence, label: Optional[int], n_predicates: int) -> np.ndarray:
    """Per-type event frequencies of X followed by a one-hot of Y (all zeros when Y is unknown)."""
    onehot = np.zeros(n_predicates)
    if label is not None:
        onehot[label] = 1.0
    return np.concatenate([history.type_frequencies(n_predicates), onehot])


# (log-probability, gradient or None) of one token decision
TokenScore = Tuple[float, Optional[np.ndarray]]


class AutoregressivePolicy(ABC):
    """Distribution over logic trees built from per-token decisions."""

    def __init__(self, space: TreeSpace):
        self.space = space

    @property
    def n_tokens(self) -> int:
        return self.space.n_predicates + 1

    def token_mask(self, ctx: PolicyContext) -> np.ndarray:
        mask = np.zeros(self.n_tokens, dtype=bool)
        mask[-1] = True
        if ctx.depth < self.space.max_depth and len(ctx.chosen_siblings) < self.space.max_width:
            for p in self.space.allowed_children(ctx.parent):
                if p not in ctx.chosen_siblings:
                    mask[p] = True
        return mask

    @abstractmethod
    def next_token_dist(self, ctx: PolicyContext) -> TokenDistribution: ...

    def _score(self, ctx: PolicyContext, token: int, with_grad: bool) -> TokenScore:
        return self.next_token_dist(ctx).logprob(token), None

    def _zero_grad(self) -> Optional[np.ndarray]:
        return None

    # -- slot / level / tree probabilities ---------------------------------

    def _slot(
        self,
        parent: int,
        depth: int,
        kids: Sequence[int],
        condition: Optional[np.ndarray],
        with_grad: bool,
    ) -> TokenScore:
        """Log-probability that one frontier path emits the set ``kids`` and then stops."""

        def ctx(chosen: FrozenSet[int]) -> PolicyContext:
            return PolicyContext(parent, depth, chosen, condition)

        table: Dict[FrozenSet[int], TokenScore] = {frozenset(): (0.0, self._zero_grad() if with_grad else None)}
        kids = sorted(kids)
        for size in range(1, len(kids) + 1):
            for subset in itertools.combinations(kids, size):
                full = frozenset(subset)
                terms = []
                grads = []
                for x in subset:
                    prev = full - {x}
                    lp_prev, g_prev = table[prev]
                    lp_x, g_x = self._score(ctx(prev), x, with_grad)
                    terms.append(lp_prev + lp_x)
                    if with_grad:
                        grads.append(g_prev + g_x)
                terms = np.array(terms)
                total = float(logsumexp(terms))
                grad = None
                if with_grad:
                    if np.isfinite(total):
                        weights = np.exp(terms - total)
                        grad = sum(wt * g for wt, g in zip(weights, grads))
                    else:
                        grad = self._zero_grad()
                table[full] = (total, grad)
        lp_set, g_set = table[frozenset(kids)]
        lp_stop, g_stop = self._score(ctx(frozenset(kids)), STOP, with_grad)
        return lp_set + lp_stop, (g_set + g_stop) if with_grad else None

    def transition_score(
        self, state: LogicTree, choice: LevelChoice, condition: Optional[np.ndarray] = None, with_grad: bool = False
    ) -> TokenScore:
        """log q(R_{t+1} | R_t) for the sibling sets in ``choice``."""
        total, grad = 0.0, self._zero_grad() if with_grad else None
        kids_by_path = choice.children()
        for path in state.frontier():
            lp, g = self._slot(path[-1], len(path) - 1, kids_by_path[path], condition, with_grad)
            total += lp
            if with_grad:
                grad = grad + g
        return total, grad

    def stop_score(
        self, state: LogicTree, condition: Optional[np.ndarray] = None, with_grad: bool = False
    ) -> TokenScore:
        """log q(stop | R): every frontier path stops immediately."""
        total, grad = 0.0, self._zero_grad() if with_grad else None
        for path in state.frontier():
            lp, g = self._score(PolicyContext(path[-1], len(path) - 1, frozenset(), condition), STOP, with_grad)
            total += lp
            if with_grad:
                grad = grad + g
        return total, grad

    def as_trajectory(self, tree_or_traj: Union[LogicTree, Trajectory]) -> Trajectory:
        if isinstance(tree_or_traj, Trajectory):
            replayed = tree_or_traj.replay(self.space)
            if replayed != list(tree_or_traj.states):
                raise TreeError("trajectory states do not match its choices")
            return tree_or_traj
        return Trajectory.from_tree(tree_or_traj, self.space)

    def tree_logprob(
        self, tree_or_traj: Union[LogicTree, Trajectory], condition: Optional[np.ndarray] = None
    ) -> float:
        """Log-probability of generating the terminal tree (every transition plus the final stop)."""
        traj = self.as_trajectory(tree_or_traj)
        total = sum(
            self.transition_score(s, c, condition)[0] for s, c in zip(traj.states, traj.choices)
        )
        return total + self.stop_score(traj.states[-1], condition)[0]

    # -- sampling -----------------------------------------------------------

    def _draw(
        self, dist: TokenDistribution, rng: np.random.Generator, exploration: Optional[ExplorationConfig], epsilon: float
    ) -> int:
        mask = dist.mask
        if exploration is None:
            probs = dist.probs
        else:
            logits = np.where(mask, dist.logprobs / exploration.temperature, -np.inf)
            if exploration.top_k is not None and mask.sum() > exploration.top_k:
                cutoff = np.sort(logits[mask])[-exploration.top_k]
                logits = np.where(logits >= cutoff, logits, -np.inf)
            probs = np.exp(logits - logsumexp(logits))
            uniform = mask / mask.sum()
            probs = (1.0 - epsilon) * probs + epsilon * uniform
        probs = probs / probs.sum()
        return int(rng.choice(probs.size, p=probs))

    def sample_level(
        self,
        tree: LogicTree,
        condition: Optional[np.ndarray],
        rng: np.random.Generator,
        exploration: Optional[ExplorationConfig] = None,
        epsilon: Optional[float] = None,
    ) -> LevelChoice:
        """Draw one level: per frontier path, distinct children until stop.

        ``epsilon`` overrides ``exploration.epsilon`` (used by decay schedules).
        Recorded log-probabilities are always under the unperturbed policy.
        """
        frontier = tree.frontier()
        if not frontier:
            raise TreeError("cannot sample a level of a terminal tree")
        eps = exploration.epsilon if epsilon is None and exploration is not None else (epsilon or 0.0)
        slots = []
        ordered = 0.0
        for path in frontier:
            chosen: List[int] = []
            while True:
                dist = self.next_token_dist(PolicyContext(path[-1], len(path) - 1, frozenset(chosen), condition))
                idx = self._draw(dist, rng, exploration, eps)
                token = STOP if idx == dist.stop_index else idx
                ordered += dist.logprob(token)
                if token == STOP:
                    break
                chosen.append(token)
            slots.append((path, tuple(chosen) + (STOP,)))
        choice = LevelChoice(tuple(slots))
        if choice.is_stop:
            logprob = self.stop_score(tree, condition)[0]
        else:
            logprob = self.transition_score(tree, choice, condition)[0]
        return LevelChoice(choice.slots, logprob, ordered)

    def sample_trajectory(
        self,
        root: int,
        condition: Optional[np.ndarray],
        rng: np.random.Generator,
        exploration: Optional[ExplorationConfig] = None,
        epsilon: Optional[float] = None,
    ) -> Trajectory:
        state = LogicTree.initial(root)
        states = [state]
        choices = []
        while True:
            choice = self.sample_level(state, condition, rng, exploration, epsilon)
            if choice.is_stop:
                return Trajectory(tuple(states), tuple(choices), choice.logprob)
            state = expand(state, choice, self.space)
            states.append(state)
            choices.append(choice)

    def sample_tree(
        self, root: int, condition: Optional[np.ndarray], rng: np.random.Generator
    ) -> LogicTree:
        return self.sample_trajectory(root, condition, rng).terminal


class LinearSoftmaxPolicy(AutoregressivePolicy):
    """Linear-softmax head over context features, with closed-form gradients.

    Features are one-hot(parent) | one-hot(depth) | sibling-chosen mask and,
    for a conditional policy, the (X, Y) summary from ``condition_vector``.
    ``params`` has shape (feature_dim, N + 1).
    """

    def __init__(self, space: TreeSpace, conditional: bool, params: Optional[np.ndarray] = None):
        super().__init__(space)
        self.conditional = conditional
        n = space.n_predicates
        self.feature_dim = n + (space.max_depth + 1) + n + (2 * n if conditional else 0)
        shape = (self.feature_dim, self.n_tokens)
        if params is None:
            params = np.zeros(shape)
        params = np.array(params, dtype=np.float64)
        if params.shape != shape:
            raise ValueError(f"params shape {params.shape} != {shape}")
        self.params = params

    @classmethod
    def prior(cls, space: TreeSpace, stop_bias: float = 0.0) -> "LinearSoftmaxPolicy":
        """Unconditional prior; ``stop_bias`` raises the stop logit for every parent."""
        policy = cls(space, conditional=False)
        policy.params[: space.n_predicates, -1] = stop_bias
        return policy

    @classmethod
    def from_prior(cls, prior: "LinearSoftmaxPolicy") -> "LinearSoftmaxPolicy":
        """Conditional sampler initialised with the prior's weights (condition rows at zero)."""
        policy = cls(prior.space, conditional=True)
        policy.params[: prior.feature_dim] = prior.params
        return policy

    def copy(self) -> "LinearSoftmaxPolicy":
        return LinearSoftmaxPolicy(self.space, self.conditional, self.params.copy())

    def features(self, ctx: PolicyContext) -> np.ndarray:
        n = self.space.n_predicates
        d = self.space.max_depth
        x = np.zeros(self.feature_dim)
        x[ctx.parent] = 1.0
        x[n + min(ctx.depth, d)] = 1.0
        for s in ctx.chosen_siblings:
            x[n + d + 1 + s] = 1.0
        if self.conditional and ctx.condition is not None:
            x[2 * n + d + 1 :] = ctx.condition
        return x

    def next_token_dist(self, ctx: PolicyContext) -> TokenDistribution:
        mask = self.token_mask(ctx)
        logits = np.where(mask, self.features(ctx) @ self.params, -np.inf)
        return TokenDistribution(log_softmax(logits))

    def _zero_grad(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def _score(self, ctx: PolicyContext, token: int, with_grad: bool) -> TokenScore:
        dist = self.next_token_dist(ctx)
        lp = dist.logprob(token)
        if not with_grad:
            return lp, None
        onehot = np.zeros(self.n_tokens)
        onehot[dist.stop_index if token == STOP else token] = 1.0
        return lp, np.outer(self.features(ctx), onehot - dist.probs)

    def grad_logprob(
        self, tree_or_traj: Union[LogicTree, Trajectory], condition: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Gradient of ``tree_logprob`` with respect to ``params``."""
        traj = self.as_trajectory(tree_or_traj)
        grad = self._zero_grad()
        for state, choice in zip(traj.states, traj.choices):
            grad += self.transition_score(state, choice, condition, with_grad=True)[1]
        return grad + self.stop_score(traj.states[-1], condition, with_grad=True)[1]
