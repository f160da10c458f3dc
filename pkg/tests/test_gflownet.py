import math
from collections import Counter

import numpy as np
import pytest

from src.schemas.config import ExplorationConfig, TrainConfig
from src.services.errors import TreeError
from src.services.events import Vocabulary
from src.services.gflownet import (
    AdaptiveStep,
    EStepState,
    PosteriorReward,
    RewardTrace,
    epsilon_schedule,
    estep_update,
    log_reward,
    subtb_loss,
)
from src.services.logic_tree import LogicTree, Trajectory, TreeSpace, canonical_key, enumerate_terminal_trees
from src.services.policy import AutoregressivePolicy, LinearSoftmaxPolicy, TokenDistribution
from src.services.tlpp import RuleWeights, log_label_prob, nll

A, B, C = 0, 1, 2


class TablePolicy(AutoregressivePolicy):
    """Root decisions read from a table keyed by the chosen siblings; other contexts are uniform."""

    def __init__(self, space, table):
        super().__init__(space)
        self.table = table

    def next_token_dist(self, ctx):
        mask = self.token_mask(ctx)
        if ctx.depth == 0 and ctx.chosen_siblings in self.table:
            probs = np.zeros(self.n_tokens)
            for token, p in self.table[ctx.chosen_siblings].items():
                probs[token] = p
        else:
            probs = mask / mask.sum()
        with np.errstate(divide="ignore"):
            return TokenDistribution(np.where(mask, np.log(probs), -np.inf))


@pytest.fixture
def one_level_space():
    vocab = Vocabulary.from_names(["A", "B", "C"], ["A"])
    return TreeSpace(vocab, max_depth=1, max_width=2)


REWARDS = {"0": 1.0, "0(1)": math.e, "0(2)": 0.5, "0(1,2)": 2.0}


def frozen_reward(state, X, Y):
    return math.log(REWARDS[canonical_key(state.terminated())])


def test_log_reward_empty_tree(abc_vocab, make_seq):
    space = TreeSpace(abc_vocab, 2, 2)
    phi = LinearSoftmaxPolicy(space, conditional=False)
    targets = [A, C]
    w = RuleWeights(base={A: 0.0, C: 0.0})
    X = make_seq([(0.5, B), (1.0, A)], 2.0)
    empty = LogicTree.from_paths(A, [])
    expected = -nll(X, w, empty, targets) - math.log(2) + phi.tree_logprob(empty)
    assert log_reward(empty, X, A, w, phi, targets) == pytest.approx(expected, abs=1e-12)


def test_log_reward_is_sum_of_parts(abc_vocab, make_seq):
    space = TreeSpace(abc_vocab, 2, 2)
    phi = LinearSoftmaxPolicy.prior(space, stop_bias=0.7)
    targets = [A, C]
    w = RuleWeights({(A, B): 0.4, (A, C, B): -0.3}, {A: -0.2, C: 0.1})
    X = make_seq([(0.2, C), (0.5, B), (1.0, A), (1.4, B)], 2.0)
    tree = LogicTree.from_paths(A, [(A, B), (A, C, B)])
    expected = -nll(X, w, tree, targets) + log_label_prob(X, tree, w, targets, A) + phi.tree_logprob(tree)
    assert log_reward(tree, X, A, w, phi, targets) == pytest.approx(expected, abs=1e-12)
    reward = PosteriorReward(w, phi, targets)
    assert reward(tree, X, A) == log_reward(tree, X, A, w, phi, targets)


def test_log_reward_of_open_state_closes_frontier(small_space, make_seq):
    phi = LinearSoftmaxPolicy.prior(small_space)
    w = RuleWeights({(A, B): 0.4}, {A: 0.0})
    X = make_seq([(0.5, B)], 1.0)
    state = Trajectory.from_tree(LogicTree.from_paths(A, [(A, B)]), small_space).states[-1]
    assert not state.is_terminal
    assert log_reward(state, X, A, w, phi, [A]) == log_reward(state.terminated(), X, A, w, phi, [A])


def test_log_reward_floor(small_space, make_seq):
    phi = LinearSoftmaxPolicy.prior(small_space)
    w = RuleWeights(base={A: 29.0})
    value = log_reward(LogicTree.from_paths(A, []), make_seq([], 10.0), A, w, phi, [A], floor=-1e6)
    assert value == -1e6


def test_single_transition_residual(one_level_space):
    theta = LinearSoftmaxPolicy(one_level_space, conditional=False)
    traj = Trajectory.from_tree(LogicTree.from_paths(A, [(A, B)]), one_level_space)
    trace = RewardTrace(np.array([0.3, 1.1]))
    loss, _ = subtb_loss(traj, trace, theta, with_grad=False)
    forward = theta.transition_score(traj.states[0], traj.choices[0])[0]
    delta = 0.3 + forward + theta.stop_score(traj.states[1])[0] - 1.1 - theta.stop_score(traj.states[0])[0]
    assert loss == pytest.approx(delta**2, abs=1e-12)


def test_reward_trace_must_align(one_level_space):
    theta = LinearSoftmaxPolicy(one_level_space, conditional=False)
    traj = Trajectory.from_tree(LogicTree.from_paths(A, [(A, B)]), one_level_space)
    with pytest.raises(TreeError):
        subtb_loss(traj, RewardTrace(np.zeros(3)), theta)


def _consistent_policy(space):
    r0, rb, rc, rbc = REWARDS["0"], REWARDS["0(1)"], REWARDS["0(2)"], REWARDS["0(1,2)"]
    z = r0 + rb + rc + rbc
    table = {
        frozenset(): {B: (rb + rbc / 2) / z, C: (rc + rbc / 2) / z, -1: r0 / z},
        frozenset({B}): {C: (rbc / 2) / (rb + rbc / 2), -1: rb / (rb + rbc / 2)},
        frozenset({C}): {B: (rbc / 2) / (rc + rbc / 2), -1: rc / (rc + rbc / 2)},
    }
    return TablePolicy(space, table), z


def test_consistent_policy_has_zero_loss(one_level_space, make_seq):
    policy, z = _consistent_policy(one_level_space)
    X = make_seq([], 1.0)
    for tree in enumerate_terminal_trees(one_level_space, A):
        traj = Trajectory.from_tree(tree, one_level_space)
        trace = RewardTrace.along(traj, frozen_reward, X, A)
        loss, grad = subtb_loss(traj, trace, policy, with_grad=False)
        assert loss <= 1e-10
        assert grad is None
        assert math.exp(policy.tree_logprob(tree)) == pytest.approx(REWARDS[canonical_key(tree)] / z, abs=1e-12)


def test_loss_gradient_matches_finite_differences(abc_vocab):
    rng = np.random.default_rng(0)
    space = TreeSpace(abc_vocab, 2, 2)
    h = 1e-5
    for _ in range(100):
        theta = LinearSoftmaxPolicy(space, conditional=True, params=rng.normal(scale=0.5, size=(15, 4)))
        condition = rng.uniform(size=6)
        traj = theta.sample_trajectory(A, condition, rng)
        while traj.length == 0:
            traj = theta.sample_trajectory(A, condition, rng)
        trace = RewardTrace(rng.normal(size=len(traj.states)))
        _, analytic = subtb_loss(traj, trace, theta, condition)
        fd = np.zeros_like(theta.params)
        for idx in np.ndindex(*theta.params.shape):
            shifted = theta.copy()
            shifted.params[idx] += h
            up, _ = subtb_loss(traj, trace, shifted, condition, with_grad=False)
            shifted.params[idx] -= 2 * h
            down, _ = subtb_loss(traj, trace, shifted, condition, with_grad=False)
            fd[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_loss_invariant_to_reward_scale(small_space, c):
    rng = np.random.default_rng(1)
    theta = LinearSoftmaxPolicy(small_space, conditional=False, params=rng.normal(size=(9, 4)))
    traj = Trajectory.from_tree(LogicTree.from_paths(A, [(A, B), (A, C, B)]), small_space)
    log_r = rng.normal(size=len(traj.states))
    base, _ = subtb_loss(traj, RewardTrace(log_r), theta, with_grad=False)
    scaled, _ = subtb_loss(traj, RewardTrace(log_r + math.log(c)), theta, with_grad=False)
    assert scaled == pytest.approx(base, abs=1e-10)


def _batch(make_seq, n=4):
    return [(make_seq([(0.1 * (i + 1), B)], 1.0), A) for i in range(n)]


def test_zero_learning_rate_keeps_theta(small_space, make_seq):
    config = TrainConfig(lr_policy=0.0, d=2, W=2)
    theta = LinearSoftmaxPolicy(small_space, conditional=True, params=np.random.default_rng(2).normal(size=(15, 4)))
    before = theta.params.copy()
    state = EStepState.create(theta, config)
    estep_update(state, _batch(make_seq), frozen_reward_any, config, np.random.default_rng(3))
    np.testing.assert_array_equal(state.theta.params, before)
    assert state.step == 1
    assert state.ema_loss == state.last.loss


def frozen_reward_any(state, X, Y):
    return -0.5 * state.terminated().size


def test_estep_is_deterministic_across_threads(small_space, make_seq):
    results = []
    for threads in (1, 1, 4):
        config = TrainConfig(lr_policy=0.01, d=2, W=2, threads=threads)
        theta = LinearSoftmaxPolicy(small_space, conditional=True)
        state = EStepState.create(theta, config)
        rng = np.random.default_rng(4)
        for _ in range(3):
            estep_update(state, _batch(make_seq, 6), frozen_reward_any, config, rng)
        results.append((state.theta.params.copy(), state.ema_loss))
    for params, ema in results[1:]:
        np.testing.assert_array_equal(params, results[0][0])
        assert ema == results[0][1]


def test_ema_update(small_space, make_seq):
    config = TrainConfig(lr_policy=0.0, d=2, W=2, ema_beta=0.5)
    state = EStepState.create(LinearSoftmaxPolicy(small_space, conditional=True), config)
    state.ema_loss = 10.0
    estep_update(state, _batch(make_seq), frozen_reward_any, config, np.random.default_rng(5))
    assert state.ema_loss == pytest.approx(5.0 + 0.5 * state.last.loss)


def test_epsilon_schedule():
    config = TrainConfig(exploration=ExplorationConfig(epsilon=0.4, epsilon_final=0.1))
    assert epsilon_schedule(config, 0, 10) == pytest.approx(0.4)
    assert epsilon_schedule(config, 5, 10) == pytest.approx(0.25)
    assert epsilon_schedule(config, 20, 10) == pytest.approx(0.1)
    assert epsilon_schedule(config, 0, 0) == pytest.approx(0.1)


def test_rmsprop_first_step():
    step = AdaptiveStep("rmsprop", lr=0.1, decay=0.99)
    out = step.apply(np.zeros(2), np.array([2.0, -3.0]))
    np.testing.assert_allclose(out, [-1.0, 1.0], rtol=1e-6)
    sgd = AdaptiveStep("sgd", lr=0.1)
    np.testing.assert_allclose(sgd.apply(np.ones(2), np.array([2.0, -3.0])), [0.8, 1.3])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_terminating_distribution_matches_reward(one_level_space, make_seq, seed):
    config = TrainConfig(
        optimizer="sgd",
        lr_policy=0.05,
        batch_size=8,
        d=1,
        W=2,
        exploration=ExplorationConfig(epsilon=0.2),
    )
    theta = LinearSoftmaxPolicy(one_level_space, conditional=False)
    state = EStepState.create(theta, config)
    rng = np.random.default_rng(seed)
    batch = [(make_seq([], 1.0), A)] * config.batch_size
    for _ in range(10_000):
        estep_update(state, batch, frozen_reward, config, rng)
        if state.ema_loss < 1e-4:
            break
    assert state.ema_loss < 1e-4

    n = 10_000
    counts = Counter(canonical_key(theta.sample_tree(A, None, rng)) for _ in range(n))
    z = sum(REWARDS.values())
    tv = 0.5 * sum(abs(counts[key] / n - r / z) for key, r in REWARDS.items())
    assert tv <= 0.05
    assert {canonical_key(t) for t in enumerate_terminal_trees(one_level_space, A)} == set(REWARDS)
