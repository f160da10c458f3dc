import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy.special import logsumexp

from src.schemas.config import ExplorationConfig
from src.services.events import Vocabulary
from src.services.logic_tree import (
    STOP,
    LogicTree,
    TreeSpace,
    canonical_key,
    enumerate_terminal_trees,
)
from src.services.policy import LinearSoftmaxPolicy, PolicyContext, condition_vector

A, B, C = 0, 1, 2


def _space(n, d, w, self_loops=False):
    vocab = Vocabulary.from_names([f"P{i}" for i in range(n)], ["P0"])
    return TreeSpace(vocab, max_depth=d, max_width=w, allow_self_loops=self_loops)


def _random_policy(space, rng, scale=0.7):
    policy = LinearSoftmaxPolicy(space, conditional=True)
    policy.params = rng.normal(scale=scale, size=policy.params.shape)
    return policy


def test_zero_params_uniform_over_all_tokens():
    space = _space(3, 2, 2, self_loops=True)
    dist = LinearSoftmaxPolicy(space, conditional=False).next_token_dist(PolicyContext(A, 0))
    np.testing.assert_allclose(dist.probs, [0.25] * 4)


def test_parent_masked_without_self_loops(small_space):
    dist = LinearSoftmaxPolicy(small_space, conditional=False).next_token_dist(PolicyContext(A, 0))
    assert dist.logprobs[A] == -np.inf
    np.testing.assert_allclose(dist.probs, [0.0, 1 / 3, 1 / 3, 1 / 3])


def test_depth_cap_forces_stop(small_space):
    dist = LinearSoftmaxPolicy(small_space, conditional=False).next_token_dist(PolicyContext(B, 2))
    assert dist.mask.tolist() == [False, False, False, True]
    assert dist.logprob(STOP) == 0.0


def test_chosen_siblings_and_width_masked(abc_vocab):
    wide = TreeSpace(abc_vocab, max_depth=2, max_width=2, allow_self_loops=True)
    policy = LinearSoftmaxPolicy(wide, conditional=False)
    dist = policy.next_token_dist(PolicyContext(A, 0, frozenset({B})))
    assert dist.mask.tolist() == [True, False, True, True]
    full = policy.next_token_dist(PolicyContext(A, 0, frozenset({B, C})))
    assert full.mask.tolist() == [False, False, False, True]


def test_distribution_normalized_for_random_params():
    rng = np.random.default_rng(0)
    space = _space(4, 2, 2)
    for _ in range(50):
        policy = _random_policy(space, rng, scale=3.0)
        ctx = PolicyContext(int(rng.integers(0, 4)), int(rng.integers(0, 3)), frozenset(), rng.uniform(size=8))
        dist = policy.next_token_dist(ctx)
        assert math.exp(logsumexp(dist.logprobs[dist.mask])) == pytest.approx(1.0, abs=1e-9)


def test_tree_logprob_root_only(abc_vocab):
    policy = LinearSoftmaxPolicy(TreeSpace(abc_vocab, 1, 1), conditional=False)
    assert policy.tree_logprob(LogicTree.from_paths(A, [])) == pytest.approx(math.log(1 / 3))


def test_tree_logprob_single_child_width_one(abc_vocab):
    policy = LinearSoftmaxPolicy(TreeSpace(abc_vocab, 1, 1), conditional=False)
    assert policy.tree_logprob(LogicTree.from_paths(A, [(A, B)])) == pytest.approx(math.log(1 / 3))


def test_tree_logprob_single_child_width_two(abc_vocab):
    policy = LinearSoftmaxPolicy(TreeSpace(abc_vocab, 1, 2), conditional=False)
    expected = math.log(1 / 3) + math.log(1 / 2)
    assert policy.tree_logprob(LogicTree.from_paths(A, [(A, B)])) == pytest.approx(expected)


def test_tree_logprob_sums_over_sibling_orders(abc_vocab):
    policy = LinearSoftmaxPolicy(TreeSpace(abc_vocab, 1, 2), conditional=False)
    # B then C, or C then B, each (1/3)(1/2), then a forced stop.
    expected = math.log(2 * (1 / 3) * (1 / 2))
    assert policy.tree_logprob(LogicTree.from_paths(A, [(A, B), (A, C)])) == pytest.approx(expected)


@pytest.mark.parametrize("n, d, w", list(itertools.product([2, 3, 4], [1, 2], [1, 2])))
def test_tree_probabilities_sum_to_one(n, d, w):
    rng = np.random.default_rng(n * 100 + d * 10 + w)
    space = _space(n, d, w)
    policy = _random_policy(space, rng)
    condition = rng.uniform(size=2 * n)
    trees = enumerate_terminal_trees(space, 0)
    total = math.exp(logsumexp([policy.tree_logprob(t, condition) for t in trees]))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_tree_probabilities_sum_to_one_with_self_loops():
    space = _space(3, 2, 2, self_loops=True)
    policy = _random_policy(space, np.random.default_rng(1))
    trees = enumerate_terminal_trees(space, 1)
    total = math.exp(logsumexp([policy.tree_logprob(t, np.zeros(6)) for t in trees]))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_grad_logprob_matches_finite_differences():
    rng = np.random.default_rng(2)
    space = _space(3, 2, 2)
    h = 1e-5
    for _ in range(100):
        policy = _random_policy(space, rng)
        condition = rng.uniform(size=6)
        tree = policy.sample_tree(0, condition, rng)
        analytic = policy.grad_logprob(tree, condition)
        fd = np.zeros_like(policy.params)
        for idx in np.ndindex(*policy.params.shape):
            shifted = policy.copy()
            shifted.params[idx] += h
            up = shifted.tree_logprob(tree, condition)
            shifted.params[idx] -= 2 * h
            down = shifted.tree_logprob(tree, condition)
            fd[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-7)


def test_grad_pushes_observed_token_up(small_space):
    policy = LinearSoftmaxPolicy(small_space, conditional=False)
    grad = policy.grad_logprob(LogicTree.from_paths(A, [(A, B)]))
    # row A is the parent one-hot of the root decision
    assert grad[A, B] > 0
    assert grad[A, C] < 0


def test_epsilon_one_is_uniform_over_unmasked(small_space):
    rng = np.random.default_rng(3)
    policy = LinearSoftmaxPolicy(small_space, conditional=False)
    policy.params[A] = [0.0, 4.0, -2.0, 1.0]
    exploration = ExplorationConfig(epsilon=1.0)
    counts = Counter()
    n = 20_000
    for _ in range(n):
        choice = policy.sample_level(LogicTree.initial(A), None, rng, exploration)
        counts[choice.slots[0][1][0]] += 1
    for token in (B, C, STOP):
        assert counts[token] / n == pytest.approx(1 / 3, abs=0.02)
    assert counts[A] == 0


def test_recorded_logprob_ignores_exploration(small_space):
    rng = np.random.default_rng(4)
    policy = _random_policy(small_space, rng)
    exploration = ExplorationConfig(epsilon=0.5, temperature=3.0)
    state = LogicTree.initial(A)
    for _ in range(50):
        choice = policy.sample_level(state, None, rng, exploration)
        if choice.is_stop:
            expected = policy.stop_score(state)[0]
        else:
            expected = policy.transition_score(state, choice)[0]
        assert choice.logprob == pytest.approx(expected, abs=1e-12)


def test_sampled_trees_follow_tree_logprob():
    rng = np.random.default_rng(5)
    space = _space(3, 1, 2)
    policy = _random_policy(space, rng, scale=0.5)
    n = 20_000
    counts = Counter(canonical_key(policy.sample_tree(0, None, rng)) for _ in range(n))
    tv = 0.0
    for tree in enumerate_terminal_trees(space, 0):
        tv += abs(counts[canonical_key(tree)] / n - math.exp(policy.tree_logprob(tree)))
    assert tv / 2 <= 0.03


def test_trajectory_terminal_matches_sampled_tree(small_space):
    rng = np.random.default_rng(6)
    policy = _random_policy(small_space, rng)
    for _ in range(20):
        traj = policy.sample_trajectory(A, None, rng)
        assert traj.replay(small_space) == list(traj.states)
        assert policy.tree_logprob(traj) == pytest.approx(policy.tree_logprob(traj.terminal))


def test_prior_ignores_condition(small_space):
    prior = LinearSoftmaxPolicy.prior(small_space, stop_bias=1.5)
    tree = LogicTree.from_paths(A, [(A, B), (A, C, B)])
    assert prior.tree_logprob(tree, np.zeros(6)) == prior.tree_logprob(tree, np.ones(6))


def test_prior_stop_bias(small_space):
    prior = LinearSoftmaxPolicy.prior(small_space, stop_bias=2.0)
    dist = prior.next_token_dist(PolicyContext(A, 0))
    assert dist.probs[-1] == pytest.approx(math.exp(2) / (math.exp(2) + 2))


def test_from_prior_matches_prior_at_zero_condition_rows(small_space, make_seq):
    prior = LinearSoftmaxPolicy.prior(small_space, stop_bias=1.0)
    prior.params[:, B] += 0.3
    sampler = LinearSoftmaxPolicy.from_prior(prior)
    condition = condition_vector(make_seq([(0.1, B), (0.2, C)], 1.0), A, 3)
    tree = LogicTree.from_paths(A, [(A, C)])
    assert sampler.tree_logprob(tree, condition) == pytest.approx(prior.tree_logprob(tree))


def test_condition_vector_layout(make_seq):
    vec = condition_vector(make_seq([(0.1, B), (0.2, B), (0.3, C), (0.4, A)], 1.0), C, 3)
    np.testing.assert_allclose(vec, [0.25, 0.5, 0.25, 0.0, 0.0, 1.0])
    unknown = condition_vector(make_seq([], 1.0), None, 3)
    np.testing.assert_allclose(unknown, np.zeros(6))
