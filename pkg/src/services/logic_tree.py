"""Logic trees grown level by level, their trajectories and the enumeration oracle.

A tree's root is a target predicate. Every open leaf sits on the current
frontier; one growth step ("level") lets each frontier node either pick an
unordered set of at most ``max_width`` distinct children or stop. Stopped
leaves never reopen, so every state has exactly one parent.
"""

import itertools
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .errors import SpaceTooLargeError, TreeError
from .events import Vocabulary

# Stop symbol inside LevelChoice child sequences.
STOP = -1

DEFAULT_ENUMERATION_CAP = 10**6

RulePath = Tuple[int, ...]


@dataclass(frozen=True)
class TreeSpace:
    vocabulary: Vocabulary
    max_depth: int
    max_width: int
    allow_self_loops: bool = False

    def __post_init__(self):
        if self.max_depth < 0 or self.max_width < 1:
            raise ValueError("max_depth must be >= 0 and max_width >= 1")

    @property
    def n_predicates(self) -> int:
        return self.vocabulary.size

    def allowed_children(self, parent: int) -> List[int]:
        return [
            p for p in range(self.n_predicates) if self.allow_self_loops or p != parent
        ]


@dataclass(frozen=True)
class TreeNode:
    predicate: int
    children: Tuple["TreeNode", ...] = ()
    terminated: bool = False

    @property
    def is_open(self) -> bool:
        return not self.children and not self.terminated


def _node(predicate: int, children: Sequence[TreeNode] = (), terminated: bool = False) -> TreeNode:
    kids = tuple(sorted(children, key=lambda c: c.predicate))
    return TreeNode(predicate, kids, terminated and not kids)


@dataclass(frozen=True)
class LogicTree:
    root: TreeNode

    @classmethod
    def initial(cls, head: int) -> "LogicTree":
        """The single-node state R_0 = {z_0}, still open."""
        return cls(TreeNode(head))

    @classmethod
    def from_paths(cls, head: int, rule_paths: Sequence[RulePath]) -> "LogicTree":
        """Terminal tree containing the given root-to-node paths (and their prefixes)."""
        nested: Dict = {}
        for path in rule_paths:
            if not path or path[0] != head:
                raise TreeError(f"path {path} does not start at head {head}")
            cursor = nested
            for pid in path[1:]:
                cursor = cursor.setdefault(pid, {})

        def build(pid: int, sub: Dict) -> TreeNode:
            return _node(pid, [build(k, v) for k, v in sub.items()], terminated=True)

        return cls(build(head, nested))

    @property
    def head(self) -> int:
        return self.root.predicate

    def walk(self) -> Iterator[Tuple[RulePath, TreeNode]]:
        """Depth-first preorder over (path from root, node)."""
        stack = [((self.root.predicate,), self.root)]
        while stack:
            path, node = stack.pop()
            yield path, node
            for child in reversed(node.children):
                stack.append((path + (child.predicate,), child))

    def frontier(self) -> List[RulePath]:
        return [path for path, node in self.walk() if node.is_open]

    @property
    def is_terminal(self) -> bool:
        return not self.frontier()

    @property
    def depth(self) -> int:
        return max(len(path) - 1 for path, _ in self.walk())

    @property
    def size(self) -> int:
        """Number of body nodes (every node except the root)."""
        return sum(1 for _ in self.walk()) - 1

    def terminated(self) -> "LogicTree":
        """The same tree with every open leaf stopped (R^T)."""

        def close(node: TreeNode) -> TreeNode:
            if node.is_open:
                return TreeNode(node.predicate, (), True)
            return TreeNode(node.predicate, tuple(close(c) for c in node.children), node.terminated)

        return LogicTree(close(self.root))

    def children_at(self, path: RulePath) -> List[int]:
        for p, node in self.walk():
            if p == path:
                return [c.predicate for c in node.children]
        raise TreeError(f"no node at path {path}")


@dataclass(frozen=True)
class LevelChoice:
    """Per frontier path, the ordered child sequence ending with STOP.

    ``logprob`` is the state-transition log-probability (summed over emission
    orders of each sibling set); ``ordered_logprob`` is the log-probability of
    the exact token sequence that was drawn. Both are under the unperturbed
    policy.
    """

    slots: Tuple[Tuple[RulePath, Tuple[int, ...]], ...]
    logprob: float = 0.0
    ordered_logprob: float = 0.0

    @classmethod
    def from_sets(cls, sets: Dict[RulePath, Sequence[int]]) -> "LevelChoice":
        return cls(tuple((path, tuple(sorted(kids)) + (STOP,)) for path, kids in sets.items()))

    def children(self) -> Dict[RulePath, Tuple[int, ...]]:
        return {path: seq[:-1] for path, seq in self.slots}

    @property
    def is_stop(self) -> bool:
        return all(len(seq) == 1 for _, seq in self.slots)

    @property
    def n_added(self) -> int:
        return sum(len(seq) - 1 for _, seq in self.slots)


def expand(tree: LogicTree, choice: LevelChoice, space: TreeSpace) -> LogicTree:
    """Grow every frontier path by one level according to ``choice``.

    Raises:
        TreeError: If the tree is terminal, the choice does not address exactly
            the frontier, a slot exceeds the width, repeats a sibling, uses an
            unknown or disallowed predicate, or expands past the depth cap
    """
    frontier = tree.frontier()
    if not frontier:
        raise TreeError("cannot expand a terminal tree")
    slots = dict(choice.slots)
    if len(slots) != len(choice.slots) or set(slots) != set(frontier):
        raise TreeError("choice must address exactly the frontier paths")

    plan: Dict[RulePath, Tuple[int, ...]] = {}
    for path, seq in slots.items():
        if not seq or seq[-1] != STOP or STOP in seq[:-1]:
            raise TreeError(f"slot for {path} must end with the stop symbol")
        kids = seq[:-1]
        if len(kids) > space.max_width:
            raise TreeError(f"{len(kids)} children at {path} exceed width {space.max_width}")
        if len(set(kids)) != len(kids):
            raise TreeError(f"duplicate sibling at {path}")
        allowed = set(space.allowed_children(path[-1]))
        if any(k not in allowed for k in kids):
            raise TreeError(f"disallowed child predicate at {path}: {kids}")
        if kids and len(path) - 1 >= space.max_depth:
            raise TreeError(f"expansion at {path} passes depth {space.max_depth}")
        plan[path] = kids

    def grow(path: RulePath, node: TreeNode) -> TreeNode:
        if node.is_open:
            kids = plan[path]
            if not kids:
                return TreeNode(node.predicate, (), True)
            return _node(node.predicate, [TreeNode(k) for k in kids])
        return TreeNode(
            node.predicate,
            tuple(grow(path + (c.predicate,), c) for c in node.children),
            node.terminated,
        )

    return LogicTree(grow((tree.root.predicate,), tree.root))


def paths(tree: LogicTree, include_root: bool = False) -> List[RulePath]:
    """Every root-to-node path with at least one body predicate, depth-first."""
    return [p for p, _ in tree.walk() if include_root or len(p) >= 2]


def canonical_key(tree: LogicTree) -> str:
    """Sibling-order-free key; open leaves carry a trailing ``*``."""

    def key(node: TreeNode) -> str:
        if node.children:
            return f"{node.predicate}(" + ",".join(key(c) for c in node.children) + ")"
        return f"{node.predicate}*" if node.is_open else str(node.predicate)

    return key(tree.root)


@dataclass(frozen=True)
class Trajectory:
    """States R_0..R_t (all non-terminal) and the choices between them.

    The final step is the stop decision on R_t; ``terminal`` is R_t with every
    frontier path stopped.
    """

    states: Tuple[LogicTree, ...]
    choices: Tuple[LevelChoice, ...]
    stop_logprob: float = 0.0

    def __post_init__(self):
        if len(self.states) != len(self.choices) + 1:
            raise TreeError("a trajectory needs exactly one choice per transition")

    @property
    def terminal(self) -> LogicTree:
        return self.states[-1].terminated()

    @property
    def length(self) -> int:
        return len(self.choices)

    @classmethod
    def from_tree(cls, tree: LogicTree, space: TreeSpace) -> "Trajectory":
        """Reconstruct the unique level-wise trajectory that ends in ``tree``."""
        if tree.depth > space.max_depth:
            raise TreeError(f"tree depth {tree.depth} exceeds {space.max_depth}")
        final = tree.terminated()
        state = LogicTree.initial(final.head)
        states = [state]
        choices = []
        while True:
            sets = {p: final.children_at(p) for p in state.frontier()}
            if not any(sets.values()):
                break
            choice = LevelChoice.from_sets(sets)
            state = expand(state, choice, space)
            states.append(state)
            choices.append(choice)
        return cls(tuple(states), tuple(choices))

    def replay(self, space: TreeSpace) -> List[LogicTree]:
        """Fold ``expand`` over the stored choices starting from R_0."""
        state = LogicTree.initial(self.states[0].head)
        out = [state]
        for choice in self.choices:
            state = expand(state, choice, space)
            out.append(state)
        return out


def search_space_bound(space: TreeSpace) -> int:
    """The N^(W^d) size bound for the tree space."""
    return space.n_predicates ** (space.max_width**space.max_depth)


def enumerate_terminal_trees(
    space: TreeSpace, root: int, cap: Optional[int] = DEFAULT_ENUMERATION_CAP
) -> List[LogicTree]:
    """Every distinct terminal tree rooted at ``root``, in canonical order.

    Raises:
        SpaceTooLargeError: If the N^(W^d) bound exceeds ``cap``
    """
    bound = search_space_bound(space)
    if cap is not None and bound > cap:
        raise SpaceTooLargeError(f"search space bound {bound} exceeds cap {cap}")

    def subtrees(pid: int, depth: int) -> List[TreeNode]:
        if depth >= space.max_depth:
            return [TreeNode(pid, (), True)]
        out = [TreeNode(pid, (), True)]
        allowed = space.allowed_children(pid)
        for k in range(1, space.max_width + 1):
            for combo in itertools.combinations(allowed, k):
                options = [subtrees(c, depth + 1) for c in combo]
                for kids in itertools.product(*options):
                    out.append(TreeNode(pid, tuple(kids), False))
        return out

    return [LogicTree(node) for node in subtrees(root, 0)]
