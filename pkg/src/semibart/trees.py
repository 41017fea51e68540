"""Binary regression trees: routing, priors, marginal likelihood, leaf draws.

Trees split on columns of the tree design matrix. A numeric rule sends rows
with ``value < threshold`` to the left (TRUE) child; a categorical rule
sends rows whose level code lies in the rule's level set to the left. A
level code unseen in training is never in the set, so it routes right.
Terminal nodes own the indices of the training rows that reach them.

Thresholds are always chosen among the observed values of a covariate
within the node (by sorted index), which makes routing invariant under
strictly increasing transformations of any column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

# Shrink-flagged terminal nodes replace sigma_mu^2 by this multiple of it,
# a numerically safe stand-in for a zero prior variance.
SHRINK_FACTOR = 1e-10


@dataclass(frozen=True)
class SplitRule:
    """Decision rule at an internal node.

    ``threshold`` applies to numeric columns (strictly-less goes left);
    ``levels`` applies to categorical columns (code-in-set goes left).
    ``shared`` records whether the covariate also appears in the linear
    design; ``categorical_x1`` whether it is a >2-level categorical
    covariate of primary interest.
    """

    var: int
    threshold: float = math.nan
    levels: frozenset[int] | None = None
    shared: bool = False
    categorical_x1: bool = False

    def goes_left(self, column: np.ndarray) -> np.ndarray:
        if self.levels is not None:
            if len(self.levels) == 1:
                (lvl,) = self.levels
                return column == lvl
            return np.isin(column, list(self.levels))
        return column < self.threshold


class Node:
    """Tree node; a leaf when ``rule`` is None, else an internal split."""

    __slots__ = ("depth", "rule", "left", "right", "value", "rows", "shrink")

    def __init__(self, depth: int, rows: np.ndarray | None = None):
        self.depth = depth
        self.rule: SplitRule | None = None
        self.left: Node | None = None
        self.right: Node | None = None
        self.value = 0.0
        self.rows = rows  # int indices of training rows reaching this node
        self.shrink = False

    @property
    def is_leaf(self) -> bool:
        return self.rule is None

    def copy(self) -> "Node":
        out = Node(self.depth, self.rows)  # row arrays are treated as immutable
        out.rule = self.rule
        out.value = self.value
        out.shrink = self.shrink
        if self.rule is not None:
            out.left = self.left.copy()
            out.right = self.right.copy()
        return out


class Tree:
    """A single binary regression tree over ``n_rows`` training rows."""

    __slots__ = ("root", "n_rows")

    def __init__(self, root: Node, n_rows: int):
        self.root = root
        self.n_rows = n_rows

    @classmethod
    def stump(cls, n_rows: int) -> "Tree":
        root = Node(0, rows=np.arange(n_rows))
        return cls(root, n_rows)

    def copy(self) -> "Tree":
        return Tree(self.root.copy(), self.n_rows)

    def nodes(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            nd = stack.pop()
            out.append(nd)
            if nd.rule is not None:
                stack.append(nd.right)
                stack.append(nd.left)
        return out

    def leaves(self) -> list[Node]:
        return [nd for nd in self.nodes() if nd.rule is None]

    def internals(self) -> list[Node]:
        return [nd for nd in self.nodes() if nd.rule is not None]

    @property
    def is_stump(self) -> bool:
        return self.root.rule is None

    def n_terminal(self) -> int:
        return len(self.leaves())

    def split_vars(self) -> set[int]:
        return {nd.rule.var for nd in self.internals()}


def _route(node: Node, x2: np.ndarray) -> None:
    if node.rule is None:
        return
    col = x2[node.rows, node.rule.var]
    mask = node.rule.goes_left(col)
    node.left.rows = node.rows[mask]
    node.right.rows = node.rows[~mask]
    _route(node.left, x2)
    _route(node.right, x2)


def assign_observations(tree: Tree, x2: np.ndarray) -> Tree:
    """Populate every node's member rows by routing all training rows."""
    tree.root.rows = np.arange(tree.n_rows)
    _route(tree.root, x2)
    return tree


def reassign_subtree(node: Node, x2: np.ndarray) -> None:
    """Re-route ``node.rows`` through the subtree below ``node``."""
    _route(node, x2)


def tree_log_prior(tree: Tree, eta: float, zeta: float) -> float:
    """Log branching-process prior: internal nodes split with probability
    eta * (1 + depth)^-zeta, terminals carry the complement."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if zeta < 0:
        raise ValueError(f"zeta must be nonnegative, got {zeta}")
    total = 0.0
    for nd in tree.nodes():
        p_split = eta * (1.0 + nd.depth) ** -zeta
        total += math.log(p_split) if nd.rule is not None else math.log1p(-p_split)
    return total


def log_marginal_likelihood(
    tree: Tree,
    partial_residuals: np.ndarray,
    sigma2: float,
    sigma_mu2: float,
    shrink_variance: float | None = None,
) -> float:
    """Log marginal likelihood of the residuals given the tree topology,
    integrating out the leaf values.

    Per terminal node with n members and residual sum s, contributes
    ``0.5 * log(sigma2 / (sigma_mu2 * n + sigma2))
    + sigma_mu2 * s^2 / (2 * sigma2 * (sigma_mu2 * n + sigma2))``.
    Shrink-flagged nodes use the shrink variance in place of sigma_mu2.
    Constant in the topology (the Gaussian normalizer and the residual sum
    of squares) is dropped; it cancels in Metropolis-Hastings ratios.
    """
    if shrink_variance is None:
        shrink_variance = SHRINK_FACTOR * sigma_mu2
    total = 0.0
    for leaf in tree.leaves():
        if leaf.rows is None or leaf.rows.size == 0:
            raise ValueError("empty terminal node: member sets must be populated")
        n = leaf.rows.size
        s2m = shrink_variance if leaf.shrink else sigma_mu2
        s = float(partial_residuals[leaf.rows].sum())
        denom = s2m * n + sigma2
        total += 0.5 * math.log(sigma2 / denom) + s2m * s * s / (2.0 * sigma2 * denom)
    return total


def sample_leaf_values(
    tree: Tree,
    partial_residuals: np.ndarray,
    sigma2: float,
    sigma_mu2: float,
    rng: RngStream,
    shrink_variance: float | None = None,
) -> Tree:
    """Draw every leaf value from its Gaussian full conditional:
    mean (s / sigma2) / (n / sigma2 + 1 / sigma_mu2), variance
    1 / (n / sigma2 + 1 / sigma_mu2), with the shrink variance replacing
    sigma_mu2 on shrink-flagged leaves."""
    if shrink_variance is None:
        shrink_variance = SHRINK_FACTOR * sigma_mu2
    leaves = tree.leaves()
    z = rng.gen.standard_normal(len(leaves))
    for leaf, zi in zip(leaves, z):
        s2m = shrink_variance if leaf.shrink else sigma_mu2
        n = leaf.rows.size
        prec = n / sigma2 + (1.0 / s2m if s2m > 0 else math.inf)
        var = 1.0 / prec
        mean = var * float(partial_residuals[leaf.rows].sum()) / sigma2
        leaf.value = mean + math.sqrt(var) * zi
    return tree


def fitted_values(tree: Tree, out: np.ndarray | None = None) -> np.ndarray:
    """Per-training-row fitted contribution of one tree."""
    if out is None:
        out = np.empty(tree.n_rows)
    for leaf in tree.leaves():
        out[leaf.rows] = leaf.value
    return out


def predict_tree(tree: Tree, x2: np.ndarray) -> np.ndarray:
    """Route arbitrary rows through the tree and return leaf values."""
    out = np.empty(x2.shape[0])
    stack = [(tree.root, np.arange(x2.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if node.rule is None:
            out[rows] = node.value
            continue
        mask = node.rule.goes_left(x2[rows, node.rule.var])
        stack.append((node.left, rows[mask]))
        stack.append((node.right, rows[~mask]))
    return out


@dataclass
class Forest:
    """A sum-of-trees ensemble; the prediction is the sum over trees."""

    trees: list[Tree]

    def predict(self, x2: np.ndarray) -> np.ndarray:
        out = np.zeros(x2.shape[0])
        for tree in self.trees:
            out += predict_tree(tree, x2)
        return out


def predict(forest: Forest, x2: np.ndarray) -> np.ndarray:
    return forest.predict(np.asarray(x2, dtype=float))


@dataclass
class Validity:
    valid: bool
    reason: str | None = None


def validate_tree(
    tree: Tree,
    shared_vars: frozenset[int] | set[int],
    categorical_x1_vars: frozenset[int] | set[int],
    n_min: int,
) -> Validity:
    """Identifiability and size checks; sets shrink flags on valid trees.

    A tree is invalid when (a) its distinct split covariates are exactly
    one covariate in the shared set, (b) some root-to-leaf path carries
    two or more splits, all on the same >2-level categorical primary
    covariate, or (c) some terminal node holds fewer than ``n_min`` rows.
    On a valid tree, a terminal node is shrink-flagged exactly when its
    ancestors' rules all use one single covariate that is shared.
    """
    vars_used = tree.split_vars()
    if len(vars_used) == 1:
        (only,) = vars_used
        if only in shared_vars:
            return Validity(False, "single shared covariate defines every split")

    # One pass collecting per-leaf ancestor-covariate summaries.
    leaf_info: list[tuple[Node, frozenset[int], int]] = []
    stack: list[tuple[Node, tuple[int, ...]]] = [(tree.root, ())]
    while stack:
        node, path = stack.pop()
        if node.rule is None:
            leaf_info.append((node, frozenset(path), len(path)))
            continue
        nxt = path + (node.rule.var,)
        stack.append((node.left, nxt))
        stack.append((node.right, nxt))

    for _, path_vars, path_len in leaf_info:
        if path_len >= 2 and len(path_vars) == 1:
            (v,) = path_vars
            if v in categorical_x1_vars:
                return Validity(
                    False,
                    "branch of repeated splits on one categorical primary covariate",
                )

    for leaf, _, _ in leaf_info:
        if leaf.rows is None:
            raise ValueError("member sets must be populated before validation")
        if leaf.rows.size < n_min:
            return Validity(
                False, f"terminal node with {leaf.rows.size} < {n_min} observations"
            )

    for leaf, path_vars, _ in leaf_info:
        leaf.shrink = len(path_vars) == 1 and next(iter(path_vars)) in shared_vars
    return Validity(True)


# --- snapshots and textual serialization -----------------------------------

SNAPSHOT_DTYPE = np.dtype(
    [
        ("var", np.int32),  # -1 marks a leaf
        ("threshold", np.float64),  # level code for categorical rules
        ("value", np.float64),
        ("n", np.int32),
        ("shrink", np.bool_),
        ("depth", np.int16),
    ]
)


def snapshot_tree(tree: Tree) -> np.ndarray:
    """Compact preorder record of the tree (rules and leaf values only)."""
    records = []

    def rec(node: Node) -> None:
        n = 0 if node.rows is None else node.rows.size
        if node.rule is None:
            records.append((-1, math.nan, node.value, n, node.shrink, node.depth))
        else:
            thr = node.rule.threshold
            if node.rule.levels is not None:
                (thr,) = node.rule.levels
            records.append((node.rule.var, float(thr), 0.0, n, False, node.depth))
            rec(node.left)
            rec(node.right)

    rec(tree.root)
    return np.array(records, dtype=SNAPSHOT_DTYPE)


def tree_from_snapshot(
    arr: np.ndarray,
    n_rows: int,
    x2_is_categorical: np.ndarray | None = None,
    shared_vars: frozenset[int] | set[int] = frozenset(),
    categorical_x1_vars: frozenset[int] | set[int] = frozenset(),
) -> Tree:
    """Rebuild a tree from a preorder snapshot. Member rows are not
    populated; call :func:`assign_observations` if they are needed."""
    pos = 0

    def rec(depth: int) -> Node:
        nonlocal pos
        rec_row = arr[pos]
        pos += 1
        node = Node(depth)
        var = int(rec_row["var"])
        if var < 0:
            node.value = float(rec_row["value"])
            node.shrink = bool(rec_row["shrink"])
            return node
        is_cat = bool(x2_is_categorical[var]) if x2_is_categorical is not None else False
        if is_cat:
            rule = SplitRule(
                var,
                levels=frozenset([int(rec_row["threshold"])]),
                shared=var in shared_vars,
                categorical_x1=var in categorical_x1_vars,
            )
        else:
            rule = SplitRule(
                var,
                threshold=float(rec_row["threshold"]),
                shared=var in shared_vars,
                categorical_x1=var in categorical_x1_vars,
            )
        node.rule = rule
        node.left = rec(depth + 1)
        node.right = rec(depth + 1)
        return node

    root = rec(0)
    return Tree(root, n_rows)


def dump_tree(tree: Tree, names: list[str] | None = None, tree_index: int = 0) -> str:
    """One line per node: id, depth, kind, covariate, threshold, mu, n."""
    lines = [f"# tree {tree_index}"]
    counter = [0]

    def rec(node: Node) -> None:
        nid = counter[0]
        counter[0] += 1
        n = "" if node.rows is None else str(node.rows.size)
        if node.rule is None:
            lines.append(f"{nid}\t{node.depth}\tleaf\t\t\t{node.value!r}\t{n}")
        else:
            var = node.rule.var
            cov = names[var] if names is not None else f"c{var}"
            if node.rule.levels is not None:
                (lvl,) = node.rule.levels
                thr = repr(float(lvl))
            else:
                thr = repr(node.rule.threshold)
            lines.append(f"{nid}\t{node.depth}\tsplit\t{cov}\t{thr}\t\t{n}")
            rec(node.left)
            rec(node.right)

    rec(tree.root)
    return "\n".join(lines)


def dump_forest(forest: Forest | list[Tree], names: list[str] | None = None) -> str:
    trees = forest.trees if isinstance(forest, Forest) else forest
    return "\n".join(dump_tree(t, names, i) for i, t in enumerate(trees))


def parse_forest(
    text: str,
    n_rows: int,
    names: list[str] | None = None,
    x2_is_categorical: np.ndarray | None = None,
    shared_vars: frozenset[int] | set[int] = frozenset(),
    categorical_x1_vars: frozenset[int] | set[int] = frozenset(),
) -> list[Tree]:
    """Inverse of :func:`dump_forest`; rebuilds trees from the text dump."""
    name_index = {nm: i for i, nm in enumerate(names)} if names is not None else None
    blocks: list[list[tuple]] = []
    for line in text.splitlines():
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("# tree"):
            blocks.append([])
            continue
        _, depth, kind, cov, thr, mu, n = line.split("\t")
        if kind == "leaf":
            blocks[-1].append((-1, math.nan, float(mu), int(n or 0), False, int(depth)))
        else:
            if name_index is not None and cov in name_index:
                var = name_index[cov]
            else:
                var = int(cov.lstrip("c"))
            blocks[-1].append((var, float(thr), 0.0, int(n or 0), False, int(depth)))
    trees = []
    for block in blocks:
        arr = np.array(block, dtype=SNAPSHOT_DTYPE)
        trees.append(
            tree_from_snapshot(
                arr, n_rows, x2_is_categorical, shared_vars, categorical_x1_vars
            )
        )
    return trees
