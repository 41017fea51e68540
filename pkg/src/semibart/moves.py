"""Proposal kernels for the tree sampler.

Grow escalates to a double grow when a shared covariate is drawn to split
a stump, so no proposal leaves the tree with a single shared covariate;
prune escalates to a double prune for the same reason. Change and swap
retry until a valid structure is found and fall back to a stump after the
retry limit. Degenerate proposals (nothing to grow, prune a stump, ...)
are auto-rejected by the Metropolis-Hastings step; invalid structures
carry zero prior mass, so the acceptance ratio needs no proposal
correction beyond the posterior ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .trees import (
    Node,
    SplitRule,
    Tree,
    log_marginal_likelihood,
    reassign_subtree,
    tree_log_prior,
    validate_tree,
)

MOVE_KINDS = ("grow", "prune", "change", "swap")
RESULT_KINDS = MOVE_KINDS + ("double-grow", "double-prune", "stump-fallback")


@dataclass
class MoveContext:
    """Chain-constant inputs shared by every proposal."""

    x2: np.ndarray
    x2_is_categorical: np.ndarray
    shared_vars: frozenset[int]
    categorical_x1_vars: frozenset[int]
    n_min: int = 5
    retry_limit: int = 5
    double_grow_both: bool = False

    @property
    def p2(self) -> int:
        return self.x2.shape[1]

    def validate(self, tree: Tree):
        return validate_tree(tree, self.shared_vars, self.categorical_x1_vars, self.n_min)


@dataclass
class MoveProposal:
    kind: str
    tree: Tree | None
    attempts: int = 1
    auto_reject: bool = False


def _draw_rule_for_var(ctx: MoveContext, var: int, rows: np.ndarray, rng: RngStream) -> SplitRule | None:
    col = ctx.x2[rows, var]
    shared = var in ctx.shared_vars
    cat_x1 = var in ctx.categorical_x1_vars
    if ctx.x2_is_categorical[var]:
        codes = np.unique(col)
        if codes.size < 2:
            return None
        lvl = int(codes[rng.gen.integers(codes.size)])
        return SplitRule(var, levels=frozenset([lvl]), shared=shared, categorical_x1=cat_x1)
    vals = np.unique(col)
    if vals.size < 2:
        return None
    # Threshold chosen by sorted index among observed values; skipping the
    # minimum keeps both children nonempty and preserves monotone invariance.
    idx = int(rng.gen.integers(1, vals.size))
    return SplitRule(var, threshold=float(vals[idx]), shared=shared, categorical_x1=cat_x1)


def _draw_rule(ctx: MoveContext, rows: np.ndarray, rng: RngStream, exclude: int | None = None) -> SplitRule | None:
    if exclude is None:
        var = int(rng.gen.integers(ctx.p2))
    else:
        if ctx.p2 < 2:
            return None
        var = int(rng.gen.integers(ctx.p2 - 1))
        if var >= exclude:
            var += 1
    return _draw_rule_for_var(ctx, var, rows, rng)


def _split(node: Node, rule: SplitRule, x2: np.ndarray) -> None:
    node.rule = rule
    mask = rule.goes_left(x2[node.rows, rule.var])
    node.left = Node(node.depth + 1, rows=node.rows[mask])
    node.right = Node(node.depth + 1, rows=node.rows[~mask])


def propose_grow(tree: Tree, ctx: MoveContext, rng: RngStream) -> MoveProposal:
    """Split a uniformly chosen growable terminal node; a stump split on a
    shared covariate escalates to a double grow, adding a second split on
    a different covariate below one (or both) of the new children."""
    if not any(lf.rows.size >= 2 * ctx.n_min for lf in tree.leaves()):
        return MoveProposal("grow", None, 0, auto_reject=True)
    was_stump = tree.is_stump
    for attempt in range(1, ctx.retry_limit + 1):
        cand = tree.copy()
        growable = [lf for lf in cand.leaves() if lf.rows.size >= 2 * ctx.n_min]
        target = growable[rng.gen.integers(len(growable))]
        rule = _draw_rule(ctx, target.rows, rng)
        if rule is None:
            continue
        _split(target, rule, ctx.x2)
        kind = "grow"
        if was_stump and rule.var in ctx.shared_vars:
            kind = "double-grow"
            children = [target.left, target.right]
            if ctx.double_grow_both:
                picks = children
            else:
                picks = [children[rng.gen.integers(2)]]
            ok = True
            for child in picks:
                rule2 = _draw_rule(ctx, child.rows, rng, exclude=rule.var)
                if rule2 is None or child.rows.size < 2 * ctx.n_min:
                    ok = False
                    break
                _split(child, rule2, ctx.x2)
            if not ok:
                continue
        if ctx.validate(cand).valid:
            return MoveProposal(kind, cand, attempt)
    return MoveProposal("grow", None, ctx.retry_limit, auto_reject=True)


def _collapse(node: Node) -> None:
    node.rule = None
    node.left = None
    node.right = None
    node.value = 0.0


def propose_prune(tree: Tree, ctx: MoveContext, rng: RngStream) -> MoveProposal:
    """Collapse a uniformly chosen parent of two terminal nodes; prune
    again (possibly down to a stump) while the result is invalid."""
    if tree.is_stump:
        return MoveProposal("prune", None, 0, auto_reject=True)
    cand = tree.copy()
    prunes = 0
    while True:
        parents = [
            nd for nd in cand.internals() if nd.left.is_leaf and nd.right.is_leaf
        ]
        target = parents[rng.gen.integers(len(parents))]
        _collapse(target)
        prunes += 1
        if ctx.validate(cand).valid:
            break
    kind = "prune" if prunes == 1 else "double-prune"
    return MoveProposal(kind, cand, prunes)


def propose_change(tree: Tree, ctx: MoveContext, rng: RngStream) -> MoveProposal:
    """Redraw the rule of a uniformly chosen internal node; after the
    retry limit a stump is proposed instead."""
    if tree.is_stump:
        return MoveProposal("change", None, 0, auto_reject=True)
    for attempt in range(1, ctx.retry_limit + 1):
        cand = tree.copy()
        internals = cand.internals()
        node = internals[rng.gen.integers(len(internals))]
        rule = _draw_rule(ctx, node.rows, rng)
        if rule is None:
            continue
        node.rule = rule
        reassign_subtree(node, ctx.x2)
        if ctx.validate(cand).valid:
            return MoveProposal("change", cand, attempt)
    return _stump_fallback(tree, ctx)


def propose_swap(tree: Tree, ctx: MoveContext, rng: RngStream) -> MoveProposal:
    """Exchange the rules of two uniformly chosen parents of terminal
    nodes; after the retry limit a stump is proposed instead."""
    parents = [nd for nd in tree.internals() if nd.left.is_leaf and nd.right.is_leaf]
    if len(parents) < 2:
        return MoveProposal("swap", None, 0, auto_reject=True)
    for attempt in range(1, ctx.retry_limit + 1):
        cand = tree.copy()
        cands = [nd for nd in cand.internals() if nd.left.is_leaf and nd.right.is_leaf]
        i, j = rng.gen.choice(len(cands), size=2, replace=False)
        a, b = cands[int(i)], cands[int(j)]
        a.rule, b.rule = b.rule, a.rule
        reassign_subtree(a, ctx.x2)
        reassign_subtree(b, ctx.x2)
        if ctx.validate(cand).valid:
            return MoveProposal("swap", cand, attempt)
    return _stump_fallback(tree, ctx)


def _stump_fallback(tree: Tree, ctx: MoveContext) -> MoveProposal:
    stump = Tree.stump(tree.n_rows)
    stump.root.rows = tree.root.rows
    ctx.validate(stump)
    return MoveProposal("stump-fallback", stump, ctx.retry_limit)


def mh_step(
    current: Tree,
    proposal: MoveProposal,
    partial_residuals: np.ndarray,
    sigma2: float,
    sigma_mu2: float,
    eta: float,
    zeta: float,
    rng: RngStream,
    shrink_variance: float | None = None,
) -> tuple[Tree, bool]:
    """Accept the proposal with probability min{1, posterior ratio};
    auto-rejected proposals always keep the current tree. Proposals are
    treated as symmetric: invalid trees carry zero prior mass, so the
    ratio reduces to marginal likelihood times tree prior."""
    if proposal.auto_reject or proposal.tree is None:
        return current, False
    log_current = log_marginal_likelihood(
        current, partial_residuals, sigma2, sigma_mu2, shrink_variance
    ) + tree_log_prior(current, eta, zeta)
    log_proposed = log_marginal_likelihood(
        proposal.tree, partial_residuals, sigma2, sigma_mu2, shrink_variance
    ) + tree_log_prior(proposal.tree, eta, zeta)
    log_alpha = log_proposed - log_current
    if log_alpha >= 0.0:
        rng.gen.random()  # consume the uniform either way, for stream alignment
        return proposal.tree, True
    u = rng.gen.random()
    if u == 0.0 or math.log(u) < log_alpha:
        return proposal.tree, True
    return current, False


PROPOSERS = {
    "grow": propose_grow,
    "prune": propose_prune,
    "change": propose_change,
    "swap": propose_swap,
}


def choose_move(move_probs: np.ndarray, rng: RngStream) -> str:
    u = rng.gen.random()
    return MOVE_KINDS[min(int(np.searchsorted(move_probs, u, side="right")), 3)]


def cumulative_move_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.size != 4 or (probs < 0).any():
        raise ValueError("move probabilities must be 4 nonnegative numbers")
    total = probs.sum()
    if total <= 0:
        raise ValueError("move probabilities must not all be zero")
    return np.cumsum(probs / total)[:4]
