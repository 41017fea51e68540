"""Gibbs samplers: the combined model (linear predictor plus trees with
shared covariates), the separated configuration (disjoint covariates,
fixed isotropic coefficient prior), and the trees-only model.

One chain is strictly sequential. Per iteration: (i) draw the linear
coefficients from their MVN full conditional and then the coefficient
covariance from its inverse-Wishart full conditional, (ii) for each tree
compute the partial residuals, propose and Metropolis-accept a move, and
redraw the leaf values, (iii) draw the error variance and refresh the
fitted values. In probit mode a truncated-normal latent response is drawn
at the top of each iteration and replaces the response everywhere, with
the error variance pinned at 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr
from scipy.stats import chi2

from . import linalg
from .data import DesignMatrices, ScalingRecord, scale_response, unscale_beta, unscale_predictions, unscale_sigma2
from .linalg import NumericalError, cholesky, sample_inverse_gamma, sample_inverse_wishart, truncated_normal_vector
from .moves import (
    MOVE_KINDS,
    RESULT_KINDS,
    MoveContext,
    PROPOSERS,
    choose_move,
    cumulative_move_probs,
    mh_step,
)
from .rng import RngStream
from .trees import (
    SHRINK_FACTOR,
    Tree,
    dump_forest,
    fitted_values,
    parse_forest,
    sample_leaf_values,
    snapshot_tree,
    tree_from_snapshot,
    validate_tree,
)

CHECKPOINT_FORMAT_VERSION = 1

MODES = ("csp", "ssp", "bart")


@dataclass
class Hyperparameters:
    """Sampler configuration.

    The leaf-prior scale is ``sigma_mu = 0.5 / (k * sqrt(n_trees))`` with
    ``k = 2`` by default. ``lam`` defaults to the value that puts prior
    probability 0.9 on the error variance being below the residual
    variance of a least-squares fit of the scaled response on the linear
    design (on the response variance when there is no linear design).
    """

    n_trees: int = 200
    n_iter: int = 4000
    burn_in: int = 2000
    k: float = 2.0
    eta: float = 0.95
    zeta: float = 2.0
    nu: float = 3.0
    lam: float | None = None
    b: np.ndarray | None = None
    V: np.ndarray | None = None
    v: float | None = None
    isotropic: bool = False
    sigma_b2: float = 100.0
    n_min: int = 5
    move_probs: tuple = (0.25, 0.25, 0.40, 0.10)
    retry_limit: int = 5
    double_grow_both: bool = False
    store_forests: bool = True

    def check(self) -> None:
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.zeta < 0:
            raise ValueError(f"zeta must be nonnegative, got {self.zeta}")
        if self.nu <= 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.lam is not None and self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.n_trees < 1:
            raise ValueError("need at least one tree")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if self.k <= 0:
            raise ValueError("k must be positive")
        cumulative_move_probs(self.move_probs)

    @property
    def sigma_mu(self) -> float:
        return 0.5 / (self.k * math.sqrt(self.n_trees))


@dataclass
class MoveTrace:
    """Per (iteration, tree) move bookkeeping, compactly encoded."""

    selected: np.ndarray  # uint8 codes into MOVE_KINDS
    result: np.ndarray  # uint8 codes into RESULT_KINDS
    accepted: np.ndarray  # bool

    def selected_kinds(self) -> np.ndarray:
        return np.array(MOVE_KINDS)[self.selected]

    def result_kinds(self) -> np.ndarray:
        return np.array(RESULT_KINDS)[self.result]

    def rows(self):
        """(iteration, tree, selected, result, accepted) tuples."""
        n_iter, n_trees = self.selected.shape
        for m in range(n_iter):
            for t in range(n_trees):
                yield (
                    m,
                    t,
                    MOVE_KINDS[self.selected[m, t]],
                    RESULT_KINDS[self.result[m, t]],
                    bool(self.accepted[m, t]),
                )


@dataclass
class ChainState:
    forest: list[Tree]
    g: np.ndarray  # n_trees x n per-tree fitted contributions
    tree_total: np.ndarray
    beta: np.ndarray
    omega: np.ndarray
    sigma2: float
    z: np.ndarray | None  # probit latent response
    iteration: int = 0


@dataclass
class PosteriorDraws:
    """Kept draws plus everything needed to interpret them.

    ``beta``, ``sigma2``, and ``yhat`` are on the original response scale
    (in probit mode, on the unit-variance latent scale with ``sigma2``
    identically 1). ``forests`` holds per-kept-iteration lists of compact
    per-tree snapshots with leaf values on the internal (scaled) response
    scale.
    """

    design: DesignMatrices
    mode: str
    probit: bool
    hyper: Hyperparameters
    seed: tuple
    scaling: ScalingRecord | None
    beta: np.ndarray
    sigma2: np.ndarray
    yhat: np.ndarray
    forests: list[list[np.ndarray]] | None
    move_trace: MoveTrace
    beta_names: list[str]

    @property
    def n_kept(self) -> int:
        return self.beta.shape[0]

    def predict(self, x2: np.ndarray, x1: np.ndarray | None = None) -> np.ndarray:
        """Per-draw predictions for new rows on the original response
        scale (unit-variance latent scale in probit mode). Requires
        stored forests. Coefficients are stored on the original scale, so
        only the tree contribution and the location shift are unscaled
        here."""
        if self.forests is None:
            raise ValueError("forest snapshots were not stored for this fit")
        x2 = np.asarray(x2, dtype=float)
        n_new = x2.shape[0]
        out = np.zeros((self.n_kept, n_new))
        if self.beta.shape[1]:
            if x1 is None:
                raise ValueError("this fit has a linear design; x1 rows are required")
            out += (np.asarray(x1, dtype=float) @ self.beta.T).T
        span = 1.0 if self.scaling is None else self.scaling.span
        for k, snap in enumerate(self.forests):
            total = np.zeros(n_new)
            for arr in snap:
                tree = tree_from_snapshot(
                    arr, n_rows=0, x2_is_categorical=self.design.x2_is_categorical
                )
                total += predict_tree(tree, x2)
            out[k] += total * span
        if self.scaling is not None:
            out += 0.5 * self.scaling.span + self.scaling.y_min
        return out

    def predict_mean(self, x2, x1=None) -> np.ndarray:
        return self.predict(x2, x1).mean(axis=0)

    def predict_probability(self, x2, x1=None) -> np.ndarray:
        """Posterior class probability: the normal CDF of each latent
        draw, averaged over kept draws. Probit fits only."""
        if not self.probit:
            raise ValueError("class probabilities are only defined for probit fits")
        return ndtr(self.predict(x2, x1)).mean(axis=0)


# --- Gibbs full conditionals ---------------------------------------------------


def update_beta(x1, tree_residual, sigma2, b, omega_beta, rng: RngStream) -> np.ndarray:
    """Draw the linear coefficients from
    MVN(S (X1' r / sigma2 + Omega^-1 b), S) with
    S = (X1' X1 / sigma2 + Omega^-1)^-1."""
    x1 = np.asarray(x1, dtype=float)
    r = np.asarray(tree_residual, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        omega_l = cholesky(omega_beta)
        omega_inv = cho_solve((omega_l, True), np.eye(x1.shape[1]))
        prec = x1.T @ x1 / sigma2 + omega_inv
        h = x1.T @ r / sigma2 + omega_inv @ b
        prec_l = cholesky(prec)
        mean = cho_solve((prec_l, True), h)
        zdraw = rng.gen.standard_normal(x1.shape[1])
        return mean + solve_triangular(prec_l.T, zdraw, lower=False)
    except linalg.NotPositiveDefiniteError as exc:
        cond = float(np.linalg.cond(x1.T @ x1 / sigma2 + np.linalg.pinv(omega_beta)))
        raise NumericalError(
            f"singular coefficient update (condition number ~ {cond:.3e})"
        ) from exc


def update_omega(beta, b, V, v, rng: RngStream) -> np.ndarray:
    """Draw the coefficient covariance from IW((beta-b)(beta-b)' + V, v + 1)."""
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    d = beta - b
    return sample_inverse_wishart(np.outer(d, d) + np.asarray(V, dtype=float), v + 1, rng)


def update_sigma2(y, yhat, nu, lam, rng: RngStream) -> float:
    """Draw the error variance from IG((n + nu)/2, (S + nu*lam)/2)."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError("response and fitted values differ in length")
    s = float(((y - yhat) ** 2).sum())
    return sample_inverse_gamma((y.size + nu) / 2.0, (s + nu * lam) / 2.0, rng)


def augment_probit(y, fitted, rng: RngStream) -> np.ndarray:
    """Latent responses z_i ~ N(fitted_i, 1) truncated positive where
    y_i = 1 and negative where y_i = 0."""
    y = np.asarray(y)
    uniq = np.unique(y)
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise ValueError("probit mode needs a binary 0/1 response")
    return truncated_normal_vector(np.asarray(fitted, dtype=float), y == 1, rng)


def stack_random_effects(x1, z, b=None):
    """Column-stack the random-effect design onto X1 and extend the prior:
    b* = (b, 0_q), V* = I_(p1+q), v* = p1 + q. With no random-effect
    columns the inputs pass through unchanged."""
    x1 = np.asarray(x1, dtype=float)
    p1 = x1.shape[1]
    if b is None:
        b = np.zeros(p1)
    b = np.asarray(b, dtype=float)
    if z is None or z.shape[1] == 0:
        return x1, b, np.eye(p1), float(p1)
    z = np.asarray(z, dtype=float)
    if z.shape[0] != x1.shape[0] or z.shape[0] == 0:
        raise ValueError("random-effect design must have the same (nonzero) row count as X1")
    q = z.shape[1]
    x_star = np.hstack([x1, z])
    b_star = np.concatenate([b, np.zeros(q)])
    return x_star, b_star, np.eye(p1 + q), float(p1 + q)


def default_lambda(y_scaled: np.ndarray, x1: np.ndarray, nu: float) -> float:
    """Scale hyperparameter calibrated so that the prior puts probability
    0.9 on the error variance lying below a least-squares residual
    variance estimate."""
    n = y_scaled.size
    if x1.shape[1] and n > x1.shape[1]:
        coef, *_ = np.linalg.lstsq(x1, y_scaled, rcond=None)
        resid = y_scaled - x1 @ coef
        sigma_hat2 = float(resid @ resid) / max(n - x1.shape[1], 1)
    else:
        sigma_hat2 = float(np.var(y_scaled))
    sigma_hat2 = max(sigma_hat2, 1e-12)
    return sigma_hat2 * float(chi2.ppf(0.1, nu)) / nu


# --- the chain -----------------------------------------------------------------


def run_chain(
    design: DesignMatrices,
    hyper: Hyperparameters,
    mode: str = "csp",
    rng: RngStream | None = None,
    probit: bool = False,
    trace: list | None = None,
    resume_from: dict | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> PosteriorDraws:
    """Run one chain and return the kept draws.

    ``mode`` is one of ``csp`` (shared covariates allowed, hierarchical
    coefficient prior, double moves), ``ssp`` (disjoint designs required,
    fixed isotropic prior, single moves only), or ``bart`` (no linear
    component; the design must have no fixed or random terms).
    """
    if rng is None:
        raise ValueError("an RngStream is required")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    hyper.check()

    x1_star, b_star, v_mat, v_df = stack_random_effects(design.x1, design.z, hyper.b)
    if design.q == 0:
        if hyper.V is not None:
            v_mat = np.asarray(hyper.V, dtype=float)
        if hyper.v is not None:
            v_df = float(hyper.v)
    p_lin = x1_star.shape[1]
    beta_names = list(design.x1_names) + list(design.z_names)

    if mode == "bart" and p_lin:
        raise ValueError("bart mode has no linear component; the formula must contain no terms")
    if mode in ("csp", "ssp") and p_lin == 0:
        raise ValueError(f"{mode} mode needs at least one linear-design column")
    if mode == "ssp" and design.shared_x2:
        shared = sorted(design.x2_names[j] for j in design.shared_x2)
        raise ValueError(
            "ssp mode requires disjoint designs; shared covariates: " + ", ".join(shared)
        )
    if p_lin:
        spans = x1_star.max(axis=0) - x1_star.min(axis=0)
        if (spans == 0).any():
            j = int(np.argmax(spans == 0))
            raise ValueError(
                f"intercept column detected in X1 (column {beta_names[j]!r} is constant)"
            )
    if v_df < p_lin:
        raise ValueError(f"IW degrees of freedom {v_df} below the linear dimension {p_lin}")

    n = design.n
    y_raw = design.y.astype(float)
    if probit:
        work_y = np.zeros(n)  # replaced by the latent draw each iteration
        scaling = None
        uniq = np.unique(y_raw)
        if not np.isin(uniq, (0.0, 1.0)).all():
            raise ValueError("probit mode needs a binary 0/1 response")
    else:
        work_y, scaling = scale_response(y_raw)

    lam = hyper.lam
    if lam is None:
        lam = default_lambda(work_y if not probit else y_raw - y_raw.mean(), x1_star, hyper.nu)

    sigma_mu2 = hyper.sigma_mu**2
    shrink_var = SHRINK_FACTOR * sigma_mu2
    # In ssp mode the double-move escalation must be unreachable: the
    # shared set is empty by the check above, so an empty context set is
    # equivalent; we pass the design's (empty) set through unchanged.
    ctx = MoveContext(
        x2=design.x2,
        x2_is_categorical=design.x2_is_categorical,
        shared_vars=design.shared_x2,
        categorical_x1_vars=design.categorical_x1_x2,
        n_min=hyper.n_min,
        retry_limit=hyper.retry_limit,
        double_grow_both=hyper.double_grow_both,
    )
    cum_probs = cumulative_move_probs(hyper.move_probs)

    # state
    if resume_from is not None:
        state = _state_from_checkpoint(resume_from, design, hyper, n)
        start_iter = state.iteration
    else:
        forest = [Tree.stump(n) for _ in range(hyper.n_trees)]
        state = ChainState(
            forest=forest,
            g=np.zeros((hyper.n_trees, n)),
            tree_total=np.zeros(n),
            beta=np.zeros(p_lin),
            omega=(hyper.sigma_b2 * np.eye(p_lin)) if hyper.isotropic or mode == "ssp" else np.eye(p_lin),
            sigma2=1.0 if probit else float(np.var(work_y)),
            z=None,
            iteration=0,
        )
        start_iter = 0
    isotropic = hyper.isotropic or mode == "ssp"

    n_kept = hyper.n_iter - hyper.burn_in
    beta_draws = np.empty((n_kept, p_lin))
    sigma2_draws = np.empty(n_kept)
    yhat_draws = np.empty((n_kept, n))
    forests: list[list[np.ndarray]] | None = [] if hyper.store_forests else None
    sel_codes = np.zeros((hyper.n_iter, hyper.n_trees), dtype=np.uint8)
    res_codes = np.zeros((hyper.n_iter, hyper.n_trees), dtype=np.uint8)
    acc_flags = np.zeros((hyper.n_iter, hyper.n_trees), dtype=bool)
    result_code = {kind: i for i, kind in enumerate(RESULT_KINDS)}
    selected_code = {kind: i for i, kind in enumerate(MOVE_KINDS)}

    lin = x1_star @ state.beta if p_lin else np.zeros(n)
    rt_buf = np.empty(n)

    for m in range(start_iter, hyper.n_iter):
        if probit:
            state.z = augment_probit(y_raw, lin + state.tree_total, rng)
            work_y = state.z
            if trace is not None:
                trace.append(("augment", m))
        if p_lin:
            r_full = work_y - state.tree_total
            state.beta = update_beta(x1_star, r_full, state.sigma2, b_star, state.omega, rng)
            if trace is not None:
                trace.append(("beta", m))
            if not isotropic:
                state.omega = update_omega(state.beta, b_star, v_mat, v_df, rng)
                if trace is not None:
                    trace.append(("omega", m))
            lin = x1_star @ state.beta
        base = work_y - lin
        for t in range(hyper.n_trees):
            np.subtract(base, state.tree_total, out=rt_buf)
            rt_buf += state.g[t]
            kind = choose_move(cum_probs, rng)
            proposal = PROPOSERS[kind](state.forest[t], ctx, rng)
            newtree, accepted = mh_step(
                state.forest[t], proposal, rt_buf, state.sigma2, sigma_mu2,
                hyper.eta, hyper.zeta, rng, shrink_var,
            )
            state.forest[t] = newtree
            sel_codes[m, t] = selected_code[kind]
            res_codes[m, t] = result_code[proposal.kind if not proposal.auto_reject else kind]
            acc_flags[m, t] = accepted
            sample_leaf_values(newtree, rt_buf, state.sigma2, sigma_mu2, rng, shrink_var)
            state.tree_total -= state.g[t]
            fitted_values(newtree, out=state.g[t])
            state.tree_total += state.g[t]
            if trace is not None:
                trace.append(("tree", m, t))
        yhat = lin + state.tree_total
        if not probit:
            state.sigma2 = update_sigma2(work_y, yhat, hyper.nu, lam, rng)
            if trace is not None:
                trace.append(("sigma2", m))
        if trace is not None:
            trace.append(("yhat", m))
        if not np.isfinite(yhat).all() or not math.isfinite(state.sigma2):
            raise NumericalError(f"non-finite state at iteration {m}")
        state.iteration = m + 1

        if m >= hyper.burn_in:
            kdx = m - hyper.burn_in
            if probit:
                beta_draws[kdx] = state.beta
                sigma2_draws[kdx] = 1.0
                yhat_draws[kdx] = yhat
            else:
                beta_draws[kdx] = unscale_beta(state.beta, scaling)
                sigma2_draws[kdx] = unscale_sigma2(state.sigma2, scaling)
                yhat_draws[kdx] = unscale_predictions(yhat, scaling)
            if forests is not None:
                forests.append([snapshot_tree(tr) for tr in state.forest])
        if checkpoint_path is not None and checkpoint_every and (m + 1) % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path, rng)

    return PosteriorDraws(
        design=design,
        mode=mode,
        probit=probit,
        hyper=hyper,
        seed=(rng.seed, rng.stream_id),
        scaling=scaling,
        beta=beta_draws,
        sigma2=sigma2_draws,
        yhat=yhat_draws,
        forests=forests,
        move_trace=MoveTrace(sel_codes, res_codes, acc_flags),
        beta_names=beta_names,
    )


# --- checkpointing --------------------------------------------------------------


def save_checkpoint(state: ChainState, path, rng: RngStream | None = None) -> None:
    """Write a versioned chain checkpoint (iteration, coefficients, error
    variance, coefficient covariance, serialized forest, RNG state)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "iteration": state.iteration,
        "beta": state.beta.tolist(),
        "sigma2": state.sigma2,
        "omega": state.omega.tolist(),
        "forest": dump_forest(state.forest),
        "rng_state": rng.gen.bit_generator.state if rng is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {version} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return payload


def restore_rng(payload: dict, rng: RngStream) -> None:
    if payload.get("rng_state") is not None:
        rng.gen.bit_generator.state = payload["rng_state"]


def _state_from_checkpoint(payload: dict, design: DesignMatrices, hyper: Hyperparameters, n: int) -> ChainState:
    from .trees import assign_observations

    trees = parse_forest(
        payload["forest"],
        n_rows=n,
        x2_is_categorical=design.x2_is_categorical,
        shared_vars=design.shared_x2,
        categorical_x1_vars=design.categorical_x1_x2,
    )
    if len(trees) != hyper.n_trees:
        raise ValueError("checkpoint tree count does not match the configuration")
    g = np.zeros((hyper.n_trees, n))
    total = np.zeros(n)
    for t, tree in enumerate(trees):
        assign_observations(tree, design.x2)
        validate_tree(tree, design.shared_x2, design.categorical_x1_x2, hyper.n_min)
        fitted_values(tree, out=g[t])
        total += g[t]
    return ChainState(
        forest=trees,
        g=g,
        tree_total=total,
        beta=np.asarray(payload["beta"], dtype=float),
        omega=np.asarray(payload["omega"], dtype=float),
        sigma2=float(payload["sigma2"]),
        z=None,
        iteration=int(payload["iteration"]),
    )
