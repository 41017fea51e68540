"""Dense linear algebra and random-variate primitives for the Gibbs updates.

Everything here is pure given an explicit :class:`~semibart.rng.RngStream`,
so concurrent chains are safe as long as each owns its own stream.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import ndtr, ndtri

from .rng import RngStream


class NumericalError(RuntimeError):
    """A numerical routine could not produce a valid result."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization failed at 1-based pivot ``pivot``."""

    def __init__(self, pivot: int):
        self.pivot = int(pivot)
        super().__init__(
            f"matrix is not positive definite (pivot {self.pivot} non-positive)"
        )


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a`` for symmetric PD ``a``.

    Raises :class:`NotPositiveDefiniteError` naming the failing pivot when
    ``a`` is not positive definite.
    """
    a = np.ascontiguousarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.size == 0:
        return a.copy()
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info)
    if info < 0:
        raise NumericalError(f"illegal value in argument {-info} of dpotrf")
    return c


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    l = cholesky(a)
    inv_l = solve_triangular(l, np.eye(l.shape[0]), lower=True)
    return inv_l.T @ inv_l


def sample_mvn(mean: np.ndarray, cov: np.ndarray, rng: RngStream) -> np.ndarray:
    """One draw from MVN(mean, cov); deterministic given the stream state."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ValueError(
            f"dimension mismatch: mean has {mean.size} entries, cov is {cov.shape}"
        )
    z = rng.gen.standard_normal(mean.size)
    return mean + cholesky(cov) @ z


def sample_inverse_wishart(scale: np.ndarray, df: float, rng: RngStream) -> np.ndarray:
    """One inverse-Wishart draw with the given scale matrix and degrees of freedom.

    Uses the Bartlett decomposition of a Wishart(df, scale^-1) draw and
    inverts it through triangular solves. For ``df > dim + 1`` the mean is
    ``scale / (df - dim - 1)``.
    """
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if scale.shape != (p, p):
        raise ValueError(f"scale must be square, got {scale.shape}")
    if df <= p - 1:
        raise ValueError(f"df must exceed dim - 1 = {p - 1}, got {df}")
    gen = rng.gen
    # Bartlett factor of Wishart(df, scale^-1): W = (M A)(M A)^T with
    # M = chol(scale^-1) and A lower triangular.
    l_scale = cholesky(scale)
    m = solve_triangular(l_scale, np.eye(p), lower=True).T  # upper; scale^-1 = m @ m.T
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = math.sqrt(gen.chisquare(df - i))
    if p > 1:
        idx = np.tril_indices(p, k=-1)
        a[idx] = gen.standard_normal(len(idx[0]))
    b = m @ a  # W = b @ b.T; not triangular because m is upper
    b_inv = np.linalg.inv(b)
    draw = b_inv.T @ b_inv
    return 0.5 * (draw + draw.T)


def sample_inverse_gamma(shape: float, rate: float, rng: RngStream) -> float:
    """One draw with density proportional to x^(-shape-1) exp(-rate / x)."""
    if shape <= 0 or rate <= 0:
        raise ValueError(f"shape and rate must be positive, got ({shape}, {rate})")
    return 1.0 / rng.gen.gamma(shape, 1.0 / rate)


def _std_normal_upper_tail(alpha: float, gen: np.random.Generator) -> float:
    # Exponential-rejection sampling of z ~ N(0,1) | z > alpha, for large alpha.
    lam = 0.5 * (alpha + math.sqrt(alpha * alpha + 4.0))
    while True:
        z = alpha + gen.exponential() / lam
        d = z - lam
        if gen.random() <= math.exp(-0.5 * d * d):
            return z


_TAIL_CUTOFF = 5.0


def sample_truncated_normal(
    mu: float, sigma: float, positive_side: bool, rng: RngStream
) -> float:
    """One N(mu, sigma^2) draw truncated to (0, inf) or (-inf, 0).

    Inverse-CDF sampling in the bulk; exponential rejection once the
    truncation point sits more than ``5`` standard deviations into the
    tail, which avoids the degenerate-uniform regime of the inverse CDF.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not positive_side:
        return -sample_truncated_normal(-mu, sigma, True, rng)
    alpha = -mu / sigma  # standardized lower bound
    if alpha > _TAIL_CUTOFF:
        z = _std_normal_upper_tail(alpha, rng.gen)
    else:
        u = rng.gen.uniform(ndtr(alpha), 1.0)
        z = ndtri(u)
    return mu + sigma * z


def truncated_normal_vector(
    mu: np.ndarray, positive: np.ndarray, rng: RngStream
) -> np.ndarray:
    """Elementwise unit-variance truncated-normal draws.

    Entry ``i`` is N(mu[i], 1) restricted to (0, inf) when ``positive[i]``
    else (-inf, 0). Vectorized counterpart of
    :func:`sample_truncated_normal` used by the probit augmentation.
    """
    mu = np.asarray(mu, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    m = np.where(positive, mu, -mu)  # reduce everything to the z > 0 case
    alpha = -m
    out = np.empty_like(m)
    easy = alpha <= _TAIL_CUTOFF
    if easy.any():
        u = rng.gen.uniform(ndtr(alpha[easy]), 1.0)
        out[easy] = m[easy] + ndtri(u)
    for i in np.nonzero(~easy)[0]:
        out[i] = m[i] + _std_normal_upper_tail(alpha[i], rng.gen)
    return np.where(positive, out, -out)
