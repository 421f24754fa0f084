"""
Feature-sharing analytics for the dd-IBP and its comparison priors.

Exact and Monte-Carlo activation probabilities, Poisson sharing rates and their
large-mass limits, a truncated dependent hierarchical beta process simulator,
a direct sequential IBP sampler and PMF tables of the shared-feature count.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import poisson

from .core import (
    FeatureMatrix,
    PriorBatch,
    ProximityMatrix,
    draw_connections,
    propagate_reachability,
    sample_prior_batch,
)
from .errors import DomainError


logger = logging.getLogger(__name__)

MAX_EXACT_N = 7
# Beta(c1 p, c1 (1 - p)) is replaced by its mean outside this band.
BETA_EDGE = 1e-12


@dataclass
class SharingStats:
    """R_i, R_ij and the fraction R_ij / R_i of one feature matrix."""

    r: np.ndarray
    r_pair: np.ndarray
    fraction: np.ndarray

    @property
    def empty_rows(self) -> np.ndarray:
        """Customers with R_i = 0, whose fraction row is 0 by convention."""
        return np.flatnonzero(self.r == 0)


@dataclass
class ReachProbs:
    """
    Activation probabilities of a single dish.

    p_single[i, n] = P(L_in = 1), p_pair[i, j, n] = P(L_in = 1, L_jn = 1), where
    L_in indicates that customer i reaches owner n. Standard errors are set for
    Monte-Carlo estimates only.
    """

    p_single: np.ndarray
    p_pair: np.ndarray
    se_single: Optional[np.ndarray] = None
    se_pair: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.p_single.shape[0]


@dataclass
class DhbpParams:
    """Truncated dHBP: mass gamma, concentrations c0 and c1, k_trunc atoms."""

    gamma: float
    c0: float
    c1: float
    k_trunc: int
    proximity: ProximityMatrix

    def __post_init__(self):
        if not (self.gamma > 0 and self.c0 > 0 and self.c1 > 0):
            raise DomainError("dHBP mass and concentrations must be positive",
                              detail=f"gamma={self.gamma}, c0={self.c0}, c1={self.c1}")
        if self.k_trunc < 1:
            raise DomainError("k_trunc must be at least 1")
        if self.gamma >= self.k_trunc:
            raise DomainError("gamma must be smaller than k_trunc",
                              detail=f"gamma={self.gamma}, k_trunc={self.k_trunc}")


@dataclass
class DhbpBatch:
    """Sharing statistics of many truncated dHBP draws."""

    r: np.ndarray
    r_pair: np.ndarray
    groups: np.ndarray


@dataclass
class PmfTable:
    """PMF of R_12 for a two-customer geometry across a grid of proximities."""

    model: str
    grid: np.ndarray
    pmf: np.ndarray
    mean_r: np.ndarray
    mass: float

    def to_frame(self) -> pd.DataFrame:
        counts = np.arange(self.pmf.shape[1])
        return pd.DataFrame({
            "model": self.model,
            "proximity": np.repeat(self.grid, counts.shape[0]),
            "count": np.tile(counts, self.grid.shape[0]),
            "probability": self.pmf.ravel(),
        })


def sharing_stats(Z, zero_diagonal: bool = False) -> SharingStats:
    """
    Sharing statistics of a feature matrix.

    Args:
        Z: FeatureMatrix or binary array
        zero_diagonal: Set R_ii / R_i to 0 (heatmap export)

    Returns:
        SharingStats
    """
    z = Z.z if isinstance(Z, FeatureMatrix) else np.asarray(Z, dtype=bool)
    z = z.astype(float)
    r = z.sum(axis=1)
    r_pair = z @ z.T
    fraction = _fraction(r, r_pair)
    if zero_diagonal:
        np.fill_diagonal(fraction, 0.0)
    return SharingStats(r=r, r_pair=r_pair, fraction=fraction)


def _fraction(r: np.ndarray, r_pair: np.ndarray) -> np.ndarray:
    denom = r[..., :, None]
    return np.divide(r_pair, denom, out=np.zeros_like(r_pair, dtype=float), where=denom > 0)


def batch_fractions(batch, zero_diagonal: bool = False) -> np.ndarray:
    """Per-draw fraction matrices (draws x N x N) of a PriorBatch or DhbpBatch."""
    fraction = _fraction(batch.r, batch.r_pair)
    if zero_diagonal:
        idx = np.arange(fraction.shape[-1])
        fraction[..., idx, idx] = 0.0
    return fraction


def _enumerate_configurations(n: int, owner: int) -> np.ndarray:
    # Every assignment of targets to the n - 1 non-owners; the owner keeps a self-loop.
    free = np.array(np.unravel_index(np.arange(n ** (n - 1)), (n,) * (n - 1))).T
    conn = np.empty((free.shape[0], n), dtype=np.int64)
    others = [m for m in range(n) if m != owner]
    conn[:, others] = free
    conn[:, owner] = owner
    return conn


def reach_probs_exact(A: ProximityMatrix) -> ReachProbs:
    """
    Exact activation probabilities by enumerating all single-dish configurations.

    Args:
        A: Proximity matrix with at most 7 customers

    Returns:
        ReachProbs
    """
    n = A.n
    if n > MAX_EXACT_N:
        raise DomainError(f"Exact enumeration is limited to N <= {MAX_EXACT_N}",
                          detail=f"N={n}; use reach_probs_mc instead")
    if n == 1:
        return ReachProbs(p_single=np.ones((1, 1)), p_pair=np.ones((1, 1, 1)))

    p_single = np.zeros((n, n))
    p_pair = np.zeros((n, n, n))
    for owner in range(n):
        conn = _enumerate_configurations(n, owner)
        others = np.array([m for m in range(n) if m != owner])
        weights = np.prod(A.a[others[None, :], conn[:, others]], axis=1)
        reach = propagate_reachability(conn, np.full(conn.shape[0], owner)).astype(float)
        p_single[:, owner] = weights @ reach
        p_pair[:, :, owner] = np.einsum("t,ti,tj->ij", weights, reach, reach)
    logger.debug(f"Enumerated reachability for N={n}")
    return ReachProbs(p_single=np.clip(p_single, 0.0, 1.0), p_pair=np.clip(p_pair, 0.0, 1.0))


def reach_probs_mc(A: ProximityMatrix, n_draws: int, rng: np.random.Generator,
                   chunk: int = 100_000) -> ReachProbs:
    """Monte-Carlo activation probabilities with binomial standard errors."""
    n = A.n
    single = np.zeros((n, n))
    pair = np.zeros((n, n, n))
    for owner in range(n):
        done = 0
        while done < n_draws:
            size = min(chunk, n_draws - done)
            conn = draw_connections(A, size, rng).T.copy()
            reach = propagate_reachability(conn, np.full(size, owner)).astype(float)
            single[:, owner] += reach.sum(axis=0)
            pair[:, :, owner] += reach.T @ reach
            done += size
    single /= n_draws
    pair /= n_draws
    return ReachProbs(
        p_single=single,
        p_pair=pair,
        se_single=np.sqrt(single * (1 - single) / n_draws),
        se_pair=np.sqrt(pair * (1 - pair) / n_draws),
    )


def ddibp_sharing_rates(A: ProximityMatrix, alpha: float, probs: ReachProbs) -> Tuple[np.ndarray, np.ndarray]:
    """
    Poisson rates of R_i and R_ij under the dd-IBP.

    rate_i = alpha * sum_n P(L_in) / h_n and rate_ij = alpha * sum_n P(L_in, L_jn) / h_n.
    """
    if probs.n != A.n:
        raise DomainError("Reach probabilities do not match the proximity matrix")
    weights = alpha * A.inv_h
    return probs.p_single @ weights, probs.p_pair @ weights


def owner_probabilities(A: ProximityMatrix) -> np.ndarray:
    """P(c*_k = n) given the total dish count: h_n^-1 / sum_j h_j^-1."""
    return A.inv_h / A.inv_h.sum()


def ddibp_sharing_rates_conditional(A: ProximityMatrix, alpha: float,
                                    probs: ReachProbs) -> Tuple[np.ndarray, np.ndarray]:
    """
    The same rates written as E[K] times a per-dish activation probability with a
    random owner. Agrees with ddibp_sharing_rates.
    """
    expected_k = alpha * A.inv_h.sum()
    owners = owner_probabilities(A)
    return expected_k * (probs.p_single @ owners), expected_k * (probs.p_pair @ owners)


def ddibp_limit_fractions(A: ProximityMatrix, probs: ReachProbs) -> np.ndarray:
    """Deterministic large-alpha limit of R_ij / R_i."""
    num = probs.p_pair @ A.inv_h
    den = probs.p_single @ A.inv_h
    return np.divide(num, den[:, None], out=np.zeros_like(num), where=den[:, None] > 0)


def ibp_sharing_rates(alpha: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """IBP: R_i ~ Poisson(alpha) and R_ij ~ Poisson(alpha / 2) for i != j."""
    rate_ij = np.full((n, n), alpha / 2.0)
    np.fill_diagonal(rate_ij, alpha)
    return np.full(n, float(alpha)), rate_ij


def simulate_sharing(A: ProximityMatrix, alpha: float, n_draws: int, seed: int = 0,
                     n_jobs: int = 1, batch_size: int = 10_000) -> PriorBatch:
    """
    R_i and R_ij from independent dd-IBP prior draws.

    Each batch has its own spawned random stream, so the result does not depend
    on n_jobs.
    """
    sizes = [min(batch_size, n_draws - start) for start in range(0, n_draws, batch_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    batches = Parallel(n_jobs=n_jobs)(
        delayed(sample_prior_batch)(A, alpha, size, np.random.default_rng(s))
        for size, s in zip(sizes, seeds)
    )
    return PriorBatch(
        r=np.concatenate([b.r for b in batches]),
        r_pair=np.concatenate([b.r_pair for b in batches]),
        k=np.concatenate([b.k for b in batches]),
    )


def _group_weights(params: DhbpParams, p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # p has shape (..., K); returns (..., N, K) per-group weights p*_jk
    n = params.proximity.n
    p = np.broadcast_to(p[..., None, :], p.shape[:-1] + (n, p.shape[-1]))
    inside = (p > BETA_EDGE) & (p < 1 - BETA_EDGE)
    pstar = p.copy()
    pstar[inside] = rng.beta(params.c1 * p[inside], params.c1 * (1 - p[inside]))
    return pstar


def sample_dhbp(params: DhbpParams, rng: np.random.Generator) -> FeatureMatrix:
    """
    One draw of the truncated dHBP.

    p_k ~ Beta(c0 gamma / K, c0 (1 - gamma / K)), p*_jk ~ Beta(c1 p_k, c1 (1 - p_k)),
    g_i ~ Categorical(a_i) and z_ik ~ Bernoulli(p*_{g_i k}). Only active columns are
    returned; the group labels are attached as FeatureMatrix.groups.
    """
    K = params.k_trunc
    p = rng.beta(params.c0 * params.gamma / K, params.c0 * (1 - params.gamma / K), size=K)
    pstar = _group_weights(params, p, rng)
    groups = draw_connections(params.proximity, 1, rng)[:, 0]
    z = rng.random((params.proximity.n, K)) < pstar[groups]
    return FeatureMatrix(z[:, z.any(axis=0)], groups=groups)


def sample_dhbp_batch(params: DhbpParams, n_draws: int, rng: np.random.Generator,
                      chunk: Optional[int] = None) -> DhbpBatch:
    """Sharing statistics and group labels of many dHBP draws."""
    n = params.proximity.n
    K = params.k_trunc
    if chunk is None:
        chunk = max(1, 2_000_000 // (n * K))
    r = np.zeros((n_draws, n))
    r_pair = np.zeros((n_draws, n, n))
    groups = np.zeros((n_draws, n), dtype=np.int64)
    for start in range(0, n_draws, chunk):
        size = min(chunk, n_draws - start)
        p = rng.beta(params.c0 * params.gamma / K, params.c0 * (1 - params.gamma / K), size=(size, K))
        pstar = _group_weights(params, p, rng)
        g = draw_connections(params.proximity, size, rng).T
        rows = pstar[np.arange(size)[:, None], g]
        z = (rng.random((size, n, K)) < rows).astype(float)
        r[start:start + size] = z.sum(axis=2)
        r_pair[start:start + size] = z @ z.transpose(0, 2, 1)
        groups[start:start + size] = g
    return DhbpBatch(r=r, r_pair=r_pair, groups=groups)


def dhbp_limit_fractions(c0: float, c1: float) -> Tuple[float, float]:
    """Limits of R_ij / R_i: (same group, different group)."""
    if not (c0 > 0 and c1 > 0):
        raise DomainError("Concentrations must be positive", detail=f"c0={c0}, c1={c1}")
    same = (c0 + c1 + 1) / ((c0 + 1) * (c1 + 1))
    return same, 1.0 / (c0 + 1)


def same_group_probabilities(A: ProximityMatrix) -> np.ndarray:
    """P(g_i = g_j) = sum_n a_in a_jn."""
    return A.a @ A.a.T


def dhbp_truncation_error(params: DhbpParams, n_draws: int, rng: np.random.Generator) -> float:
    """Measured relative error |mean R_i - gamma| / gamma, averaged over customers."""
    batch = sample_dhbp_batch(params, n_draws, rng)
    return float(np.mean(np.abs(batch.r.mean(axis=0) - params.gamma)) / params.gamma)


def two_customer_proximity(weight: float) -> ProximityMatrix:
    """A = [[1, a], [a, 1]] / (1 + a) for an unnormalised pair proximity a."""
    return ProximityMatrix.from_weights(np.array([[1.0, weight], [weight, 1.0]]))


def sharing_pmf_sweep(
    model: Literal["ddibp", "dhbp"],
    grid: Sequence[float],
    mass: float,
    rng: Optional[np.random.Generator] = None,
    n_draws: int = 2000,
    c0: float = 10.0,
    c1: float = 1.0,
    k_trunc: int = 2000,
    max_count: Optional[int] = None,
) -> PmfTable:
    """
    PMF of R_12 for two customers across a grid of pair proximities.

    The dd-IBP table is exact: alpha is calibrated per grid point so that
    E[R_i] = mass, then R_12 is Poisson with its analytic rate. The dHBP table
    is empirical over n_draws draws with gamma = mass.
    """
    grid = np.asarray(grid, dtype=float)
    if max_count is None:
        max_count = int(np.ceil(mass + 6 * np.sqrt(mass) + 5))
    counts = np.arange(max_count + 1)
    pmf = np.zeros((grid.shape[0], counts.shape[0]))
    mean_r = np.zeros(grid.shape[0])

    for g, weight in enumerate(grid):
        A = two_customer_proximity(weight)
        if model == "ddibp":
            probs = reach_probs_exact(A)
            alpha = mass / float(probs.p_single[0] @ A.inv_h)
            rate_i, rate_ij = ddibp_sharing_rates(A, alpha, probs)
            pmf[g] = poisson.pmf(counts, rate_ij[0, 1])
            mean_r[g] = rate_i[0]
        elif model == "dhbp":
            if rng is None:
                raise DomainError("dHBP sweep needs a random generator")
            batch = sample_dhbp_batch(DhbpParams(mass, c0, c1, k_trunc, A), n_draws, rng)
            shared = np.minimum(batch.r_pair[:, 0, 1].astype(int), max_count)
            pmf[g] = np.bincount(shared, minlength=counts.shape[0]) / n_draws
            mean_r[g] = batch.r[:, 0].mean()
        else:
            raise DomainError(f"Unknown model for PMF sweep: {model}")
        logger.debug(f"{model} a={weight:g}: E[R_1]={mean_r[g]:.3f}")

    return PmfTable(model=model, grid=grid, pmf=pmf, mean_r=mean_r, mass=mass)


def ibp_baseline_sample(alpha: float, n: int, rng: np.random.Generator) -> FeatureMatrix:
    """
    Direct sequential IBP draw.

    Customer i takes each existing dish with probability m_k / i and then
    Poisson(alpha / i) new dishes.
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive", detail=f"alpha={alpha}")
    z = np.zeros((n, 0), dtype=bool)
    for i in range(n):
        m = z[:i].sum(axis=0)
        z[i] = rng.random(z.shape[1]) < m / (i + 1)
        new = int(rng.poisson(alpha / (i + 1)))
        if new:
            block = np.zeros((n, new), dtype=bool)
            block[i] = True
            z = np.hstack([z, block])
    return FeatureMatrix(z)


def ibp_expected_k(alpha: float, n: int) -> float:
    """E[K] = alpha * sum_{i<=n} 1/i."""
    return float(alpha * np.sum(1.0 / np.arange(1, n + 1)))
