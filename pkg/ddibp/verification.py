"""
Self-contained invariant suite behind `ddibp verify`.

Every check builds its own synthetic inputs, compares a simulated or computed
quantity against an analytic oracle and returns CheckResult rows
(name, statistic, bound, verdict).
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import logsumexp
from scipy.stats import chisquare, kstest, linregress, lognorm, norm, poisson

from .core import (
    DecayFunction,
    DecayKind,
    DistanceMatrix,
    PriorState,
    ProximityMatrix,
    build_proximity,
    compute_feature_matrix,
    log_prior,
    permute_state,
    propagate_reachability,
    sample_prior,
    sample_prior_batch,
    transitive_closure_features,
)
from .likelihood import DataMatrix, NoiseParams, collapsed_loglik, gaussian_column_loglik, sample_data
from .mcmc import NOISE_HYPERPRIOR_SCALE, ChainState, DdibpSampler, gibbs_alpha, state_loglik
from .models import CheckResult, McmcConfig
from .theory import (
    DhbpParams,
    batch_fractions,
    ddibp_limit_fractions,
    ddibp_sharing_rates,
    dhbp_limit_fractions,
    reach_probs_exact,
    reach_probs_mc,
    same_group_probabilities,
    sample_dhbp_batch,
    simulate_sharing,
)


logger = logging.getLogger(__name__)

QUICK_DRAWS = 20_000
DHBP_FREQUENCY_DRAWS = 200
GEWEKE_SWEEPS = 30_000
PLATEAU_SWEEPS = 500
# Single-test error rate of a 3-SE bound, shared out over a family of tests.
BASE_SE = 3.0


def familywise_z(m: int, base: float = BASE_SE) -> float:
    """z bound that gives m simultaneous tests the error rate of one base-SE test."""
    return float(norm.isf(norm.sf(base) / max(m, 1)))


def poisson_moment_z(samples: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """
    Absolute z-scores of the sample mean and variance against Poisson(rate).

    Args:
        samples: draws x d matrix of counts
        rates: length-d Poisson rates

    Returns:
        z-scores for every entry with a positive rate (means first)
    """
    n = samples.shape[0]
    rates = np.asarray(rates, dtype=float)
    valid = rates > 1e-12
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1)
    se_mean = np.sqrt(rates / n)
    se_var = np.sqrt((rates + 2 * rates ** 2) / n)
    z_mean = np.abs(mean - rates)[valid] / se_mean[valid]
    z_var = np.abs(var - rates)[valid] / se_var[valid]
    return np.concatenate([z_mean, z_var])


def poisson_chisquare(samples: np.ndarray, rate: float, min_expected: float = 5.0) -> float:
    """Chi-squared goodness-of-fit p-value of integer samples against Poisson(rate)."""
    samples = np.asarray(samples, dtype=np.int64)
    n = samples.shape[0]
    top = int(samples.max())
    observed = np.bincount(samples, minlength=top + 1).astype(float)
    expected = poisson.pmf(np.arange(top + 1), rate) * n
    expected[-1] += poisson.sf(top, rate) * n

    obs_bins, exp_bins = [], []
    o = e = 0.0
    for ok, ek in zip(observed, expected):
        o += ok
        e += ek
        if e >= min_expected:
            obs_bins.append(o)
            exp_bins.append(e)
            o = e = 0.0
    if o or e:
        if exp_bins:
            obs_bins[-1] += o
            exp_bins[-1] += e
        else:
            obs_bins.append(o)
            exp_bins.append(e)
    if len(obs_bins) < 2:
        return 1.0
    return float(chisquare(obs_bins, exp_bins).pvalue)


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    """Standard error of the mean of an autocorrelated series."""
    size = x.shape[0] // n_batches
    means = x[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def pairs_and_diagonal(batch) -> np.ndarray:
    """draws x (N + N(N-1)/2) matrix of R_i followed by R_ij, i < j."""
    n = batch.r.shape[1]
    iu = np.triu_indices(n, k=1)
    return np.hstack([batch.r, batch.r_pair[:, iu[0], iu[1]]])


def random_geometry(n: int, rng: np.random.Generator, sequential: bool = False) -> Tuple[DistanceMatrix, DecayFunction]:
    """Customers at uniform positions with exponential decay of random rate."""
    t = np.sort(rng.uniform(0.0, 3.0, size=n))
    d = np.abs(t[:, None] - t[None, :])
    if sequential:
        d[np.triu_indices(n, k=1)] = np.inf
    return DistanceMatrix(d), DecayFunction(DecayKind.EXPONENTIAL, beta=float(rng.uniform(0.2, 2.0)))


def synthetic_series(n: int, m: int, rng: np.random.Generator, alpha: float = 3.0, beta: float = 1.0,
                     sigma_x: float = 0.5) -> Tuple[np.ndarray, DistanceMatrix]:
    """Autocorrelated data: features from a sequential dd-IBP over time gaps, X = ZW + noise."""
    D = DistanceMatrix.sequential(n)
    A = build_proximity(D, DecayFunction(DecayKind.EXPONENTIAL, beta=beta))
    Z = compute_feature_matrix(sample_prior(A, alpha, rng))
    return sample_data(Z, NoiseParams(sigma_x, 1.0), m, rng), D


def imputation_mse(truth: np.ndarray, mask: np.ndarray, D: DistanceMatrix, beta: float, seed: int,
                   iterations: int = 200, burn_in: int = 100) -> float:
    """Posterior-mean imputation error of one chain on the masked entries."""
    raw = np.where(mask, np.nan, truth)
    config = McmcConfig(iterations=iterations, burn_in=burn_in, seed=seed, update_missing=True,
                        log_every=iterations)
    A = build_proximity(D, DecayFunction(DecayKind.EXPONENTIAL, beta=beta))
    result = DdibpSampler(A, config, data=DataMatrix.from_array(raw)).run()
    imputed = result.posterior_mean_x
    return float(np.mean((imputed[mask] - truth[mask]) ** 2))


def imputation_wins(table: np.ndarray) -> np.ndarray:
    """Masks on which each beta > 0 column of a masks x betas error table is <= column 0."""
    return (table[:, 1:] <= table[:, [0]]).sum(axis=0)


def chain_vs_forward_z(chain: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Per-column |mean difference| over the combined SE: batch means for the chain, iid for forward draws."""
    n = forward.shape[0]
    return np.array([
        abs(chain[:, s].mean() - forward[:, s].mean())
        / np.hypot(batch_means_se(chain[:, s]), forward[:, s].std(ddof=1) / np.sqrt(n))
        for s in range(chain.shape[1])
    ])


def successive_conditional_chain(A: ProximityMatrix, config: McmcConfig, n_cols: int, iterations: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """
    Alternate X ~ P(X | Z, sigma) with one full sweep given X.

    Starts from an exact joint draw, so every row is a draw from the joint when
    the sweep leaves the posterior invariant.

    Returns:
        iterations x 4 matrix of K, alpha, log sigma_x, log sigma_w
    """
    sampler = DdibpSampler(A, config, rng=rng)
    state = sampler.initialize()
    if config.update_noise:
        sx, sw = np.exp(rng.normal(0.0, NOISE_HYPERPRIOR_SCALE, size=2))
        state.noise = NoiseParams(float(sx), float(sw))

    trace = np.zeros((iterations, 4))
    for t in range(iterations):
        state.data = DataMatrix(sample_data(state.features, state.noise, n_cols, rng))
        state.loglik = state_loglik(state)
        sampler.sweep(state)
        trace[t] = [state.features.K, state.alpha, np.log(state.noise.sigma_x), np.log(state.noise.sigma_w)]
    return trace


def forward_joint_draws(A: ProximityMatrix, config: McmcConfig, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Independent prior draws of K, alpha, log sigma_x, log sigma_w (columns as successive_conditional_chain)."""
    if config.update_alpha:
        alpha = rng.gamma(config.alpha_shape, 1.0 / config.alpha_rate, size=n_draws)
    else:
        alpha = np.full(n_draws, config.alpha_init)
    k = sample_prior_batch(A, alpha, n_draws, rng).k.astype(float)
    if config.update_noise:
        log_sigma = rng.normal(0.0, NOISE_HYPERPRIOR_SCALE, size=(n_draws, 2))
    else:
        log_sigma = np.broadcast_to(np.log([config.sigma_x, config.sigma_w]), (n_draws, 2))
    return np.column_stack([k, alpha, log_sigma])


def noise_ks_pvalues(sigmas: np.ndarray, thin: int) -> np.ndarray:
    """Kolmogorov-Smirnov p-values of thinned sigma_x, sigma_w draws against the log-normal hyperprior."""
    hyperprior = lognorm(s=NOISE_HYPERPRIOR_SCALE)
    return np.array([kstest(sigmas[::thin, c], hyperprior.cdf).pvalue for c in range(sigmas.shape[1])])


def plateau_pvalue(trace: np.ndarray, n_batches: int = 10) -> float:
    """p-value of a zero slope fitted to batch means of a trace segment."""
    size = trace.shape[0] // n_batches
    means = trace[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(linregress(np.arange(n_batches), means).pvalue)


def same_group_frequency(fractions: np.ndarray, same: float, diff: float) -> np.ndarray:
    """
    Per-pair frequency of fractions sitting at the same-group limit.

    Each symmetrised fraction (R_ij / R_i + R_ji / R_j) / 2 of every draw is
    assigned to the nearer of the two limits.
    """
    sym = 0.5 * (fractions + np.swapaxes(fractions, -1, -2))
    return (np.abs(sym - same) < np.abs(sym - diff)).mean(axis=0)


@dataclass
class VerificationReport:
    """Ordered check results of one verify run."""

    results: List[CheckResult] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        return [r.line() for r in self.results]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.results])

    def write(self, path: Path) -> Path:
        """Write the report: one check per line, tab-separated."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("name\tstatistic\tbound\tverdict\n" + "\n".join(self.lines()) + "\n", encoding="utf-8")
        return path


class VerificationSuite:
    """Analytic-oracle checks of the prior, the likelihood and the sampler."""

    def __init__(self, draws: int = 100_000, seed: int = 0, n_jobs: int = 1,
                 perturbation: float = 1.0, quick: bool = False):
        """
        Initialize suite.

        Args:
            draws: Monte-Carlo size of the simulation checks
            seed: Base seed; each check derives its own generator from it
            n_jobs: Parallel workers for batched simulations
            perturbation: Multiplier applied to analytic rates (1.1 must make rate checks fail)
            quick: Run only the small enumeration and algebraic checks
        """
        self.draws = min(draws, QUICK_DRAWS) if quick else draws
        self.seed = seed
        self.n_jobs = n_jobs
        self.perturbation = perturbation
        self.quick = quick

    def _rng(self, name: str) -> np.random.Generator:
        key = sum(name.encode("utf-8"))
        return np.random.default_rng([self.seed, key])

    def checks(self) -> List[Tuple[str, Callable[[], List[CheckResult]]]]:
        quick = [
            ("enumeration", self.check_enumeration),
            ("reachability", self.check_reachability_agreement),
            ("sharing rates", self.check_sharing_rates),
            ("likelihood", self.check_likelihood_oracle),
            ("alpha conjugacy", self.check_alpha_conjugacy),
            ("symmetry", self.check_relabelling_symmetry),
            ("dhbp limits", self.check_dhbp_limit_algebra),
        ]
        if self.quick:
            return quick
        return quick + [
            ("ibp reduction", self.check_ibp_reduction),
            ("large-mass limit", self.check_large_mass_limit),
            ("dhbp clusters", self.check_dhbp_clusters),
            ("prior recovery", self.check_prior_recovery),
            ("successive conditional", self.check_geweke_successive),
            ("trace", self.check_trace_plateau),
            ("imputation", self.check_imputation_vs_ibp),
        ]

    def run(self) -> VerificationReport:
        report = VerificationReport()
        start = time.perf_counter()
        checks = self.checks()
        for step, (label, check) in enumerate(checks, 1):
            logger.info(f"Step {step}/{len(checks)}: {label}...")
            for result in check():
                report.results.append(result)
                level = logging.INFO if result.passed else logging.WARNING
                logger.log(level, f"{'✓' if result.passed else '✗'} {result.line()}")
        report.elapsed = time.perf_counter() - start
        logger.info(f"Verification finished in {report.elapsed:.1f}s: "
                    f"{len(report.results) - len(report.failures)}/{len(report.results)} passed")
        return report

    def check_enumeration(self) -> List[CheckResult]:
        """Two-customer sequential edge probability and the identity geometry."""
        A = build_proximity(DistanceMatrix.sequential(2), DecayFunction(DecayKind.EXPONENTIAL, beta=0.7))
        probs = reach_probs_exact(A)
        gap = abs(probs.p_single[1, 0] - A.a[1, 0])

        identity = ProximityMatrix.from_weights(np.eye(3))
        gap_identity = float(np.abs(reach_probs_exact(identity).p_single - np.eye(3)).max())
        return [
            CheckResult(name="enumeration_sequential_pair", statistic=gap, bound=1e-12, passed=gap <= 1e-12),
            CheckResult(name="enumeration_identity", statistic=gap_identity, bound=1e-12,
                        passed=gap_identity <= 1e-12),
        ]

    def check_reachability_agreement(self) -> List[CheckResult]:
        """BFS, batched propagation and transitive closure give the same Z."""
        rng = self._rng("reachability")
        mismatches = 0
        for _ in range(50):
            n = int(rng.integers(2, 7))
            D, f = random_geometry(n, rng)
            state = sample_prior(build_proximity(D, f), 3.0, rng)
            z = compute_feature_matrix(state).z
            closure = transitive_closure_features(state).z
            batched = propagate_reachability(state.connections.T.copy(), state.owner).T
            mismatches += int((z != closure).sum() + (z != batched).sum())
        return [CheckResult(name="reachability_agreement", statistic=mismatches, bound=0, passed=mismatches == 0)]

    def check_sharing_rates(self) -> List[CheckResult]:
        """Simulated R_i and R_ij have Poisson mean and variance equal to the analytic rates."""
        rng = self._rng("sharing rates")
        sizes = [3] if self.quick else [3, 4, 5, 4, 3]
        results = []
        for idx, n in enumerate(sizes):
            D, f = random_geometry(n, rng)
            alpha = float(rng.uniform(0.5, 5.0))
            A = build_proximity(D, f)
            rate_i, rate_ij = ddibp_sharing_rates(A, alpha, reach_probs_exact(A))
            iu = np.triu_indices(n, k=1)
            rates = self.perturbation * np.concatenate([rate_i, rate_ij[iu]])

            batch = simulate_sharing(A, alpha, self.draws, seed=int(rng.integers(2 ** 31)), n_jobs=self.n_jobs)
            z = poisson_moment_z(pairs_and_diagonal(batch), rates)
            bound = familywise_z(z.shape[0])
            results.append(CheckResult(
                name=f"sharing_rate_match_{idx}", statistic=float(z.max()), bound=bound,
                passed=bool(z.max() <= bound), detail=f"N={n}, alpha={alpha:.3f}, {f.describe()}",
            ))
        return results

    def check_ibp_reduction(self) -> List[CheckResult]:
        """Sequential distances with constant decay behave as the IBP."""
        rng = self._rng("ibp reduction")
        n, alpha = 10, 2.0
        A = build_proximity(DistanceMatrix.sequential(n), DecayFunction(DecayKind.CONSTANT))
        batch = simulate_sharing(A, alpha, self.draws, seed=int(rng.integers(2 ** 31)), n_jobs=self.n_jobs)

        rate_i = self.perturbation * alpha
        rate_ij = self.perturbation * alpha / 2
        iu = np.triu_indices(n, k=1)
        z_i = np.abs(batch.r.mean(axis=0) - rate_i) / np.sqrt(rate_i / self.draws)
        z_ij = np.abs(batch.r_pair[:, iu[0], iu[1]].mean(axis=0) - rate_ij) / np.sqrt(rate_ij / self.draws)
        z = np.concatenate([z_i, z_ij])
        bound = familywise_z(z.shape[0])

        expected_k = self.perturbation * alpha * np.sum(1.0 / np.arange(1, n + 1))
        pvalue = poisson_chisquare(batch.k, expected_k)
        return [
            CheckResult(name="ibp_reduction_rates", statistic=float(z.max()), bound=bound, passed=bool(z.max() <= bound)),
            CheckResult(name="ibp_reduction_total_k", statistic=pvalue, bound=0.01, passed=pvalue > 0.01,
                        detail="chi-squared p-value against Poisson(alpha * H_N)"),
        ]

    def check_large_mass_limit(self) -> List[CheckResult]:
        """At alpha = 1000 the fraction matrix sits at its deterministic limit."""
        rng = self._rng("large-mass limit")
        n, alpha, n_draws = 8, 1000.0, 20
        D, _ = random_geometry(n, rng, sequential=True)
        A = build_proximity(D, DecayFunction(DecayKind.EXPONENTIAL, beta=1.0))
        limit = ddibp_limit_fractions(A, reach_probs_mc(A, self.draws, rng))
        fractions = batch_fractions(sample_prior_batch(A, alpha, n_draws, rng))

        deviation = float(np.abs(fractions.mean(axis=0) - limit).max())
        spread = float(fractions.std(axis=0, ddof=1).max())
        return [
            CheckResult(name="large_mass_fraction_limit", statistic=deviation, bound=0.05, passed=deviation <= 0.05),
            CheckResult(name="large_mass_fraction_spread", statistic=spread, bound=0.02, passed=spread < 0.02),
        ]

    def check_dhbp_limit_algebra(self) -> List[CheckResult]:
        same, diff = dhbp_limit_fractions(10.0, 1.0)
        gap = max(abs(same - 6 / 11), abs(diff - 1 / 11))
        return [CheckResult(name="dhbp_limit_values", statistic=gap, bound=1e-12, passed=gap <= 1e-12)]

    def check_dhbp_clusters(self) -> List[CheckResult]:
        """
        Truncated dHBP fractions cluster at the same-group and different-group limits.

        The truncation keeps gamma / k_trunc small (k_trunc = 50 gamma); at
        gamma / k_trunc = 0.5 the finite approximation has different limits.
        """
        rng = self._rng("dhbp clusters")
        n, gamma, c0, c1 = 8, 1000.0, 10.0, 1.0
        D, f = random_geometry(n, rng)
        A = build_proximity(D, f)
        params = DhbpParams(gamma=gamma, c0=c0, c1=c1, k_trunc=int(50 * gamma), proximity=A)
        n_draws = min(self.draws, DHBP_FREQUENCY_DRAWS)
        batch = sample_dhbp_batch(params, n_draws, rng)

        fractions = batch_fractions(batch)
        same_group = batch.groups[:, :, None] == batch.groups[:, None, :]
        off = ~np.eye(n, dtype=bool)[None, :, :]
        same, diff = dhbp_limit_fractions(c0, c1)
        deviation = max(
            abs(fractions[same_group & off].mean() - same) if (same_group & off).any() else 0.0,
            abs(fractions[~same_group & off].mean() - diff) if (~same_group & off).any() else 0.0,
        )

        # labels come from the fraction values alone, never from batch.groups
        freq = same_group_frequency(fractions, same, diff)
        target = same_group_probabilities(A)
        iu = np.triu_indices(n, k=1)
        se = np.sqrt(target[iu] * (1 - target[iu]) / n_draws)
        z = np.abs(freq[iu] - target[iu]) / np.maximum(se, 1e-12)
        bound = familywise_z(z.shape[0])
        return [
            CheckResult(name="dhbp_fraction_clusters", statistic=float(deviation), bound=0.05, passed=deviation <= 0.05),
            CheckResult(name="dhbp_same_group_frequency", statistic=float(z.max()), bound=bound,
                        passed=bool(z.max() <= bound), detail=f"{n_draws} draws, {iu[0].shape[0]} pairs"),
        ]

    def check_likelihood_oracle(self) -> List[CheckResult]:
        """Collapsed likelihood against the column-wise Gaussian and Monte-Carlo marginalisation."""
        rng = self._rng("likelihood")
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 7))
            z = rng.random((n, int(rng.integers(0, 5)))) < 0.5
            noise = NoiseParams(float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.3, 2.0)))
            x = rng.normal(size=(n, int(rng.integers(1, 4))))
            worst = max(worst, abs(collapsed_loglik(x, z, noise) - gaussian_column_loglik(x, z, noise)))
        results = [CheckResult(name="collapsed_likelihood_oracle", statistic=worst, bound=1e-8, passed=worst <= 1e-8)]

        if not self.quick:
            gap = 0.0
            for _ in range(5):
                z = np.array([[1, 0], [1, 1], [0, 1]], dtype=float)
                noise = NoiseParams(1.0, 1.0)
                x = sample_data(z, noise, 2, rng)
                w = rng.normal(size=(self.draws, 2, 2))
                resid = x[None, :, :] - np.einsum("nk,skm->snm", z, w)
                logp = norm.logpdf(resid).sum(axis=(1, 2))
                estimate = float(logsumexp(logp) - np.log(self.draws))
                gap = max(gap, abs(estimate - collapsed_loglik(x, z, noise)))
            results.append(CheckResult(name="monte_carlo_marginal", statistic=gap, bound=0.05, passed=gap <= 0.05))
        return results

    def check_alpha_conjugacy(self) -> List[CheckResult]:
        """Moments of the alpha update match Gamma(1 + 1, 1 + 1 + 1/2)."""
        rng = self._rng("alpha conjugacy")
        A = ProximityMatrix.from_weights(np.array([[1.0, 0.0], [1.0, 1.0]]))
        prior = PriorState(2, np.array([0]), np.array([[0], [0]]))
        state = ChainState(prior=prior, alpha=1.0, noise=NoiseParams(), data=None, proximity=A,
                           features=compute_feature_matrix(prior))
        config = McmcConfig(iterations=1)
        draws = np.array([gibbs_alpha(state, config, rng) for _ in range(self.draws)])

        shape, rate = 2.0, 2.5
        mean = self.perturbation * shape / rate
        var = shape / rate ** 2
        z_mean = abs(draws.mean() - mean) / np.sqrt(var / self.draws)
        # Var of the sample variance of a Gamma: (mu4 - var^2) / n with mu4 = 3 k (k + 2) / rate^4.
        mu4 = 3 * shape * (shape + 2) / rate ** 4
        z_var = abs(draws.var(ddof=1) - var) / np.sqrt((mu4 - var ** 2) / self.draws)
        z = max(z_mean, z_var)
        bound = familywise_z(2)
        return [CheckResult(name="alpha_conjugacy", statistic=float(z), bound=bound, passed=z <= bound)]

    def check_relabelling_symmetry(self) -> List[CheckResult]:
        """log prior is invariant when customers and distances are relabelled together."""
        rng = self._rng("symmetry")
        worst = 0.0
        mismatches = 0
        for _ in range(100):
            D, f = random_geometry(4, rng)
            A = build_proximity(D, f)
            state = sample_prior(A, 2.0, rng)
            Z = compute_feature_matrix(state)
            perm = rng.permutation(4)
            permuted, Zp = permute_state(state, Z, perm)
            Ap = build_proximity(D.permuted(perm), f)
            worst = max(worst, abs(log_prior(state, A, 2.0) - log_prior(permuted, Ap, 2.0)))
            mismatches += int((compute_feature_matrix(permuted).z != Zp.z).sum())
        return [
            CheckResult(name="relabelling_log_prior", statistic=worst, bound=1e-10, passed=worst <= 1e-10),
            CheckResult(name="relabelling_features", statistic=mismatches, bound=0, passed=mismatches == 0),
        ]

    def check_prior_recovery(self) -> List[CheckResult]:
        """
        A data-free chain must reproduce forward prior draws.

        Twelve statistics: K, K^2, R_1..R_4, alpha, alpha^2, log sigma_x,
        (log sigma_x)^2, log sigma_w, (log sigma_w)^2.
        """
        rng = self._rng("prior recovery")
        n = 4
        D, f = random_geometry(n, rng)
        A = build_proximity(D, f)
        config = McmcConfig(iterations=self.draws, seed=int(rng.integers(2 ** 31)), noise_proposal_scale=1.0,
                            log_every=max(1, self.draws // 10))

        sampler = DdibpSampler(A, config)
        state = sampler.initialize()
        chain = np.zeros((self.draws, 12))
        for t in range(self.draws):
            sampler.sweep(state)
            z = state.features.z
            log_sx, log_sw = np.log(state.noise.sigma_x), np.log(state.noise.sigma_w)
            chain[t] = [z.shape[1], z.shape[1] ** 2, *z.sum(axis=1), state.alpha, state.alpha ** 2,
                        log_sx, log_sx ** 2, log_sw, log_sw ** 2]

        alpha = rng.gamma(config.alpha_shape, 1.0 / config.alpha_rate, size=self.draws)
        batch = sample_prior_batch(A, alpha, self.draws, rng)
        log_sx = rng.normal(0.0, 2.0, size=self.draws)
        log_sw = rng.normal(0.0, 2.0, size=self.draws)
        k = batch.k.astype(float)
        forward = np.column_stack([k, k ** 2, batch.r, alpha, alpha ** 2,
                                   log_sx, log_sx ** 2, log_sw, log_sw ** 2])

        z = chain_vs_forward_z(chain, forward)
        bound = familywise_z(12)

        # thinned to about 1000 draws: KS assumes independent samples
        thin = max(1, self.draws // 1000)
        pvalues = noise_ks_pvalues(np.exp(chain[:, [8, 10]]), thin)
        ks_bound = 0.01 / pvalues.shape[0]
        return [
            CheckResult(name="prior_recovery", statistic=float(z.max()), bound=bound, passed=bool(z.max() <= bound),
                        detail=f"acceptance={state.acceptance_rates()}"),
            CheckResult(name="noise_hyperprior_ks", statistic=float(pvalues.min()), bound=ks_bound,
                        passed=bool(pvalues.min() > ks_bound),
                        detail=f"KS p-values (sigma_x, sigma_w) vs lognorm(s={NOISE_HYPERPRIOR_SCALE:g}), thin={thin}"),
        ]

    def check_geweke_successive(self) -> List[CheckResult]:
        """
        Successive-conditional joint check on a small instance with data.

        Redrawing X after every sweep keeps the chain on the joint of (theta, X);
        its theta marginals must then match forward prior draws. Exercises the
        likelihood-dependent paths of every update.
        """
        rng = self._rng("successive conditional")
        n, n_cols = 3, 2
        D, f = random_geometry(n, rng)
        A = build_proximity(D, f)
        sweeps = min(self.draws, GEWEKE_SWEEPS)
        config = McmcConfig(iterations=sweeps, seed=int(rng.integers(2 ** 31)), noise_proposal_scale=1.0,
                            log_every=sweeps)

        chain = successive_conditional_chain(A, config, n_cols, sweeps, rng)
        forward = forward_joint_draws(A, config, sweeps, rng)
        z = chain_vs_forward_z(chain, forward)
        bound = familywise_z(z.shape[0])
        return [CheckResult(name="geweke_successive", statistic=float(z.max()), bound=bound,
                            passed=bool(z.max() <= bound),
                            detail="z of K, alpha, log sigma_x, log sigma_w: " + ", ".join(f"{v:.2f}" for v in z))]

    def check_trace_plateau(self) -> List[CheckResult]:
        """On synthetic data the log joint climbs from initialisation and then levels off."""
        rng = self._rng("trace")
        x, D = synthetic_series(30, 6, rng)
        iterations = PLATEAU_SWEEPS
        config = McmcConfig(iterations=iterations, seed=int(rng.integers(2 ** 31)), log_every=iterations)
        sampler = DdibpSampler(build_proximity(D, DecayFunction(DecayKind.EXPONENTIAL, beta=1.0)),
                               config, data=DataMatrix(x))
        state = sampler.initialize()
        initial = state.log_joint
        trace = np.zeros(iterations)
        for t in range(iterations):
            sampler.sweep(state)
            trace[t] = state.log_joint

        gain = float(trace[iterations // 2:].mean() - initial)
        pvalue = plateau_pvalue(trace[iterations - iterations // 5:], n_batches=5)
        return [
            CheckResult(name="trace_increase", statistic=gain, bound=0.0, passed=gain > 0),
            CheckResult(name="trace_plateau_slope", statistic=pvalue, bound=0.01, passed=pvalue > 0.01,
                        detail="p-value of a zero slope over five batch means of the final 20% of sweeps"),
        ]

    def check_imputation_vs_ibp(self) -> List[CheckResult]:
        """
        Time-gap distances with beta > 0 impute no worse than beta = 0 on most masks.

        Every beta in {0.5, 1, 2} is paired mask by mask with the beta = 0 chain on
        the same seed and must win on at least 8 of 10 masks.
        """
        rng = self._rng("imputation")
        x, D = synthetic_series(30, 6, rng)
        betas = [0.0, 0.5, 1.0, 2.0]
        masks = []
        for _ in range(10):
            mask = np.zeros(x.shape, dtype=bool)
            for row in rng.choice(x.shape[0], size=6, replace=False):
                mask[row, rng.choice(x.shape[1], size=2, replace=False)] = True
            masks.append(mask)
        seeds = [int(s) for s in rng.integers(2 ** 31, size=len(masks))]

        jobs = [(m, b) for m in range(len(masks)) for b in betas]
        errors = Parallel(n_jobs=self.n_jobs)(
            delayed(imputation_mse)(x, masks[m], D, b, seeds[m]) for m, b in jobs
        )
        table = np.array(errors).reshape(len(masks), len(betas))
        wins = imputation_wins(table)
        fewest = int(wins.min())
        counts = ", ".join(f"beta={b:g}: {int(w)}" for b, w in zip(betas[1:], wins))
        return [CheckResult(name="imputation_vs_ibp", statistic=fewest, bound=8, passed=fewest >= 8,
                            detail=f"wins over beta=0 ({counts}); mean mse by beta "
                                   f"{dict(zip(betas, table.mean(axis=0).round(4)))}")]
