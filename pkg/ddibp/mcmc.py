"""
Metropolis-within-Gibbs inference for the dd-IBP linear-Gaussian model.
Updates alpha, per-dish connections, dish ownership, noise scales and missing data.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import gamma, lognorm

from .core import (
    DecayFunction,
    DistanceMatrix,
    FeatureMatrix,
    PriorState,
    ProximityMatrix,
    build_proximity,
    canonical_order,
    compute_feature_matrix,
    draw_connections,
    log_prior,
    reachers,
    sample_prior,
)
from .errors import DimensionMismatchError, SamplerStateError
from .likelihood import DataMatrix, NoiseParams, collapsed_loglik, sample_missing
from .models import McmcConfig, SampleRecord


logger = logging.getLogger(__name__)

# Hyperprior on sigma_x and sigma_w: log-normal with log-scale std 2.
NOISE_HYPERPRIOR_SCALE = 2.0
LOG_JOINT_TOLERANCE = 1e-8


@dataclass
class ChainState:
    """Full sampler state."""

    prior: PriorState
    alpha: float
    noise: NoiseParams
    data: Optional[DataMatrix]
    proximity: ProximityMatrix
    features: FeatureMatrix
    loglik: float = 0.0
    log_joint: float = -np.inf
    accepts: Counter = field(default_factory=Counter)
    proposals: Counter = field(default_factory=Counter)

    def copy(self) -> "ChainState":
        return ChainState(
            prior=self.prior.copy(),
            alpha=self.alpha,
            noise=self.noise,
            data=self.data.copy() if self.data is not None else None,
            proximity=self.proximity,
            features=FeatureMatrix(self.features.z.copy()),
            loglik=self.loglik,
            log_joint=self.log_joint,
            accepts=Counter(self.accepts),
            proposals=Counter(self.proposals),
        )

    def acceptance_rates(self) -> dict:
        return {name: self.accepts[name] / count for name, count in self.proposals.items() if count}


def state_loglik(state: ChainState, features: FeatureMatrix = None, noise: NoiseParams = None) -> float:
    """Collapsed log-likelihood of the state's data; 0 for a data-free chain."""
    if state.data is None:
        return 0.0
    return collapsed_loglik(state.data, features if features is not None else state.features,
                            noise if noise is not None else state.noise)


def noise_log_hyperprior(sigma: float) -> float:
    return float(lognorm.logpdf(sigma, s=NOISE_HYPERPRIOR_SCALE))


def log_joint(state: ChainState, config: McmcConfig) -> float:
    """log_prior + likelihood + hyperprior terms of the sampled hyperparameters."""
    total = log_prior(state.prior, state.proximity, state.alpha) + state.loglik
    if config.update_alpha:
        total += float(gamma.logpdf(state.alpha, a=config.alpha_shape, scale=1.0 / config.alpha_rate))
    if config.update_noise:
        total += noise_log_hyperprior(state.noise.sigma_x) + noise_log_hyperprior(state.noise.sigma_w)
    return total


def alpha_conditional(state: ChainState, config: McmcConfig) -> tuple:
    """(shape, inverse scale) of alpha | c*, D, f."""
    shape = config.alpha_shape + float(state.prior.lam.sum())
    rate = config.alpha_rate + float(state.proximity.inv_h.sum())
    return shape, rate


def gibbs_alpha(state: ChainState, config: McmcConfig, rng: np.random.Generator) -> float:
    """alpha ~ Gamma(nu + sum lambda_i, eta + sum 1/h_i)."""
    shape, rate = alpha_conditional(state, config)
    state.alpha = float(rng.gamma(shape, 1.0 / rate))
    return state.alpha


def gibbs_connection(state: ChainState, i: int, k: int, rng: np.random.Generator) -> int:
    """
    Redraw c_ik from prior a_i times the likelihood.

    Candidates split into those through which i reaches the owner of k and the
    rest; the likelihood is evaluated once per class.
    """
    A = state.proximity
    prior = state.prior
    owner = int(prior.owner[k])
    state.proposals["connection"] += 1

    if i == owner:
        j = int(draw_connections(A, 1, rng, rows=np.array([i]))[0, 0])
        prior.connections[i, k] = j
        state.accepts["connection"] += 1
        return j

    column = prior.connections[:, k].copy()
    column[i] = i
    reach_off = reachers(column, owner)
    column[i] = owner
    reach_on = reachers(column, owner)

    p_on = float(A.a[i, reach_off].sum())
    p_off = max(0.0, 1.0 - p_on)
    current = state.features.z[:, k]

    def loglik_with(col: np.ndarray) -> float:
        if np.array_equal(col, current):
            return state.loglik
        z = state.features.z.copy()
        z[:, k] = col
        return state_loglik(state, FeatureMatrix(z))

    if p_on <= 0.0:
        turn_on = False
    elif p_off <= 0.0:
        turn_on = True
    else:
        ll_on = loglik_with(reach_on)
        ll_off = loglik_with(reach_off)
        log_on = np.log(p_on) + ll_on
        log_off = np.log(p_off) + ll_off
        prob_on = 1.0 / (1.0 + np.exp(np.clip(log_off - log_on, -700, 700)))
        turn_on = bool(rng.random() < prob_on)

    mask = reach_off if turn_on else ~reach_off
    weights = np.where(mask, A.a[i], 0.0)
    j = int(rng.choice(A.n, p=weights / weights.sum()))

    chosen = reach_on if turn_on else reach_off
    if not np.array_equal(chosen, current):
        state.loglik = loglik_with(chosen)
        state.features.z[:, k] = chosen
    prior.connections[i, k] = j
    if turn_on != bool(current[i]):
        state.accepts["connection"] += 1
    return j


def mh_ownership(state: ChainState, rng: np.random.Generator) -> bool:
    """
    Propose new dish counts from the prior and accept on the likelihood ratio.

    Surplus dishes are removed uniformly without replacement; new dishes get
    connection columns drawn from the prior for every customer.
    """
    A = state.proximity
    prior = state.prior
    state.proposals["ownership"] += 1

    lam_new = rng.poisson(state.alpha / A.h)
    lam_old = prior.lam
    keep = np.ones(prior.K, dtype=bool)
    added = []
    for i in range(prior.n):
        if lam_new[i] < lam_old[i]:
            owned = np.flatnonzero(prior.owner == i)
            keep[rng.choice(owned, size=lam_old[i] - lam_new[i], replace=False)] = False
        elif lam_new[i] > lam_old[i]:
            added.extend([i] * int(lam_new[i] - lam_old[i]))

    if keep.all() and not added:
        state.accepts["ownership"] += 1
        return True

    added = np.asarray(added, dtype=np.int64)
    new_conn = draw_connections(A, added.shape[0], rng)
    new_z = np.zeros((prior.n, added.shape[0]), dtype=bool)
    for t, own in enumerate(added):
        new_z[:, t] = reachers(new_conn[:, t], int(own))

    owner = np.concatenate([prior.owner[keep], added])
    order = canonical_order(owner)
    connections = np.hstack([prior.connections[:, keep], new_conn])[:, order]
    features = FeatureMatrix(np.hstack([state.features.z[:, keep], new_z])[:, order])

    proposed_ll = state_loglik(state, features)
    if np.log(rng.random()) < proposed_ll - state.loglik:
        state.prior = PriorState(prior.n, owner[order], connections)
        state.features = features
        state.loglik = proposed_ll
        state.accepts["ownership"] += 1
        return True
    return False


def mh_noise(state: ChainState, config: McmcConfig, rng: np.random.Generator) -> NoiseParams:
    """Log-space random-walk Metropolis on sigma_x then sigma_w."""
    scale = config.noise_proposal_scale
    if scale == 0:
        return state.noise

    for name in ("sigma_x", "sigma_w"):
        current = getattr(state.noise, name)
        proposed = current * float(np.exp(scale * rng.standard_normal()))
        noise = replace(state.noise, **{name: proposed})
        proposed_ll = state_loglik(state, noise=noise)
        log_ratio = (
            proposed_ll - state.loglik
            + noise_log_hyperprior(proposed) - noise_log_hyperprior(current)
            + np.log(proposed) - np.log(current)
        )
        state.proposals[name] += 1
        if np.log(rng.random()) < log_ratio:
            state.noise = noise
            state.loglik = proposed_ll
            state.accepts[name] += 1
    return state.noise


@dataclass
class ChainResult:
    """Records and summaries of one chain."""

    records: List[SampleRecord]
    map_state: ChainState
    final_state: ChainState
    acceptance: dict
    posterior_mean_x: Optional[np.ndarray] = None
    chain: int = 0

    @property
    def map_log_joint(self) -> float:
        return self.map_state.log_joint

    def trace(self) -> np.ndarray:
        return np.array([r.log_joint for r in self.records])


class DdibpSampler:
    """Systematic-scan sampler over (C, c*, alpha, sigma_x, sigma_w, missing X)."""

    def __init__(
        self,
        proximity: ProximityMatrix,
        config: McmcConfig,
        data: Optional[DataMatrix] = None,
        chain: int = 0,
        rng: Optional[np.random.Generator] = None,
        sink: Optional[Callable[[SampleRecord], None]] = None,
    ):
        """
        Initialize sampler.

        Args:
            proximity: Normalised proximity matrix
            config: Sampler configuration
            data: Observations; None runs the prior-only (flat likelihood) chain
            chain: Chain index recorded in every SampleRecord
            rng: Random generator (default: seeded from config.seed)
            sink: Callback receiving each record as it is produced
        """
        if data is not None and data.shape[0] != proximity.n:
            raise DimensionMismatchError(
                "Data rows do not match the number of customers",
                detail=f"{data.shape[0]} rows vs {proximity.n} customers",
            )
        self.proximity = proximity
        self.config = config
        self.data = data
        self.chain = chain
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.sink = sink

    def initialize(self) -> ChainState:
        """Draw alpha, then (c*, C) from the prior; noise scales from config."""
        cfg = self.config
        alpha = cfg.alpha_init if cfg.alpha_init is not None else float(
            self.rng.gamma(cfg.alpha_shape, 1.0 / cfg.alpha_rate))
        prior = sample_prior(self.proximity, alpha, self.rng)
        state = ChainState(
            prior=prior,
            alpha=alpha,
            noise=NoiseParams(cfg.sigma_x, cfg.sigma_w),
            data=self.data.copy() if self.data is not None else None,
            proximity=self.proximity,
            features=compute_feature_matrix(prior),
        )
        state.loglik = state_loglik(state)
        state.log_joint = log_joint(state, cfg)
        return state

    def sweep(self, state: ChainState) -> None:
        """One pass over every latent variable, in a fixed order."""
        cfg = self.config
        rng = self.rng

        if cfg.update_alpha:
            gibbs_alpha(state, cfg, rng)

        for k in range(state.prior.K):
            for i in range(state.prior.n):
                gibbs_connection(state, i, k, rng)

        mh_ownership(state, rng)

        if cfg.update_noise:
            mh_noise(state, cfg, rng)

        if cfg.update_missing and state.data is not None and state.data.has_missing:
            state.data = sample_missing(state.data, state.features, state.noise, rng)
            state.loglik = state_loglik(state)

        state.log_joint = log_joint(state, cfg)
        if cfg.debug:
            self.check_consistency(state)

    def check_consistency(self, state: ChainState) -> None:
        """Compare cached features and likelihood against a fresh recomputation."""
        fresh = compute_feature_matrix(state.prior)
        if not np.array_equal(fresh.z, state.features.z):
            raise SamplerStateError("Cached feature matrix differs from reachability")
        fresh_ll = state_loglik(state, fresh)
        if abs(fresh_ll - state.loglik) > LOG_JOINT_TOLERANCE * max(1.0, abs(fresh_ll)):
            raise SamplerStateError("Cached likelihood diverged", detail=f"{state.loglik} vs {fresh_ll}")
        fresh_joint = log_joint(state, self.config)
        if abs(fresh_joint - state.log_joint) > LOG_JOINT_TOLERANCE * max(1.0, abs(fresh_joint)):
            raise SamplerStateError("Cached log joint diverged", detail=f"{state.log_joint} vs {fresh_joint}")

    def record(self, state: ChainState, iteration: int) -> SampleRecord:
        record = SampleRecord(
            iteration=iteration,
            chain=self.chain,
            K=int(state.features.active_columns.shape[0]),
            alpha=state.alpha,
            sigma_x=state.noise.sigma_x,
            sigma_w=state.noise.sigma_w,
            log_joint=state.log_joint,
            z=state.features.z.astype(int).tolist() if self.config.record_z else None,
        )
        if self.sink is not None:
            self.sink(record)
        return record

    def run(self, state: Optional[ChainState] = None) -> ChainResult:
        """
        Run the configured number of sweeps.

        Args:
            state: Starting state (default: drawn from the prior)

        Returns:
            ChainResult with one record per sweep and the MAP state
        """
        cfg = self.config
        if state is None:
            state = self.initialize()
        logger.info(f"Chain {self.chain}: N={state.prior.n}, K0={state.prior.K}, "
                    f"iterations={cfg.iterations}, seed={cfg.seed}")

        best = state.copy()
        records: List[SampleRecord] = []
        x_sum = None
        kept = 0

        for iteration in range(cfg.iterations):
            self.sweep(state)
            records.append(self.record(state, iteration))

            if state.log_joint > best.log_joint:
                best = state.copy()
            if iteration >= cfg.burn_in and state.data is not None and state.data.has_missing:
                x_sum = state.data.x.copy() if x_sum is None else x_sum + state.data.x
                kept += 1

            if (iteration + 1) % cfg.log_every == 0:
                logger.info(f"Chain {self.chain} sweep {iteration + 1}/{cfg.iterations}: "
                            f"K={records[-1].K}, alpha={state.alpha:.3f}, log joint={state.log_joint:.2f}")
            else:
                logger.debug(f"Sweep {iteration + 1}: K={records[-1].K}, log joint={state.log_joint:.2f}")

        rates = state.acceptance_rates()
        logger.info(f"Chain {self.chain} finished: MAP log joint={best.log_joint:.2f}, acceptance={rates}")
        return ChainResult(
            records=records,
            map_state=best,
            final_state=state,
            acceptance=rates,
            posterior_mean_x=x_sum / kept if kept else None,
            chain=self.chain,
        )


def run_chain(
    X: Union[DataMatrix, np.ndarray, None],
    D: DistanceMatrix,
    f: DecayFunction,
    config: McmcConfig,
    sink: Optional[Callable[[SampleRecord], None]] = None,
) -> ChainResult:
    """Build the proximity matrix and run one chain seeded by config.seed."""
    if X is not None and not isinstance(X, DataMatrix):
        X = DataMatrix.from_array(X)
    sampler = DdibpSampler(build_proximity(D, f), config, data=X, sink=sink)
    return sampler.run()


def _run_one(proximity, config, data, chain, seed_seq) -> ChainResult:
    sampler = DdibpSampler(proximity, config, data=data, chain=chain,
                           rng=np.random.default_rng(seed_seq))
    return sampler.run()


def run_chains(
    X: Union[DataMatrix, np.ndarray, None],
    D: Optional[DistanceMatrix],
    f: Optional[DecayFunction],
    config: McmcConfig,
    n_chains: int = 1,
    n_jobs: int = 1,
    proximity: Optional[ProximityMatrix] = None,
) -> List[ChainResult]:
    """
    Independent restarts with spawned random streams.

    Args:
        proximity: Prebuilt proximity matrix; D and f are ignored when given

    Returns:
        One ChainResult per chain, in chain order
    """
    if X is not None and not isinstance(X, DataMatrix):
        X = DataMatrix.from_array(X)
    if proximity is None:
        proximity = build_proximity(D, f)
    if n_chains == 1:
        return [DdibpSampler(proximity, config, data=X).run()]
    seeds = np.random.SeedSequence(config.seed).spawn(n_chains)
    logger.info(f"Running {n_chains} chains with n_jobs={n_jobs}")
    return Parallel(n_jobs=n_jobs)(
        delayed(_run_one)(proximity, config, X, c, seeds[c]) for c in range(n_chains)
    )


def best_chain(results: List[ChainResult]) -> ChainResult:
    return max(results, key=lambda r: r.map_log_joint)


def save_checkpoint(state: ChainState, path: Path, rng: Optional[np.random.Generator] = None) -> Path:
    """Write the full chain state (and RNG state) to a compressed .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "alpha": state.alpha,
        "sigma_x": state.noise.sigma_x,
        "sigma_w": state.noise.sigma_w,
        "loglik": state.loglik,
        "log_joint": state.log_joint,
        "has_data": state.data is not None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    arrays = {
        "owner": state.prior.owner,
        "connections": state.prior.connections,
        "a": state.proximity.a,
        "h": state.proximity.h,
    }
    if state.data is not None:
        arrays["x"] = state.data.x
        arrays["mask"] = state.data.missing_mask
    np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Path) -> tuple:
    """
    Restore a chain state written by save_checkpoint.

    Returns:
        (ChainState, rng) where rng is None if no RNG state was stored
    """
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        prior = PriorState(int(archive["a"].shape[0]), archive["owner"], archive["connections"])
        proximity = ProximityMatrix(a=archive["a"], h=archive["h"])
        data = DataMatrix(archive["x"], archive["mask"]) if meta["has_data"] else None

    state = ChainState(
        prior=prior,
        alpha=meta["alpha"],
        noise=NoiseParams(meta["sigma_x"], meta["sigma_w"]),
        data=data,
        proximity=proximity,
        features=compute_feature_matrix(prior),
        loglik=meta["loglik"],
        log_joint=meta["log_joint"],
    )
    rng = None
    if meta["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    return state, rng
