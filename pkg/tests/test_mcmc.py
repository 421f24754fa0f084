"""
Unit tests for the Metropolis-within-Gibbs sampler.
"""

from dataclasses import astuple
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import kstest, lognorm

from ddibp.core import (
    DecayFunction,
    DecayKind,
    DistanceMatrix,
    PriorState,
    ProximityMatrix,
    build_proximity,
    compute_feature_matrix,
)
from ddibp.errors import DimensionMismatchError, SamplerStateError
from ddibp.likelihood import DataMatrix, NoiseParams, collapsed_loglik
from ddibp.mcmc import (
    NOISE_HYPERPRIOR_SCALE,
    ChainState,
    DdibpSampler,
    alpha_conditional,
    best_chain,
    gibbs_alpha,
    gibbs_connection,
    load_checkpoint,
    mh_noise,
    mh_ownership,
    run_chain,
    run_chains,
    save_checkpoint,
    state_loglik,
)
from ddibp.models import McmcConfig
from ddibp.theory import ddibp_sharing_rates, reach_probs_exact


def symmetric_geometry(n: int = 4, seed: int = 0) -> ProximityMatrix:
    t = np.random.default_rng(seed).uniform(0, 3, size=n)
    D = DistanceMatrix(np.abs(t[:, None] - t[None, :]))
    return build_proximity(D, DecayFunction(DecayKind.EXPONENTIAL, beta=1.0))


def make_state(A: ProximityMatrix, prior: PriorState, data=None, alpha: float = 1.0) -> ChainState:
    state = ChainState(
        prior=prior,
        alpha=alpha,
        noise=NoiseParams(),
        data=data,
        proximity=A,
        features=compute_feature_matrix(prior),
    )
    state.loglik = state_loglik(state)
    return state


@pytest.fixture
def small_data():
    rng = np.random.default_rng(21)
    return DataMatrix(rng.normal(size=(4, 3)))


class TestMcmcConfig:
    """Tests for sampler configuration validation."""

    def test_burn_in_must_be_smaller(self):
        """Test that burn_in >= iterations is rejected."""
        with pytest.raises(ValidationError):
            McmcConfig(iterations=10, burn_in=10)

    def test_fixed_alpha_needs_value(self):
        """Test that switching off the alpha update requires alpha_init."""
        with pytest.raises(ValidationError):
            McmcConfig(update_alpha=False)

    def test_zero_iterations_allowed(self):
        """Test the empty schedule."""
        assert McmcConfig(iterations=0).iterations == 0


class TestGibbsAlpha:
    """Tests for the conjugate alpha update."""

    def test_conditional_parameters(self):
        """Test shape 2 and rate 2.5 for lambda = (1, 0) and h = (1, 2)."""
        A = ProximityMatrix.from_weights(np.array([[1.0, 0.0], [1.0, 1.0]]))
        state = make_state(A, PriorState(2, np.array([0]), np.array([[0], [0]])))

        assert alpha_conditional(state, McmcConfig()) == (2.0, 2.5)

    def test_draw_moments(self):
        """Test the empirical mean and variance of repeated draws."""
        A = ProximityMatrix.from_weights(np.array([[1.0, 0.0], [1.0, 1.0]]))
        state = make_state(A, PriorState(2, np.array([0]), np.array([[0], [0]])))
        rng = np.random.default_rng(0)
        config = McmcConfig()

        draws = np.array([gibbs_alpha(state, config, rng) for _ in range(20000)])

        assert abs(draws.mean() - 0.8) < 4 * np.sqrt(0.32 / 20000)
        assert draws.var() == pytest.approx(0.32, rel=0.05)


class TestGibbsConnection:
    """Tests for the connection update."""

    def test_cached_features_stay_consistent(self, small_data):
        """Test that Z and the likelihood match a fresh recomputation after many updates."""
        A = symmetric_geometry()
        prior = PriorState(4, np.array([0, 2, 3]), np.zeros((4, 3), dtype=np.int64))
        state = make_state(A, prior, data=small_data)
        rng = np.random.default_rng(1)

        for _ in range(200):
            gibbs_connection(state, int(rng.integers(4)), int(rng.integers(3)), rng)

        np.testing.assert_array_equal(state.features.z, compute_feature_matrix(state.prior).z)
        assert state.loglik == pytest.approx(state_loglik(state, compute_feature_matrix(state.prior)))

    def test_zero_proximity_targets_never_drawn(self):
        """Test that a sequential geometry never connects a customer forward."""
        A = build_proximity(DistanceMatrix.sequential(4), DecayFunction(DecayKind.CONSTANT))
        state = make_state(A, PriorState(4, np.array([0]), np.zeros((4, 1), dtype=np.int64)))
        rng = np.random.default_rng(2)

        for _ in range(300):
            i = int(rng.integers(4))
            j = gibbs_connection(state, i, 0, rng)
            assert j <= i

    @staticmethod
    def _connection_frequencies(state: ChainState, i: int, n_draws: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        counts = np.zeros(state.proximity.n)
        for _ in range(n_draws):
            counts[gibbs_connection(state.copy(), i, 0, rng)] += 1
        return counts / n_draws

    def test_matches_enumerated_conditional(self):
        """Test draw frequencies against a_ij exp(log P(X | Z_j)) over every target j."""
        A = symmetric_geometry(3, seed=11)
        data = DataMatrix(np.random.default_rng(12).normal(size=(3, 2)))
        owner = np.array([0])
        state = make_state(A, PriorState(3, owner, np.array([[0], [0], [2]])), data=data)

        log_target = np.empty(3)
        for j in range(3):
            prior = PriorState(3, owner, np.array([[0], [0], [j]]))
            log_target[j] = np.log(A.a[2, j]) + collapsed_loglik(data, compute_feature_matrix(prior), NoiseParams())
        target = np.exp(log_target - log_target.max())
        target /= target.sum()

        n_draws = 20000
        freq = self._connection_frequencies(state, 2, n_draws, seed=13)

        se = np.sqrt(target * (1 - target) / n_draws)
        assert np.all(np.abs(freq - target) < 4.5 * se + 1e-12), (freq, target)

    def test_flat_likelihood_follows_proximity(self):
        """Test that without data the new target is drawn from row a_i."""
        A = symmetric_geometry(3, seed=14)
        state = make_state(A, PriorState(3, np.array([0]), np.array([[0], [0], [2]])))

        n_draws = 20000
        freq = self._connection_frequencies(state, 2, n_draws, seed=15)

        se = np.sqrt(A.a[2] * (1 - A.a[2]) / n_draws)
        assert np.all(np.abs(freq - A.a[2]) < 4.5 * se + 1e-12)


class TestMhOwnership:
    """Tests for the ownership proposal."""

    def test_flat_likelihood_always_accepts(self):
        """Test acceptance and structural validity without data."""
        A = symmetric_geometry()
        state = make_state(A, PriorState(4), alpha=5.0)
        rng = np.random.default_rng(3)

        for _ in range(50):
            assert mh_ownership(state, rng)
            state.prior.validate()
            np.testing.assert_array_equal(state.features.z, compute_feature_matrix(state.prior).z)

    def test_rejection_leaves_state_unchanged(self, small_data):
        """Test that a rejected proposal restores the previous configuration."""
        A = symmetric_geometry()
        state = make_state(A, PriorState(4), data=small_data, alpha=50.0)
        before_ll = state.loglik

        with patch("ddibp.mcmc.state_loglik", return_value=-np.inf):
            accepted = mh_ownership(state, np.random.default_rng(4))

        assert not accepted
        assert state.prior.K == 0
        assert state.features.K == 0
        assert state.loglik == before_ll


class TestMhNoise:
    """Tests for the noise-scale update."""

    def test_zero_scale_is_fixed(self, small_data):
        """Test that a zero proposal scale never moves the noise scales."""
        A = symmetric_geometry()
        state = make_state(A, PriorState(4), data=small_data)

        noise = mh_noise(state, McmcConfig(noise_proposal_scale=0.0), np.random.default_rng(5))

        assert noise == NoiseParams()
        assert not state.proposals

    def test_cached_likelihood_follows_noise(self, small_data):
        """Test that the cached likelihood matches the accepted noise scales."""
        A = symmetric_geometry()
        state = make_state(A, PriorState(4, np.array([1]), np.full((4, 1), 1)), data=small_data)
        rng = np.random.default_rng(6)

        for _ in range(30):
            mh_noise(state, McmcConfig(noise_proposal_scale=0.5), rng)

        assert state.loglik == pytest.approx(state_loglik(state))

    def test_flat_chain_targets_hyperprior(self):
        """Test thinned draws without data against the log-normal hyperprior."""
        A = symmetric_geometry(3)
        state = make_state(A, PriorState(3))
        rng = np.random.default_rng(16)
        config = McmcConfig(noise_proposal_scale=1.0)

        draws = np.array([astuple(mh_noise(state, config, rng)) for _ in range(50000)])[::50]

        hyperprior = lognorm(s=NOISE_HYPERPRIOR_SCALE)
        assert kstest(draws[:, 0], hyperprior.cdf).pvalue > 1e-3
        assert kstest(draws[:, 1], hyperprior.cdf).pvalue > 1e-3


class TestDdibpSampler:
    """Tests for full sweeps and chain bookkeeping."""

    def test_record_per_sweep(self, small_data):
        """Test one record per iteration with consecutive indices."""
        config = McmcConfig(iterations=12, seed=1)

        result = DdibpSampler(symmetric_geometry(), config, data=small_data).run()

        assert [r.iteration for r in result.records] == list(range(12))
        assert result.trace().shape == (12,)
        assert result.map_log_joint >= max(result.trace())

    def test_zero_iterations(self, small_data):
        """Test that an empty schedule returns the initial state as MAP."""
        result = DdibpSampler(symmetric_geometry(), McmcConfig(iterations=0), data=small_data).run()

        assert result.records == []
        assert result.map_state.log_joint == result.final_state.log_joint

    def test_fixed_seed_is_reproducible(self, small_data):
        """Test identical traces for identical seeds."""
        config = McmcConfig(iterations=10, seed=7)
        A = symmetric_geometry()

        first = DdibpSampler(A, config, data=small_data).run()
        second = DdibpSampler(A, config, data=small_data).run()

        np.testing.assert_array_equal(first.trace(), second.trace())

    def test_debug_mode_consistency(self):
        """Test that every sweep passes the recomputation check, missing data included."""
        rng = np.random.default_rng(8)
        raw = rng.normal(size=(5, 3))
        raw[1, 2] = raw[3, 0] = np.nan
        config = McmcConfig(iterations=15, seed=2, debug=True, update_missing=True)

        result = run_chain(raw, DistanceMatrix.sequential(5), DecayFunction(DecayKind.EXPONENTIAL), config)

        assert len(result.records) == 15
        assert result.posterior_mean_x.shape == (5, 3)
        assert np.all(np.isfinite(result.posterior_mean_x))

    def test_check_consistency_detects_drift(self, small_data):
        """Test that a tampered cached likelihood is reported."""
        sampler = DdibpSampler(symmetric_geometry(), McmcConfig(iterations=1), data=small_data)
        state = sampler.initialize()
        state.loglik += 1.0

        with pytest.raises(SamplerStateError):
            sampler.check_consistency(state)

    def test_data_rows_must_match(self):
        """Test the customer count check."""
        with pytest.raises(DimensionMismatchError):
            DdibpSampler(symmetric_geometry(4), McmcConfig(), data=DataMatrix(np.zeros((3, 2))))

    def test_fixed_alpha_is_kept(self, small_data):
        """Test that alpha never moves when its update is switched off."""
        config = McmcConfig(iterations=5, update_alpha=False, alpha_init=2.5)

        result = DdibpSampler(symmetric_geometry(), config, data=small_data).run()

        assert all(r.alpha == 2.5 for r in result.records)

    def test_sink_receives_records(self, small_data):
        """Test that the sink sees every record in order."""
        seen = []
        config = McmcConfig(iterations=4, record_z=True)

        DdibpSampler(symmetric_geometry(), config, data=small_data, sink=seen.append).run()

        assert [r.iteration for r in seen] == [0, 1, 2, 3]
        assert all(len(r.z) == 4 for r in seen)


class TestFlatChain:
    """The data-free chain must target the prior."""

    def test_alpha_and_dish_count(self):
        """Test E[alpha] = 1 and E[K] = sum(1/h) under a Gamma(1, 1) hyperprior."""
        A = symmetric_geometry(3, seed=4)
        config = McmcConfig(iterations=3000, seed=3, update_noise=False, log_every=10_000)

        result = DdibpSampler(A, config).run()

        alphas = np.array([r.alpha for r in result.records])
        ks = np.array([r.K for r in result.records])
        assert abs(alphas.mean() - 1.0) < 0.2
        assert abs(ks.mean() - A.inv_h.sum()) < 0.5

    def test_sharing_rates_match_prior(self):
        """Test mean R_i of the flat chain against the analytic rates at fixed alpha."""
        A = symmetric_geometry(3, seed=5)
        config = McmcConfig(iterations=4000, seed=4, update_alpha=False, alpha_init=2.0,
                            update_noise=False, record_z=True, log_every=10_000)

        result = DdibpSampler(A, config).run()

        r = np.array([np.asarray(rec.z, dtype=float).sum(axis=1) for rec in result.records])
        rate_i, _ = ddibp_sharing_rates(A, 2.0, reach_probs_exact(A))
        np.testing.assert_allclose(r.mean(axis=0), rate_i, atol=0.2)


class TestChainsAndCheckpoints:
    """Tests for restarts and checkpointing."""

    def test_independent_chains(self, small_data):
        """Test one result per chain and MAP selection across chains."""
        config = McmcConfig(iterations=5, seed=9)

        results = run_chains(small_data, None, None, config, n_chains=2, n_jobs=1,
                             proximity=symmetric_geometry())

        assert [r.chain for r in results] == [0, 1]
        assert best_chain(results).map_log_joint == max(r.map_log_joint for r in results)

    def test_checkpoint_round_trip(self, small_data, tmp_path):
        """Test that state and random stream survive a save and load."""
        sampler = DdibpSampler(symmetric_geometry(), McmcConfig(iterations=3, seed=10), data=small_data)
        state = sampler.run().final_state

        path = save_checkpoint(state, tmp_path / "chain.npz", rng=sampler.rng)
        restored, rng = load_checkpoint(path)

        np.testing.assert_array_equal(restored.prior.owner, state.prior.owner)
        np.testing.assert_array_equal(restored.prior.connections, state.prior.connections)
        np.testing.assert_array_equal(restored.features.z, state.features.z)
        assert restored.alpha == state.alpha
        assert restored.noise == state.noise
        assert rng.random() == sampler.rng.random()
