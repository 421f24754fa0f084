"""
Experiment orchestration behind the CLI subcommands.
simulate / fit / impute / verify / sharing, each writing into one output directory.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from .config import write_run_config
from .core import (
    DecayFunction,
    DecayKind,
    DistanceMatrix,
    build_proximity,
    compute_feature_matrix,
    sample_prior,
)
from .errors import EXIT_OK, EXIT_VERIFICATION_FAILED, ConfigError, DimensionMismatchError
from .likelihood import DataMatrix, reconstruction_error, weight_posterior
from .loader import DistanceBuilder, read_data_csv, zscore
from .mcmc import ChainResult, DdibpSampler, best_chain, load_checkpoint, run_chains, save_checkpoint
from .models import McmcConfig, RunConfig
from .outputs import OutputWriter
from .storage import RunStorage
from .theory import (
    MAX_EXACT_N,
    DhbpParams,
    ddibp_limit_fractions,
    ddibp_sharing_rates,
    dhbp_limit_fractions,
    dhbp_truncation_error,
    ibp_baseline_sample,
    reach_probs_exact,
    reach_probs_mc,
    sample_dhbp,
    sharing_pmf_sweep,
    sharing_stats,
)
from .verification import VerificationSuite


logger = logging.getLogger(__name__)

PMF_GRID = np.linspace(0.0, 1.0, 11)
PMF_DHBP_DRAWS = 2000


@dataclass
class ServiceResult:
    """Outcome of one subcommand."""

    exit_code: int = EXIT_OK
    summary: Dict[str, Any] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)


def trace_frame(results: List[ChainResult]) -> pd.DataFrame:
    """One row per sweep and chain."""
    columns = ["iteration", "chain", "K", "alpha", "sigma_x", "sigma_w", "log_joint"]
    rows = [r.model_dump(exclude={"z"}) for result in results for r in result.records]
    return pd.DataFrame(rows, columns=columns)


class ExperimentService:
    """Runs one configured experiment and records it in the run registry."""

    def __init__(self, config: RunConfig, storage: Optional[RunStorage] = None):
        """
        Initialize service.

        Args:
            config: Validated run configuration
            storage: Run registry (None disables registration)
        """
        self.config = config
        self.storage = storage
        self.writer = OutputWriter(config.output_dir, config)
        self.builder = DistanceBuilder(kind=config.distance_kind)

    def run(self) -> ServiceResult:
        """Dispatch to the configured subcommand, bracketed by registry bookkeeping."""
        handlers: Dict[str, Callable[[], ServiceResult]] = {
            "simulate": self.simulate,
            "fit": self.fit,
            "impute": self.impute,
            "verify": self.verify,
            "sharing": self.sharing,
        }
        cfg = self.config
        run_id = None
        if self.storage is not None:
            run_id = self.storage.start_run(cfg.subcommand, cfg.config_hash(), cfg.mcmc.seed, cfg.output_dir)

        logger.info("=" * 70)
        logger.info(f"ddibp {cfg.subcommand} -> {cfg.output_dir}")
        logger.info("=" * 70)
        try:
            write_run_config(cfg, self.writer.register("run_config.txt"))
            result = handlers[cfg.subcommand]()
            self.writer.write_manifest()
            result.files = list(self.writer.files)
        except Exception as e:
            logger.error(f"{cfg.subcommand} failed: {e}")
            if run_id is not None:
                self.storage.finish_run(run_id, "failed", {"error": str(e)})
            raise

        if run_id is not None:
            status = "completed" if result.exit_code == EXIT_OK else "verification_failed"
            self.storage.finish_run(run_id, status, result.summary)
            result.summary["run_id"] = run_id
        return result

    def _distances(self, n: Optional[int] = None) -> DistanceMatrix:
        cfg = self.config
        if n is None:
            if cfg.distances_path is not None:
                return self.builder.from_matrix_file(cfg.distances_path)
            if cfg.covariate_path is not None:
                return self.builder.from_covariate_file(cfg.covariate_path)
            n = cfg.n_customers
        return self.builder.build(n, cfg.distances_path, cfg.covariate_path)

    def _decay(self) -> DecayFunction:
        return self.config.decay.build()

    def simulate(self) -> ServiceResult:
        """Prior draws of Z for the configured model, with sharing heatmaps."""
        cfg = self.config
        rng = np.random.default_rng(cfg.mcmc.seed)
        D = self._distances()
        A = build_proximity(D, self._decay())
        logger.info(f"Step 1/2: Drawing {cfg.n_samples} {cfg.model} samples for N={D.n}...")

        rows = []
        fractions = []
        for s in range(cfg.n_samples):
            if cfg.model == "ddibp":
                Z = compute_feature_matrix(sample_prior(A, cfg.alpha, rng))
            elif cfg.model == "ibp":
                Z = ibp_baseline_sample(cfg.alpha, D.n, rng)
            else:
                Z = sample_dhbp(DhbpParams(cfg.gamma, cfg.c0, cfg.c1, cfg.k_trunc, A), rng)
            z = Z.z[:, Z.active_columns].astype(int)
            stats = sharing_stats(z, zero_diagonal=True)
            self.writer.write_matrix(f"z_{s}.csv", z)
            self.writer.write_matrix(f"sharing_{s}.csv", stats.fraction)
            fractions.append(stats.fraction)
            rows.append({"sample": s, "K": z.shape[1], "mean_r": float(stats.r.mean()),
                         "empty_rows": int(stats.empty_rows.shape[0])})

        logger.info("Step 2/2: Writing summaries...")
        summary = pd.DataFrame(rows)
        self.writer.write_table("summary.csv", summary)
        self.writer.write_matrix("sharing.csv", np.mean(fractions, axis=0))
        logger.info(f"✓ Mean K over samples: {summary['K'].mean():.2f}")
        return ServiceResult(summary={"model": cfg.model, "n": D.n, "mean_K": float(summary["K"].mean())})

    def _load_data(self) -> tuple:
        raw, columns = read_data_csv(self.config.data_path)
        scale = None
        if self.config.zscore:
            raw, mean, std = zscore(raw)
            scale = (mean, std)
        return DataMatrix.from_array(raw), columns, scale

    def _chains(self, A, data: DataMatrix, mcmc: McmcConfig, sink=None) -> List[ChainResult]:
        if self.config.chains == 1:
            return [DdibpSampler(A, mcmc, data=data, sink=sink).run()]
        return run_chains(data, None, None, mcmc, n_chains=self.config.chains,
                          n_jobs=self.config.n_jobs, proximity=A)

    def _resumable_chain(self, A, data: DataMatrix, mcmc: McmcConfig, sink=None) -> ChainResult:
        """Single chain continued from, then saved back to, the configured checkpoint."""
        path = self.config.checkpoint_path
        state, rng = None, None
        if path.exists():
            state, rng = load_checkpoint(path)
            saved = None if state.data is None else state.data.shape
            if saved != data.shape:
                raise DimensionMismatchError("Checkpoint does not match the data", detail=f"{saved} vs {data.shape}")
            if not np.allclose(state.proximity.a, A.a):
                raise ConfigError("Checkpoint geometry differs from the configured distances and decay",
                                  key="checkpoint_path")
            logger.info(f"Resuming from {path}: K={state.prior.K}, log joint={state.log_joint:.2f}")
        sampler = DdibpSampler(A, mcmc, data=data, rng=rng, sink=sink)
        result = sampler.run(state)
        save_checkpoint(result.final_state, path, rng=sampler.rng)
        return result

    def fit(self) -> ServiceResult:
        """Run the sampler on a data table and persist the MAP features and the trace."""
        cfg = self.config
        logger.info("Step 1/3: Loading data and distances...")
        data, _, _ = self._load_data()
        D = self._distances(data.shape[0])
        A = build_proximity(D, self._decay())
        mcmc = cfg.mcmc.model_copy(update={"update_missing": cfg.mcmc.update_missing or data.has_missing})

        logger.info(f"Step 2/3: Running {cfg.chains} chain(s) of {mcmc.iterations} sweeps...")
        with self.writer.sample_sink() as sink:
            if cfg.checkpoint_path is not None:
                results = [self._resumable_chain(A, data, mcmc, sink=sink)]
            else:
                results = self._chains(A, data, mcmc, sink=sink)
            if cfg.chains > 1:
                for result in results:
                    for record in result.records:
                        sink(record)
        best = best_chain(results)
        state = best.map_state

        logger.info("Step 3/3: Writing MAP sample and trace...")
        z = state.features.z[:, state.features.active_columns].astype(int)
        self.writer.write_matrix("map_z.csv", z)
        self.writer.write_table("trace.csv", trace_frame([best]))
        self.writer.write_matrix("sharing.csv", sharing_stats(z, zero_diagonal=True).fraction)
        self.writer.write_matrix("map_weights.csv", weight_posterior(state.data, z, state.noise).mean)
        if cfg.chains > 1:
            self.writer.write_table("chains.csv", pd.DataFrame([
                {"chain": r.chain, "map_log_joint": r.map_log_joint, **r.acceptance} for r in results
            ]))

        params = {
            "chain": best.chain,
            "K": int(z.shape[1]),
            "alpha": state.alpha,
            "sigma_x": state.noise.sigma_x,
            "sigma_w": state.noise.sigma_w,
            "log_joint": state.log_joint,
            "acceptance": best.acceptance,
        }
        self.writer.write_json("map_params.json", params)
        logger.info(f"✓ MAP: K={params['K']}, log joint={state.log_joint:.2f}")
        return ServiceResult(summary={k: v for k, v in params.items() if k != "acceptance"})

    def impute(self) -> ServiceResult:
        """
        Impute missing entries, optionally across a sweep of exponential decay rates.

        With a ground-truth table the squared reconstruction error of every run is
        reported, with per-entry residuals.
        """
        cfg = self.config
        logger.info("Step 1/3: Loading data and distances...")
        data, columns, scale = self._load_data()
        if not data.has_missing:
            logger.warning("No missing entries in the data; imputation is degenerate")
        D = self._distances(data.shape[0])

        truth = None
        if cfg.truth_path is not None:
            truth, _ = read_data_csv(cfg.truth_path)
            if truth.shape != data.shape:
                raise DimensionMismatchError("Ground truth shape does not match the data",
                                             detail=f"{truth.shape} vs {data.shape}")

        decays = [(f"{b:g}", DecayFunction(DecayKind.EXPONENTIAL, beta=b)) for b in cfg.betas] \
            or [("config", self._decay())]
        mcmc = cfg.mcmc.model_copy(update={"update_missing": True})

        logger.info(f"Step 2/3: Running {len(decays)} imputation chain(s)...")
        error_rows, residual_rows, results = [], [], []
        for label, f in decays:
            A = build_proximity(D, f)
            best = best_chain(self._chains(A, data, mcmc))
            results.append(best)
            imputed_map = self._unscale(best.map_state.data.x, scale)
            posterior_mean = best.posterior_mean_x if best.posterior_mean_x is not None else best.map_state.data.x
            imputed_mean = self._unscale(posterior_mean, scale)
            suffix = "" if label == "config" else f"_beta_{label}"
            self.writer.write_table(f"imputed{suffix}.csv", pd.DataFrame(imputed_map, columns=columns))
            self.writer.write_table(f"imputed_mean{suffix}.csv", pd.DataFrame(imputed_mean, columns=columns))

            row = {"decay": f.describe(), "beta": f.beta if f.kind is DecayKind.EXPONENTIAL else np.nan,
                   "n_missing": int(data.missing_mask.sum()), "map_log_joint": best.map_log_joint}
            if truth is not None:
                report = reconstruction_error(imputed_map, truth, data.missing_mask)
                row["mse_map"] = report["mse"]
                row["mse_posterior_mean"] = reconstruction_error(imputed_mean, truth, data.missing_mask)["mse"]
                residual_rows.extend({"decay": f.describe(), **entry} for entry in report["residuals"])
            error_rows.append(row)
            logger.info(f"✓ {f.describe()}: {row}")

        logger.info("Step 3/3: Writing error reports...")
        self.writer.write_table("errors.csv", pd.DataFrame(error_rows))
        if truth is not None:
            self.writer.write_table("residuals.csv", pd.DataFrame(
                residual_rows, columns=["decay", "row", "col", "truth", "imputed", "residual"]))
        self.writer.write_table("trace.csv", trace_frame(results).assign(
            decay=np.repeat([r[1].describe() for r in decays], [len(r.records) for r in results])))
        return ServiceResult(summary={"runs": len(error_rows), "errors": error_rows})

    @staticmethod
    def _unscale(x: np.ndarray, scale) -> np.ndarray:
        if scale is None:
            return x
        mean, std = scale
        return x * std + mean

    def verify(self) -> ServiceResult:
        """Run the invariant suite; a failing check gives exit status 2."""
        cfg = self.config
        suite = VerificationSuite(draws=cfg.draws, seed=cfg.mcmc.seed, n_jobs=cfg.n_jobs,
                                  perturbation=cfg.inject_failure, quick=cfg.quick)
        report = suite.run()
        report.write(self.writer.register("verify_report.txt"))
        self.writer.write_table("verify_report.csv", report.to_frame())
        for line in report.lines():
            print(line)

        failed = [r.name for r in report.failures]
        summary = {"checks": len(report.results), "failed": failed, "elapsed": round(report.elapsed, 2)}
        if failed:
            logger.error(f"✗ {len(failed)} check(s) failed: {', '.join(failed)}")
            return ServiceResult(exit_code=EXIT_VERIFICATION_FAILED, summary=summary)
        logger.info("✓ ALL CHECKS PASSED")
        return ServiceResult(summary=summary)

    def sharing(self) -> ServiceResult:
        """
        Sharing analytics for the configured geometry.

        Activation probabilities, Poisson rates and the large-mass limit matrix,
        per-draw fraction heatmaps for the dd-IBP and the dHBP, and PMF tables of
        the shared-feature count for two customers.
        """
        cfg = self.config
        rng = np.random.default_rng(cfg.mcmc.seed)
        D = self._distances()
        A = build_proximity(D, self._decay())
        n = D.n

        logger.info(f"Step 1/3: Activation probabilities for N={n}...")
        if n <= MAX_EXACT_N:
            probs = reach_probs_exact(A)
        else:
            probs = reach_probs_mc(A, cfg.draws, rng)
            self.writer.write_matrix("reach_single_se.csv", probs.se_single)
        self.writer.write_matrix("reach_single.csv", probs.p_single)
        i, j, owner = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
        self.writer.write_table("reach_pair.csv", pd.DataFrame({
            "i": i.ravel(), "j": j.ravel(), "owner": owner.ravel(), "probability": probs.p_pair.ravel()}))

        rate_i, rate_ij = ddibp_sharing_rates(A, cfg.alpha, probs)
        self.writer.write_table("rates.csv", pd.DataFrame(
            [{"i": a, "j": b, "rate": rate_ij[a, b]} for a in range(n) for b in range(n)]))
        limit = ddibp_limit_fractions(A, probs)
        self.writer.write_matrix("limit_fractions.csv", limit)

        logger.info(f"Step 2/3: Drawing {cfg.n_samples} fraction heatmaps per model...")
        params = DhbpParams(cfg.gamma, cfg.c0, cfg.c1, cfg.k_trunc, A)
        for s in range(cfg.n_samples):
            z = compute_feature_matrix(sample_prior(A, cfg.alpha, rng))
            self.writer.write_matrix(f"fraction_ddibp_{s}.csv", sharing_stats(z, zero_diagonal=True).fraction)
            self.writer.write_matrix(f"fraction_dhbp_{s}.csv",
                                     sharing_stats(sample_dhbp(params, rng), zero_diagonal=True).fraction)

        logger.info("Step 3/3: PMF tables of the shared-feature count...")
        pmf_draws = min(cfg.draws, PMF_DHBP_DRAWS)
        for model in ("ddibp", "dhbp"):
            table = sharing_pmf_sweep(model, PMF_GRID, cfg.alpha, rng=rng, n_draws=pmf_draws,
                                      c0=cfg.c0, c1=cfg.c1, k_trunc=cfg.k_trunc)
            self.writer.write_table(f"pmf_{model}.csv", table.to_frame())
            self.writer.write_table(f"pmf_{model}_mean_r.csv",
                                    pd.DataFrame({"proximity": table.grid, "mean_r": table.mean_r}))

        same, diff = dhbp_limit_fractions(cfg.c0, cfg.c1)
        summary = {
            "n": n,
            "exact": n <= MAX_EXACT_N,
            "rate_i": rate_i.tolist(),
            "dhbp_same_group_limit": same,
            "dhbp_diff_group_limit": diff,
            "dhbp_truncation_error": dhbp_truncation_error(params, min(cfg.draws, 200), rng),
        }
        self.writer.write_json("sharing_summary.json", summary)
        return ServiceResult(summary=summary)
