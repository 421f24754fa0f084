"""
Tests for configuration, I/O, the run registry and the command-line entry point.
"""

import json
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from ddibp.config import load_run_config, nest_keys, write_run_config
from ddibp.errors import (
    ERROR_DOCS,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFICATION_FAILED,
    ConfigError,
    DimensionMismatchError,
    DomainError,
    VerificationError,
    exit_code_for,
)
from ddibp.likelihood import NoiseParams, weight_posterior
from ddibp.loader import DistanceBuilder, read_covariate_csv, read_data_csv, read_matrix_csv, zscore
from ddibp.main import build_parser, collect_overrides, main
from ddibp.models import CheckResult, RunConfig
from ddibp.outputs import MANIFEST_NAME, OutputWriter
from ddibp.storage import RunStorage
from ddibp.verification import VerificationReport


@pytest.fixture
def data_file(tmp_path) -> Path:
    rng = np.random.default_rng(0)
    frame = pd.DataFrame(rng.normal(size=(6, 2)), columns=["a", "b"])
    path = tmp_path / "x.csv"
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def missing_files(tmp_path):
    rng = np.random.default_rng(1)
    truth = pd.DataFrame(rng.normal(size=(6, 2)), columns=["a", "b"])
    observed = truth.copy()
    observed.iloc[1, 0] = np.nan
    observed.iloc[4, 1] = np.nan
    data_path = tmp_path / "observed.csv"
    truth_path = tmp_path / "truth.csv"
    observed.to_csv(data_path, index=False)
    truth.to_csv(truth_path, index=False)
    return data_path, truth_path


class TestRunConfig:
    """Tests for the dotted-key configuration layer."""

    def test_round_trip(self, tmp_path):
        """Test that a written configuration loads back identically."""
        config = load_run_config(overrides={
            "subcommand": "fit",
            "output_dir": str(tmp_path / "out"),
            "decay.kind": "window",
            "decay.nu": "2.5",
            "mcmc.iterations": "40",
            "mcmc.seed": "9",
            "betas": "0.5,1,2",
        })

        path = write_run_config(config, tmp_path / "run_config.txt")
        restored = load_run_config(path)

        assert restored == config
        assert restored.config_hash() == config.config_hash()
        assert restored.betas == [0.5, 1.0, 2.0]

    def test_overrides_win_over_file(self, tmp_path):
        """Test precedence: defaults, then file, then overrides."""
        path = tmp_path / "run.cfg"
        path.write_text("# geometry\ndecay.kind=logistic\ndecay.beta=2\nalpha=3\n", encoding="utf-8")

        config = load_run_config(path, overrides={"alpha": 7.0}, defaults={"alpha": 1.0, "c0": 4.0})

        assert config.decay.kind.value == "logistic"
        assert config.decay.beta == 2.0
        assert config.alpha == 7.0
        assert config.c0 == 4.0

    def test_unknown_key(self):
        """Test that an unknown key names itself."""
        with pytest.raises(ConfigError) as info:
            load_run_config(overrides={"decay.gamma": 1})
        assert info.value.key == "decay.gamma"

    def test_invalid_value_names_key(self):
        """Test that a validation failure carries the dotted key."""
        with pytest.raises(ConfigError) as info:
            load_run_config(overrides={"decay.beta": -1})
        assert info.value.key == "decay.beta"
        assert "decay.beta" in str(info.value)

    def test_missing_data_file(self, tmp_path):
        """Test that a nonexistent data path is a configuration error."""
        with pytest.raises(ConfigError) as info:
            load_run_config(overrides={"data_path": str(tmp_path / "nope.csv")})
        assert info.value.key == "data_path"

    def test_missing_config_file(self, tmp_path):
        """Test a nonexistent config file."""
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.cfg")

    def test_nest_keys(self):
        """Test dotted-key nesting."""
        assert nest_keys({"mcmc.seed": 3, "alpha": 2}) == {"mcmc": {"seed": 3}, "alpha": 2}

    def test_dhbp_mass_below_truncation(self):
        """Test gamma < k_trunc for the dHBP model."""
        with pytest.raises(ConfigError):
            load_run_config(overrides={"model": "dhbp", "gamma": 100, "k_trunc": 50})

    def test_checkpoint_needs_single_chain(self, tmp_path):
        """Test that checkpointing is rejected together with restarts."""
        with pytest.raises(ConfigError):
            load_run_config(overrides={"subcommand": "fit", "chains": 2,
                                       "checkpoint_path": str(tmp_path / "chain.npz")})


class TestErrors:
    """Tests for exit-code mapping."""

    def test_exit_codes(self):
        """Test the usage and verification statuses."""
        assert exit_code_for(DomainError()) == EXIT_USAGE
        assert exit_code_for(ConfigError(key="x")) == EXIT_USAGE
        assert exit_code_for(VerificationError()) == EXIT_VERIFICATION_FAILED
        assert exit_code_for(RuntimeError()) == EXIT_USAGE

    def test_config_error_detail(self):
        """Test the offending-key detail."""
        assert str(ConfigError("Bad value", key="mcmc.seed")) == "Bad value (offending key: mcmc.seed)"


class TestLoader:
    """Tests for CSV ingestion and distance construction."""

    def test_matrix_with_infinity(self, tmp_path):
        """Test `inf` tokens in a header-less matrix."""
        path = tmp_path / "d.csv"
        path.write_text("0,inf\n1,0\n", encoding="utf-8")

        d = read_matrix_csv(path)

        assert d.shape == (2, 2)
        assert np.isinf(d[0, 1])

    def test_data_with_empty_cells(self, tmp_path):
        """Test that empty cells are missing entries."""
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1.0,\n,2.0\n3.0,4.0\n", encoding="utf-8")

        x, columns = read_data_csv(path)

        assert columns == ["a", "b"]
        np.testing.assert_array_equal(np.isnan(x), [[False, True], [True, False], [False, False]])

    def test_missing_file(self, tmp_path):
        """Test that a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_matrix_csv(tmp_path / "missing.csv")

    def test_sequential_covariate(self):
        """Test time-gap distances with infinite forward entries."""
        D = DistanceBuilder("sequential").from_covariate(np.array([0.0, 1.0, 3.0]))

        assert D.d[2, 0] == 3.0
        assert np.isinf(D.d[0, 2])

    def test_absolute_covariate(self, tmp_path):
        """Test symmetric distances from a covariate file."""
        path = tmp_path / "age.csv"
        path.write_text("age\n30\n35\n50\n", encoding="utf-8")

        D = DistanceBuilder("absolute").from_covariate_file(path)

        np.testing.assert_array_equal(D.d, D.d.T)
        assert D.d[0, 2] == 20.0
        np.testing.assert_array_equal(read_covariate_csv(path), [30.0, 35.0, 50.0])

    def test_size_mismatch(self, tmp_path):
        """Test that a 3 x 3 distance file cannot serve 4 customers."""
        path = tmp_path / "d.csv"
        pd.DataFrame(np.zeros((3, 3))).to_csv(path, header=False, index=False)

        with pytest.raises(DimensionMismatchError):
            DistanceBuilder().build(4, distances_path=path)

    def test_default_geometry(self):
        """Test customers at times 0..n-1 when no source is given."""
        D = DistanceBuilder().build(3)
        assert D.is_sequential()
        assert D.d[2, 0] == 2.0

    def test_zscore(self):
        """Test standardisation with a constant column."""
        z, mean, std = zscore(np.array([[1.0, 5.0], [3.0, 5.0]]))

        np.testing.assert_allclose(z, [[-1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(mean, [2.0, 5.0])
        np.testing.assert_allclose(std, [1.0, 1.0])


class TestOutputWriter:
    """Tests for the output directory."""

    def test_single_writer_per_file(self, tmp_path):
        """Test that writing the same file twice is refused."""
        writer = OutputWriter(tmp_path, RunConfig(output_dir=tmp_path))
        writer.write_matrix("z.csv", np.eye(2))

        with pytest.raises(RuntimeError):
            writer.write_matrix("z.csv", np.eye(2))

    def test_manifest_lists_digests(self, tmp_path):
        """Test the manifest header and one digest line per file."""
        writer = OutputWriter(tmp_path, RunConfig(output_dir=tmp_path))
        writer.write_matrix("d.csv", np.array([[0.0, np.inf], [1.0, 0.0]]))
        writer.write_json("params.json", {"K": 2})

        lines = writer.write_manifest().read_text(encoding="utf-8").splitlines()

        assert lines[0].startswith("version\t")
        assert any(line.startswith("config_hash\t") for line in lines)
        files = [line.split("\t") for line in lines if line.startswith("file\t")]
        assert [f[1] for f in files] == ["d.csv", "params.json"]
        assert all(len(f[2]) == 64 for f in files)
        assert (tmp_path / "d.csv").read_text(encoding="utf-8").splitlines()[0] == "0.0,inf"


class TestRunStorage:
    """Tests for the SQLite run registry."""

    def test_lifecycle(self, tmp_path):
        """Test start, finish, lookup by id and by hash."""
        storage = RunStorage(f"sqlite:///{tmp_path / 'db' / 'runs.db'}")

        run_id = storage.start_run("simulate", "abc", 3, tmp_path)
        storage.finish_run(run_id, "completed", {"mean_K": 2.5})

        record = storage.get_run(run_id).to_dict()
        assert record["status"] == "completed"
        assert record["summary"] == {"mean_K": 2.5}
        assert record["finished"] is not None
        assert [r.id for r in storage.find_by_hash("abc")] == [run_id]
        assert storage.count_records() == 1


class TestParser:
    """Tests for argument parsing."""

    def test_flags_become_dotted_keys(self, data_file):
        """Test override collection, including the fixed-alpha shortcut."""
        args = build_parser().parse_args(["fit", "--data", str(data_file), "--decay", "window",
                                          "--nu", "2", "--fix-alpha", "1.5", "--iterations", "10"])

        overrides = collect_overrides(args)

        assert overrides["subcommand"] == "fit"
        assert overrides["decay.kind"] == "window"
        assert overrides["decay.nu"] == 2.0
        assert overrides["mcmc.iterations"] == 10
        assert overrides["mcmc.alpha_init"] == 1.5
        assert overrides["mcmc.update_alpha"] is False
        assert "mcmc.debug" not in overrides

    def test_impute_forces_missing_updates(self, data_file):
        """Test that impute always resamples missing entries."""
        args = build_parser().parse_args(["impute", "--data", str(data_file)])
        assert collect_overrides(args)["mcmc.update_missing"] is True

    def test_usage_error_exit_status(self):
        """Test that a missing required flag exits with status 1."""
        with pytest.raises(SystemExit) as info:
            main(["fit"])
        assert info.value.code == EXIT_USAGE

    def test_help_lists_exit_codes(self):
        """Test that every documented exit status appears in the help epilog."""
        epilog = build_parser().epilog

        assert "Exit codes:" in epilog
        for code, doc in ERROR_DOCS.items():
            assert f"  {code}  {doc['description']}" in epilog
        assert "Verification failure" in epilog


class TestMain:
    """End-to-end runs of the subcommands."""

    def test_simulate(self, tmp_path):
        """Test simulate outputs and the manifest."""
        out = tmp_path / "sim"

        code = main(["simulate", "--customers", "5", "--samples", "2", "--seed", "3",
                     "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        for name in ("z_0.csv", "z_1.csv", "sharing_0.csv", "summary.csv", "sharing.csv",
                     "run_config.txt", MANIFEST_NAME):
            assert (out / name).exists()
        assert len(pd.read_csv(out / "summary.csv")) == 2
        manifest = (out / MANIFEST_NAME).read_text(encoding="utf-8")
        assert "seed\t3" in manifest
        assert "file\tz_0.csv\t" in manifest

    def test_simulate_is_deterministic(self, tmp_path):
        """Test byte-identical draws for a fixed seed."""
        for name in ("first", "second"):
            assert main(["simulate", "--customers", "6", "--alpha", "4", "--seed", "11",
                         "--output-dir", str(tmp_path / name), "--no-registry"]) == EXIT_OK

        for s in range(4):
            assert (tmp_path / "first" / f"z_{s}.csv").read_bytes() == (tmp_path / "second" / f"z_{s}.csv").read_bytes()

    @pytest.mark.parametrize("model", ["ibp", "dhbp"])
    def test_simulate_comparison_models(self, tmp_path, model):
        """Test the baseline priors."""
        out = tmp_path / model
        code = main(["simulate", "--model", model, "--customers", "4", "--samples", "1",
                     "--k-trunc", "200", "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        assert (out / "z_0.csv").exists()

    def test_fit(self, tmp_path, data_file):
        """Test fit outputs: trace, sample log, MAP features and parameters."""
        out = tmp_path / "fit"

        code = main(["fit", "--data", str(data_file), "--iterations", "5", "--seed", "2",
                     "--decay", "exponential", "--beta", "1", "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        assert len(pd.read_csv(out / "trace.csv")) == 5
        assert len((out / "samples.jsonl").read_text(encoding="utf-8").splitlines()) == 5
        params = json.loads((out / "map_params.json").read_text(encoding="utf-8"))
        assert {"K", "alpha", "sigma_x", "sigma_w", "log_joint"} <= set(params)

    def test_fit_recovers_planted_features(self, tmp_path):
        """Test that the MAP reconstruction beats random features of the same size."""
        rng = np.random.default_rng(20)
        z_true = (rng.random((30, 3)) < 0.5).astype(float)
        z_true[:3] = np.eye(3)
        signal = z_true @ (2.0 * rng.standard_normal((3, 6)))
        x = signal + 0.3 * rng.standard_normal(signal.shape)
        data_path = tmp_path / "planted.csv"
        pd.DataFrame(x).to_csv(data_path, index=False)
        out = tmp_path / "planted"

        code = main(["fit", "--data", str(data_path), "--iterations", "200", "--seed", "4",
                     "--decay", "exponential", "--beta", "1", "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        params = json.loads((out / "map_params.json").read_text(encoding="utf-8"))
        assert params["K"] >= 1
        z_map = pd.read_csv(out / "map_z.csv", header=None).to_numpy(dtype=float)
        w_map = pd.read_csv(out / "map_weights.csv", header=None).to_numpy(dtype=float)
        map_mse = np.mean((z_map @ w_map - signal) ** 2)

        noise = NoiseParams(params["sigma_x"], params["sigma_w"])
        baseline = []
        for _ in range(10):
            z_rand = (rng.random((30, params["K"])) < 0.5).astype(float)
            baseline.append(np.mean((z_rand @ weight_posterior(x, z_rand, noise).mean - signal) ** 2))
        assert map_mse < min(baseline)

    def test_fit_with_chains(self, tmp_path, data_file):
        """Test that restarts add a per-chain summary."""
        out = tmp_path / "chains"

        code = main(["fit", "--data", str(data_file), "--iterations", "3", "--chains", "2",
                     "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        assert list(pd.read_csv(out / "chains.csv")["chain"]) == [0, 1]
        assert len((out / "samples.jsonl").read_text(encoding="utf-8").splitlines()) == 6

    def test_fit_resumes_from_checkpoint(self, tmp_path, data_file):
        """Test that 3 + 3 checkpointed sweeps reproduce an uninterrupted 6-sweep chain."""
        checkpoint = tmp_path / "chain.npz"
        common = ["--data", str(data_file), "--seed", "5", "--no-registry"]

        assert main(["fit", *common, "--iterations", "6", "--output-dir", str(tmp_path / "whole")]) == EXIT_OK
        for part in ("first", "second"):
            assert main(["fit", *common, "--iterations", "3", "--checkpoint", str(checkpoint),
                         "--output-dir", str(tmp_path / part)]) == EXIT_OK
            assert checkpoint.exists()

        whole = pd.read_csv(tmp_path / "whole" / "trace.csv")["log_joint"].to_numpy()
        resumed = np.concatenate([pd.read_csv(tmp_path / part / "trace.csv")["log_joint"].to_numpy()
                                  for part in ("first", "second")])
        np.testing.assert_allclose(resumed, whole, rtol=1e-9)

    def test_checkpoint_shape_mismatch(self, tmp_path, data_file):
        """Test that a checkpoint from other data is refused with a usage error."""
        checkpoint = tmp_path / "chain.npz"
        other = tmp_path / "other.csv"
        pd.DataFrame(np.zeros((4, 2)), columns=["a", "b"]).to_csv(other, index=False)

        assert main(["fit", "--data", str(other), "--iterations", "2", "--checkpoint", str(checkpoint),
                     "--output-dir", str(tmp_path / "a"), "--no-registry"]) == EXIT_OK
        code = main(["fit", "--data", str(data_file), "--iterations", "2", "--checkpoint", str(checkpoint),
                     "--output-dir", str(tmp_path / "b"), "--no-registry"])

        assert code == EXIT_USAGE

    def test_impute_with_truth(self, tmp_path, missing_files):
        """Test a beta sweep with reconstruction errors."""
        data_path, truth_path = missing_files
        out = tmp_path / "impute"

        code = main(["impute", "--data", str(data_path), "--truth", str(truth_path), "--betas", "0,1",
                     "--iterations", "6", "--burn-in", "2", "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        errors = pd.read_csv(out / "errors.csv")
        assert list(errors["beta"]) == [0.0, 1.0]
        assert np.all(errors["mse_map"] >= 0)
        assert len(pd.read_csv(out / "residuals.csv")) == 4
        imputed = pd.read_csv(out / "imputed_beta_1.csv")
        truth = pd.read_csv(truth_path)
        assert imputed.iloc[0, 0] == pytest.approx(truth.iloc[0, 0])

    def test_dimension_mismatch(self, tmp_path, data_file):
        """Test that data rows must match the distance matrix."""
        distances = tmp_path / "d.csv"
        pd.DataFrame(np.zeros((4, 4))).to_csv(distances, header=False, index=False)

        code = main(["fit", "--data", str(data_file), "--distances", str(distances), "--iterations", "2",
                     "--output-dir", str(tmp_path / "out"), "--no-registry"])

        assert code == EXIT_USAGE

    def test_bad_config_value(self, tmp_path, data_file):
        """Test that an invalid decay rate exits with status 1."""
        code = main(["fit", "--data", str(data_file), "--beta", "-2",
                     "--output-dir", str(tmp_path / "out"), "--no-registry"])
        assert code == EXIT_USAGE

    def test_verify_status(self, tmp_path):
        """Test exit status 0 for a passing report and 2 for a failing one."""
        passing = VerificationReport([CheckResult(name="ok", statistic=0.1, bound=1.0, passed=True)])
        failing = VerificationReport([CheckResult(name="bad", statistic=5.0, bound=1.0, passed=False)])

        with patch("ddibp.service.VerificationSuite") as suite:
            suite.return_value.run.return_value = passing
            assert main(["verify", "--quick", "--output-dir", str(tmp_path / "ok"), "--no-registry"]) == EXIT_OK

            suite.return_value.run.return_value = failing
            code = main(["verify", "--inject-failure", "1.1", "--output-dir", str(tmp_path / "bad"),
                         "--no-registry"])

        assert code == EXIT_VERIFICATION_FAILED
        assert suite.call_args.kwargs["perturbation"] == 1.1
        report = (tmp_path / "bad" / "verify_report.txt").read_text(encoding="utf-8")
        assert "bad\t5\t1\tFAIL" in report

    def test_sharing(self, tmp_path):
        """Test the sharing analytics outputs on a small geometry."""
        out = tmp_path / "sharing"

        code = main(["sharing", "--customers", "3", "--samples", "1", "--draws", "200", "--k-trunc", "200",
                     "--alpha", "2", "--output-dir", str(out), "--no-registry"])

        assert code == EXIT_OK
        for name in ("reach_single.csv", "reach_pair.csv", "rates.csv", "limit_fractions.csv",
                     "fraction_ddibp_0.csv", "fraction_dhbp_0.csv", "pmf_ddibp.csv", "pmf_dhbp.csv",
                     "sharing_summary.json"):
            assert (out / name).exists()
        summary = json.loads((out / "sharing_summary.json").read_text(encoding="utf-8"))
        assert summary["exact"] is True
        np.testing.assert_allclose(summary["rate_i"], [2.0, 2.0, 2.0])

    def test_registry_records_run(self, tmp_path, monkeypatch):
        """Test that a run is stored with its status."""
        url = f"sqlite:///{tmp_path / 'runs.db'}"
        monkeypatch.setenv("DDIBP_DATABASE_URL", url)

        code = main(["simulate", "--customers", "3", "--samples", "1", "--output-dir", str(tmp_path / "out")])

        assert code == EXIT_OK
        storage = RunStorage(url)
        assert storage.count_records() == 1
