"""Tests for basic and latent-space inversion."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.config import InversionSection
from pairedinv.datagen import build_dataset
from pairedinv.errors import ConfigError, ContractError
from pairedinv.inversion import (
    InversionConfig,
    basic_inversion,
    basic_start_model,
    default_suite_configs,
    latent_space_inversion,
    model_error,
    relative_error,
    run_inversion,
    run_suite,
)
from pairedinv.networks import decode_model_vjp, encode_data, encode_model, latent_map_dagger, lfe
from pairedinv.wave import SolverCounter, VelocityModel, simulate

CLAMP = (1500.0**2, 4000.0**2)


class TestErrors:
    """Test suite for relative_error and model_error."""

    def test_relative_error_examples(self):
        """Test hand-computed relative errors."""
        assert relative_error(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
        assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
        assert relative_error(2 * np.ones(5), np.ones(5)) == pytest.approx(1.0)

    def test_relative_error_contracts(self):
        """Test zero references and shape mismatches."""
        with pytest.raises(ContractError):
            relative_error(np.ones(2), np.zeros(2))
        with pytest.raises(ContractError):
            relative_error(np.ones(2), np.ones(3))

    def test_model_error_in_velocity(self):
        """Test that model error compares velocities, not squared velocities."""
        q_true = np.full((4, 4), 2000.0**2)
        q = np.full((4, 4), 2200.0**2)
        assert model_error(q, q_true) == pytest.approx(0.1)
        assert model_error(q_true, q_true) == 0.0

    def test_basic_start_model(self, tiny_grid):
        """Test the laterally invariant velocity ramp."""
        start = basic_start_model(tiny_grid, 1500.0, 4000.0)
        c = start.velocity
        assert c[0, 0] == pytest.approx(1500.0)
        assert c[-1, 0] == pytest.approx(4000.0)
        assert np.all(c == c[:, :1])

    def test_config_validation(self):
        """Test InversionConfig rejects invalid settings."""
        with pytest.raises(ConfigError):
            InversionConfig(method="GN")
        with pytest.raises(ConfigError):
            InversionConfig(start="cold")
        with pytest.raises(ConfigError):
            InversionConfig(iters=0)
        with pytest.raises(ConfigError):
            InversionConfig(alpha=-1.0)
        with pytest.raises(ConfigError):
            InversionConfig(clamp=(4.0, 1.0))
        assert InversionConfig(method="LSI", start="warm").label == "LSI-warm"


class TestBasicInversion:
    """Test suite for basic_inversion."""

    def test_stationary_at_truth(self, tiny_dataset, tiny_grid, tiny_acq):
        """Test that starting from the true model with clean data stays there."""
        q_true = tiny_dataset.models[0]
        model = VelocityModel(tiny_grid, q_true)
        b = simulate(model, tiny_acq, SolverCounter())
        cfg = InversionConfig("BI", "basic", iters=2, clamp=CLAMP)
        trace = basic_inversion(b, model, tiny_acq, cfg, q_true=q_true, counter=SolverCounter())
        assert len(trace) == 3
        assert trace.phi == [0.0, 0.0, 0.0]
        assert trace.rel_misfit == [0.0, 0.0, 0.0]
        assert trace.model_err == [0.0, 0.0, 0.0]
        assert np.array_equal(trace.final_model, q_true)

    def test_solver_calls(self, tiny_dataset, tiny_grid, tiny_acq):
        """Test that a run costs iters + 1 solves."""
        counter = SolverCounter()
        cfg = InversionConfig("BI", "basic", iters=1, clamp=CLAMP)
        start = basic_start_model(tiny_grid, 1500.0, 4000.0)
        trace = basic_inversion(tiny_dataset.data[0], start, tiny_acq, cfg, counter=counter)
        assert counter.count == 2
        assert trace.solver_calls == 2
        assert len(trace.rows()) == 2
        assert np.isnan(trace.model_err[0])

    def test_initial_objective_matches_direct_evaluation(self, tiny_dataset, tiny_grid, tiny_acq):
        """Test that the recorded iteration-0 misfit equals 0.5 ||F(q0) - b||^2."""
        start = basic_start_model(tiny_grid, 1500.0, 4000.0)
        b = tiny_dataset.data[2]
        cfg = InversionConfig("BI", "basic", iters=1, clamp=CLAMP)
        trace = basic_inversion(b, start, tiny_acq, cfg, counter=SolverCounter())
        direct = 0.5 * float(np.sum((simulate(start, tiny_acq, SolverCounter()).values - b) ** 2))
        assert trace.phi[0] == pytest.approx(direct, rel=1e-12)
        assert trace.reg[0] == 0.0

    def test_iterates_stay_in_box(self, tiny_dataset, tiny_grid, tiny_acq):
        """Test that large steps are clamped into the velocity box."""
        cfg = InversionConfig("BI", "basic", iters=3, lr=0.5, clamp=CLAMP)
        start = basic_start_model(tiny_grid, 1500.0, 4000.0)
        trace = basic_inversion(tiny_dataset.data[1], start, tiny_acq, cfg, counter=SolverCounter())
        assert trace.final_model.min() >= CLAMP[0]
        assert trace.final_model.max() <= CLAMP[1]

    def test_wrong_method(self, tiny_grid, tiny_acq, tiny_dataset):
        """Test that an LSI config is refused."""
        start = basic_start_model(tiny_grid, 1500.0, 4000.0)
        with pytest.raises(ConfigError):
            basic_inversion(tiny_dataset.data[0], start, tiny_acq, InversionConfig("LSI"))


class TestLatentSpaceInversion:
    """Test suite for latent_space_inversion."""

    def _decoded_data(self, m, z, acq, grid):
        q, _ = decode_model_vjp(m, z)
        return simulate(VelocityModel(grid, np.clip(q, *CLAMP)), acq, SolverCounter()).values

    def test_warm_start_stationary(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that data simulated from D_q(z*) makes z* a fixed point."""
        z_star = encode_model(tiny_model, tiny_dataset.models[0])
        b = self._decoded_data(tiny_model, z_star, tiny_acq, tiny_grid)
        cfg = InversionConfig("LSI", "warm", alpha=1.0, iters=2, clamp=CLAMP)
        trace = latent_space_inversion(
            b, z_star, cfg, tiny_model, tiny_acq, tiny_grid, counter=SolverCounter()
        )
        assert trace.reg[0] == 0.0
        assert trace.phi == [0.0, 0.0, 0.0]
        assert np.array_equal(trace.final_latent, z_star)
        assert trace.solver_calls == 3

    def test_origin_anchor_regularization(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that the origin anchor charges 0.5 alpha ||z||^2 at the start."""
        z_star = encode_model(tiny_model, tiny_dataset.models[1])
        cfg = InversionConfig("LSI", "warm", alpha=2.0, iters=1, clamp=CLAMP, anchor="origin")
        trace = latent_space_inversion(
            tiny_dataset.data[1], z_star, cfg, tiny_model, tiny_acq, tiny_grid, counter=SolverCounter()
        )
        assert trace.reg[0] == pytest.approx(float(np.sum(z_star**2)), rel=1e-12)
        assert trace.objective[0] == pytest.approx(trace.phi[0] + trace.reg[0])

    def test_zero_alpha_has_no_regularization(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that alpha = 0 leaves the regularization column at zero."""
        cfg = InversionConfig("LSI", "basic", alpha=0.0, iters=2, clamp=CLAMP)
        trace = run_inversion(
            cfg, tiny_dataset.data[2], tiny_model, tiny_acq, tiny_grid,
            q_true=tiny_dataset.models[2], counter=SolverCounter(),
        )
        assert trace.reg == [0.0, 0.0, 0.0]
        assert trace.final_model.shape == (16, 16)
        assert all(np.isfinite(trace.model_err))

    def test_larger_alpha_stays_closer_to_anchor(self, tiny_model, tiny_style, tiny_grid, tiny_acq):
        """Test that alpha = 10 ends nearer z* than alpha = 0, averaged over 12 samples."""
        dataset = build_dataset(12, tiny_style, tiny_grid, tiny_acq, None, seed=5, dtype=np.float64)
        distances = {0.0: [], 10.0: []}
        for b in dataset.data:
            z_star = latent_map_dagger(tiny_model, encode_data(tiny_model, b))
            sigma = float(np.linalg.norm(b))
            for alpha in distances:
                cfg = InversionConfig("LSI", "basic", alpha=alpha, iters=10, clamp=CLAMP, noise_sigma=sigma)
                trace = latent_space_inversion(
                    b, z_star, cfg, tiny_model, tiny_acq, tiny_grid, counter=SolverCounter()
                )
                distances[alpha].append(float(np.linalg.norm(trace.final_latent - z_star)))
        assert np.mean(distances[10.0]) <= np.mean(distances[0.0])

    def test_latent_length_checked(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that a z_star of the wrong length is a contract error."""
        cfg = InversionConfig("LSI", "warm", iters=1, clamp=CLAMP)
        with pytest.raises(ContractError):
            latent_space_inversion(tiny_dataset.data[0], np.zeros(3), cfg, tiny_model, tiny_acq, tiny_grid)


class TestSuite:
    """Test suite for run_inversion and run_suite."""

    def test_warm_bi_starts_from_lfe(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that BI-warm's first misfit is the misfit of the clipped LFE."""
        b = tiny_dataset.data[0]
        cfg = InversionConfig("BI", "warm", iters=1, clamp=CLAMP)
        trace = run_inversion(cfg, b, tiny_model, tiny_acq, tiny_grid, counter=SolverCounter())
        q_hat = np.clip(lfe(tiny_model, b), *CLAMP)
        expected = relative_error(
            simulate(VelocityModel(tiny_grid, q_hat), tiny_acq, SolverCounter()).values, b
        )
        assert trace.rel_misfit[0] == pytest.approx(expected, rel=1e-10)

    def test_default_configs(self):
        """Test the four standard configurations."""
        cfgs = default_suite_configs(InversionSection(iters=5, alpha=0.3), CLAMP)
        assert [c.label for c in cfgs] == ["BI-basic", "BI-warm", "LSI-basic", "LSI-warm"]
        assert [c.alpha for c in cfgs] == [0.0, 0.0, 0.0, 0.3]
        assert all(c.iters == 5 for c in cfgs)

    def test_one_sample_suite(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test rows and records for a single test sample."""
        cfgs = default_suite_configs(InversionSection(iters=1), CLAMP)
        rows, records = run_suite(
            tiny_dataset.models[:1], tiny_dataset.data[:1], tiny_model, cfgs, tiny_acq, tiny_grid
        )
        assert len(rows) == 4
        assert len(records) == 4
        assert all(r["solver_calls"] == 2 for r in records)
        for row in rows:
            assert row["n_samples"] == 1
            assert row["misfit_init_std"] == 0.0
            assert np.isfinite(row["err_final_mean"])

    def test_empty_suite(self, tiny_model, tiny_grid, tiny_acq):
        """Test that a suite without samples is refused."""
        with pytest.raises(ConfigError):
            run_suite(np.zeros((0, 16, 16)), np.zeros((0, 2, 8, 16)), tiny_model, [], tiny_acq, tiny_grid)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
