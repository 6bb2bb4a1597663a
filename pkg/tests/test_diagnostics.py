"""Tests for RRE/RMA metrics, density gating and bound estimation."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.diagnostics import (
    ConstantEstimates,
    MetricPoint,
    bound_report,
    empirical_lipschitz,
    estimate_constants,
    fit_density,
    load_density,
    metric_points,
    ood_auroc,
    ood_score,
    rma,
    rre,
    save_density,
    theorem_bound,
)
from pairedinv.errors import ConfigError, ContractError
from pairedinv.networks import lfe, surrogate_forward
from pairedinv.wave import SolverCounter

CLAMP = (1500.0**2, 4000.0**2)


def uniform_points(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [MetricPoint(rre=float(a), rma=float(b)) for a, b in rng.uniform(0, 1, size=(n, 2))]


def constants(**overrides) -> ConstantEstimates:
    values = dict(
        L=2.0, L_q=1.5, L_b=0.5, L_ae=0.5, xi_q=0.1, xi_b=0.2, xi_M=0.0,
        delta=0.3, eps_q=0.4, M_dagger_norm=1.0, n_samples=4, n_pairs=10,
    )
    values.update(overrides)
    return ConstantEstimates(**values)


class TestMetrics:
    """Test suite for rre, rma and metric_points."""

    def test_rre_zero_on_surrogate_data(self, tiny_model, tiny_dataset):
        """Test that data equal to the surrogate forward of q_hat has zero RRE."""
        q_hat = lfe(tiny_model, tiny_dataset.data[0])
        b = surrogate_forward(tiny_model, q_hat)
        assert rre(tiny_model, b, q_hat) == 0.0

    def test_rre_scaled_data(self, tiny_model, tiny_dataset):
        """Test rre(c b) against a direct recomputation."""
        b = tiny_dataset.data[0]
        q_hat = lfe(tiny_model, b)
        b_tilde = surrogate_forward(tiny_model, q_hat)
        for c in (0.5, 3.0):
            expected = np.linalg.norm(c * b - b_tilde) / np.linalg.norm(c * b)
            assert rre(tiny_model, c * b, q_hat) == pytest.approx(expected, rel=1e-10)

    def test_metrics_nonnegative(self, tiny_model, tiny_dataset):
        """Test that metrics on real pairs are finite and nonnegative."""
        q_hat = lfe(tiny_model, tiny_dataset.data[1])
        assert rre(tiny_model, tiny_dataset.data[1], q_hat) >= 0
        assert rma(tiny_model, q_hat) >= 0

    def test_zero_inputs_rejected(self, tiny_model, tiny_dataset):
        """Test that zero data or a zero model is a contract error."""
        q_hat = lfe(tiny_model, tiny_dataset.data[0])
        with pytest.raises(ContractError):
            rre(tiny_model, np.zeros((2, 8, 16)), q_hat)
        with pytest.raises(ContractError):
            rma(tiny_model, np.zeros((16, 16)))

    def test_batched_points_match_single(self, tiny_model, tiny_dataset):
        """Test that metric_points agrees with the per-sample functions."""
        q_hat = lfe(tiny_model, tiny_dataset.data)
        points = metric_points(tiny_model, tiny_dataset.data, q_hat)
        assert len(points) == len(tiny_dataset)
        for i in (0, 5):
            assert points[i].rre == pytest.approx(rre(tiny_model, tiny_dataset.data[i], q_hat[i]), rel=1e-9)
            assert points[i].rma == pytest.approx(rma(tiny_model, q_hat[i]), rel=1e-9)


class TestDensity:
    """Test suite for fit_density and ood_score."""

    def test_mass_is_one(self):
        """Test normalisation under several smoothing settings."""
        points = uniform_points(200)
        for sigma in (0.0, 0.5, 1.0, 3.0):
            density = fit_density(points, n_bins=16, smooth_sigma=sigma)
            assert abs(density.cells.sum() - 1.0) <= 1e-12
            assert abs(density.raw.sum() - 1.0) <= 1e-12

    def test_identical_points_fill_one_cell(self):
        """Test that identical points put all raw mass in a single cell."""
        points = [MetricPoint(rre=0.1, rma=0.2)] * 40
        density = fit_density(points)
        assert np.count_nonzero(density.raw) == 1
        assert density.raw.max() == 1.0

    def test_uniform_points_are_flat(self):
        """Test that uniform points give a nearly flat smoothed density."""
        density = fit_density(uniform_points(10_000), n_bins=16, smooth_sigma=1.0)
        assert density.cells.max() / density.cells.min() <= 3.0

    def test_too_few_points(self):
        """Test the minimum validation size."""
        with pytest.raises(ConfigError):
            fit_density(uniform_points(29))

    def test_far_point_is_ood(self):
        """Test that a point outside the histogram has density 0 and is flagged."""
        density = fit_density(uniform_points(200))
        score = ood_score(density, MetricPoint(rre=1e3, rma=0.5))
        assert score["density_value"] == 0.0
        assert score["is_ood"]
        nan_score = ood_score(density, MetricPoint(rre=float("nan"), rma=0.5))
        assert nan_score["is_ood"]

    def test_densest_point_is_in_distribution(self):
        """Test that the densest validation point has a small percentile."""
        rng = np.random.default_rng(1)
        clustered = rng.normal([0.3, 0.3], 0.05, size=(300, 2))
        points = [MetricPoint(rre=abs(a), rma=abs(b)) for a, b in clustered]
        density = fit_density(points)
        scores = [ood_score(density, p) for p in points]
        densest = max(scores, key=lambda s: s["density_value"])
        assert densest["percentile"] < 0.5
        assert not densest["is_ood"]

    def test_percentile_monotone_in_density(self):
        """Test that a higher density never has a higher percentile."""
        density = fit_density(uniform_points(300, seed=2))
        scores = sorted(
            (ood_score(density, p) for p in uniform_points(100, seed=3)),
            key=lambda s: s["density_value"],
        )
        percentiles = [s["percentile"] for s in scores]
        assert all(a >= b for a, b in zip(percentiles, percentiles[1:]))

    def test_auroc_separates_out_of_range_points(self):
        """Test that points outside the support are ranked below in-range points."""
        points = uniform_points(300)
        density = fit_density(points)
        inside = [p for p in points if p.rre < 0.9 and p.rma < 0.9][:50]
        outside = [MetricPoint(rre=5.0 + i, rma=5.0) for i in range(20)]
        assert ood_auroc(density, inside, outside) == 1.0

    def test_save_and_load(self, tmp_path):
        """Test that a reloaded density scores points identically."""
        density = fit_density(uniform_points(100), threshold=0.9, smooth_sigma=0.5)
        save_density(density, tmp_path / "density.pairinv")
        loaded = load_density(tmp_path / "density.pairinv")
        assert np.array_equal(loaded.cells, density.cells)
        assert loaded.threshold == 0.9
        assert loaded.n_points == 100
        for p in uniform_points(10, seed=5):
            assert ood_score(loaded, p) == ood_score(density, p)


class TestLipschitz:
    """Test suite for empirical_lipschitz."""

    def setup_method(self):
        """Setup for each test."""
        self.matrix = np.diag(np.linspace(1.7, 2.0, 8))
        self.inputs = np.random.default_rng(0).standard_normal((50, 8))

    def test_linear_map_estimate(self):
        """Test that the estimate for a diagonal map lies between its extreme gains."""
        estimate, used = empirical_lipschitz(lambda x: x @ self.matrix.T, self.inputs, 500)
        assert 1.6 <= estimate <= 2.0 + 1e-12
        assert 0 < used <= 500

    def test_more_pairs_never_lower(self):
        """Test that extending the pair sequence cannot lower the estimate."""
        fn = lambda x: np.tanh(x) @ self.matrix.T  # noqa: E731
        small, _ = empirical_lipschitz(fn, self.inputs, 100, seed=4)
        large, _ = empirical_lipschitz(fn, self.inputs, 400, seed=4)
        assert large >= small

    def test_coincident_pairs_skipped(self):
        """Test that identical inputs contribute no pairs."""
        estimate, used = empirical_lipschitz(lambda x: 2 * x, np.ones((5, 3)), 50)
        assert estimate == 0.0
        assert used == 0


class TestBounds:
    """Test suite for estimate_constants, theorem_bound and bound_report."""

    def test_theorem_bound_formula(self):
        """Test the composed bound with hand-computed numbers."""
        c = constants(xi_M=0.05, M_dagger_norm=2.0)
        expected = 1.5 * (2.0 * (0.5 * 0.3 + 0.2) + 0.05) + 0.1
        assert theorem_bound(c) == pytest.approx(expected)

    def test_estimates_with_identity_maps(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test constant estimation on a small validation set."""
        counter = SolverCounter()
        c = estimate_constants(
            tiny_model, tiny_dataset.models[:4], tiny_dataset.data[:4], tiny_acq, tiny_grid,
            pair_samples=30, counter=counter,
        )
        assert c.xi_M == 0.0
        assert c.M_dagger_norm == 1.0
        assert counter.count == 4
        assert min(c.L, c.L_q, c.L_b, c.L_ae, c.xi_q, c.xi_b, c.delta, c.eps_q) >= 0
        assert c.n_samples == 4

    def test_report_triangle_bound_holds(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that the surrogate-based residual bound holds on every sample."""
        models, data = tiny_dataset.models[:4], tiny_dataset.data[:4]
        c = estimate_constants(tiny_model, models, data, tiny_acq, tiny_grid, pair_samples=30)
        counter = SolverCounter()
        rows, summary = bound_report(
            tiny_model, models, data, c, tiny_acq, tiny_grid,
            tiny_dataset.noise_sigma, CLAMP, counter=counter,
        )
        assert counter.count == 4
        assert len(rows) == 4
        assert all(r["holds2"] for r in rows)
        assert summary["holds2_rate"] == 1.0
        assert summary["n_samples"] == 4
        assert summary["xi_M"] == 0.0
        for r in rows:
            assert r["theorem_bound"] == pytest.approx(theorem_bound(c))

    def test_p2_inapplicable_for_expansive_autoencoder(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that L_ae >= 1 disables the autoencoder-based model bound."""
        rows, summary = bound_report(
            tiny_model, tiny_dataset.models[:2], tiny_dataset.data[:2], constants(L_ae=1.5),
            tiny_acq, tiny_grid, 0.0, CLAMP, counter=SolverCounter(),
        )
        assert not any(r["p2_applicable"] for r in rows)
        assert not any(r["holds_p2"] for r in rows)
        assert all(math.isnan(r["p2_bound"]) for r in rows)
        assert math.isnan(summary["holds_p2_rate"])

    def test_p2_bound_when_contractive(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that L_ae < 1 produces a finite model-error bound."""
        rows, summary = bound_report(
            tiny_model, tiny_dataset.models[:2], tiny_dataset.data[:2], constants(L_ae=0.5),
            tiny_acq, tiny_grid, 0.0, CLAMP, counter=SolverCounter(),
        )
        assert all(r["p2_applicable"] and np.isfinite(r["p2_bound"]) for r in rows)
        assert 0.0 <= summary["holds_p2_rate"] <= 1.0

    def test_needs_two_samples(self, tiny_model, tiny_dataset, tiny_grid, tiny_acq):
        """Test that one sample cannot give pairwise constants."""
        with pytest.raises(ConfigError):
            estimate_constants(
                tiny_model, tiny_dataset.models[:1], tiny_dataset.data[:1], tiny_acq, tiny_grid
            )


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
