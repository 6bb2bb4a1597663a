"""Tests for the paired autoencoders and their mappings."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.container import save_container
from pairedinv.errors import ConfigError, ContractError
from pairedinv.gradcheck import gradient_check
from pairedinv.networks import (
    NetworkShape,
    build_paired_model,
    decode_data,
    decode_model,
    decode_model_vjp,
    encode_data,
    encode_model,
    latent_map,
    latent_map_dagger,
    lfe,
    load_checkpoint,
    save_checkpoint,
    surrogate_forward,
)
from pairedinv.wave import get_solver_counter
from tests.conftest import TINY_NET


class TestMappings:
    """Test suite for encoders, decoders and latent maps."""

    def test_shapes(self, tiny_model, tiny_dataset):
        """Test single-sample and batched shapes of every mapping."""
        q = tiny_dataset.models[0]
        b = tiny_dataset.data[0]
        assert encode_model(tiny_model, q).shape == (4,)
        assert encode_model(tiny_model, tiny_dataset.models[:3]).shape == (3, 4)
        assert encode_data(tiny_model, b).shape == (4,)
        assert decode_model(tiny_model, np.zeros(4)).shape == (16, 16)
        assert decode_data(tiny_model, np.zeros((5, 4))).shape == (5, 2, 8, 16)
        assert lfe(tiny_model, b).shape == q.shape
        assert surrogate_forward(tiny_model, q).shape == b.shape

    def test_identity_maps(self, tiny_model):
        """Test that M and M+ default to copies of their input."""
        z = np.arange(4, dtype=np.float64)
        out = latent_map(tiny_model, z)
        assert np.array_equal(out, z)
        assert out is not z
        assert np.array_equal(latent_map_dagger(tiny_model, z), z)
        assert "latent_map.M" not in tiny_model.named_params()

    def test_learned_maps(self):
        """Test that learned maps act as matrices and are trainable parameters."""
        net = NetworkShape(**TINY_NET, learned_maps=True)
        m = build_paired_model((16, 16), (2, 8, 16), net, dtype=np.float64)
        assert np.array_equal(m.latent_map, np.eye(4))
        m.latent_map = 2.0 * np.eye(4)
        m.latent_map_dagger = 0.5 * np.eye(4)
        z = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.array_equal(latent_map(m, z), 2.0 * z)
        assert np.array_equal(latent_map_dagger(m, z), 0.5 * z)
        assert {"latent_map.M", "latent_map.M_dagger"} <= set(m.named_params())

    def test_lfe_is_the_composition(self, tiny_model, tiny_dataset):
        """Test that lfe equals D_q(M+ E_b(b)) bit for bit."""
        b = tiny_dataset.data[:3]
        chained = decode_model(tiny_model, latent_map_dagger(tiny_model, encode_data(tiny_model, b)))
        assert np.array_equal(lfe(tiny_model, b), chained)

    def test_lfe_never_calls_the_solver(self, tiny_model, tiny_dataset):
        """Test that network-only mappings leave the solver counter untouched."""
        before = get_solver_counter().count
        lfe(tiny_model, tiny_dataset.data)
        surrogate_forward(tiny_model, tiny_dataset.models)
        assert get_solver_counter().count == before

    def test_mappings_are_deterministic(self, tiny_model, tiny_dataset):
        """Test that repeated inference gives identical output and leaves statistics alone."""
        stats = {k: v.copy() for k, v in tiny_model.named_stats().items()}
        a = lfe(tiny_model, tiny_dataset.data)
        b = lfe(tiny_model, tiny_dataset.data)
        assert np.array_equal(a, b)
        for k, v in tiny_model.named_stats().items():
            assert np.array_equal(v, stats[k])

    def test_contract_violations(self, tiny_model):
        """Test wrong latent lengths and wrong sample shapes."""
        with pytest.raises(ContractError):
            decode_model(tiny_model, np.zeros(5))
        with pytest.raises(ContractError):
            encode_model(tiny_model, np.zeros((8, 8)))
        with pytest.raises(ContractError):
            encode_data(tiny_model, np.zeros((3, 8, 16)))
        with pytest.raises(ContractError):
            encode_model(tiny_model, np.zeros(16))

    def test_normalization_fitted(self, tiny_model, tiny_dataset):
        """Test that standardised training models have zero mean and unit spread."""
        y = tiny_model.standardize_models(tiny_dataset.models)
        assert y.shape == (8, 1, 16, 16)
        assert abs(float(y.mean())) < 1e-10
        assert float(y.std()) == pytest.approx(1.0)
        back = tiny_model.unstandardize_models(y)
        assert np.allclose(back, tiny_dataset.models, rtol=1e-12)

    def test_levels_must_divide_extent(self):
        """Test that an extent not divisible by the pooling factor is rejected."""
        net = NetworkShape(**{**TINY_NET, "widths": [2, 2, 2]})
        with pytest.raises(ConfigError):
            build_paired_model((16, 18), (2, 8, 16), net)


class TestDecoderPullback:
    """Test suite for decode_model_vjp."""

    def test_value_matches_decode(self, tiny_model):
        """Test that the vjp forward value equals decode_model."""
        z = np.random.default_rng(0).standard_normal(4)
        q, _ = decode_model_vjp(tiny_model, z)
        assert np.allclose(q, decode_model(tiny_model, z), rtol=1e-12)

    def test_pullback_matches_finite_differences(self, tiny_model):
        """Test the latent gradient of <D_q(z), r> against central differences."""
        rng = np.random.default_rng(1)
        r = rng.standard_normal((16, 16))
        scale = tiny_model.arch_meta["q_scale"]
        params = {"z": rng.standard_normal(4)}

        def fn(p):
            q, pullback = decode_model_vjp(tiny_model, p["z"])
            return float(np.sum(q * r)) / scale, {"z": pullback(r) / scale}

        report = gradient_check(fn, params, tol=1e-5)
        assert report["pass"], report
        assert report["checked"] == 4


class TestCheckpoints:
    """Test suite for save_checkpoint/load_checkpoint."""

    def test_round_trip_bit_exact(self, tiny_model, tiny_dataset, tmp_path):
        """Test that a reloaded model has identical tensors and identical outputs."""
        path = tmp_path / "ckpt.pairinv"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path)
        assert loaded.arch_meta == tiny_model.arch_meta
        original = tiny_model.snapshot()
        restored = loaded.snapshot()
        assert set(restored) == set(original)
        for k, v in original.items():
            assert restored[k].dtype == v.dtype
            assert np.array_equal(restored[k], v)
        assert np.array_equal(lfe(loaded, tiny_dataset.data), lfe(tiny_model, tiny_dataset.data))

    def test_learned_maps_survive(self, tmp_path):
        """Test that latent matrices are stored with the checkpoint."""
        net = NetworkShape(**TINY_NET, learned_maps=True)
        m = build_paired_model((16, 16), (2, 8, 16), net, dtype=np.float64)
        m.latent_map = np.diag([1.0, 2.0, 3.0, 4.0])
        save_checkpoint(m, tmp_path / "maps.pairinv")
        loaded = load_checkpoint(tmp_path / "maps.pairinv")
        assert np.array_equal(loaded.latent_map, m.latent_map)
        assert not loaded.identity_maps

    def test_foreign_container_rejected(self, tmp_path):
        """Test that a container without the checkpoint format tag is rejected."""
        path = tmp_path / "other.pairinv"
        save_container(path, {"x": np.zeros(2)}, meta={"format": "something-else"})
        with pytest.raises(ConfigError):
            load_checkpoint(path)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
