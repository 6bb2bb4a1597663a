"""Tests for the PAIRINV1 tensor container."""

import json
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.config import CONTAINER_MAGIC
from pairedinv.container import load_container, read_container, save_container
from pairedinv.errors import ConfigError, FormatError


class TestContainer:
    """Test suite for save_container/read_container."""

    def setup_method(self):
        """Setup for each test."""
        rng = np.random.default_rng(0)
        self.tensors = {
            "models": rng.standard_normal((3, 4, 5)).astype(np.float32),
            "data": rng.standard_normal((3, 2, 6)),
            "split": np.array([0, 1, 3], dtype=np.uint8),
            "index": np.arange(4, dtype=np.int64),
        }

    def test_round_trip_bit_exact(self, tmp_path):
        """Test that every dtype and shape survives a write/read cycle."""
        path = tmp_path / "sample.pairinv"
        save_container(path, self.tensors, meta={"format": "x", "n": 3})
        tensors, meta = read_container(path)
        assert meta == {"format": "x", "n": 3}
        assert set(tensors) == set(self.tensors)
        for name, arr in self.tensors.items():
            assert tensors[name].dtype == arr.dtype
            assert np.array_equal(tensors[name], arr)

    def test_writes_are_deterministic(self, tmp_path):
        """Test that the same content produces identical bytes regardless of insertion order."""
        save_container(tmp_path / "a.pairinv", self.tensors, meta={"b": 1, "a": 2})
        reordered = dict(reversed(list(self.tensors.items())))
        save_container(tmp_path / "b.pairinv", reordered, meta={"a": 2, "b": 1})
        assert (tmp_path / "a.pairinv").read_bytes() == (tmp_path / "b.pairinv").read_bytes()

    def test_header_layout(self, tmp_path):
        """Test magic, little-endian header length and sorted tensor entries."""
        path = tmp_path / "layout.pairinv"
        save_container(path, self.tensors)
        blob = path.read_bytes()
        assert blob[:8] == CONTAINER_MAGIC
        (length,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12 : 12 + length])
        names = [t["name"] for t in header["tensors"]]
        assert names == sorted(names)
        assert header["tensors"][0]["offset"] == 0

    def test_load_container_returns_tensors(self, tmp_path):
        """Test the tensors-only reader."""
        path = tmp_path / "t.pairinv"
        save_container(path, {"x": np.ones((2, 2))})
        assert np.array_equal(load_container(path)["x"], np.ones((2, 2)))

    def test_truncated_payload(self, tmp_path):
        """Test that a truncated file names expected and actual sizes."""
        path = tmp_path / "trunc.pairinv"
        save_container(path, self.tensors)
        blob = path.read_bytes()
        path.write_bytes(blob[:-2])
        with pytest.raises(FormatError) as exc:
            read_container(path)
        message = str(exc.value)
        assert f"expected {len(blob)} bytes" in message
        assert f"got {len(blob) - 2}" in message
        assert exc.value.offset is not None

    def test_truncated_prefix(self, tmp_path):
        """Test that a file shorter than the fixed prefix is rejected."""
        path = tmp_path / "short.pairinv"
        path.write_bytes(CONTAINER_MAGIC[:5])
        with pytest.raises(FormatError):
            read_container(path)

    def test_bad_magic(self, tmp_path):
        """Test that a foreign file is rejected at offset 0."""
        path = tmp_path / "bad.pairinv"
        save_container(path, self.tensors)
        blob = bytearray(path.read_bytes())
        blob[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as exc:
            read_container(path)
        assert exc.value.offset == 0

    def test_overlapping_tensors(self, tmp_path):
        """Test that two tensors claiming the same bytes are rejected."""
        header = json.dumps(
            {
                "meta": {},
                "tensors": [
                    {"name": "a", "dtype": "float64", "shape": [2], "offset": 0},
                    {"name": "b", "dtype": "float64", "shape": [2], "offset": 8},
                ],
            },
            sort_keys=True,
        ).encode()
        path = tmp_path / "overlap.pairinv"
        path.write_bytes(CONTAINER_MAGIC + struct.pack("<I", len(header)) + header + bytes(24))
        with pytest.raises(FormatError) as exc:
            read_container(path)
        assert "overlap" in str(exc.value)

    def test_invalid_header_json(self, tmp_path):
        """Test that a corrupt header is a format error."""
        header = b"{not json"
        path = tmp_path / "json.pairinv"
        path.write_bytes(CONTAINER_MAGIC + struct.pack("<I", len(header)) + header)
        with pytest.raises(FormatError):
            read_container(path)

    def test_unsupported_dtype_on_write(self, tmp_path):
        """Test that complex tensors are refused."""
        with pytest.raises(ConfigError):
            save_container(tmp_path / "c.pairinv", {"z": np.zeros(2, dtype=np.complex128)})

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a configuration error."""
        with pytest.raises(ConfigError):
            read_container(tmp_path / "nope.pairinv")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
