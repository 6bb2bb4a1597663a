"""
Synthetic layered velocity models and paired (model, data) datasets.

Families:
    flat_layers     horizontal interfaces, velocity increasing with depth
    curved_layers   interfaces bent upward by a common Gaussian anticline
    faulted_layers  interfaces offset downward right of a dipping fault

Every pair i of a dataset draws its model from the stream (seed, stream, i)
and its noise from (seed, stream, i, 1), so datasets are reproducible and
independent of the worker count.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from pairedinv.config import SHARD_SIZE, get_threads
from pairedinv.container import read_container, save_container
from pairedinv.errors import ConfigError
from pairedinv.wave import (
    Acquisition,
    Grid2D,
    SolverCounter,
    VelocityModel,
    simulate,
    velocity_to_qsq,
)

logger = logging.getLogger(__name__)

FAMILIES = ("flat_layers", "curved_layers", "faulted_layers")
SPLITS = {"train": 0, "val": 1, "test": 2, "ood": 3}
DATASET_FORMAT = "pairedinv-dataset-1"


@dataclass
class ModelStyle:
    family: str = "flat_layers"
    layers: Tuple[int, int] = (2, 6)
    c_min: float = 1500.0
    c_max: float = 4000.0
    curvature: Tuple[float, float] = (6.0, 14.0)
    fault_throw: Tuple[float, float] = (6.0, 14.0)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"Unknown model family: {self.family}")
        if not self.c_min < self.c_max:
            raise ConfigError("model style needs c_min < c_max")
        lo, hi = self.layers
        if not 1 <= lo <= hi:
            raise ConfigError("layer-count range must satisfy 1 <= lo <= hi")
        self.layers = (int(lo), int(hi))

    @classmethod
    def from_section(cls, section, seed: int = 0) -> "ModelStyle":
        return cls(
            family=section.family,
            layers=tuple(section.layers),
            c_min=section.c_min,
            c_max=section.c_max,
            curvature=tuple(section.curvature),
            fault_throw=tuple(section.fault_throw),
            seed=seed,
        )


@dataclass
class PairedDataset:
    """Models (N, nz, nx) in q = c^2, data (N, n_s, n_r, n_t), split tags (N,)."""

    models: np.ndarray
    data: np.ndarray
    noise_sigma: float
    split: np.ndarray
    info: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.models)
        if len(self.data) != n or len(self.split) != n:
            raise ConfigError("dataset fields must share the sample count")

    def __len__(self) -> int:
        return len(self.models)

    def subset(self, name: str) -> "PairedDataset":
        """Samples tagged with split ``name``."""
        mask = self.split == SPLITS[name]
        return PairedDataset(
            models=self.models[mask],
            data=self.data[mask],
            noise_sigma=self.noise_sigma,
            split=self.split[mask],
            info=dict(self.info),
        )

    def take(self, count: int) -> "PairedDataset":
        return PairedDataset(
            models=self.models[:count],
            data=self.data[:count],
            noise_sigma=self.noise_sigma,
            split=self.split[:count],
            info=dict(self.info),
        )


def _interfaces(style: ModelStyle, grid: Grid2D, n_layers: int, rng) -> np.ndarray:
    """Interface depths in cells, shape (n_layers - 1, nx)."""
    nz, nx = grid.shape
    n_if = n_layers - 1
    if n_if == 0:
        return np.zeros((0, nx))
    base = np.sort(rng.uniform(0.1 * nz, 0.9 * nz, size=n_if))
    x = np.arange(nx, dtype=np.float64)
    if style.family == "flat_layers":
        offset = np.zeros(nx)
    elif style.family == "curved_layers":
        amplitude = rng.uniform(*style.curvature)
        center = rng.uniform(0.3, 0.7) * nx
        width = rng.uniform(0.15, 0.3) * nx
        offset = -amplitude * np.exp(-(((x - center) / width) ** 2))
    else:
        throw = rng.uniform(*style.fault_throw)
        position = rng.uniform(0.3, 0.7) * nx
        slope = rng.uniform(-0.5, 0.5)
        depth = base[:, None]
        fault_x = position + slope * depth
        return base[:, None] + throw * (x[None, :] >= fault_x)
    return base[:, None] + offset[None, :]


def sample_model(
    style: ModelStyle, grid: Grid2D, rng: np.random.Generator
) -> VelocityModel:
    """
    Draw one piecewise-constant layered model.

    Velocities are sorted to increase with depth and lie in [c_min, c_max];
    the returned model holds q = c^2 in 64-bit.
    """
    lo, hi = style.layers
    n_layers = int(rng.integers(lo, hi + 1))
    velocities = np.sort(rng.uniform(style.c_min, style.c_max, size=n_layers))
    bounds = _interfaces(style, grid, n_layers, rng)
    z = np.arange(grid.nz, dtype=np.float64)[:, None]
    index = np.zeros(grid.shape, dtype=np.int64)
    for k in range(len(bounds)):
        index += z >= bounds[k][None, :]
    c = velocities[index]
    return VelocityModel(grid=grid, qsq=velocity_to_qsq(c))


def synthesize_pair(
    model: VelocityModel,
    acq: Acquisition,
    sigma: float,
    rng: np.random.Generator,
    counter: Optional[SolverCounter] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    b = simulate(q) + eps with eps ~ N(0, sigma^2) i.i.d.

    With sigma == 0 no noise is drawn and b equals the clean data exactly.
    """
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    clean = simulate(model, acq, counter=counter).values
    if sigma == 0:
        return model.qsq, clean.copy()
    return model.qsq, clean + sigma * rng.standard_normal(clean.shape)


def _pair_rng(seed: int, stream: int, i: int, noise: bool = False) -> np.random.Generator:
    key = (seed, stream, i, 1) if noise else (seed, stream, i)
    return np.random.default_rng(key)


def build_dataset(
    n: int,
    style: ModelStyle,
    grid: Grid2D,
    acq: Acquisition,
    sigma: Optional[float],
    seed: int,
    split: str = "train",
    noise_level: float = 0.01,
    dtype=np.float32,
    counter: Optional[SolverCounter] = None,
) -> PairedDataset:
    """
    Generate ``n`` independent (q, b) pairs.

    Args:
        n: number of pairs
        style: model family
        grid, acq: solver setup
        sigma: noise standard deviation; None means noise_level * mean |clean data|
        seed: dataset seed
        split: tag stored with every pair; also selects the random stream
        noise_level: relative noise used when sigma is None
        dtype: storage precision of models and data

    Returns:
        PairedDataset
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if split not in SPLITS:
        raise ConfigError(f"Unknown split: {split}")
    stream = SPLITS[split]

    def clean_pair(i):
        model = sample_model(style, grid, _pair_rng(seed, stream, i))
        return model.qsq, simulate(model, acq, counter=counter).values

    workers = min(get_threads(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(clean_pair, range(n)))
    else:
        pairs = [clean_pair(i) for i in range(n)]

    models = np.stack([p[0] for p in pairs])
    clean = np.stack([p[1] for p in pairs])
    if sigma is None:
        sigma = float(noise_level * np.mean(np.abs(clean)))
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")

    data = clean
    if sigma > 0:
        noise = np.stack(
            [
                _pair_rng(seed, stream, i, noise=True).standard_normal(clean.shape[1:])
                for i in range(n)
            ]
        )
        data = clean + sigma * noise

    logger.info("built %d %s pairs (%s, sigma=%.4g)", n, split, style.family, sigma)
    return PairedDataset(
        models=models.astype(dtype),
        data=data.astype(dtype),
        noise_sigma=float(sigma),
        split=np.full(n, SPLITS[split], dtype=np.uint8),
        info={"seed": seed, "split": split, "style": _style_dict(style)},
    )


def _style_dict(style: ModelStyle) -> Dict[str, Any]:
    d = asdict(style)
    d["layers"] = list(style.layers)
    d["curvature"] = list(style.curvature)
    d["fault_throw"] = list(style.fault_throw)
    return d


def acquisition_summary(grid: Grid2D, acq: Acquisition) -> Dict[str, Any]:
    return {
        "grid": [grid.nz, grid.nx, grid.dz, grid.dx],
        "sources": acq.source_positions.tolist(),
        "receivers": acq.receiver_positions.tolist(),
        "nt": acq.nt,
        "dt": acq.dt,
        "record_every": acq.record_every,
        "sponge_cells": acq.sponge_cells,
        "sponge_decay": acq.sponge_decay,
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(
    dataset: PairedDataset,
    directory,
    extra: Optional[Dict[str, Any]] = None,
    shard_size: int = SHARD_SIZE,
) -> Path:
    """
    Write a dataset as container shards plus ``manifest.json``.

    Returns:
        path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = []
    for k, start in enumerate(range(0, len(dataset), shard_size)):
        stop = min(start + shard_size, len(dataset))
        name = f"shard_{k:04d}.pairinv"
        save_container(
            directory / name,
            {
                "models": dataset.models[start:stop],
                "data": dataset.data[start:stop],
                "split": dataset.split[start:stop],
            },
            meta={"start": start, "count": stop - start},
        )
        shards.append(
            {"file": name, "start": start, "count": stop - start, "sha256": _sha256(directory / name)}
        )

    manifest = {
        "format": DATASET_FORMAT,
        "n": len(dataset),
        "noise_sigma": dataset.noise_sigma,
        "shards": shards,
        **dataset.info,
        **(extra or {}),
    }
    path = directory / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_dataset(directory) -> PairedDataset:
    """Read a dataset written by save_dataset."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise ConfigError(f"Dataset manifest not found: {path}")
    with open(path, "r") as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path} is not a {DATASET_FORMAT} manifest")

    models, data, split = [], [], []
    for shard in manifest["shards"]:
        tensors, _ = read_container(directory / shard["file"])
        models.append(tensors["models"])
        data.append(tensors["data"])
        split.append(tensors["split"])

    info = {k: v for k, v in manifest.items() if k not in ("format", "n", "shards", "noise_sigma")}
    return PairedDataset(
        models=np.concatenate(models),
        data=np.concatenate(data),
        noise_sigma=float(manifest["noise_sigma"]),
        split=np.concatenate(split),
        info=info,
    )


def family_separation(
    style_a: ModelStyle, style_b: ModelStyle, grid: Grid2D, n: int, seed: int = 0
) -> float:
    """
    Mean pixelwise |mean_a - mean_b| over the mean standard error of the two
    family means. Values well above 3 indicate structurally distinct families.
    """
    def draw(style, stream):
        return np.stack(
            [
                sample_model(style, grid, np.random.default_rng((seed, stream, i))).velocity
                for i in range(n)
            ]
        )

    a = draw(style_a, 0)
    b = draw(style_b, 1)
    gap = np.abs(a.mean(axis=0) - b.mean(axis=0))
    stderr = 0.5 * (a.std(axis=0) + b.std(axis=0)) / np.sqrt(n)
    return float(gap.mean() / max(stderr.mean(), np.finfo(np.float64).tiny))

