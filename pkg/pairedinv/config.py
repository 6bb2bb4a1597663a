"""Configuration settings for pairedinv.

Process settings come from the environment (optionally a ``.env`` file at the
repository root). Run settings come from a versioned JSON RunConfig.
"""

import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pairedinv.errors import ConfigError

# Base paths
BASE_DIR = Path(__file__).parent.parent.resolve()
DATA_DIR = BASE_DIR / "data"
DESK_CONFIG = DATA_DIR / "desk.json"

load_dotenv(BASE_DIR / ".env")

RUNS_DIR = Path(os.getenv("PAIREDINV_RUNS_DIR", str(BASE_DIR / "runs")))

# Runtime settings
THREADS = int(os.getenv("PAIREDINV_THREADS", "1"))
LOG_LEVEL = os.getenv("PAIREDINV_LOG_LEVEL", "INFO")
MAX_WAVEFIELD_BYTES = int(os.getenv("PAIREDINV_MAX_WAVEFIELD_BYTES", str(2 * 2**30)))

# File naming
CHECKPOINT_FORMAT = "pairedinv-ckpt-1"
CONTAINER_MAGIC = b"PAIRINV1"
SHARD_SIZE = 256

_threads_override: Optional[int] = None


def get_threads() -> int:
    """Worker cap for source and sample parallelism."""
    if _threads_override is not None:
        return _threads_override
    return max(1, THREADS)


def set_threads(n: Optional[int]) -> None:
    """Override PAIREDINV_THREADS for this process (``--threads``)."""
    global _threads_override
    if n is not None and n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    _threads_override = n


def ensure_directories(*directories: Path) -> None:
    """Create output directories if they don't exist."""
    for directory in directories:
        directory.mkdir(parents=True, exist_ok=True)


# RunConfig schema


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Section):
    nz: int = Field(64, ge=16)
    nx: int = Field(64, ge=16)
    dz: float = Field(10.0, gt=0)
    dx: float = Field(10.0, gt=0)


class AcquisitionSection(_Section):
    n_sources: int = Field(6, ge=1)
    n_receivers: int = Field(32, ge=1)
    source_depth: int = Field(1, ge=0)
    receiver_depth: int = Field(1, ge=0)
    nt: int = Field(512, ge=1)
    record_every: int = Field(4, ge=1)
    dt: Optional[float] = Field(None, gt=0)
    cfl_fraction: float = Field(0.8, gt=0, le=1)
    f_peak: float = Field(10.0, gt=0)
    t0: Optional[float] = Field(None, ge=0)
    sponge_cells: int = Field(20, ge=0)
    sponge_decay: float = Field(0.015, ge=0)

    @model_validator(mode="after")
    def _check_record_every(self):
        if self.nt % self.record_every:
            raise ValueError("nt must be a multiple of record_every")
        return self


class StyleSection(_Section):
    family: Literal["flat_layers", "curved_layers", "faulted_layers"] = "flat_layers"
    layers: Tuple[int, int] = (2, 6)
    c_min: float = Field(1500.0, gt=0)
    c_max: float = Field(4000.0, gt=0)
    curvature: Tuple[float, float] = (6.0, 14.0)
    fault_throw: Tuple[float, float] = (6.0, 14.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        if not self.c_min < self.c_max:
            raise ValueError("style needs c_min < c_max")
        if not 1 <= self.layers[0] <= self.layers[1]:
            raise ValueError("style layer range must satisfy 1 <= lo <= hi")
        return self


class NetworkSection(_Section):
    latent_dim: int = Field(64, ge=1)
    widths: List[int] = Field(default_factory=lambda: [8, 8, 16])
    dec_widths: List[int] = Field(default_factory=lambda: [16, 8, 4])
    head_width: int = Field(32, ge=1)
    blocks_per_level: int = Field(3, ge=0)
    step_h: float = 0.5
    learned_maps: bool = False

    @model_validator(mode="after")
    def _check_levels(self):
        if not self.widths or len(self.widths) != len(self.dec_widths):
            raise ValueError("widths and dec_widths need the same nonzero length")
        return self


class TrainSection(_Section):
    n_train: int = Field(512, ge=1)
    n_val: int = Field(128, ge=1)
    n_test: int = Field(128, ge=1)
    n_ood: int = Field(128, ge=1)
    noise_level: float = Field(0.01, ge=0)
    sigma: Optional[float] = Field(None, ge=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(40, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0
    coupling: Literal["none", "data_space", "model_space", "both"] = "both"
    w_b: float = Field(1.0, ge=0)
    w_q: float = Field(1.0, ge=0)
    w_s: float = Field(1.0, ge=0)
    precision: Literal["float32", "float64"] = "float32"


class InversionSection(_Section):
    iters: int = Field(700, ge=1)
    lr_bi: float = Field(1e-2, gt=0)
    lr_lsi: float = Field(1e-2, gt=0)
    alpha: float = Field(1.0, ge=0)
    n_samples: int = Field(50, ge=1)


class DiagnosticsSection(_Section):
    n_bins: int = Field(16, ge=2)
    smooth_sigma: float = Field(1.0, ge=0)
    threshold: float = Field(0.95, gt=0, le=1)
    pair_samples: int = Field(1000, ge=1)


class PathsSection(_Section):
    data_dir: str = str(RUNS_DIR / "desk" / "data")
    checkpoint: str = str(RUNS_DIR / "desk" / "ckpt.pairinv")
    out_dir: str = str(RUNS_DIR / "desk")


class RunConfig(_Section):
    config_version: Literal[1]
    grid: GridSection = Field(default_factory=GridSection)
    acquisition: AcquisitionSection = Field(default_factory=AcquisitionSection)
    style: StyleSection = Field(default_factory=StyleSection)
    ood_style: StyleSection = Field(
        default_factory=lambda: StyleSection(family="curved_layers")
    )
    network: NetworkSection = Field(default_factory=NetworkSection)
    train: TrainSection = Field(default_factory=TrainSection)
    inversion: InversionSection = Field(default_factory=InversionSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    paths: PathsSection = Field(default_factory=PathsSection)


def load_run_config(path) -> RunConfig:
    """
    Load and validate a RunConfig JSON file.

    Relative entries of the ``paths`` section are resolved against the
    directory holding the config file.

    Raises:
        ConfigError: missing file, invalid JSON, or schema violation
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e

    root = path.parent.resolve()
    resolved = {
        name: str((root / value).resolve())
        for name, value in cfg.paths.model_dump().items()
    }
    return cfg.model_copy(update={"paths": PathsSection(**resolved)})
