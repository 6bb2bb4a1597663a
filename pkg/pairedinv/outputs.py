"""CSV and PGM writers for run outputs."""

import csv
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from pairedinv.errors import ConfigError

TRAINING_LOG_COLUMNS = [
    "epoch",
    "ae_data",
    "ae_model",
    "s_data_space",
    "s_model_space",
    "total",
    "val_total",
    "val_lfe_err",
]
SUITE_COLUMNS = [
    "method",
    "start",
    "alpha",
    "misfit_init_mean",
    "misfit_init_std",
    "misfit_final_mean",
    "misfit_final_std",
    "err_init_mean",
    "err_init_std",
    "err_final_mean",
    "err_final_std",
    "n_samples",
]
TRACE_COLUMNS = ["iter", "misfit", "reg", "model_err"]


def format_value(value: Any) -> str:
    """Stable text form: floats with 10 significant digits, bools as true/false."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_csv(path, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def write_pgm(path, image: np.ndarray) -> Path:
    """
    Write a 2D array as a binary 8-bit PGM (P5), min-max scaled to 0..255.

    A constant array is written as all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ConfigError(f"PGM needs a 2D array, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ConfigError("PGM input contains non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scaled = np.round((image - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(image)
    pixels = scaled.astype(np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path
