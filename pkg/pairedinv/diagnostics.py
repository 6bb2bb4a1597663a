"""
Solver-free quality metrics, density-based OOD gating and error bounds.

RRE(b)    = ||b - D_b(M E_q(q_hat))|| / ||b||
RMA(q_hat) = ||q_hat - D_q(E_q(q_hat))|| / ||q_hat||

Neither metric calls the wave solver. The density map is a smoothed 2D
histogram of validation (RRE, RMA) points; a new point is flagged as
out-of-distribution when more than ``threshold`` of the validation points sit
in cells at least as dense as its own.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.metrics import roc_auc_score

from pairedinv.config import get_threads
from pairedinv.container import read_container, save_container
from pairedinv.errors import ConfigError, ContractError
from pairedinv.networks import (
    PairedModel,
    decode_data,
    decode_model,
    encode_data,
    encode_model,
    latent_map,
    latent_map_dagger,
    lfe,
    surrogate_forward,
)
from pairedinv.wave import Acquisition, Grid2D, SolverCounter, VelocityModel, simulate

logger = logging.getLogger(__name__)

DENSITY_FORMAT = "pairedinv-density-1"
MIN_DENSITY_POINTS = 30
BOUND_SLACK = 1e-12
METRIC_CHUNK = 32


@dataclass
class MetricPoint:
    rre: float
    rma: float


def _norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def rre(m: PairedModel, b: np.ndarray, q_hat: np.ndarray) -> float:
    """Relative residual estimate of ``q_hat`` against data ``b``."""
    nb = _norm(b)
    if nb == 0:
        raise ContractError("RRE of zero data")
    return _norm(np.asarray(b, dtype=np.float64) - surrogate_forward(m, q_hat)) / nb


def rma(m: PairedModel, q_hat: np.ndarray) -> float:
    """Recovered-model autoencoder error of ``q_hat``."""
    nq = _norm(q_hat)
    if nq == 0:
        raise ContractError("RMA of a zero model")
    roundtrip = decode_model(m, encode_model(m, q_hat))
    return _norm(np.asarray(q_hat, dtype=np.float64) - roundtrip) / nq


def metric_points(m: PairedModel, data: np.ndarray, q_hat: np.ndarray) -> List[MetricPoint]:
    """Batched (RRE, RMA) for data cubes and their estimates."""
    points = []
    for start in range(0, len(data), METRIC_CHUNK):
        sl = slice(start, start + METRIC_CHUNK)
        b = np.asarray(data[sl], dtype=np.float64)
        qh = np.asarray(q_hat[sl], dtype=np.float64)
        b_tilde = surrogate_forward(m, q_hat[sl])
        q_round = decode_model(m, encode_model(m, q_hat[sl]))
        for i in range(len(b)):
            nb, nq = _norm(b[i]), _norm(qh[i])
            if nb == 0 or nq == 0:
                raise ContractError("RRE/RMA need nonzero data and model")
            points.append(
                MetricPoint(rre=_norm(b[i] - b_tilde[i]) / nb, rma=_norm(qh[i] - q_round[i]) / nq)
            )
    return points


# Density map


@dataclass
class DensityMap:
    rre_edges: np.ndarray
    rma_edges: np.ndarray
    cells: np.ndarray
    raw: np.ndarray
    val_densities: np.ndarray
    n_points: int
    threshold: float = 0.95
    smooth_sigma: float = 1.0

    def cell_density(self, p: MetricPoint) -> float:
        i = _bin_index(self.rre_edges, p.rre)
        j = _bin_index(self.rma_edges, p.rma)
        if i is None or j is None:
            return 0.0
        return float(self.cells[i, j])


def _bin_index(edges: np.ndarray, value: float) -> Optional[int]:
    if not np.isfinite(value) or value < edges[0] or value > edges[-1]:
        return None
    index = int(np.searchsorted(edges, value, side="right")) - 1
    return min(index, len(edges) - 2)


def _upper(values: np.ndarray) -> float:
    upper = float(np.percentile(values, 99.5))
    return upper if upper > 0 else 1.0


def fit_density(
    points: Sequence[MetricPoint],
    n_bins: int = 16,
    smooth_sigma: float = 1.0,
    threshold: float = 0.95,
) -> DensityMap:
    """
    Fit a smoothed (RRE, RMA) histogram on validation points.

    Each axis spans [0, 99.5th percentile]; smoothing is Gaussian with
    ``smooth_sigma`` bins and the result is renormalised to sum 1.

    Raises:
        ConfigError: fewer than 30 points
    """
    if len(points) < MIN_DENSITY_POINTS:
        raise ConfigError(
            f"density fit needs at least {MIN_DENSITY_POINTS} points, got {len(points)}"
        )
    arr = np.array([[p.rre, p.rma] for p in points], dtype=np.float64)
    rre_edges = np.linspace(0.0, _upper(arr[:, 0]), n_bins + 1)
    rma_edges = np.linspace(0.0, _upper(arr[:, 1]), n_bins + 1)
    hist, _, _ = np.histogram2d(arr[:, 0], arr[:, 1], bins=[rre_edges, rma_edges])
    raw = hist / hist.sum()
    smoothed = gaussian_filter(raw, sigma=smooth_sigma, mode="reflect") if smooth_sigma > 0 else raw
    cells = smoothed / smoothed.sum()

    density = DensityMap(
        rre_edges=rre_edges,
        rma_edges=rma_edges,
        cells=cells,
        raw=raw,
        val_densities=np.zeros(0),
        n_points=len(points),
        threshold=threshold,
        smooth_sigma=smooth_sigma,
    )
    density.val_densities = np.sort([density.cell_density(p) for p in points])
    return density


def ood_score(density: DensityMap, p: MetricPoint) -> Dict[str, Any]:
    """
    Returns:
        dict with density_value, percentile (fraction of validation points in
        cells at least as dense) and is_ood
    """
    value = density.cell_density(p)
    dens = density.val_densities
    at_least = len(dens) - int(np.searchsorted(dens, value, side="left"))
    percentile = at_least / len(dens)
    outside = value == 0.0
    return {
        "density_value": value,
        "percentile": percentile,
        "is_ood": bool(outside or percentile > density.threshold),
    }


def ood_auroc(
    density: DensityMap,
    in_points: Sequence[MetricPoint],
    ood_points: Sequence[MetricPoint],
) -> float:
    """AUROC of the density value separating in-distribution from OOD points."""
    scores = [density.cell_density(p) for p in list(in_points) + list(ood_points)]
    labels = [1] * len(in_points) + [0] * len(ood_points)
    return float(roc_auc_score(labels, scores))


def save_density(density: DensityMap, path) -> None:
    save_container(
        path,
        {
            "rre_edges": density.rre_edges,
            "rma_edges": density.rma_edges,
            "cells": density.cells,
            "raw": density.raw,
            "val_densities": np.asarray(density.val_densities, dtype=np.float64),
        },
        meta={
            "format": DENSITY_FORMAT,
            "n_points": density.n_points,
            "threshold": density.threshold,
            "smooth_sigma": density.smooth_sigma,
        },
    )


def load_density(path) -> DensityMap:
    tensors, meta = read_container(path)
    if meta.get("format") != DENSITY_FORMAT:
        raise ConfigError(f"{path} is not a {DENSITY_FORMAT} file")
    return DensityMap(
        rre_edges=tensors["rre_edges"],
        rma_edges=tensors["rma_edges"],
        cells=tensors["cells"],
        raw=tensors["raw"],
        val_densities=tensors["val_densities"],
        n_points=int(meta["n_points"]),
        threshold=float(meta["threshold"]),
        smooth_sigma=float(meta["smooth_sigma"]),
    )


# Constants and bounds


@dataclass
class ConstantEstimates:
    L: float
    L_q: float
    L_b: float
    L_ae: float
    xi_q: float
    xi_b: float
    xi_M: float
    delta: float
    eps_q: float
    M_dagger_norm: float
    n_samples: int
    n_pairs: int

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def empirical_lipschitz(
    fn: Optional[Callable[[np.ndarray], np.ndarray]],
    inputs: np.ndarray,
    pair_samples: int,
    seed: int = 0,
    outputs: Optional[np.ndarray] = None,
) -> Tuple[float, int]:
    """
    Largest ||fn(x_i) - fn(x_j)|| / ||x_i - x_j|| over random pairs.

    Pairs are drawn one at a time from ``seed``, so a larger ``pair_samples``
    always extends the same sequence. Coincident pairs are skipped.

    Returns:
        (estimate, pairs used)
    """
    if outputs is None:
        outputs = fn(inputs)
    x = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    y = np.asarray(outputs, dtype=np.float64).reshape(len(outputs), -1)
    n = len(x)
    rng = np.random.default_rng(seed)
    best = 0.0
    used = 0
    for _ in range(pair_samples):
        i, j = rng.integers(0, n, size=2)
        dist = np.linalg.norm(x[i] - x[j])
        if dist == 0:
            continue
        best = max(best, float(np.linalg.norm(y[i] - y[j]) / dist))
        used += 1
    return best, used


def _max_dist(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.max(np.linalg.norm(diff.reshape(len(diff), -1), axis=1)))


def _map_samples(fn: Callable[[int], Any], n: int) -> List[Any]:
    workers = min(get_threads(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def estimate_constants(
    m: PairedModel,
    models: np.ndarray,
    data: np.ndarray,
    acq: Acquisition,
    grid: Grid2D,
    pair_samples: int = 1000,
    seed: int = 0,
    counter: Optional[SolverCounter] = None,
) -> ConstantEstimates:
    """
    Empirical constants from a validation set.

    Maxima are taken over samples; Lipschitz constants are maxima of distance
    ratios over ``pair_samples`` random pairs. The forward constant L needs
    one solve per sample.
    """
    n = len(models)
    if n < 2:
        raise ConfigError("constant estimation needs at least two samples")
    z_q = encode_model(m, models)
    z_b = encode_data(m, data)
    q_round = decode_model(m, z_q)
    q_hat = lfe(m, data)

    xi_q = _max_dist(q_round, models)
    xi_b = _max_dist(encode_data(m, decode_data(m, z_b)), z_b)
    delta = _max_dist(decode_data(m, latent_map(m, z_q)), data)
    eps_q = _max_dist(q_hat, models)
    if m.identity_maps:
        xi_M = 0.0
        m_dagger_norm = 1.0
    else:
        xi_M = _max_dist(latent_map_dagger(m, latent_map(m, z_q)), z_q)
        m_dagger_norm = float(np.linalg.norm(m.latent_map_dagger.astype(np.float64), 2))

    clean = np.stack(
        _map_samples(
            lambda i: simulate(
                VelocityModel(grid, np.asarray(models[i], dtype=np.float64)), acq, counter=counter
            ).values,
            n,
        )
    )
    L, pairs = empirical_lipschitz(None, models, pair_samples, seed, outputs=clean)
    L_q, _ = empirical_lipschitz(None, z_q, pair_samples, seed, outputs=q_round)
    L_b, _ = empirical_lipschitz(None, data, pair_samples, seed, outputs=z_b)
    L_ae, _ = empirical_lipschitz(None, models, pair_samples, seed, outputs=q_round)

    return ConstantEstimates(
        L=L,
        L_q=L_q,
        L_b=L_b,
        L_ae=L_ae,
        xi_q=xi_q,
        xi_b=xi_b,
        xi_M=xi_M,
        delta=delta,
        eps_q=eps_q,
        M_dagger_norm=m_dagger_norm,
        n_samples=n,
        n_pairs=pairs,
    )


def theorem_bound(c: ConstantEstimates) -> float:
    """L_q (||M+|| (L_b delta + xi_b) + xi_M) + xi_q"""
    return c.L_q * (c.M_dagger_norm * (c.L_b * c.delta + c.xi_b) + c.xi_M) + c.xi_q


def bound_report(
    m: PairedModel,
    models: np.ndarray,
    data: np.ndarray,
    consts: ConstantEstimates,
    acq: Acquisition,
    grid: Grid2D,
    sigma: float,
    clamp: Tuple[float, float],
    counter: Optional[SolverCounter] = None,
) -> Tuple[List[Dict[str, Any]], Dict[str, float]]:
    """
    Per-sample residual and model-error bounds for likelihood-free estimates.

    The estimate is clipped into ``clamp`` before the one true solve per sample.
    Noise norm ||eps|| is taken as sigma * sqrt(data size).

    Returns:
        (rows, holds-rate summary)
    """
    n = len(models)
    if n == 0:
        raise ConfigError("bound report needs at least one test sample")
    lo, hi = clamp
    q_hat = lfe(m, data)
    b_tilde = surrogate_forward(m, q_hat)
    q_round = decode_model(m, encode_model(m, q_hat))
    points = metric_points(m, data, q_hat)
    noise_norm = float(sigma) * float(np.sqrt(np.prod(data.shape[1:])))
    thm = theorem_bound(consts)
    p2_ok = consts.L_ae < 1.0

    simulated = _map_samples(
        lambda i: simulate(
            VelocityModel(grid, np.clip(np.asarray(q_hat[i], dtype=np.float64), lo, hi)),
            acq,
            counter=counter,
        ).values,
        n,
    )

    rows = []
    for i in range(n):
        b = np.asarray(data[i], dtype=np.float64)
        f_hat = simulated[i]
        residual = _norm(f_hat - b)
        bound1 = consts.L * consts.eps_q + noise_norm
        bound2 = _norm(f_hat - b_tilde[i]) + _norm(b_tilde[i] - b)
        err = _norm(np.asarray(q_hat[i], dtype=np.float64) - models[i])
        row = {
            "sample": i,
            "rre": points[i].rre,
            "rma": points[i].rma,
            "residual": residual,
            "bound1": bound1,
            "holds1": residual <= bound1,
            "bound2": bound2,
            "holds2": residual <= bound2 * (1.0 + BOUND_SLACK),
            "model_err": err,
            "p2_applicable": p2_ok,
            "p2_bound": float("nan"),
            "holds_p2": False,
            "theorem_bound": thm,
            "holds_theorem": err <= thm,
        }
        if p2_ok:
            p2 = (_norm(np.asarray(q_hat[i], dtype=np.float64) - q_round[i]) + consts.xi_q) / (
                1.0 - consts.L_ae
            )
            row["p2_bound"] = p2
            row["holds_p2"] = err <= p2
        rows.append(row)

    summary = {
        "n_samples": n,
        "holds1_rate": float(np.mean([r["holds1"] for r in rows])),
        "holds2_rate": float(np.mean([r["holds2"] for r in rows])),
        "holds_theorem_rate": float(np.mean([r["holds_theorem"] for r in rows])),
        "holds_p2_rate": float(np.mean([r["holds_p2"] for r in rows])) if p2_ok else float("nan"),
        "xi_M": consts.xi_M,
    }
    return rows, summary
