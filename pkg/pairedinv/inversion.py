"""
Iterative reconstructions against the wave solver.

BI   Adam on the squared-velocity grid q, minimising 0.5 ||F(q) - b||^2 with q
     clamped to [c_min^2, c_max^2] after every step.
LSI  Adam on a latent z, minimising 0.5 ||F(D_q(z)) - b||^2 + 0.5 alpha ||z - z*||^2,
     where z* = M+ E_b(b) (anchor "lfe") or 0 (anchor "origin"). The decoded
     model is clipped into the box before the solve and the gradient is masked
     where the clip is active.

Every run evaluates the objective at the start point and after each of the
``iters`` steps, so a trace holds iters + 1 records and costs iters + 1 solver
calls.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pairedinv.config import get_threads
from pairedinv.errors import ConfigError, ContractError, PairedInvError
from pairedinv.networks import (
    PairedModel,
    decode_model_vjp,
    encode_data,
    encode_model,
    latent_map_dagger,
    lfe,
)
from pairedinv.optim import adam_step, init_adam
from pairedinv.wave import (
    Acquisition,
    DataCube,
    Grid2D,
    SolverCounter,
    VelocityModel,
    misfit_and_gradient,
    velocity_to_qsq,
)

logger = logging.getLogger(__name__)

METHODS = ("BI", "LSI")
STARTS = ("basic", "warm")
ANCHORS = ("lfe", "origin")


@dataclass
class InversionConfig:
    method: str = "BI"
    start: str = "basic"
    alpha: float = 0.0
    iters: int = 700
    lr: float = 1e-2
    clamp: Tuple[float, float] = (1500.0**2, 4000.0**2)
    anchor: str = "lfe"
    noise_sigma: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown inversion method: {self.method}")
        if self.start not in STARTS:
            raise ConfigError(f"Unknown start: {self.start}")
        if self.anchor not in ANCHORS:
            raise ConfigError(f"Unknown anchor: {self.anchor}")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        lo, hi = self.clamp
        if not 0 < lo < hi:
            raise ConfigError("clamp box must satisfy 0 < lo < hi")

    @property
    def label(self) -> str:
        return f"{self.method}-{self.start}"


@dataclass
class InversionTrace:
    phi: List[float] = field(default_factory=list)
    rel_misfit: List[float] = field(default_factory=list)
    reg: List[float] = field(default_factory=list)
    model_err: List[float] = field(default_factory=list)
    final_model: Optional[np.ndarray] = None
    final_latent: Optional[np.ndarray] = None
    solver_calls: int = 0

    @property
    def objective(self) -> List[float]:
        return [p + r for p, r in zip(self.phi, self.reg)]

    def __len__(self) -> int:
        return len(self.phi)

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"iter": i, "misfit": self.rel_misfit[i], "reg": self.reg[i], "model_err": self.model_err[i]}
            for i in range(len(self))
        ]


def relative_error(a: np.ndarray, b_ref: np.ndarray) -> float:
    """||a - b_ref|| / ||b_ref||"""
    a = np.asarray(a, dtype=np.float64)
    b_ref = np.asarray(b_ref, dtype=np.float64)
    if a.shape != b_ref.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b_ref.shape}")
    ref = np.linalg.norm(b_ref)
    if ref == 0:
        raise ContractError("relative error against a zero reference")
    return float(np.linalg.norm(a - b_ref) / ref)


def model_error(q: np.ndarray, q_true: np.ndarray) -> float:
    """Relative error measured in velocity c = sqrt(q)."""
    return relative_error(np.sqrt(np.maximum(q, 0.0)), np.sqrt(q_true))


def basic_start_model(grid: Grid2D, c_min: float, c_max: float, dtype=np.float64) -> VelocityModel:
    """Laterally invariant velocity ramp from c_min at the top to c_max at the bottom."""
    c = np.linspace(c_min, c_max, grid.nz)[:, None] * np.ones((1, grid.nx))
    return VelocityModel(grid=grid, qsq=velocity_to_qsq(c).astype(dtype))


def _data_values(b_obs) -> np.ndarray:
    return b_obs.values if isinstance(b_obs, DataCube) else np.asarray(b_obs)


def _record(trace, phi, reg, b_norm, q, q_true):
    trace.phi.append(phi)
    trace.reg.append(reg)
    trace.rel_misfit.append(float(np.sqrt(2.0 * phi)) / b_norm if b_norm > 0 else 0.0)
    trace.model_err.append(model_error(q, q_true) if q_true is not None else float("nan"))


def basic_inversion(
    b_obs,
    q0: VelocityModel,
    acq: Acquisition,
    cfg: InversionConfig,
    q_true: Optional[np.ndarray] = None,
    counter: Optional[SolverCounter] = None,
) -> InversionTrace:
    """
    Adam on q directly with box clamping.

    The step works on x = q / q_ref with q_ref = mean |q0|, so ``lr`` is a
    relative step size.
    """
    if cfg.method != "BI":
        raise ConfigError("basic_inversion needs method BI")
    counter = counter or SolverCounter()
    b = _data_values(b_obs)
    b_norm = float(np.linalg.norm(b.astype(np.float64)))
    grid = q0.grid
    lo, hi = cfg.clamp
    q = np.array(q0.qsq, copy=True)
    q_ref = float(np.mean(np.abs(q)))
    params = {"q": q}
    state = init_adam(params, lr=cfg.lr * q_ref)
    trace = InversionTrace()
    calls_before = counter.count

    phi, grad = misfit_and_gradient(VelocityModel(grid, q), acq, b, cfg.noise_sigma, counter)
    _record(trace, phi, 0.0, b_norm, q, q_true)
    for it in range(cfg.iters):
        adam_step(params, {"q": grad * q.dtype.type(q_ref)}, state)
        np.clip(q, lo, hi, out=q)
        phi, grad = misfit_and_gradient(VelocityModel(grid, q), acq, b, cfg.noise_sigma, counter)
        _record(trace, phi, 0.0, b_norm, q, q_true)
        if not np.isfinite(phi):
            logger.warning("BI objective became non-finite at iteration %d", it + 1)

    trace.final_model = q.copy()
    trace.solver_calls = counter.count - calls_before
    return trace


def latent_space_inversion(
    b_obs,
    z_star: np.ndarray,
    cfg: InversionConfig,
    m: PairedModel,
    acq: Acquisition,
    grid: Grid2D,
    q_basic: Optional[np.ndarray] = None,
    q_true: Optional[np.ndarray] = None,
    counter: Optional[SolverCounter] = None,
) -> InversionTrace:
    """
    Adam on the latent variable through the frozen model decoder.

    Args:
        b_obs: observed data
        z_star: anchor latent M+ E_b(b_obs)
        cfg: method LSI, start, alpha, anchor
        m: trained paired model
        acq, grid: solver setup
        q_basic: start model for start="basic" (defaults to the velocity ramp)
        q_true: ground truth for the model-error column
    """
    if cfg.method != "LSI":
        raise ConfigError("latent_space_inversion needs method LSI")
    z_star = np.asarray(z_star, dtype=m.dtype)
    if z_star.shape != (m.latent_dim,):
        raise ContractError(f"z_star must have length {m.latent_dim}")
    counter = counter or SolverCounter()
    b = _data_values(b_obs)
    b_norm = float(np.linalg.norm(b.astype(np.float64)))
    lo, hi = cfg.clamp

    if cfg.start == "warm":
        z = z_star.copy()
    else:
        if q_basic is None:
            q_basic = basic_start_model(grid, np.sqrt(lo), np.sqrt(hi)).qsq
        z = np.array(encode_model(m, q_basic), dtype=m.dtype)
    anchor = z_star if cfg.anchor == "lfe" else np.zeros_like(z_star)
    alpha = m.dtype.type(cfg.alpha)

    def evaluate(z):
        q, pullback = decode_model_vjp(m, z)
        inside = (q >= lo) & (q <= hi)
        qc = np.clip(q, lo, hi)
        phi, grad_q = misfit_and_gradient(VelocityModel(grid, qc), acq, b, cfg.noise_sigma, counter)
        diff = z - anchor
        reg = 0.5 * float(cfg.alpha) * float(np.sum(diff.astype(np.float64) ** 2))
        grad_z = pullback(grad_q * inside) + alpha * diff
        return phi, reg, grad_z, qc

    params = {"z": z}
    state = init_adam(params, lr=cfg.lr)
    trace = InversionTrace()
    calls_before = counter.count

    phi, reg, grad, qc = evaluate(z)
    _record(trace, phi, reg, b_norm, qc, q_true)
    for _ in range(cfg.iters):
        adam_step(params, {"z": grad}, state)
        phi, reg, grad, qc = evaluate(z)
        _record(trace, phi, reg, b_norm, qc, q_true)

    trace.final_model = qc
    trace.final_latent = z.copy()
    trace.solver_calls = counter.count - calls_before
    return trace


def default_suite_configs(section, clamp: Tuple[float, float]) -> List[InversionConfig]:
    """BI basic, BI warm, LSI basic (alpha 0), LSI warm (alpha from config)."""
    return [
        InversionConfig("BI", "basic", 0.0, section.iters, section.lr_bi, clamp),
        InversionConfig("BI", "warm", 0.0, section.iters, section.lr_bi, clamp),
        InversionConfig("LSI", "basic", 0.0, section.iters, section.lr_lsi, clamp),
        InversionConfig("LSI", "warm", section.alpha, section.iters, section.lr_lsi, clamp),
    ]


def run_inversion(
    cfg: InversionConfig,
    b: np.ndarray,
    m: PairedModel,
    acq: Acquisition,
    grid: Grid2D,
    q_true: Optional[np.ndarray] = None,
    counter: Optional[SolverCounter] = None,
) -> InversionTrace:
    """Run one configuration on one data cube, deriving the start from ``cfg.start``."""
    lo, hi = cfg.clamp
    basic = basic_start_model(grid, np.sqrt(lo), np.sqrt(hi), dtype=m.dtype)
    if cfg.method == "BI":
        if cfg.start == "warm":
            q0 = VelocityModel(grid, np.clip(lfe(m, b), lo, hi).astype(m.dtype))
        else:
            q0 = basic
        return basic_inversion(b, q0, acq, cfg, q_true=q_true, counter=counter)
    z_star = latent_map_dagger(m, encode_data(m, b))
    return latent_space_inversion(
        b, z_star, cfg, m, acq, grid, q_basic=basic.qsq, q_true=q_true, counter=counter
    )


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_suite(
    test_models: np.ndarray,
    test_data: np.ndarray,
    m: PairedModel,
    cfgs: Sequence[InversionConfig],
    acq: Acquisition,
    grid: Grid2D,
) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    """
    Run every configuration on every test sample.

    Per-sample failures are logged and excluded from the means.

    Returns:
        (one summary row per configuration, one record per successful run)
    """
    n = len(test_models)
    if n == 0:
        raise ConfigError("suite needs at least one test sample")
    tasks = [(c, i) for c in range(len(cfgs)) for i in range(n)]

    def run(task):
        c, i = task
        try:
            trace = run_inversion(
                cfgs[c], test_data[i], m, acq, grid, q_true=test_models[i], counter=SolverCounter()
            )
        except PairedInvError as e:
            logger.warning("%s failed on sample %d: %s", cfgs[c].label, i, e)
            return None
        return {
            "config": c,
            "sample": i,
            "misfit_init": trace.rel_misfit[0],
            "misfit_final": trace.rel_misfit[-1],
            "err_init": trace.model_err[0],
            "err_final": trace.model_err[-1],
            "solver_calls": trace.solver_calls,
        }

    workers = min(get_threads(), len(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    records = [r for r in results if r is not None]
    rows = []
    for c, cfg in enumerate(cfgs):
        mine = [r for r in records if r["config"] == c]
        failed = n - len(mine)
        if failed:
            logger.warning("%s: %d of %d samples failed", cfg.label, failed, n)
        row = {"method": cfg.method, "start": cfg.start, "alpha": cfg.alpha}
        for key in ("misfit_init", "misfit_final", "err_init", "err_final"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([r[key] for r in mine])
        row["n_samples"] = len(mine)
        rows.append(row)
    return rows, records
