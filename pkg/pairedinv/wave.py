"""
2D acoustic wave-equation solver with adjoint-state gradients.

The model parameter is the squared velocity q = c^2 on an nz x nx grid. The
solver pads the model by ``sponge_cells`` on every side (edge values copied
outward), damps the field inside the padding, and steps

    u[n+1] = d * (2 u[n] - u[n-1] + dt^2 q (L u[n] - s[n]))

with a 5-point Laplacian L (zero Dirichlet outside the padded box), u[0] =
u[-1] = 0 and the source s[n] = wavelet[n] / (dx dz) at the source cell.
Receivers record u at every ``record_every``-th step starting at step 0.

Gradients are those of the discrete recurrence (discretize then optimize).
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pairedinv.config import MAX_WAVEFIELD_BYTES, get_threads
from pairedinv.errors import (
    BlowUpError,
    CFLViolation,
    ConfigError,
    ContractError,
    StorageError,
)

logger = logging.getLogger(__name__)

CFL_LIMIT = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class Grid2D:
    nz: int
    nx: int
    dz: float
    dx: float

    def __post_init__(self):
        if self.nz < 16 or self.nx < 16:
            raise ConfigError(f"grid needs nz, nx >= 16, got {self.nz}x{self.nx}")
        if self.dz <= 0 or self.dx <= 0:
            raise ConfigError("grid spacing must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nz, self.nx)


@dataclass
class VelocityModel:
    """Squared velocity ``qsq`` (m^2/s^2) on ``grid``."""

    grid: Grid2D
    qsq: np.ndarray

    def __post_init__(self):
        if self.qsq.shape != self.grid.shape:
            raise ContractError(
                f"model shape {self.qsq.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.qsq)) or np.any(self.qsq <= 0):
            raise ContractError("squared velocity must be finite and strictly positive")

    @property
    def velocity(self) -> np.ndarray:
        return qsq_to_velocity(self.qsq)


@dataclass
class Acquisition:
    """Source/receiver layout and time axis."""

    source_positions: np.ndarray
    receiver_positions: np.ndarray
    nt: int
    dt: float
    wavelet: np.ndarray
    record_every: int = 1
    sponge_cells: int = 20
    sponge_decay: float = 0.015

    def __post_init__(self):
        self.source_positions = np.asarray(self.source_positions, dtype=np.int64).reshape(-1, 2)
        self.receiver_positions = np.asarray(
            self.receiver_positions, dtype=np.int64
        ).reshape(-1, 2)
        self.wavelet = np.asarray(self.wavelet)
        if self.nt < 1 or self.dt <= 0:
            raise ConfigError("acquisition needs nt >= 1 and dt > 0")
        if self.wavelet.shape != (self.nt,):
            raise ConfigError(f"wavelet must have length nt={self.nt}")
        if self.record_every < 1 or self.nt % self.record_every:
            raise ConfigError("nt must be a multiple of record_every")

    @property
    def n_sources(self) -> int:
        return len(self.source_positions)

    @property
    def n_receivers(self) -> int:
        return len(self.receiver_positions)

    @property
    def n_t(self) -> int:
        """Recorded time samples."""
        return self.nt // self.record_every

    @property
    def data_shape(self) -> Tuple[int, int, int]:
        return (self.n_sources, self.n_receivers, self.n_t)

    def with_wavelet(self, wavelet: np.ndarray) -> "Acquisition":
        return Acquisition(
            source_positions=self.source_positions,
            receiver_positions=self.receiver_positions,
            nt=self.nt,
            dt=self.dt,
            wavelet=wavelet,
            record_every=self.record_every,
            sponge_cells=self.sponge_cells,
            sponge_decay=self.sponge_decay,
        )

    def validate(self, grid: Grid2D) -> None:
        for label, pos in (
            ("source", self.source_positions),
            ("receiver", self.receiver_positions),
        ):
            if len(pos) == 0:
                raise ConfigError(f"acquisition has no {label}s")
            if (
                np.any(pos < 0)
                or np.any(pos[:, 0] >= grid.nz)
                or np.any(pos[:, 1] >= grid.nx)
            ):
                raise ConfigError(f"{label} position outside the {grid.nz}x{grid.nx} grid")


@dataclass
class DataCube:
    """Recorded data, shape (n_sources, n_receivers, n_t)."""

    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


class SolverCounter:
    """Thread-safe tally of wave-solver invocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def count(self) -> int:
        with self._lock:
            return self._count


_counter = None


def get_solver_counter() -> SolverCounter:
    """Get or create the process-wide solver counter."""
    global _counter
    if _counter is None:
        _counter = SolverCounter()
    return _counter


# Conversions and setup helpers


def velocity_to_qsq(c: np.ndarray) -> np.ndarray:
    return np.asarray(c) ** 2


def qsq_to_velocity(qsq: np.ndarray) -> np.ndarray:
    return np.sqrt(np.asarray(qsq))


def ricker(f_peak: float, nt: int, dt: float, t0: Optional[float] = None) -> np.ndarray:
    """
    Ricker wavelet sampled at t = k * dt.

    Args:
        f_peak: peak frequency in Hz
        nt: number of samples
        dt: sample interval in seconds
        t0: peak time; defaults to 1.2 / f_peak
    """
    if f_peak <= 0:
        raise ConfigError("f_peak must be positive")
    if t0 is None:
        t0 = 1.2 / f_peak
    if t0 < 0:
        raise ConfigError("t0 must be nonnegative")
    t = np.arange(nt) * dt - t0
    arg = (np.pi * f_peak * t) ** 2
    return (1.0 - 2.0 * arg) * np.exp(-arg)


def cfl_ratio(c_max: float, dt: float, grid: Grid2D) -> float:
    return float(c_max * dt / min(grid.dz, grid.dx))


def cfl_check(q: VelocityModel, dt: float, grid: Optional[Grid2D] = None) -> float:
    """
    Check the 2D leapfrog stability bound c_max * dt / min(dz, dx) <= 1/sqrt(2).

    Returns:
        the ratio when stable

    Raises:
        CFLViolation: carrying the offending ratio
    """
    grid = grid or q.grid
    ratio = cfl_ratio(float(np.sqrt(np.max(q.qsq))), dt, grid)
    if ratio > CFL_LIMIT:
        raise CFLViolation(ratio, CFL_LIMIT)
    return ratio


def default_dt(grid: Grid2D, c_max: float, fraction: float = 0.8) -> float:
    """Time step at ``fraction`` of the CFL limit for velocity ``c_max``."""
    return fraction * CFL_LIMIT * min(grid.dz, grid.dx) / c_max


def default_acquisition(grid: Grid2D, section, c_max: float) -> Acquisition:
    """
    Surface acquisition from an AcquisitionSection: sources evenly spread
    across the grid at ``source_depth``, receivers spanning the full width at
    ``receiver_depth``.
    """
    n_s, n_r = section.n_sources, section.n_receivers
    src_x = np.floor((np.arange(n_s) + 0.5) * grid.nx / n_s).astype(np.int64)
    rec_x = np.round(np.linspace(0, grid.nx - 1, n_r)).astype(np.int64)
    dt = section.dt if section.dt is not None else default_dt(grid, c_max, section.cfl_fraction)
    acq = Acquisition(
        source_positions=np.stack([np.full(n_s, section.source_depth), src_x], axis=1),
        receiver_positions=np.stack([np.full(n_r, section.receiver_depth), rec_x], axis=1),
        nt=section.nt,
        dt=dt,
        wavelet=ricker(section.f_peak, section.nt, dt, section.t0),
        record_every=section.record_every,
        sponge_cells=section.sponge_cells,
        sponge_decay=section.sponge_decay,
    )
    acq.validate(grid)
    return acq


# Discrete operators


def _laplacian(u: np.ndarray, inv_dz2: float, inv_dx2: float) -> np.ndarray:
    out = (-2.0 * (inv_dz2 + inv_dx2)) * u
    out[..., 1:, :] += inv_dz2 * u[..., :-1, :]
    out[..., :-1, :] += inv_dz2 * u[..., 1:, :]
    out[..., :, 1:] += inv_dx2 * u[..., :, :-1]
    out[..., :, :-1] += inv_dx2 * u[..., :, 1:]
    return out


def _sponge_profile(n: int, width: int, decay: float) -> np.ndarray:
    profile = np.ones(n + 2 * width)
    if width:
        k = np.arange(width)
        ramp = np.exp(-((decay * (width - k)) ** 2))
        profile[:width] = ramp
        profile[-width:] = ramp[::-1]
    return profile


def _pad(field: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.array(field, copy=True)
    return np.pad(field, width, mode="edge")


def _pad_adjoint(g: np.ndarray, width: int, shape: Tuple[int, int]) -> np.ndarray:
    """Adjoint of edge padding: fold padded cells onto the nearest edge cell."""
    if width == 0:
        return g
    nz, nx = shape
    rows = g[width : width + nz].copy()
    rows[0] += g[:width].sum(axis=0)
    rows[-1] += g[width + nz :].sum(axis=0)
    out = rows[:, width : width + nx].copy()
    out[:, 0] += rows[:, :width].sum(axis=1)
    out[:, -1] += rows[:, width + nx :].sum(axis=1)
    return out


class _Setup:
    """Precomputed padded quantities shared by one solver call."""

    def __init__(self, model: VelocityModel, acq: Acquisition):
        grid = model.grid
        acq.validate(grid)
        cfl_check(model, acq.dt, grid)
        w = acq.sponge_cells
        self.dtype = model.qsq.dtype if model.qsq.dtype.kind == "f" else np.float64
        self.grid = grid
        self.width = w
        self.shape = (grid.nz + 2 * w, grid.nx + 2 * w)
        self.qp = _pad(model.qsq.astype(self.dtype, copy=False), w)
        self.dt2 = acq.dt * acq.dt
        self.dt2q = (self.dt2 * self.qp).astype(self.dtype)
        self.damp = np.outer(
            _sponge_profile(grid.nz, w, acq.sponge_decay),
            _sponge_profile(grid.nx, w, acq.sponge_decay),
        ).astype(self.dtype)
        self.inv_dz2 = 1.0 / (grid.dz * grid.dz)
        self.inv_dx2 = 1.0 / (grid.dx * grid.dx)
        self.amp = (acq.wavelet / (grid.dx * grid.dz)).astype(self.dtype)
        self.src = acq.source_positions + w
        self.rec = acq.receiver_positions + w
        self.nt = acq.nt
        self.every = acq.record_every
        self.n_t = acq.n_t

    def lap(self, u: np.ndarray) -> np.ndarray:
        return _laplacian(u, self.inv_dz2, self.inv_dx2)

    def residual_term(self, u: np.ndarray, n: int, chunk: np.ndarray) -> np.ndarray:
        """L u - s[n] for the sources in ``chunk``."""
        r = self.lap(u)
        r[np.arange(len(chunk)), self.src[chunk, 0], self.src[chunk, 1]] -= self.amp[n]
        return r

    def record(self, u: np.ndarray) -> np.ndarray:
        return u[:, self.rec[:, 0], self.rec[:, 1]]


def _check_finite(u: np.ndarray, step: int, chunk: np.ndarray) -> None:
    if not np.all(np.isfinite(u)):
        bad = int(chunk[np.argmax(~np.isfinite(u).reshape(len(chunk), -1).all(axis=1))])
        raise BlowUpError(step, source=bad)


def _forward_chunk(
    s: _Setup, chunk: np.ndarray, store: bool
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    b = len(chunk)
    u_prev = np.zeros((b,) + s.shape, dtype=s.dtype)
    u = np.zeros_like(u_prev)
    rec = np.zeros((b, len(s.rec), s.n_t), dtype=s.dtype)
    stored = np.empty((s.nt, b) + s.shape, dtype=s.dtype) if store else None
    for n in range(s.nt):
        if n % s.every == 0:
            rec[:, :, n // s.every] = s.record(u)
        if store:
            stored[n] = u
        u_next = s.damp * (2.0 * u - u_prev + s.dt2q * s.residual_term(u, n, chunk))
        _check_finite(u_next, n + 1, chunk)
        u_prev, u = u, u_next
    return rec, stored


def _born_chunk(s: _Setup, chunk: np.ndarray, dqp: np.ndarray) -> np.ndarray:
    b = len(chunk)
    u_prev = np.zeros((b,) + s.shape, dtype=s.dtype)
    u = np.zeros_like(u_prev)
    du_prev = np.zeros_like(u_prev)
    du = np.zeros_like(u_prev)
    rec = np.zeros((b, len(s.rec), s.n_t), dtype=s.dtype)
    dt2dq = (s.dt2 * dqp).astype(s.dtype)
    for n in range(s.nt):
        if n % s.every == 0:
            rec[:, :, n // s.every] = s.record(du)
        r = s.residual_term(u, n, chunk)
        u_next = s.damp * (2.0 * u - u_prev + s.dt2q * r)
        du_next = s.damp * (2.0 * du - du_prev + s.dt2q * s.lap(du) + dt2dq * r)
        _check_finite(du_next, n + 1, chunk)
        u_prev, u = u, u_next
        du_prev, du = du, du_next
    return rec


def _adjoint_chunk(
    s: _Setup, chunk: np.ndarray, stored: np.ndarray, residual: np.ndarray
) -> np.ndarray:
    """Per-source gradient of <residual, recorded data> with respect to padded q."""
    b = len(chunk)
    lam_next = np.zeros((b,) + s.shape, dtype=s.dtype)
    lam_cur = np.zeros_like(lam_next)
    grad = np.zeros_like(lam_next)
    rec_index = (slice(None), s.rec[:, 0], s.rec[:, 1])
    for n in range(s.nt - 1, -1, -1):
        if n % s.every == 0:
            np.add.at(lam_cur, rec_index, residual[:, :, n // s.every])
        v = s.damp * lam_next
        lam_cur += 2.0 * v + s.lap(s.dt2q * v)
        grad += s.dt2 * v * s.residual_term(stored[n], n, chunk)
        _check_finite(lam_cur, n, chunk)
        lam_next, lam_cur = lam_cur, -v
    return grad


def _map_sources(fn: Callable[[np.ndarray], object], n_sources: int) -> List[object]:
    n_chunks = min(get_threads(), n_sources)
    chunks = np.array_split(np.arange(n_sources), n_chunks)
    if n_chunks == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=n_chunks) as pool:
        return list(pool.map(fn, chunks))


def _sum_sources(per_chunk: Sequence[np.ndarray]) -> np.ndarray:
    """Sum per-source arrays in source order, independent of chunking."""
    total = None
    for block in per_chunk:
        for g in block:
            total = g.copy() if total is None else total + g
    return total


def _check_storage(s: _Setup, n_sources: int) -> None:
    required = s.nt * n_sources * s.shape[0] * s.shape[1] * np.dtype(s.dtype).itemsize
    if required > MAX_WAVEFIELD_BYTES:
        raise StorageError(required, MAX_WAVEFIELD_BYTES)


def _as_values(b: Union[DataCube, np.ndarray]) -> np.ndarray:
    return b.values if isinstance(b, DataCube) else np.asarray(b)


def _forward_data(model: VelocityModel, acq: Acquisition, store: bool):
    s = _Setup(model, acq)
    if store:
        _check_storage(s, acq.n_sources)
    results = _map_sources(lambda chunk: _forward_chunk(s, chunk, store), acq.n_sources)
    data = np.concatenate([r[0] for r in results], axis=0)
    return s, data, results


def simulate(
    model: VelocityModel, acq: Acquisition, counter: Optional[SolverCounter] = None
) -> DataCube:
    """
    Record the wavefield for every source.

    Raises:
        CFLViolation: dt too large for the model
        BlowUpError: non-finite field, with the step index
    """
    (counter or get_solver_counter()).increment()
    _, data, _ = _forward_data(model, acq, store=False)
    return DataCube(values=data)


def _backpropagate(s: _Setup, results, residual: np.ndarray, shape) -> np.ndarray:
    offsets = np.cumsum([0] + [len(r[0]) for r in results])
    chunks = [np.arange(offsets[i], offsets[i + 1]) for i in range(len(results))]

    def run(i):
        return _adjoint_chunk(s, chunks[i], results[i][1], residual[chunks[i]])

    n = len(results)
    if n == 1:
        per_chunk = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            per_chunk = list(pool.map(run, range(n)))
    return _pad_adjoint(_sum_sources(per_chunk), s.width, shape)


def misfit_and_gradient(
    model: VelocityModel,
    acq: Acquisition,
    b_obs: Union[DataCube, np.ndarray],
    noise_sigma: Optional[float] = None,
    counter: Optional[SolverCounter] = None,
) -> Tuple[float, np.ndarray]:
    """
    Data misfit 0.5 * ||simulate(q) - b_obs||^2 and its exact gradient in q.

    With ``noise_sigma`` the misfit is weighted by 1 / sigma^2.

    Raises:
        StorageError: stored forward wavefields would exceed the cap
    """
    obs = _as_values(b_obs)
    if obs.shape != acq.data_shape:
        raise ContractError(f"observed data shape {obs.shape} != {acq.data_shape}")
    (counter or get_solver_counter()).increment()
    s, data, results = _forward_data(model, acq, store=True)
    residual = data - obs.astype(s.dtype, copy=False)
    weight = 1.0 if noise_sigma is None else 1.0 / (noise_sigma * noise_sigma)
    phi = 0.5 * weight * float(np.sum(residual.astype(np.float64) ** 2))
    grad = _backpropagate(s, results, residual, model.grid.shape)
    if weight != 1.0:
        grad = grad * weight
    return phi, grad


def born(
    model: VelocityModel,
    acq: Acquisition,
    dq: np.ndarray,
    counter: Optional[SolverCounter] = None,
) -> np.ndarray:
    """Linearized forward map J dq."""
    if dq.shape != model.grid.shape:
        raise ContractError(f"perturbation shape {dq.shape} != {model.grid.shape}")
    (counter or get_solver_counter()).increment()
    s = _Setup(model, acq)
    dqp = _pad(dq.astype(s.dtype, copy=False), s.width)
    parts = _map_sources(lambda chunk: _born_chunk(s, chunk, dqp), acq.n_sources)
    return np.concatenate(parts, axis=0)


def born_adjoint(
    model: VelocityModel,
    acq: Acquisition,
    v: np.ndarray,
    counter: Optional[SolverCounter] = None,
) -> np.ndarray:
    """Adjoint of the linearized forward map, J^T v."""
    if v.shape != acq.data_shape:
        raise ContractError(f"data-space vector shape {v.shape} != {acq.data_shape}")
    (counter or get_solver_counter()).increment()
    s, _, results = _forward_data(model, acq, store=True)
    return _backpropagate(s, results, v.astype(s.dtype, copy=False), model.grid.shape)


def dot_product_test(
    model: VelocityModel,
    acq: Acquisition,
    seed: int = 0,
    dq: Optional[np.ndarray] = None,
    counter: Optional[SolverCounter] = None,
) -> float:
    """
    Relative mismatch between <J dq, v> and <dq, J^T v>.

    ``dq`` and ``v`` are drawn from ``seed``; pass ``dq`` explicitly to fix the
    perturbation. Inner products are accumulated in 64-bit.
    """
    rng = np.random.default_rng(seed)
    dtype = model.qsq.dtype
    if dq is None:
        dq = (rng.standard_normal(model.grid.shape) * float(np.mean(model.qsq)) * 1e-2).astype(dtype)
    v = rng.standard_normal(acq.data_shape).astype(dtype)
    lhs = float(np.sum(born(model, acq, dq, counter).astype(np.float64) * v))
    rhs = float(
        np.sum(dq.astype(np.float64) * born_adjoint(model, acq, v, counter).astype(np.float64))
    )
    scale = max(abs(lhs), abs(rhs))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale


def interior_energy(model: VelocityModel, acq: Acquisition, source: int = 0) -> np.ndarray:
    """
    Discrete energy inside the unpadded grid for one source, one value per step:

        E[n] = sum (u[n+1] - u[n])^2 / (q dt^2) - sum u[n+1] * L u[n]

    Without the sponge and with the source off, the whole-domain version of
    this quantity is conserved by the leapfrog recurrence.
    """
    if not 0 <= source < acq.n_sources:
        raise ConfigError(f"source index {source} out of range")
    s = _Setup(model, acq)
    chunk = np.array([source])
    w = s.width
    inner = (slice(None), slice(w, w + model.grid.nz), slice(w, w + model.grid.nx))
    inv_q = 1.0 / s.qp[inner[1:]]
    u_prev = np.zeros((1,) + s.shape, dtype=s.dtype)
    u = np.zeros_like(u_prev)
    energy = np.zeros(s.nt)
    for n in range(s.nt):
        lap_u = s.lap(u)
        r = lap_u.copy()
        r[0, s.src[source, 0], s.src[source, 1]] -= s.amp[n]
        u_next = s.damp * (2.0 * u - u_prev + s.dt2q * r)
        _check_finite(u_next, n + 1, chunk)
        du = (u_next - u)[inner]
        energy[n] = float(
            np.sum(du.astype(np.float64) ** 2 * inv_q) / s.dt2
            - np.sum(u_next[inner].astype(np.float64) * lap_u[inner])
        )
        u_prev, u = u, u_next
    return energy
