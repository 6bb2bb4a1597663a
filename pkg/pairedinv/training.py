"""
Coupled training of the paired autoencoders.

Loss terms are computed on standardised tensors (see networks) as
(1/2B) * sum of squared norms over the batch:

    ae_data        ||D_b(E_b(b)) - b||^2
    ae_model       ||D_q(E_q(q)) - q||^2
    s_data_space   ||b - D_b(M E_q(q))||^2          coupling data_space or both
    s_model_space  ||q - D_q(M+ E_b(b))||^2         coupling model_space or both

    total = w_b * ae_data + w_q * ae_model + w_s * (s_data_space + s_model_space)
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from pairedinv.datagen import PairedDataset
from pairedinv.diagnostics import metric_points
from pairedinv.errors import ConfigError, NumericError, TrainingDiverged
from pairedinv.inversion import model_error
from pairedinv.networks import (
    NetworkShape,
    PairedModel,
    build_paired_model,
    fit_normalization,
    lfe,
)
from pairedinv.optim import adam_step, init_adam

logger = logging.getLogger(__name__)

COUPLINGS = ("none", "data_space", "model_space", "both")
LOSS_FIELDS = ("ae_data", "ae_model", "s_data_space", "s_model_space", "total")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_EPOCHS = 3


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 40
    lr: float = 1e-3
    seed: int = 0
    coupling: str = "both"
    w_b: float = 1.0
    w_q: float = 1.0
    w_s: float = 1.0
    precision: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"Unknown coupling: {self.coupling}")
        if min(self.w_b, self.w_q, self.w_s) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.w_b == self.w_q == self.w_s == 0:
            raise ConfigError("loss weights must not all be zero")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"Unknown precision: {self.precision}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def data_coupling(self) -> bool:
        return self.coupling in ("data_space", "both")

    @property
    def model_coupling(self) -> bool:
        return self.coupling in ("model_space", "both")

    @classmethod
    def from_section(cls, section) -> "TrainConfig":
        return cls(
            batch_size=section.batch_size,
            epochs=section.epochs,
            lr=section.lr,
            seed=section.seed,
            coupling=section.coupling,
            w_b=section.w_b,
            w_q=section.w_q,
            w_s=section.w_s,
            precision=section.precision,
        )


@dataclass
class LossBreakdown:
    ae_data: float = 0.0
    ae_model: float = 0.0
    s_data_space: float = 0.0
    s_model_space: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _sq(x: np.ndarray) -> float:
    return float(np.sum(x.astype(np.float64) ** 2))


def _combine(sums: Dict[str, float], count: int, cfg: TrainConfig) -> LossBreakdown:
    parts = {k: sums[k] / (2.0 * count) for k in LOSS_FIELDS[:-1]}
    total = (
        cfg.w_b * parts["ae_data"]
        + cfg.w_q * parts["ae_model"]
        + cfg.w_s * (parts["s_data_space"] + parts["s_model_space"])
    )
    breakdown = LossBreakdown(total=total, **parts)
    for name, value in breakdown.as_dict().items():
        if not np.isfinite(value):
            raise NumericError(f"Non-finite loss term {name}; step aborted")
    return breakdown


def _apply_map(z: np.ndarray, matrix: Optional[np.ndarray]) -> np.ndarray:
    return z if matrix is None else z @ matrix.T


def _forward_terms(m: PairedModel, Q: np.ndarray, B: np.ndarray, cfg: TrainConfig, mode: str):
    """Run every active branch; returns (squared-norm sums, state for backward)."""
    st: Dict[str, Any] = {}
    sums = dict.fromkeys(LOSS_FIELDS[:-1], 0.0)

    st["zq"], st["c_eq"] = m.enc_model.forward(Q, mode)
    st["zb"], st["c_eb"] = m.enc_data.forward(B, mode)

    rq, st["c_dq"] = m.dec_model.forward(st["zq"], mode)
    st["r_q"] = rq - Q
    sums["ae_model"] = _sq(st["r_q"])

    rb, st["c_db"] = m.dec_data.forward(st["zb"], mode)
    st["r_b"] = rb - B
    sums["ae_data"] = _sq(st["r_b"])

    if cfg.data_coupling:
        sb, st["c_sb"] = m.dec_data.forward(_apply_map(st["zq"], m.latent_map), mode)
        st["s_b"] = sb - B
        sums["s_data_space"] = _sq(st["s_b"])
    if cfg.model_coupling:
        sq, st["c_sq"] = m.dec_model.forward(_apply_map(st["zb"], m.latent_map_dagger), mode)
        st["s_q"] = sq - Q
        sums["s_model_space"] = _sq(st["s_q"])
    return sums, st


def _accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    for k, v in grads.items():
        total[k] = total[k] + v if k in total else v


def batch_loss(
    m: PairedModel,
    models: np.ndarray,
    data: np.ndarray,
    cfg: TrainConfig,
    mode: str = "infer",
) -> LossBreakdown:
    """Loss-only evaluation on a batch; the terms are measured on standardized tensors."""
    if len(models) == 0:
        raise ConfigError("batch must be nonempty")
    sums, _ = _forward_terms(
        m, m.standardize_models(models), m.standardize_data(data), cfg, mode
    )
    return _combine(sums, len(models), cfg)


def batch_loss_and_grads(
    m: PairedModel,
    models: np.ndarray,
    data: np.ndarray,
    cfg: TrainConfig,
    mode: str = "train",
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """
    Loss breakdown and exact gradients of ``total`` for every parameter.

    Args:
        m: paired model, parameters read but not modified
        models: (B, nz, nx) squared velocities
        data: (B, n_s, n_r, n_t)
        cfg: coupling and weights
        mode: "train" (batch statistics) or "frozen" (running statistics)

    Returns:
        (LossBreakdown, grads keyed like m.named_params())
    """
    n = len(models)
    if n == 0:
        raise ConfigError("batch must be nonempty")
    Q = m.standardize_models(models)
    B = m.standardize_data(data)
    sums, st = _forward_terms(m, Q, B, cfg, mode)
    breakdown = _combine(sums, n, cfg)

    grads: Dict[str, np.ndarray] = {}
    scale = 1.0 / n
    g_zq, g = m.dec_model.backward(st["c_dq"], (cfg.w_q * scale) * st["r_q"])
    _accumulate(grads, g)
    g_zb, g = m.dec_data.backward(st["c_db"], (cfg.w_b * scale) * st["r_b"])
    _accumulate(grads, g)

    if cfg.data_coupling:
        g_zbh, g = m.dec_data.backward(st["c_sb"], (cfg.w_s * scale) * st["s_b"])
        _accumulate(grads, g)
        if m.identity_maps:
            g_zq = g_zq + g_zbh
        else:
            g_zq = g_zq + g_zbh @ m.latent_map
            grads["latent_map.M"] = g_zbh.T @ st["zq"]
    if cfg.model_coupling:
        g_zqh, g = m.dec_model.backward(st["c_sq"], (cfg.w_s * scale) * st["s_q"])
        _accumulate(grads, g)
        if m.identity_maps:
            g_zb = g_zb + g_zqh
        else:
            g_zb = g_zb + g_zqh @ m.latent_map_dagger
            grads["latent_map.M_dagger"] = g_zqh.T @ st["zb"]

    _, g = m.enc_model.backward(st["c_eq"], g_zq)
    _accumulate(grads, g)
    _, g = m.enc_data.backward(st["c_eb"], g_zb)
    _accumulate(grads, g)

    for name, value in m.named_params().items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return breakdown, grads


def evaluate_validation(
    m: PairedModel, dataset: PairedDataset, cfg: TrainConfig
) -> Dict[str, Any]:
    """
    Deterministic infer-mode pass over ``dataset``.

    Returns:
        dict with "loss" (mean LossBreakdown), "rre", "rma", "lfe_err" means and
        "records" (per-sample rre, rma, lfe_err)
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("validation split is empty")
    sums = dict.fromkeys(LOSS_FIELDS[:-1], 0.0)
    q_hat = []
    for start in range(0, n, cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        chunk_sums, _ = _forward_terms(
            m,
            m.standardize_models(dataset.models[sl]),
            m.standardize_data(dataset.data[sl]),
            cfg,
            "infer",
        )
        for k in sums:
            sums[k] += chunk_sums[k]
        q_hat.append(lfe(m, dataset.data[sl]))
    q_hat = np.concatenate(q_hat)

    points = metric_points(m, dataset.data, q_hat)
    records = [
        {"rre": p.rre, "rma": p.rma, "lfe_err": model_error(qh, q)}
        for p, qh, q in zip(points, q_hat, dataset.models)
    ]
    return {
        "loss": _combine(sums, n, cfg),
        "rre": float(np.mean([r["rre"] for r in records])),
        "rma": float(np.mean([r["rma"] for r in records])),
        "lfe_err": float(np.mean([r["lfe_err"] for r in records])),
        "records": records,
    }


def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    batches = [order[i : i + size] for i in range(0, len(order), size)]
    return [b for b in batches if len(b) >= 2] or batches


def _epoch_row(epoch: int, train: LossBreakdown, val: Dict[str, Any]) -> Dict[str, Any]:
    row = {"epoch": epoch, **train.as_dict()}
    row["val_total"] = val["loss"].total
    row["val_lfe_err"] = val["lfe_err"]
    return row


def train(
    dataset: PairedDataset,
    cfg: TrainConfig,
    net: NetworkShape,
    val: Optional[PairedDataset] = None,
) -> Tuple[PairedModel, List[Dict[str, Any]]]:
    """
    Shuffled minibatch Adam on the coupled loss.

    Args:
        dataset: training pairs (all of it is used; split tags are ignored)
        cfg: training settings
        net: architecture
        val: validation pairs used for the per-epoch record and best-model selection

    Returns:
        (model with the best validation total, log rows starting at epoch 0)

    Raises:
        TrainingDiverged: total above 10x its initial value for 3 epochs in a row
    """
    if val is None or len(val) == 0:
        raise ConfigError("training needs a nonempty validation set")
    if len(dataset) < cfg.batch_size:
        raise ConfigError(
            f"training set has {len(dataset)} samples, fewer than batch_size={cfg.batch_size}"
        )
    dtype = cfg.dtype
    models = dataset.models.astype(dtype, copy=False)
    data = dataset.data.astype(dtype, copy=False)

    m = build_paired_model(models.shape[1:], data.shape[1:], net, seed=cfg.seed, dtype=dtype)
    fit_normalization(m, models, data)
    params = m.named_params()
    adam = init_adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    def run_epoch(update: bool) -> LossBreakdown:
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        count = 0
        for idx in _batches(rng.permutation(len(models)), cfg.batch_size):
            if update:
                breakdown, grads = batch_loss_and_grads(m, models[idx], data[idx], cfg)
                adam_step(params, grads, adam)
            else:
                breakdown = batch_loss(m, models[idx], data[idx], cfg, mode="train")
            for k, v in breakdown.as_dict().items():
                sums[k] += v * len(idx)
            count += len(idx)
        return LossBreakdown(**{k: v / count for k, v in sums.items()})

    # epoch 0 uses batch statistics like the later epochs; running stats stay at their initial values
    stats = {k: v.copy() for k, v in m.named_stats().items()}
    initial = run_epoch(update=False)
    for k, v in m.named_stats().items():
        v[...] = stats[k]
    val_summary = evaluate_validation(m, val, cfg)
    log = [_epoch_row(0, initial, val_summary)]
    best_total = val_summary["loss"].total
    best = m.snapshot()
    logger.info("epoch 0: total %.6g, val %.6g", initial.total, best_total)

    above = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = run_epoch(update=True)
        val_summary = evaluate_validation(m, val, cfg)
        log.append(_epoch_row(epoch, epoch_loss, val_summary))
        logger.info(
            "epoch %d: total %.6g, val %.6g, lfe err %.4f",
            epoch,
            epoch_loss.total,
            val_summary["loss"].total,
            val_summary["lfe_err"],
        )

        if val_summary["loss"].total < best_total:
            best_total = val_summary["loss"].total
            best = m.snapshot()

        above = above + 1 if epoch_loss.total > DIVERGENCE_FACTOR * initial.total else 0
        if above >= DIVERGENCE_EPOCHS:
            raise TrainingDiverged(
                f"training total exceeded {DIVERGENCE_FACTOR:g}x its initial value "
                f"for {DIVERGENCE_EPOCHS} consecutive epochs (epoch {epoch})",
                log,
            )

    m.load_tensors(best)
    return m, log
