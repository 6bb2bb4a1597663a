"""
Paired autoencoders: model-side E_q/D_q, data-side E_b/D_b and latent maps M, M+.

Encoders run conv_cc -> resnet blocks -> avgpool2 per level (no pooling on the
last level), then conv_cc to ``head_width`` channels, an affine layer to the
latent and a per-feature norm. Decoders mirror this with an affine layer,
conv_cc, resnet blocks and upsample2 per level, and a final conv_cc to the
output channels. Data tensors use sources as channels.

Networks operate on standardised tensors:
    model:  (q - q_shift) / q_scale, shape (N, 1, nz, nx)
    data:   b / b_scale,             shape (N, n_s, n_r, n_t)
The public functions below take and return physical units.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from pairedinv.config import CHECKPOINT_FORMAT
from pairedinv.container import read_container, save_container
from pairedinv.errors import ConfigError, ContractError
from pairedinv.layers import LayerSpec, LayerStack

logger = logging.getLogger(__name__)

STACK_NAMES = ("enc_data", "dec_data", "enc_model", "dec_model")


@dataclass
class NetworkShape:
    """Architecture hyperparameters shared by both autoencoders."""

    latent_dim: int = 64
    widths: List[int] = field(default_factory=lambda: [8, 8, 16])
    dec_widths: List[int] = field(default_factory=lambda: [16, 8, 4])
    head_width: int = 32
    blocks_per_level: int = 3
    step_h: float = 0.5
    learned_maps: bool = False

    @classmethod
    def from_section(cls, section) -> "NetworkShape":
        return cls(
            latent_dim=section.latent_dim,
            widths=list(section.widths),
            dec_widths=list(section.dec_widths),
            head_width=section.head_width,
            blocks_per_level=section.blocks_per_level,
            step_h=section.step_h,
            learned_maps=section.learned_maps,
        )


def _coarse_extent(extent: int, levels: int) -> int:
    factor = 2 ** (levels - 1)
    if extent % factor:
        raise ConfigError(f"extent {extent} is not divisible by {factor} for {levels} levels")
    return extent // factor


def encoder_specs(channels: int, spatial: Tuple[int, int], net: NetworkShape) -> List[LayerSpec]:
    levels = len(net.widths)
    h, w = (_coarse_extent(s, levels) for s in spatial)
    specs = []
    ch = channels
    for level, width in enumerate(net.widths):
        specs.append(LayerSpec("conv_cc", ch, width))
        ch = width
        specs += [
            LayerSpec("resnet_block", ch, ch, step_h=net.step_h)
            for _ in range(net.blocks_per_level)
        ]
        if level < levels - 1:
            specs.append(LayerSpec("avgpool2"))
    specs.append(LayerSpec("conv_cc", ch, net.head_width))
    specs.append(LayerSpec("affine", net.head_width * h * w, net.latent_dim))
    specs.append(LayerSpec("norm", net.latent_dim))
    return specs


def decoder_specs(channels: int, spatial: Tuple[int, int], net: NetworkShape) -> List[LayerSpec]:
    levels = len(net.dec_widths)
    h, w = (_coarse_extent(s, levels) for s in spatial)
    specs = [
        LayerSpec(
            "affine",
            net.latent_dim,
            net.head_width * h * w,
            out_shape=(net.head_width, h, w),
        )
    ]
    ch = net.head_width
    for level, width in enumerate(net.dec_widths):
        if level > 0:
            specs.append(LayerSpec("upsample2"))
        specs.append(LayerSpec("conv_cc", ch, width))
        ch = width
        specs += [
            LayerSpec("resnet_block", ch, ch, step_h=net.step_h)
            for _ in range(net.blocks_per_level)
        ]
    specs.append(LayerSpec("conv_cc", ch, channels))
    return specs


class PairedModel:
    """
    The six mappings plus architecture metadata.

    ``latent_map``/``latent_map_dagger`` are None for identity maps, otherwise
    latent_dim x latent_dim matrices acting as z -> M z.
    """

    def __init__(
        self,
        enc_data: LayerStack,
        dec_data: LayerStack,
        enc_model: LayerStack,
        dec_model: LayerStack,
        arch_meta: Dict[str, Any],
        latent_map: Optional[np.ndarray] = None,
        latent_map_dagger: Optional[np.ndarray] = None,
    ):
        self.enc_data = enc_data
        self.dec_data = dec_data
        self.enc_model = enc_model
        self.dec_model = dec_model
        self.arch_meta = arch_meta
        self.latent_map = latent_map
        self.latent_map_dagger = latent_map_dagger

    @property
    def latent_dim(self) -> int:
        return int(self.arch_meta["latent_dim"])

    @property
    def model_shape(self) -> Tuple[int, int]:
        return tuple(self.arch_meta["model_shape"])

    @property
    def data_shape(self) -> Tuple[int, int, int]:
        return tuple(self.arch_meta["data_shape"])

    @property
    def dtype(self):
        return np.dtype(self.arch_meta["dtype"])

    @property
    def identity_maps(self) -> bool:
        return self.latent_map is None

    @property
    def stacks(self) -> List[LayerStack]:
        return [self.enc_data, self.dec_data, self.enc_model, self.dec_model]

    # Standardisation

    def standardize_models(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=self.dtype)
        if q.shape[1:] != self.model_shape:
            raise ContractError(f"model batch shape {q.shape} does not match {self.model_shape}")
        shift = self.dtype.type(self.arch_meta["q_shift"])
        scale = self.dtype.type(self.arch_meta["q_scale"])
        return ((q - shift) / scale)[:, None]

    def unstandardize_models(self, y: np.ndarray) -> np.ndarray:
        shift = self.dtype.type(self.arch_meta["q_shift"])
        scale = self.dtype.type(self.arch_meta["q_scale"])
        return y[:, 0] * scale + shift

    def standardize_data(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=self.dtype)
        if b.shape[1:] != self.data_shape:
            raise ContractError(f"data batch shape {b.shape} does not match {self.data_shape}")
        return b / self.dtype.type(self.arch_meta["b_scale"])

    def unstandardize_data(self, y: np.ndarray) -> np.ndarray:
        return y * self.dtype.type(self.arch_meta["b_scale"])

    def set_normalization(self, q_shift: float, q_scale: float, b_scale: float) -> None:
        if q_scale <= 0 or b_scale <= 0:
            raise ConfigError("normalization scales must be positive")
        self.arch_meta.update(q_shift=float(q_shift), q_scale=float(q_scale), b_scale=float(b_scale))

    # Parameters

    def named_params(self) -> Dict[str, np.ndarray]:
        params = {}
        for stack in self.stacks:
            params.update(stack.named_params())
        if not self.identity_maps:
            params["latent_map.M"] = self.latent_map
            params["latent_map.M_dagger"] = self.latent_map_dagger
        return params

    def named_stats(self) -> Dict[str, np.ndarray]:
        stats = {}
        for stack in self.stacks:
            stats.update(stack.named_stats())
        return stats

    def num_params(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for stack in self.stacks:
            stack.load_named(tensors)
        if not self.identity_maps:
            self.latent_map = np.array(tensors["latent_map.M"], copy=True)
            self.latent_map_dagger = np.array(tensors["latent_map.M_dagger"], copy=True)

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and statistic."""
        out = {k: v.copy() for k, v in self.named_params().items()}
        out.update({k: v.copy() for k, v in self.named_stats().items()})
        return out


def build_paired_model(
    model_shape: Tuple[int, int],
    data_shape: Tuple[int, int, int],
    net: NetworkShape,
    seed: int = 0,
    dtype=np.float32,
) -> PairedModel:
    """Create a randomly initialised PairedModel."""
    rng = np.random.default_rng(seed)
    n_s = data_shape[0]
    data_spatial = tuple(data_shape[1:])
    enc_data = LayerStack.from_specs("enc_data", encoder_specs(n_s, data_spatial, net), rng, dtype)
    dec_data = LayerStack.from_specs("dec_data", decoder_specs(n_s, data_spatial, net), rng, dtype)
    enc_model = LayerStack.from_specs("enc_model", encoder_specs(1, model_shape, net), rng, dtype)
    dec_model = LayerStack.from_specs("dec_model", decoder_specs(1, model_shape, net), rng, dtype)

    arch_meta = {
        "model_shape": list(model_shape),
        "data_shape": list(data_shape),
        "latent_dim": net.latent_dim,
        "widths": list(net.widths),
        "dec_widths": list(net.dec_widths),
        "head_width": net.head_width,
        "blocks_per_level": net.blocks_per_level,
        "step_h": net.step_h,
        "learned_maps": net.learned_maps,
        "dtype": np.dtype(dtype).name,
        "q_shift": 0.0,
        "q_scale": 1.0,
        "b_scale": 1.0,
    }
    maps = (None, None)
    if net.learned_maps:
        eye = np.eye(net.latent_dim, dtype=dtype)
        maps = (eye.copy(), eye.copy())
    model = PairedModel(enc_data, dec_data, enc_model, dec_model, arch_meta, *maps)
    logger.info("built paired model with %d parameters", model.num_params())
    return model


def fit_normalization(m: PairedModel, models: np.ndarray, data: np.ndarray) -> None:
    """Set standardisation constants from training tensors."""
    q = np.asarray(models, dtype=np.float64)
    b = np.asarray(data, dtype=np.float64)
    q_scale = float(q.std()) or 1.0
    b_scale = float(np.sqrt(np.mean(b * b))) or 1.0
    m.set_normalization(float(q.mean()), q_scale, b_scale)


# Mappings in physical units. Single samples and batches are both accepted.


def _batched(x: np.ndarray, sample_ndim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ContractError(f"expected {sample_ndim}- or {sample_ndim + 1}-dimensional input, got {x.shape}")


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


def encode_model(m: PairedModel, q: np.ndarray) -> np.ndarray:
    q, single = _batched(q, 2)
    z, _ = m.enc_model.forward(m.standardize_models(q), "infer")
    return _unbatch(z, single)


def decode_model(m: PairedModel, z: np.ndarray) -> np.ndarray:
    z, single = _batched(z, 1)
    _check_latent(m, z)
    y, _ = m.dec_model.forward(z.astype(m.dtype, copy=False), "infer")
    return _unbatch(m.unstandardize_models(y), single)


def encode_data(m: PairedModel, b: np.ndarray) -> np.ndarray:
    b, single = _batched(b, 3)
    z, _ = m.enc_data.forward(m.standardize_data(b), "infer")
    return _unbatch(z, single)


def decode_data(m: PairedModel, z: np.ndarray) -> np.ndarray:
    z, single = _batched(z, 1)
    _check_latent(m, z)
    y, _ = m.dec_data.forward(z.astype(m.dtype, copy=False), "infer")
    return _unbatch(m.unstandardize_data(y), single)


def _check_latent(m: PairedModel, z: np.ndarray) -> None:
    if z.shape[-1] != m.latent_dim:
        raise ContractError(f"latent length {z.shape[-1]} != {m.latent_dim}")


def latent_map(m: PairedModel, z_q: np.ndarray) -> np.ndarray:
    """z_b_hat = M z_q"""
    _check_latent(m, np.asarray(z_q))
    if m.identity_maps:
        return np.array(z_q, copy=True)
    return z_q @ m.latent_map.T


def latent_map_dagger(m: PairedModel, z_b: np.ndarray) -> np.ndarray:
    """z_q_hat = M+ z_b"""
    _check_latent(m, np.asarray(z_b))
    if m.identity_maps:
        return np.array(z_b, copy=True)
    return z_b @ m.latent_map_dagger.T


def lfe(m: PairedModel, b: np.ndarray) -> np.ndarray:
    """Likelihood-free estimate q_hat = D_q(M+ E_b(b)); never calls the wave solver."""
    return decode_model(m, latent_map_dagger(m, encode_data(m, b)))


def surrogate_forward(m: PairedModel, q: np.ndarray) -> np.ndarray:
    """b_tilde = D_b(M E_q(q))"""
    return decode_data(m, latent_map(m, encode_model(m, q)))


def decode_model_vjp(
    m: PairedModel, z: np.ndarray
) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """
    D_q(z) for one latent vector together with its vector-Jacobian product.

    Returns:
        (q, pullback) where pullback(grad_q) is the gradient with respect to z
    """
    z = np.asarray(z)
    _check_latent(m, z)
    y, caches = m.dec_model.forward(z[None].astype(m.dtype, copy=False), "frozen")
    q = m.unstandardize_models(y)[0]
    scale = m.dtype.type(m.arch_meta["q_scale"])

    def pullback(grad_q: np.ndarray) -> np.ndarray:
        g = (np.asarray(grad_q, dtype=m.dtype) * scale)[None, None]
        grad_z, _ = m.dec_model.backward(caches, g)
        return grad_z[0]

    return q, pullback


# Checkpoints


def save_checkpoint(m: PairedModel, path) -> None:
    save_container(path, m.snapshot(), meta={"format": CHECKPOINT_FORMAT, "arch": m.arch_meta})


def load_checkpoint(path) -> PairedModel:
    """
    Rebuild a PairedModel from a checkpoint written by save_checkpoint.

    Raises:
        ConfigError: the file is not a pairedinv checkpoint
    """
    tensors, meta = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    arch = meta["arch"]
    net = NetworkShape(
        latent_dim=arch["latent_dim"],
        widths=arch["widths"],
        dec_widths=arch["dec_widths"],
        head_width=arch["head_width"],
        blocks_per_level=arch["blocks_per_level"],
        step_h=arch["step_h"],
        learned_maps=arch["learned_maps"],
    )
    m = build_paired_model(
        tuple(arch["model_shape"]), tuple(arch["data_shape"]), net, dtype=np.dtype(arch["dtype"])
    )
    m.arch_meta = dict(arch)
    m.load_tensors(tensors)
    return m
