"""Differentiable layers with hand-written backward passes.

Tensors are numpy arrays laid out as (batch, channels, height, width), or
(batch, features) for affine/norm layers acting on flat vectors. Every layer
is a pure function of (params, input) except that ``train`` mode updates the
running normalization statistics.

Modes:
    train   batch statistics, running stats updated, backward allowed
    infer   running statistics, no cache kept, backward refused
    frozen  running statistics, cache kept, backward allowed (gradients with
            respect to inputs of a trained network)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from pairedinv.errors import ContractError, NumericError

logger = logging.getLogger(__name__)

KINDS = (
    "conv3x3",
    "conv_cc",
    "silu",
    "norm",
    "avgpool2",
    "upsample2",
    "affine",
    "resnet_block",
)
MODES = ("train", "infer", "frozen")

NORM_MOMENTUM = 0.9
NORM_EPS = 1e-5
DEFAULT_STEP_H = 0.5


@dataclass
class LayerSpec:
    """Static description of one layer."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    step_h: float = DEFAULT_STEP_H
    out_shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"Unknown layer kind: {self.kind}")
        if self.kind in ("silu", "avgpool2", "upsample2"):
            return
        if self.in_channels < 1:
            raise ContractError(f"{self.kind} needs in_channels >= 1")
        if self.kind in ("conv3x3", "norm", "resnet_block"):
            if self.out_channels in (0, self.in_channels):
                self.out_channels = self.in_channels
            else:
                raise ContractError(f"{self.kind} must preserve the channel count")
        elif self.out_channels < 1:
            raise ContractError(f"{self.kind} needs out_channels >= 1")
        if self.out_shape is not None:
            if self.kind != "affine":
                raise ContractError("out_shape only applies to affine layers")
            self.out_shape = tuple(int(s) for s in self.out_shape)
            if int(np.prod(self.out_shape)) != self.out_channels:
                raise ContractError("affine out_shape must hold out_channels values")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "step_h": self.step_h,
            "out_shape": list(self.out_shape) if self.out_shape else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        out_shape = data.get("out_shape")
        return cls(
            kind=data["kind"],
            in_channels=data["in_channels"],
            out_channels=data["out_channels"],
            step_h=data["step_h"],
            out_shape=tuple(out_shape) if out_shape else None,
        )


@dataclass
class LayerState:
    """Trainable parameters, normalization statistics and last gradients."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    norm_stats: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class LayerCache:
    kind: str
    mode: str
    x_shape: Tuple[int, ...]
    data: Dict[str, Any] = field(default_factory=dict)


# Primitive operations


def _conv3x3_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, wd), dtype=xp.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di : di + h, dj : dj + wd]
    cols = cols.reshape(n, c * 9, h, wd)
    wr = w.reshape(w.shape[0], c * 9)
    y = np.tensordot(wr, cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y), cols


def _conv3x3_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray):
    n, o, h, wd = g.shape
    c = w.shape[1]
    wr = w.reshape(o, c * 9)
    grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])).reshape(w.shape)
    grad_b = g.sum(axis=(0, 2, 3))
    grad_cols = np.tensordot(wr, g, axes=([0], [1])).transpose(1, 0, 2, 3)
    grad_cols = grad_cols.reshape(n, c, 9, h, wd)
    grad_xp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
    for di in range(3):
        for dj in range(3):
            grad_xp[:, :, di : di + h, dj : dj + wd] += grad_cols[:, :, di * 3 + dj]
    return grad_xp[:, :, 1:-1, 1:-1], grad_w, grad_b


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _norm_forward(x, gamma, beta, stats, mode):
    axes = (0,) + tuple(range(2, x.ndim))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = ((x - _channel_view(mean, x.ndim)) ** 2).mean(axis=axes)
        stats["running_mean"] *= NORM_MOMENTUM
        stats["running_mean"] += (1.0 - NORM_MOMENTUM) * mean
        stats["running_var"] *= NORM_MOMENTUM
        stats["running_var"] += (1.0 - NORM_MOMENTUM) * var
    else:
        mean = stats["running_mean"]
        var = stats["running_var"]
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    y = xhat * _channel_view(gamma, x.ndim) + _channel_view(beta, x.ndim)
    return y, {"xhat": xhat, "inv_std": inv_std}


def _norm_backward(g, cache, gamma, mode):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    axes = (0,) + tuple(range(2, g.ndim))
    grad_gamma = (g * xhat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    dxhat = g * _channel_view(gamma, g.ndim)
    if mode == "train":
        count = g.size // g.shape[1]
        sum_d = _channel_view(dxhat.sum(axis=axes), g.ndim)
        sum_dx = _channel_view((dxhat * xhat).sum(axis=axes), g.ndim)
        grad_x = (
            _channel_view(inv_std, g.ndim) / count * (count * dxhat - sum_d - xhat * sum_dx)
        )
    else:
        grad_x = dxhat * _channel_view(inv_std, g.ndim)
    return grad_x, grad_gamma, grad_beta


def _silu_forward(x):
    s = expit(x)
    return x * s, s


def _silu_backward(g, x, s):
    return g * (s + x * s * (1.0 - s))


def _avgpool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"avgpool2 needs even spatial extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# Layers


class Layer:
    """One layer: spec plus state, with forward and backward passes."""

    def __init__(
        self,
        spec: LayerSpec,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        self.spec = spec
        self.state = LayerState()
        self._init_params(rng if rng is not None else np.random.default_rng(0), dtype)

    def _init_params(self, rng: np.random.Generator, dtype) -> None:
        spec = self.spec
        cin, cout = spec.in_channels, spec.out_channels

        def uniform(shape, fan_in):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        p = self.state.params
        if spec.kind in ("conv3x3", "conv_cc"):
            p["weight"] = uniform((cout, cin, 3, 3), cin * 9)
            p["bias"] = uniform((cout,), cin * 9)
        elif spec.kind == "affine":
            p["weight"] = uniform((cout, cin), cin)
            p["bias"] = uniform((cout,), cin)
        elif spec.kind == "norm":
            self._init_norm(cin, dtype)
        elif spec.kind == "resnet_block":
            p["K1"] = uniform((cin, cin, 3, 3), cin * 9)
            p["K2"] = uniform((cin, cin, 3, 3), cin * 9)
            self._init_norm(cin, dtype)
        self.state.grads = {k: np.zeros_like(v) for k, v in p.items()}

    def _init_norm(self, channels: int, dtype) -> None:
        self.state.params["gamma"] = np.ones(channels, dtype=dtype)
        self.state.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state.norm_stats["running_mean"] = np.zeros(channels, dtype=dtype)
        self.state.norm_stats["running_var"] = np.ones(channels, dtype=dtype)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.state.params

    def astype(self, dtype) -> None:
        for group in (self.state.params, self.state.norm_stats, self.state.grads):
            for k in group:
                group[k] = group[k].astype(dtype)

    def _check_input(self, x: np.ndarray) -> None:
        spec = self.spec
        if spec.kind == "affine":
            if x.ndim < 2 or int(np.prod(x.shape[1:])) != spec.in_channels:
                raise ContractError(
                    f"affine expects {spec.in_channels} features per sample, "
                    f"got shape {x.shape}"
                )
            return
        if spec.kind == "norm":
            if x.ndim < 2 or x.shape[1] != spec.in_channels:
                raise ContractError(
                    f"norm expects {spec.in_channels} channels, got shape {x.shape}"
                )
            return
        if x.ndim != 4:
            raise ContractError(f"{spec.kind} expects (N, C, H, W), got shape {x.shape}")
        if spec.kind in ("conv3x3", "conv_cc", "resnet_block"):
            if x.shape[1] != spec.in_channels:
                raise ContractError(
                    f"{spec.kind} expects {spec.in_channels} channels, got {x.shape[1]}"
                )

    def forward(self, x: np.ndarray, mode: str = "infer") -> Tuple[np.ndarray, LayerCache]:
        if mode not in MODES:
            raise ContractError(f"Unknown mode: {mode}")
        self._check_input(x)
        keep = mode != "infer"
        cache = LayerCache(kind=self.spec.kind, mode=mode, x_shape=x.shape)
        p = self.state.params
        kind = self.spec.kind

        if kind in ("conv3x3", "conv_cc"):
            y, cols = _conv3x3_forward(x, p["weight"], p["bias"])
            if keep:
                cache.data["cols"] = cols
        elif kind == "silu":
            y, s = _silu_forward(x)
            if keep:
                cache.data.update(x=x, s=s)
        elif kind == "norm":
            y, norm_cache = _norm_forward(
                x, p["gamma"], p["beta"], self.state.norm_stats, mode
            )
            if keep:
                cache.data.update(norm_cache)
        elif kind == "avgpool2":
            y = _avgpool2_forward(x)
        elif kind == "upsample2":
            y = _upsample2_forward(x)
        elif kind == "affine":
            xf = x.reshape(x.shape[0], -1)
            y = xf @ p["weight"].T + p["bias"]
            if self.spec.out_shape is not None:
                y = y.reshape((x.shape[0],) + self.spec.out_shape)
            if keep:
                cache.data["xf"] = xf
        else:
            y = self._resnet_forward(x, mode, cache.data if keep else None)

        if not np.all(np.isfinite(y)):
            raise NumericError(f"Non-finite output from {kind} layer")
        return y, cache

    def _resnet_forward(self, x, mode, store):
        p = self.state.params
        a, cols2 = _conv3x3_forward(x, p["K2"], None)
        n, norm_cache = _norm_forward(a, p["gamma"], p["beta"], self.state.norm_stats, mode)
        s, sig = _silu_forward(n)
        c, cols1 = _conv3x3_forward(s, p["K1"], None)
        if store is not None:
            store.update(cols2=cols2, norm=norm_cache, n=n, sig=sig, cols1=cols1)
        return x - self.spec.step_h * c

    def backward(
        self, cache: LayerCache, grad_y: np.ndarray
    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        if cache.mode == "infer":
            raise ContractError("backward needs a cache from train or frozen mode")
        if cache.kind != self.spec.kind:
            raise ContractError(f"cache from {cache.kind} passed to {self.spec.kind}")
        p = self.state.params
        kind = self.spec.kind
        grads: Dict[str, np.ndarray] = {}

        if kind in ("conv3x3", "conv_cc"):
            grad_x, grads["weight"], grads["bias"] = _conv3x3_backward(
                grad_y, cache.data["cols"], p["weight"]
            )
        elif kind == "silu":
            grad_x = _silu_backward(grad_y, cache.data["x"], cache.data["s"])
        elif kind == "norm":
            grad_x, grads["gamma"], grads["beta"] = _norm_backward(
                grad_y, cache.data, p["gamma"], cache.mode
            )
        elif kind == "avgpool2":
            grad_x = _avgpool2_backward(grad_y)
        elif kind == "upsample2":
            grad_x = _upsample2_backward(grad_y)
        elif kind == "affine":
            g = grad_y.reshape(grad_y.shape[0], -1)
            grads["weight"] = g.T @ cache.data["xf"]
            grads["bias"] = g.sum(axis=0)
            grad_x = (g @ p["weight"]).reshape(cache.x_shape)
        else:
            grad_x = self._resnet_backward(cache, grad_y, grads)

        self.state.grads = grads
        return grad_x, grads

    def _resnet_backward(self, cache, g, grads):
        p = self.state.params
        d = cache.data
        gc = -self.spec.step_h * g
        gs, grads["K1"], _ = _conv3x3_backward(gc, d["cols1"], p["K1"])
        gn = _silu_backward(gs, d["n"], d["sig"])
        ga, grads["gamma"], grads["beta"] = _norm_backward(gn, d["norm"], p["gamma"], cache.mode)
        gx, grads["K2"], _ = _conv3x3_backward(ga, d["cols2"], p["K2"])
        return g + gx


def layer_forward(layer: Layer, x: np.ndarray, mode: str = "infer"):
    """Run one layer forward; returns (y, cache)."""
    return layer.forward(x, mode)


def layer_backward(layer: Layer, cache: LayerCache, grad_y: np.ndarray):
    """Backpropagate through one layer; returns (grad_x, grad_params)."""
    return layer.backward(cache, grad_y)


def resnet_block_forward(layer: Layer, x: np.ndarray, mode: str = "infer"):
    """y = x - h * K1(silu(norm(K2(x))))"""
    if layer.spec.kind != "resnet_block":
        raise ContractError(f"expected a resnet_block layer, got {layer.spec.kind}")
    return layer.forward(x, mode)


class LayerStack:
    """Ordered list of layers with stack-level forward and backward."""

    def __init__(self, name: str, layers: List[Layer]):
        self.name = name
        self.layers = layers

    @classmethod
    def from_specs(
        cls,
        name: str,
        specs: List[LayerSpec],
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "LayerStack":
        return cls(name, [Layer(spec, rng, dtype) for spec in specs])

    def forward(self, x: np.ndarray, mode: str = "infer"):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode)
            caches.append(cache)
        return x, caches

    def backward(self, caches: List[LayerCache], grad_y: np.ndarray):
        """
        Backpropagate through the whole stack.

        Returns:
            (grad_x, grads) with grads keyed like named_params()
        """
        if len(caches) != len(self.layers):
            raise ContractError("cache list does not match the stack")
        grads = {}
        g = grad_y
        for index in reversed(range(len(self.layers))):
            g, layer_grads = self.layers[index].backward(caches[index], g)
            for pname, value in layer_grads.items():
                grads[f"{self.name}.{index}.{pname}"] = value
        return g, grads

    def named_params(self) -> Dict[str, np.ndarray]:
        return {
            f"{self.name}.{i}.{pname}": value
            for i, layer in enumerate(self.layers)
            for pname, value in layer.state.params.items()
        }

    def named_stats(self) -> Dict[str, np.ndarray]:
        return {
            f"{self.name}.{i}.{sname}": value
            for i, layer in enumerate(self.layers)
            for sname, value in layer.state.norm_stats.items()
        }

    def load_named(self, tensors: Dict[str, np.ndarray]) -> None:
        """Copy parameters and stats from a name -> array mapping."""
        for i, layer in enumerate(self.layers):
            for group in (layer.state.params, layer.state.norm_stats):
                for key in group:
                    full = f"{self.name}.{i}.{key}"
                    if full not in tensors:
                        raise ContractError(f"missing tensor {full}")
                    if tensors[full].shape != group[key].shape:
                        raise ContractError(f"shape mismatch for {full}")
                    group[key] = np.array(tensors[full], copy=True)

    def astype(self, dtype) -> None:
        for layer in self.layers:
            layer.astype(dtype)

    def num_params(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def specs(self) -> List[Dict[str, Any]]:
        return [layer.spec.to_dict() for layer in self.layers]
