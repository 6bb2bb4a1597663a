"""Adam optimizer over dictionaries of named numpy parameters."""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from pairedinv.errors import ConfigError, ContractError, NumericError


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one Adam run."""

    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("Adam eps must be positive")
        if self.lr <= 0:
            raise ConfigError("Adam lr must be positive")


def init_adam(
    params: Dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Create an AdamState with zero moments shaped like ``params``."""
    return AdamState(
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: name -> parameter array, updated in place
        grads: name -> gradient array with matching shapes
        state: moments and hyperparameters, updated in place

    Returns:
        (params, state)

    Raises:
        NumericError: a gradient holds NaN or Inf; nothing is modified
        KeyError: a gradient names no parameter; nothing is modified
    """
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {unknown}")
    for name, value in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for {name}")
        if grads[name].shape != value.shape:
            raise ContractError(
                f"gradient shape {grads[name].shape} does not match {name} {value.shape}"
            )
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"Non-finite gradient for {name}; step refused")

    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    step_size = state.lr / bc1

    for name in params:
        g = grads[name]
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        m = state.first_moment[name]
        v = state.second_moment[name]

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        denom = np.sqrt(v * (1.0 / bc2)) + state.eps
        params[name] -= (step_size * m / denom).astype(params[name].dtype, copy=False)

    return params, state
