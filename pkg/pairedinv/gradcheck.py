"""Finite-difference gradient checking."""

from typing import Callable, Dict, Tuple

import numpy as np

from pairedinv.errors import ConfigError

Params = Dict[str, np.ndarray]
ValueAndGrad = Callable[[Params], Tuple[float, Params]]

# Evaluation roundoff in f, in multiples of eps_mach * |f|
ROUNDOFF_FACTOR = 16.0


def gradient_check(
    fn: ValueAndGrad,
    params: Params,
    tol: float = 1e-5,
    n_samples: int = 20,
    seed: int = 0,
    eps: float = 1e-6,
    atol: float = 1e-6,
    floor: float = 1e-2,
) -> Dict[str, object]:
    """
    Compare analytic gradients against central differences.

    ``fn`` maps a params dict to (value, grads). A random subsample of
    coordinates (``n_samples`` per tensor, or all of them when the tensor is
    smaller) is perturbed by ``eps * max(1, |theta|)`` in both directions.
    Parameters are restored after each perturbation. Entries far below the largest
    gradient of their tensor are compared against ``floor`` times that gradient.
    The difference quotient itself carries roundoff of about
    eps_mach * |f| / step; that much mismatch (times ``ROUNDOFF_FACTOR``) is not
    counted, so large losses and exactly-zero gradients do not fail.

    Args:
        fn: deterministic scalar function returning its own gradient
        params: name -> array; perturbed in place and restored
        tol: relative error tolerance
        n_samples: coordinates checked per tensor
        seed: coordinate sampling seed
        eps: relative finite-difference step
        atol: absolute floor for the relative-error denominator
        floor: per-tensor floor, as a fraction of the largest |gradient|

    Returns:
        dict with max_rel_err, pass, checked (number of coordinates compared)
    """
    if tol <= 0:
        raise ConfigError("gradient_check tol must be positive")

    rng = np.random.default_rng(seed)
    _, grads = fn(params)
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}

    max_rel = 0.0
    checked = 0
    for name in sorted(params):
        theta = params[name]
        flat = theta.reshape(-1)
        if not np.shares_memory(flat, theta):
            raise ConfigError(f"gradient_check needs contiguous parameter {name}")
        count = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        analytic_flat = grads[name].reshape(-1)
        eps_mach = float(np.finfo(theta.dtype).eps)
        tensor_floor = max(atol, floor * float(np.max(np.abs(analytic_flat), initial=0.0)))
        for index in coords:
            original = flat[index]
            step = eps * max(1.0, abs(float(original)))
            flat[index] = original + step
            plus, _ = fn(params)
            flat[index] = original - step
            minus, _ = fn(params)
            flat[index] = original

            numeric = (float(plus) - float(minus)) / (2.0 * step)
            analytic = float(analytic_flat[index])
            noise = ROUNDOFF_FACTOR * eps_mach * max(abs(float(plus)), abs(float(minus))) / step
            denom = max(abs(analytic), abs(numeric), tensor_floor)
            max_rel = max(max_rel, max(0.0, abs(analytic - numeric) - noise) / denom)
            checked += 1

    return {"max_rel_err": max_rel, "pass": bool(max_rel <= tol), "checked": checked}
