"""Dot-product and gradient checks for the wave solver on small grids."""

import sys
from pathlib import Path

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.config import AcquisitionSection
from pairedinv.datagen import ModelStyle, sample_model
from pairedinv.gradcheck import gradient_check
from pairedinv.wave import (
    Grid2D,
    SolverCounter,
    VelocityModel,
    default_acquisition,
    dot_product_test,
    misfit_and_gradient,
    simulate,
)

GRID_SIZES = (16, 32)
SEEDS = range(5)
DOT_TOL = 1e-10
GRAD_TOL = 1e-4


def small_setup(n: int, seed: int):
    """A layered model and a two-source acquisition on an n x n grid."""
    grid = Grid2D(n, n, 10.0, 10.0)
    section = AcquisitionSection(
        n_sources=2, n_receivers=8, nt=96, record_every=6, f_peak=25.0, sponge_cells=6
    )
    acq = default_acquisition(grid, section, 4000.0)
    model = sample_model(ModelStyle(layers=(2, 4)), grid, np.random.default_rng(seed))
    return grid, acq, model


def check_gradient(grid, acq, model, seed: int) -> float:
    """Finite-difference check of the misfit gradient on interior cells."""
    rng = np.random.default_rng(seed + 100)
    perturbed = model.qsq * (1.0 + 0.05 * rng.standard_normal(model.qsq.shape))
    b_obs = simulate(VelocityModel(grid, perturbed), acq, SolverCounter())
    q = np.array(model.qsq, copy=True)
    patch = (slice(4, grid.nz - 4), slice(4, grid.nx - 4))

    def fn(params):
        full = q.copy()
        full[patch] = params["patch"]
        phi, grad = misfit_and_gradient(VelocityModel(grid, full), acq, b_obs, counter=SolverCounter())
        return phi, {"patch": grad[patch]}

    params = {"patch": np.ascontiguousarray(q[patch])}
    report = gradient_check(fn, params, tol=GRAD_TOL, n_samples=10, seed=seed, eps=1e-4)
    return report["max_rel_err"]


def main():
    """Run both checks and report the worst mismatch."""
    print("=" * 60)
    print("pairedinv - Adjoint Checks")
    print("=" * 60)

    failures = 0
    for n in GRID_SIZES:
        print(f"\n{n}x{n} grid:")
        for seed in SEEDS:
            grid, acq, model = small_setup(n, seed)
            dot = dot_product_test(model, acq, seed=seed, counter=SolverCounter())
            grad = check_gradient(grid, acq, model, seed)
            ok = dot <= DOT_TOL and grad <= GRAD_TOL
            failures += not ok
            mark = "✓" if ok else "✗"
            print(f"  {mark} seed {seed}: dot-product {dot:.2e}, gradient {grad:.2e}")

    if failures:
        print(f"\n✗ {failures} checks failed")
        return 1
    print("\n✓ All adjoint checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
