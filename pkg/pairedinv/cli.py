"""
Command-line entry point.

    pairedinv gen      build train/val/test/ood datasets
    pairedinv train    train the paired autoencoders, write checkpoint + log CSV
    pairedinv infer    likelihood-free estimates with RRE/RMA per sample
    pairedinv invert   one BI or LSI run with a trace CSV
    pairedinv suite    the four-configuration inversion table
    pairedinv ood      fit the validation density and score test/OOD samples
    pairedinv bounds   empirical constants and per-sample bound checks
    pairedinv img      dump a 2D slice of any container tensor as PGM

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from pairedinv import __version__
from pairedinv.config import (
    DESK_CONFIG,
    LOG_LEVEL,
    RunConfig,
    ensure_directories,
    load_run_config,
    set_threads,
)
from pairedinv.container import read_container, save_container
from pairedinv.datagen import ModelStyle, PairedDataset, build_dataset, load_dataset, save_dataset
from pairedinv.datagen import acquisition_summary
from pairedinv.diagnostics import (
    bound_report,
    estimate_constants,
    fit_density,
    metric_points,
    ood_auroc,
    ood_score,
    save_density,
)
from pairedinv.errors import ConfigError, PairedInvRuntimeError
from pairedinv.inversion import (
    InversionConfig,
    default_suite_configs,
    model_error,
    run_inversion,
    run_suite,
)
from pairedinv.networks import NetworkShape, load_checkpoint, lfe, save_checkpoint
from pairedinv.outputs import (
    SUITE_COLUMNS,
    TRACE_COLUMNS,
    TRAINING_LOG_COLUMNS,
    write_csv,
    write_pgm,
)
from pairedinv.training import TrainConfig, train
from pairedinv.wave import Grid2D, default_acquisition, get_solver_counter

logger = logging.getLogger("pairedinv")

OOD_COLUMNS = ["split", "index", "rre", "rma", "density", "percentile", "is_ood", "model_err"]
BOUND_COLUMNS = [
    "sample",
    "rre",
    "rma",
    "residual",
    "bound1",
    "holds1",
    "bound2",
    "holds2",
    "model_err",
    "p2_applicable",
    "p2_bound",
    "holds_p2",
    "theorem_bound",
    "holds_theorem",
]

_log_handler: Optional[logging.Handler] = None


class RunContext:
    """Everything a subcommand derives from the RunConfig and flags."""

    def __init__(self, cfg: RunConfig, args: argparse.Namespace):
        self.cfg = cfg
        if args.seed is not None:
            cfg.train.seed = args.seed
        self.seed = cfg.train.seed
        self.grid = Grid2D(cfg.grid.nz, cfg.grid.nx, cfg.grid.dz, cfg.grid.dx)
        self.style = ModelStyle.from_section(cfg.style, seed=self.seed)
        self.ood_style = ModelStyle.from_section(cfg.ood_style, seed=self.seed)
        c_max = max(cfg.style.c_max, cfg.ood_style.c_max)
        self.acq = default_acquisition(self.grid, cfg.acquisition, c_max)
        self.clamp = (cfg.style.c_min**2, cfg.style.c_max**2)
        self.dtype = np.dtype(cfg.train.precision)
        self.data_dir = Path(cfg.paths.data_dir)
        self.out_dir = Path(args.out) if args.out else Path(cfg.paths.out_dir)
        self.checkpoint = Path(args.checkpoint) if args.checkpoint else Path(cfg.paths.checkpoint)
        ensure_directories(self.out_dir)

    def dataset(self, split: str) -> PairedDataset:
        return load_dataset(self.data_dir / split)

    def model(self):
        return load_checkpoint(self.checkpoint)


def _setup_logging(out_dir: Path) -> None:
    global _log_handler
    root = logging.getLogger("pairedinv")
    if _log_handler is not None:
        root.removeHandler(_log_handler)
        _log_handler.close()
    _log_handler = logging.FileHandler(out_dir / "pairedinv.log")
    _log_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(_log_handler)
    root.setLevel(LOG_LEVEL)


def _banner(title: str) -> None:
    print("=" * 60)
    print(f"pairedinv - {title}")
    print("=" * 60)


class _SolverAudit:
    """Fails the command if the wave solver ran inside the block."""

    def __init__(self, command: str):
        self.command = command
        self.counter = get_solver_counter()

    def __enter__(self):
        self.before = self.counter.count
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None and self.counter.count != self.before:
            raise PairedInvRuntimeError(
                f"{self.command} invoked the wave solver "
                f"{self.counter.count - self.before} times"
            )
        return False


# Subcommands


def cmd_gen(ctx: RunContext, args) -> int:
    _banner("Generate datasets")
    tc = ctx.cfg.train
    plan = [
        ("train", tc.n_train, ctx.style),
        ("val", tc.n_val, ctx.style),
        ("test", tc.n_test, ctx.style),
        ("ood", tc.n_ood, ctx.ood_style),
    ]
    sigma = tc.sigma
    extra = {"acquisition": acquisition_summary(ctx.grid, ctx.acq)}
    for split, n, style in plan:
        print(f"Building {n} {split} pairs ({style.family})...")
        ds = build_dataset(
            n,
            style,
            ctx.grid,
            ctx.acq,
            sigma,
            ctx.seed,
            split=split,
            noise_level=tc.noise_level,
            dtype=ctx.dtype,
        )
        sigma = ds.noise_sigma
        manifest = save_dataset(ds, ctx.data_dir / split, extra=extra)
        print(f"  wrote {manifest}")
    print(f"\n✓ Datasets written to {ctx.data_dir} (noise sigma {sigma:.4g})")
    return 0


def cmd_train(ctx: RunContext, args) -> int:
    _banner("Train paired autoencoders")
    train_set = ctx.dataset("train")
    val_set = ctx.dataset("val")
    cfg = TrainConfig.from_section(ctx.cfg.train)
    net = NetworkShape.from_section(ctx.cfg.network)
    print(f"Training on {len(train_set)} pairs, validating on {len(val_set)}")
    m, log = train(train_set, cfg, net, val=val_set)
    save_checkpoint(m, ctx.checkpoint)
    write_csv(ctx.out_dir / "training_log.csv", log, TRAINING_LOG_COLUMNS)
    first, last = log[0], log[-1]
    print(f"  initial total: {first['total']:.6g}")
    print(f"  final total:   {last['total']:.6g}")
    print(f"  val lfe error: {last['val_lfe_err']:.4f}")
    print(f"\n✓ Checkpoint saved to {ctx.checkpoint}")
    return 0


def _load_inputs(ctx: RunContext, args):
    if args.input:
        tensors = read_container(args.input)[0]
        name = args.tensor or "data"
        if name not in tensors:
            raise ConfigError(f"{args.input} has no tensor named {name}")
        data = tensors[name]
        if data.ndim == 3:
            data = data[None]
        truth = tensors.get("models")
        return data, truth
    ds = ctx.dataset("test")
    return ds.data, ds.models


def cmd_infer(ctx: RunContext, args) -> int:
    _banner("Likelihood-free inference")
    m = ctx.model()
    data, truth = _load_inputs(ctx, args)
    with _SolverAudit("infer"):
        q_hat = lfe(m, data)
        points = metric_points(m, data, q_hat)
    rows = []
    for i, p in enumerate(points):
        err = model_error(q_hat[i], truth[i]) if truth is not None else float("nan")
        rows.append({"index": i, "rre": p.rre, "rma": p.rma, "lfe_err": err})
    write_csv(ctx.out_dir / "infer.csv", rows, ["index", "rre", "rma", "lfe_err"])
    save_container(ctx.out_dir / "infer_estimates.pairinv", {"q_hat": q_hat})
    print(f"  samples: {len(rows)}")
    print(f"  mean rre: {np.mean([r['rre'] for r in rows]):.4f}")
    print(f"  mean rma: {np.mean([r['rma'] for r in rows]):.4f}")
    print("\n✓ Wrote infer.csv (wave solver calls: 0)")
    return 0


def cmd_invert(ctx: RunContext, args) -> int:
    _banner("Inversion")
    m = ctx.model()
    test = ctx.dataset("test")
    if not 0 <= args.index < len(test):
        raise ConfigError(f"--index {args.index} outside the test set of {len(test)}")
    inv = ctx.cfg.inversion
    if args.alpha is not None:
        alpha = args.alpha
    else:
        alpha = inv.alpha if (args.method == "LSI" and args.start == "warm") else 0.0
    cfg = InversionConfig(
        method=args.method,
        start=args.start,
        alpha=alpha,
        iters=inv.iters,
        lr=inv.lr_bi if args.method == "BI" else inv.lr_lsi,
        clamp=ctx.clamp,
        anchor=args.anchor,
    )
    print(f"Running {cfg.label} (alpha={cfg.alpha:g}) on test sample {args.index}...")
    trace = run_inversion(
        cfg, test.data[args.index], m, ctx.acq, ctx.grid, q_true=test.models[args.index]
    )
    write_csv(ctx.out_dir / "invert_trace.csv", trace.rows(), TRACE_COLUMNS)
    save_container(ctx.out_dir / "invert_final.pairinv", {"model": trace.final_model})
    print(f"  misfit: {trace.rel_misfit[0]:.4f} -> {trace.rel_misfit[-1]:.4f}")
    print(f"  model error: {trace.model_err[0]:.4f} -> {trace.model_err[-1]:.4f}")
    print(f"  solver calls: {trace.solver_calls}")
    print("\n✓ Wrote invert_trace.csv")
    return 0


def cmd_suite(ctx: RunContext, args) -> int:
    _banner("Inversion suite")
    m = ctx.model()
    test = ctx.dataset("test")
    n = min(ctx.cfg.inversion.n_samples, len(test))
    cfgs = default_suite_configs(ctx.cfg.inversion, ctx.clamp)
    print(f"Running {len(cfgs)} configurations on {n} test samples...")
    rows, records = run_suite(test.models[:n], test.data[:n], m, cfgs, ctx.acq, ctx.grid)
    write_csv(ctx.out_dir / "suite.csv", rows, SUITE_COLUMNS)
    for r in records:
        r.update(method=cfgs[r["config"]].method, start=cfgs[r["config"]].start)
    write_csv(
        ctx.out_dir / "suite_samples.csv",
        records,
        ["method", "start", "sample", "misfit_init", "misfit_final", "err_init", "err_final"],
    )
    for row in rows:
        print(
            f"  {row['method']:>3} {row['start']:<5} alpha={row['alpha']:<4g} "
            f"err {row['err_init_mean']:.4f} -> {row['err_final_mean']:.4f} "
            f"(n={row['n_samples']})"
        )
    print("\n✓ Wrote suite.csv")
    return 0


def cmd_ood(ctx: RunContext, args) -> int:
    _banner("Out-of-distribution gating")
    m = ctx.model()
    diag = ctx.cfg.diagnostics
    val = ctx.dataset("val")
    groups = [("test", ctx.dataset("test")), ("ood", ctx.dataset("ood"))]
    with _SolverAudit("ood"):
        density = fit_density(
            metric_points(m, val.data, lfe(m, val.data)),
            n_bins=diag.n_bins,
            smooth_sigma=diag.smooth_sigma,
            threshold=diag.threshold,
        )
        rows = []
        scored = {}
        for split, ds in groups:
            q_hat = lfe(m, ds.data)
            points = metric_points(m, ds.data, q_hat)
            scored[split] = points
            for i, p in enumerate(points):
                score = ood_score(density, p)
                rows.append(
                    {
                        "split": split,
                        "index": i,
                        "rre": p.rre,
                        "rma": p.rma,
                        "density": score["density_value"],
                        "percentile": score["percentile"],
                        "is_ood": score["is_ood"],
                        "model_err": model_error(q_hat[i], ds.models[i]),
                    }
                )
        auroc = ood_auroc(density, scored["test"], scored["ood"])

    save_density(density, ctx.out_dir / "density.pairinv")
    write_csv(ctx.out_dir / "ood.csv", rows, OOD_COLUMNS)
    summary = {"auroc": auroc}
    for split, _ in groups:
        flags = [r["is_ood"] for r in rows if r["split"] == split]
        summary[f"flag_rate_{split}"] = float(np.mean(flags))
        summary[f"n_{split}"] = len(flags)
    write_csv(ctx.out_dir / "ood_summary.csv", [summary], list(summary))
    print(f"  AUROC: {auroc:.4f}")
    print(f"  flagged: test {summary['flag_rate_test']:.3f}, ood {summary['flag_rate_ood']:.3f}")
    print("\n✓ Wrote ood.csv and density.pairinv (wave solver calls: 0)")
    return 0


def cmd_bounds(ctx: RunContext, args) -> int:
    _banner("Bound report")
    m = ctx.model()
    val = ctx.dataset("val")
    test = ctx.dataset("test")
    consts = estimate_constants(
        m,
        val.models,
        val.data,
        ctx.acq,
        ctx.grid,
        pair_samples=ctx.cfg.diagnostics.pair_samples,
        seed=ctx.seed,
    )
    rows, summary = bound_report(
        m, test.models, test.data, consts, ctx.acq, ctx.grid, test.noise_sigma, ctx.clamp
    )
    write_csv(ctx.out_dir / "bounds.csv", rows, BOUND_COLUMNS)
    const_rows = [{"name": k, "value": v} for k, v in consts.as_dict().items()]
    write_csv(ctx.out_dir / "constants.csv", const_rows, ["name", "value"])
    write_csv(ctx.out_dir / "bounds_summary.csv", [summary], list(summary))
    print(f"  xi_M: {consts.xi_M:g}")
    print(f"  residual bound (triangle) holds: {summary['holds2_rate']:.3f}")
    print(f"  theorem bound holds: {summary['holds_theorem_rate']:.3f}")
    print("\n✓ Wrote bounds.csv")
    return 0


def cmd_img(args) -> int:
    if not args.input:
        raise ConfigError("img needs --input")
    tensors = read_container(args.input)[0]
    name = args.tensor or sorted(tensors)[0]
    if name not in tensors:
        raise ConfigError(f"{args.input} has no tensor named {name}")
    arr = tensors[name]
    index = tuple(int(s) for s in args.slice.split(",")) if args.slice else ()
    try:
        image = arr[index] if index else arr
    except IndexError as e:
        raise ConfigError(f"--slice {args.slice} does not fit tensor shape {arr.shape}") from e
    while image.ndim > 2 and not index:
        image = image[0]
    out_dir = Path(args.out) if args.out else Path(args.input).parent
    suffix = "_" + "_".join(str(i) for i in index) if index else ""
    path = write_pgm(out_dir / f"{name}{suffix}.pgm", image)
    print(f"✓ Wrote {path}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "invert": cmd_invert,
    "suite": cmd_suite,
    "ood": cmd_ood,
    "bounds": cmd_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairedinv",
        description="Paired autoencoders for likelihood-free wave-equation inversion",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DESK_CONFIG), help="RunConfig JSON file")
    common.add_argument("--checkpoint", default=None, help="checkpoint path override")
    common.add_argument("--out", default=None, help="output directory override")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--threads", type=int, default=None, help="worker cap")

    sub.add_parser("gen", parents=[common], help="generate datasets")
    sub.add_parser("train", parents=[common], help="train the paired autoencoders")
    p = sub.add_parser("infer", parents=[common], help="likelihood-free estimates")
    p.add_argument("--input", default=None, help="container with a data tensor")
    p.add_argument("--tensor", default=None, help="tensor name inside --input")
    p = sub.add_parser("invert", parents=[common], help="one BI or LSI run")
    p.add_argument("--index", type=int, default=0, help="test sample index")
    p.add_argument("--method", choices=["BI", "LSI"], default="LSI")
    p.add_argument("--start", choices=["basic", "warm"], default="warm")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--anchor", choices=["lfe", "origin"], default="lfe")
    sub.add_parser("suite", parents=[common], help="four-configuration inversion table")
    sub.add_parser("ood", parents=[common], help="density-based OOD gating")
    sub.add_parser("bounds", parents=[common], help="bound report")
    p = sub.add_parser("img", help="dump a 2D tensor slice as PGM")
    p.add_argument("--input", required=True, help="container file")
    p.add_argument("--tensor", default=None, help="tensor name")
    p.add_argument("--slice", default=None, help="leading indices, e.g. 0,3")
    p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.command == "img":
            return cmd_img(args)
        set_threads(args.threads)
        cfg = load_run_config(args.config)
        ctx = RunContext(cfg, args)
        _setup_logging(ctx.out_dir)
        logger.info("running %s with %s", args.command, args.config)
        return COMMANDS[args.command](ctx, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PairedInvRuntimeError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"runtime error: {e}", file=sys.stderr)
        return 3
