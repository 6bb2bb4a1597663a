"""Run the full desk experiment: gen, train, infer, suite, ood and bounds."""

import argparse
import sys
import time
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from pairedinv.cli import main as cli_main
from pairedinv.config import DESK_CONFIG

STAGES = ["gen", "train", "infer", "suite", "ood", "bounds"]


def main():
    """Run every stage in order, stopping at the first failure."""
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(DESK_CONFIG), help="RunConfig JSON file")
    parser.add_argument("--threads", type=int, default=None, help="worker cap")
    parser.add_argument("--skip", nargs="*", default=[], choices=STAGES, help="stages to skip")
    args = parser.parse_args()

    print("=" * 60)
    print("pairedinv - Desk Pipeline")
    print("=" * 60)
    print(f"Config: {args.config}")

    for stage in STAGES:
        if stage in args.skip:
            print(f"\n- skipping {stage}")
            continue
        argv = [stage, "--config", args.config]
        if args.threads is not None:
            argv += ["--threads", str(args.threads)]
        start = time.time()
        code = cli_main(argv)
        elapsed = time.time() - start
        if code != 0:
            print(f"\n✗ {stage} failed with exit code {code}")
            return code
        print(f"  ({stage} took {elapsed:.1f}s)")

    print("\n✓ Pipeline complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
