#!/usr/bin/env python3
"""Five-row component ablation (full / no-assemble / no-cascade /
no-lora / no-densesample) on the overfit experiment's datasets.

Each row retrains the layout phase from the shared base checkpoint,
so the default 4000 steps per row keeps the sweep to roughly an hour;
rows are undertrained relative to scripts/run_overfit.py and the
table is meant for direction checks, not absolute numbers.

Requires a finished (or at least base-trained) run_overfit.py tree.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from layoutflow.cli import main as cli_main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--overfit", default="runs/overfit",
                        help="artifact root produced by scripts/run_overfit.py")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--steps", type=int, default=4000,
                        help="layout-phase steps per row (default: 4000)")
    parser.add_argument("--layout-ratio", type=float, default=1.0)
    args = parser.parse_args(argv)

    overfit = Path(args.overfit)
    base = overfit / "base" / "model.ckpt"
    if not base.is_file():
        parser.error(f"{base} not found; run scripts/run_overfit.py first")
    return cli_main([
        "ablate",
        "--config", str(overfit / "cfg.json"),
        "--data", str(overfit / "train"),
        "--eval-data", str(overfit / "eval"),
        "--base-checkpoint", str(base),
        "--steps", str(args.steps),
        "--layout-ratio", str(args.layout_ratio),
        "--out", args.out,
    ])


if __name__ == "__main__":
    raise SystemExit(main())
