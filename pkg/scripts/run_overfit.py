#!/usr/bin/env python3
"""Two-phase overfit experiment on held-out layouts.

Protocol (pinned; see tests/test_acceptance.py):

* data: 256 sparse training scenes (seed 0) and 32 held-out scenes
  (seed 777) at 32x32 with 1..3 instances of side 8..13
* model: 32x32 images, patch 2, width 64, depth 4 (config defaults
  otherwise); patch 2 matters -- 4px cells are too coarse to carve
  out 8..13px boxes, and the placement score saturates far lower
* training: 6000 base steps, then 22000 layout steps from the base
  checkpoint, lr 1e-3 with cosine decay, batch 8
* scoring: 50 sampling steps on the held-out layouts -- conditioned
  with layout active for all steps (ev_r10), conditioned with the
  0.3 ratio (ev_r03, informational), and unconditioned from the
  bare base checkpoint (ev_unc)
* ablation arm: the same layout phase with --no-assemble, scored at
  ratio 1.0 (ev_noasm_r10)

Each stage is skipped when its output already exists, so a finished
run acts as a cache and an interrupted one resumes at the failed
stage.  Runtime from scratch is roughly 2.5 hours on one CPU core
(the two 22k-step layout phases dominate).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from layoutflow.cli import main as cli_main

CONFIG = {
    "model": {"image_size": 32, "patch_size": 2},
    "train": {"lr": 0.001, "lr_schedule": "cosine", "batch_size": 8,
              "checkpoint_every": 2000, "log_every": 500},
    "data": {"image_size": 32, "n_min": 1, "n_max": 3, "min_side": 8, "max_side": 13},
}
TRAIN_SCENES, TRAIN_SEED = 256, 0
EVAL_SCENES, EVAL_SEED = 32, 777
BASE_STEPS = 6000
LAYOUT_STEPS = 22000

EVAL_ARMS = (
    # (output dir, checkpoint dir, layout ratio or None for base/unconditioned)
    ("ev_r10", "layout", 1.0),
    ("ev_r03", "layout", 0.3),
    ("ev_unc", "base", None),
    ("ev_noasm_r10", "layout_noasm", 1.0),
)


def _run(argv: list[str]) -> None:
    rc = cli_main(argv)
    if rc != 0:
        raise SystemExit(f"command failed ({rc}): layoutflow {' '.join(argv)}")


def _stage(done: Path, argv: list[str]) -> None:
    if done.exists():
        print(f"[skip] {done} exists")
        return
    print(f"[run ] layoutflow {' '.join(argv)}")
    _run(argv)


def run(root: Path) -> dict[str, dict]:
    """Materialize every artifact under root and return the eval reports."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    if not cfg.exists():
        cfg.write_text(json.dumps(CONFIG, indent=2) + "\n")
    c = ["--config", str(cfg)]

    _stage(root / "train" / "config.json",
           ["gen-data", *c, "--num-images", str(TRAIN_SCENES), "--seed", str(TRAIN_SEED),
            "--out", str(root / "train")])
    _stage(root / "eval" / "config.json",
           ["gen-data", *c, "--num-images", str(EVAL_SCENES), "--seed", str(EVAL_SEED),
            "--out", str(root / "eval")])
    _stage(root / "base" / "model.ckpt",
           ["train", *c, "--phase", "base", "--steps", str(BASE_STEPS),
            "--data", str(root / "train"), "--out", str(root / "base")])
    _stage(root / "layout" / "model.ckpt",
           ["train", *c, "--phase", "layout", "--steps", str(LAYOUT_STEPS),
            "--data", str(root / "train"),
            "--base-checkpoint", str(root / "base" / "model.ckpt"),
            "--out", str(root / "layout")])
    _stage(root / "layout_noasm" / "model.ckpt",
           ["train", *c, "--no-assemble", "--phase", "layout", "--steps", str(LAYOUT_STEPS),
            "--data", str(root / "train"),
            "--base-checkpoint", str(root / "base" / "model.ckpt"),
            "--out", str(root / "layout_noasm")])
    for name, ckpt_dir, ratio in EVAL_ARMS:
        argv = ["eval", *c, "--data", str(root / "eval"),
                "--checkpoint", str(root / ckpt_dir / "model.ckpt"),
                "--out", str(root / name)]
        if ratio is not None:
            argv += ["--layout-ratio", str(ratio)]
        _stage(root / name / "report.json", argv)

    reports = {
        name: json.loads((root / name / "report.json").read_text())
        for name, _, _ in EVAL_ARMS
    }
    summary = {name: {k: rep[k] for k in ("miou", "color_acc", "shape_acc", "gated_count")}
               for name, rep in reports.items()}
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return reports


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--artifacts", default="runs/overfit",
                        help="output root (default: runs/overfit)")
    args = parser.parse_args(argv)
    reports = run(Path(args.artifacts))
    print(f"{'arm':<14} {'mIoU':>8} {'color':>8} {'shape':>8}")
    for name, rep in reports.items():
        print(f"{name:<14} {rep['miou']:>8.4f} {rep['color_acc']:>8.4f} {rep['shape_acc']:>8.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
