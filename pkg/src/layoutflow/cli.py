"""Command-line interface: gen-data | train | sample | eval | ablate.

Every command writes the effective (defaults-resolved) run config as
config.json inside its output directory, and is bit-deterministic given
the same config and seed.  Exit codes: 0 success, 2 configuration error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .assemble import CascadedModel
from .batching import collate_layouts
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_state_into,
    save_model_checkpoint,
)
from .config import (
    RunConfig,
    dense_data_config,
    load_run_config,
    run_config_from_dict,
    save_run_config,
    to_dict,
)
from .data import (
    annotation_to_layout,
    dataset_to_tensors,
    float_to_image,
    load_dataset,
    read_annotation,
    write_dataset,
)
from .diffusion import sample, train
from .errors import ConfigError, LayoutFlowError
from .geometry import BBox
from .lgs import Condition, description_labels, evaluate_images, format_table
from .model import collate_prompts
from .vocab import encode_prompt

from PIL import Image

EVAL_SAMPLE_CHUNK = 16
_TOGGLES = ("assemble", "cascade", "lora", "densesample")
_BASE_COMPAT_KEYS = ("image_size", "patch_size", "width", "depth", "heads", "mlp_ratio")


# -- shared plumbing ---------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    for toggle in _TOGGLES:
        if getattr(args, f"no_{toggle}", False):
            setattr(cfg.model, f"use_{toggle}", False)
    if getattr(args, "layout_ratio", None) is not None:
        cfg.sample.layout_ratio = args.layout_ratio
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective_config(cfg: RunConfig, out: Path):
    cfg.validate()
    save_run_config(cfg, out / "config.json")


def _conditions_from_annotation(ann) -> list[Condition]:
    w, h = ann.image_info.width, ann.image_info.height
    conditions = []
    for info in ann.instance_info:
        x1, y1, x2, y2 = info.bbox
        color, shape = description_labels(info.description)
        conditions.append(Condition(BBox(x1 / w, y1 / h, (x2 - x1) / w, (y2 - y1) / h), color, shape))
    return conditions


def _model_from_checkpoint(path: str) -> tuple[CascadedModel, RunConfig, dict]:
    tensors, meta = load_checkpoint(path)
    run_cfg = run_config_from_dict(meta["config"])
    with_layout = any(
        name.startswith(("assemble.", "layout_encoder.")) for name in tensors
    )
    model = CascadedModel(run_cfg.model, with_layout=with_layout)
    load_state_into(model, tensors)
    return model, run_cfg, meta


def _check_base_compat(meta_config: dict, cfg: RunConfig, source: str):
    base_model = run_config_from_dict(meta_config).model
    for key in _BASE_COMPAT_KEYS:
        ours, theirs = getattr(cfg.model, key), getattr(base_model, key)
        if ours != theirs:
            raise ConfigError(
                f"{source}: base checkpoint has model.{key}={theirs}, run config has {ours}"
            )


def _sample_dataset_images(model, annotations, cfg: RunConfig):
    """One sampled image per annotation, deterministic under cfg.sample.seed."""
    images = []
    generator = torch.Generator().manual_seed(cfg.sample.seed)
    for start in range(0, len(annotations), EVAL_SAMPLE_CHUNK):
        chunk = annotations[start : start + EVAL_SAMPLE_CHUNK]
        prompts = collate_prompts([encode_prompt(a.global_caption) for a in chunk])
        layouts = collate_layouts(
            [annotation_to_layout(a, cfg.model.max_instances) for a in chunk],
            grid=cfg.model.grid,
            dense_k=cfg.model.effective_k,
            n_freqs=cfg.model.fourier_freqs,
            visual_patch=cfg.model.visual_patch,
        )
        batch = sample(model, prompts, layouts, cfg.sample, generator=generator)
        images.extend(float_to_image(batch[i]) for i in range(batch.shape[0]))
    return images


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.dense:
        cfg.data = dense_data_config(seed=cfg.data.seed, num_images=cfg.data.num_images)
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.num_images is not None:
        cfg.data.num_images = args.num_images
    out = _out_dir(args)
    n = write_dataset(out, cfg.data)
    # config lands last so its presence marks a complete dataset
    _write_effective_config(cfg, out)
    print(f"wrote {n} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    phase = args.phase
    out = _out_dir(args)
    _write_effective_config(cfg, out)
    scenes = dataset_to_tensors(load_dataset(args.data), cfg.model)

    start_step = 0
    torch.manual_seed(cfg.train.seed)
    if phase == "base":
        model = CascadedModel(cfg.model, with_layout=False)
    else:
        model = CascadedModel(cfg.model, with_layout=True)
        if args.resume is None:
            if args.base_checkpoint is None:
                raise ConfigError("layout phase requires --base-checkpoint")
            tensors, meta = load_checkpoint(args.base_checkpoint)
            _check_base_compat(meta["config"], cfg, args.base_checkpoint)
            load_state_into(model, tensors, allow_missing=True)
            model.init_assemble_from_base()
    if args.resume is not None:
        tensors, meta = load_checkpoint(args.resume)
        if meta["phase"] != phase:
            raise ConfigError(
                f"--resume checkpoint is from phase {meta['phase']!r}, not {phase!r}"
            )
        load_state_into(model, tensors)
        start_step = int(meta["step"])

    (out / "checkpoints").mkdir(exist_ok=True)
    config_dict = to_dict(cfg)

    def on_checkpoint(step: int):
        save_model_checkpoint(
            out / "checkpoints" / f"step_{step:07d}.ckpt",
            model,
            step=step,
            phase=phase,
            config=config_dict,
        )

    log_path = out / "loss_log.csv"
    mode = "a" if (args.resume is not None and log_path.exists()) else "w"
    # line-buffered so an interrupted run keeps its loss history up to the
    # last logged step (resume appends from there)
    with open(log_path, mode, encoding="utf-8", buffering=1) as log:
        train(
            model,
            scenes,
            cfg.train,
            phase,
            start_step=start_step,
            on_loss=lambda step, value: log.write(f"{step},{value:.8e}\n"),
            on_checkpoint=on_checkpoint,
        )
    save_model_checkpoint(
        out / "model.ckpt", model, step=cfg.train.steps, phase=phase, config=config_dict
    )
    print(f"trained {phase} phase to step {cfg.train.steps}; checkpoint at {out / 'model.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, cfg, _meta = _model_from_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    if args.steps is not None:
        cfg.sample.steps = args.steps
    if args.layout_ratio is not None:
        cfg.sample.layout_ratio = args.layout_ratio
    ann = read_annotation(args.annotation)
    out = _out_dir(args)
    _write_effective_config(cfg, out)
    prompts = collate_prompts([encode_prompt(ann.global_caption)])
    layouts = collate_layouts(
        [annotation_to_layout(ann, cfg.model.max_instances)],
        grid=cfg.model.grid,
        dense_k=cfg.model.effective_k,
        n_freqs=cfg.model.fourier_freqs,
        visual_patch=cfg.model.visual_patch,
    )
    image = sample(model, prompts, layouts, cfg.sample)
    path = out / "sample.png"
    Image.fromarray(float_to_image(image[0])).save(path)
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    if args.steps is not None:
        cfg.sample.steps = args.steps
    pairs = load_dataset(args.data)
    annotations = [ann for _, ann in pairs]
    if args.checkpoint is not None:
        model, ckpt_cfg, _meta = _model_from_checkpoint(args.checkpoint)
        ckpt_cfg.sample = cfg.sample
        cfg = ckpt_cfg
        images = _sample_dataset_images(model, annotations, cfg)
    else:
        images = [img for img, _ in pairs]  # ground-truth bypass
    out = _out_dir(args)
    _write_effective_config(cfg, out)
    records = [(img, _conditions_from_annotation(ann)) for img, ann in zip(images, annotations)]
    report = evaluate_images(records)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(format_table(report))
    return 0


_ABLATION_ROWS = (
    ("full", ()),
    ("no-assemble", ("assemble",)),
    ("no-cascade", ("cascade",)),
    ("no-lora", ("lora",)),
    ("no-densesample", ("densesample",)),
)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.base_checkpoint is None:
        raise ConfigError("ablate requires --base-checkpoint")
    base_tensors, base_meta = load_checkpoint(args.base_checkpoint)
    _check_base_compat(base_meta["config"], cfg, args.base_checkpoint)
    train_pairs = load_dataset(args.data)
    eval_pairs = load_dataset(args.eval_data if args.eval_data else args.data)
    annotations = [ann for _, ann in eval_pairs]
    out = _out_dir(args)
    _write_effective_config(cfg, out)

    rows = []
    for name, disabled in _ABLATION_ROWS:
        row_cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, **{f"use_{t}": False for t in disabled})
        )
        # the no-densesample row changes the box-feature width, so the
        # training tensors are rebuilt per row
        scenes = dataset_to_tensors(train_pairs, row_cfg.model)
        torch.manual_seed(row_cfg.train.seed)
        model = CascadedModel(row_cfg.model, with_layout=True)
        load_state_into(model, base_tensors, allow_missing=True)
        model.init_assemble_from_base()
        train(model, scenes, row_cfg.train, "layout")
        images = _sample_dataset_images(model, annotations, row_cfg)
        records = [
            (img, _conditions_from_annotation(ann)) for img, ann in zip(images, annotations)
        ]
        report = evaluate_images(records)
        rows.append(
            {
                "name": name,
                "toggles": {f"use_{t}": getattr(row_cfg.model, f"use_{t}") for t in _TOGGLES},
                "miou": report.miou,
                "color_acc": report.color_acc,
                "shape_acc": report.shape_acc,
                "gated_count": report.gated_count,
            }
        )
        print(f"{name:<16} mIoU={report.miou:.4f} color={report.color_acc:.4f} "
              f"shape={report.shape_acc:.4f}")
    (out / "ablation.json").write_text(json.dumps({"rows": rows}, indent=2) + "\n")
    print(f"wrote {out / 'ablation.json'}")
    return 0


# -- parser ------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, *, toggles: bool):
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True, help="output directory")
    if toggles:
        for toggle in _TOGGLES:
            parser.add_argument(f"--no-{toggle}", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutflow", description="Layout-conditioned flow-matching toy pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a shapes dataset")
    _add_common(p, toggles=False)
    p.add_argument("--dense", action="store_true", help="use the dense-scene preset")
    p.add_argument("--num-images", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one phase")
    _add_common(p, toggles=True)
    p.add_argument("--phase", choices=("base", "layout"), required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--base-checkpoint", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one image from an annotation")
    _add_common(p, toggles=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--layout-ratio", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="layout-grounding score over a dataset")
    _add_common(p, toggles=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None, help="omit to score ground-truth renders")
    p.add_argument("--steps", type=int, default=None, help="sampling steps")
    p.add_argument("--layout-ratio", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score component-toggle rows")
    _add_common(p, toggles=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--base-checkpoint", default=None)
    p.add_argument("--steps", type=int, default=None, help="layout-phase steps per row")
    p.add_argument("--layout-ratio", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LayoutFlowError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
