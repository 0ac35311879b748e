"""Dataclass configs with strict dict/JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dense_k: int = 2
    fourier_freqs: int = 4
    visual_patch: int = 8
    lora_rank: int = 8
    lora_alpha: float = 16.0
    max_instances: int = 24
    # ablation toggles
    use_assemble: bool = True
    use_cascade: bool = True
    use_lora: bool = True
    use_densesample: bool = True

    @property
    def grid(self) -> int:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        return self.image_size // self.patch_size

    @property
    def effective_k(self) -> int:
        """Corner-sampling density; the no-densesample ablation collapses to 1."""
        return self.dense_k if self.use_densesample else 1

    def validate(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        _ = self.grid
        for name in ("width", "depth", "heads", "mlp_ratio", "dense_k",
                     "fourier_freqs", "visual_patch", "lora_rank", "max_instances"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float | None = None  # None -> per-phase default
    lr_schedule: str = "constant"  # "constant" | "cosine"
    lr_final_ratio: float = 0.05  # cosine floor as a fraction of the peak lr
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 5000

    # defaults used when lr is left unset
    BASE_LR = 1e-3
    LAYOUT_LR = 3e-4

    def resolve_lr(self, phase: str) -> float:
        if self.lr is not None:
            return self.lr
        return self.BASE_LR if phase == "base" else self.LAYOUT_LR

    def lr_at(self, step: int, phase: str) -> float:
        """Learning rate for a given optimization step.

        Cosine anneals from the peak to peak * lr_final_ratio over
        [0, steps - 1]; the schedule depends only on (step, steps), so a
        resumed run applies the same rates the uninterrupted run would have.
        """
        peak = self.resolve_lr(phase)
        if self.lr_schedule == "constant":
            return peak
        span = max(1, self.steps - 1)
        progress = min(1.0, max(0.0, step / span))
        floor = peak * self.lr_final_ratio
        return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError(
                f"steps and batch_size must be >= 1, got {self.steps}, {self.batch_size}"
            )
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}"
            )
        if not (0.0 <= self.lr_final_ratio <= 1.0):
            raise ConfigError(f"lr_final_ratio must lie in [0, 1], got {self.lr_final_ratio}")


@dataclass
class SampleConfig:
    steps: int = 50
    layout_ratio: float = 0.3
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"sampling steps must be >= 1, got {self.steps}")
        if not (0.0 <= self.layout_ratio <= 1.0):
            raise ConfigError(f"layout_ratio must lie in [0, 1], got {self.layout_ratio}")


@dataclass
class DataConfig:
    num_images: int = 256
    seed: int = 0
    image_size: int = 64
    n_min: int = 1
    n_max: int = 4
    min_side: int = 12
    max_side: int = 24
    iou_cap: float = 0.3
    occlusion_cap: float = 0.1
    same_color_gap: int = 1
    min_gap: int = 1  # required gap between every box pair; 0 allows overlap

    def validate(self):
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ConfigError(f"need 1 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if not (2 <= self.min_side <= self.max_side <= self.image_size):
            raise ConfigError(
                f"need 2 <= min_side <= max_side <= image_size, got "
                f"[{self.min_side}, {self.max_side}] at {self.image_size}"
            )
        if not (0.0 <= self.iou_cap <= 1.0 and 0.0 <= self.occlusion_cap <= 1.0):
            raise ConfigError("caps must lie in [0, 1]")
        if self.min_gap < 0 or self.same_color_gap < 0:
            raise ConfigError("gaps must be >= 0")


def sparse_data_config(**overrides) -> DataConfig:
    return dataclasses.replace(DataConfig(), **overrides)


def dense_data_config(**overrides) -> DataConfig:
    base = DataConfig(n_min=8, n_max=16, min_side=6, max_side=16,
                      iou_cap=0.5, occlusion_cap=0.3, min_gap=0)
    return dataclasses.replace(base, **overrides)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.sample.validate()
        self.data.validate()
        if self.data.n_max > self.model.max_instances:
            raise ConfigError(
                f"data n_max {self.data.n_max} exceeds model max_instances "
                f"{self.model.max_instances}"
            )
        if self.data.image_size != self.model.image_size:
            raise ConfigError(
                f"data image_size {self.data.image_size} != model image_size "
                f"{self.model.image_size}"
            )


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            kwargs[name] = _from_dict(_resolve(ftype), value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


_NESTED = {"model": ModelConfig, "train": TrainConfig, "sample": SampleConfig, "data": DataConfig}


def _resolve(ftype):
    if isinstance(ftype, str):
        return {c.__name__: c for c in (ModelConfig, TrainConfig, SampleConfig, DataConfig)}.get(
            ftype, ftype
        )
    return ftype


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(data) - set(_NESTED)
    if unknown:
        raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
    kwargs = {key: _from_dict(cls, data[key]) for key, cls in _NESTED.items() if key in data}
    return RunConfig(**kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return run_config_from_dict(raw)


def save_run_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
