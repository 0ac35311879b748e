"""Flow-matching objective, Euler sampler, and the two-phase training loop.

Training regresses the constant velocity of the linear noising path
z_t = (1-t)x + t*eps, i.e. the target eps - x.  Sampling integrates the
learned field from t=1 down to t=0 with uniform Euler steps; the layout
condition is applied only during the first ceil(ratio * steps) steps (the
highest-noise portion of the trajectory), after which the base model runs
unconditioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .batching import LayoutBatch
from .config import SampleConfig, TrainConfig
from .errors import ConfigError
from .model import PromptBatch


def forward_noise(x: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """z_t = (1-t)x + t*eps with t broadcast over trailing dims."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(eps.shape)}")
    tt = t.view(-1, *([1] * (x.ndim - 1)))
    return (1.0 - tt) * x + tt * eps


def velocity_target(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - x


def layout_step_count(n_steps: int, layout_ratio: float) -> int:
    """Number of leading sampler steps that receive the layout condition.

    ceil(ratio * steps), with a tiny slack so exact products such as
    0.3 * 10 do not round up through float error, clamped to [0, steps].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0.0 <= layout_ratio <= 1.0:
        raise ValueError("layout_ratio must lie in [0, 1]")
    return min(n_steps, max(0, math.ceil(n_steps * layout_ratio - 1e-9)))


@dataclass
class TrainBatch:
    """One optimization step's inputs; t strictly inside (0, 1)."""

    images: torch.Tensor
    prompts: PromptBatch
    layouts: LayoutBatch | None
    t: torch.Tensor
    eps: torch.Tensor

    def __post_init__(self):
        if self.images.shape != self.eps.shape:
            raise ValueError("images and eps shapes differ")
        b = self.images.shape[0]
        if self.t.shape != (b,) or self.prompts.ids.shape[0] != b:
            raise ValueError("batch sizes disagree")
        if not bool(((self.t > 0) & (self.t < 1)).all()):
            raise ValueError("t must lie strictly inside (0, 1)")


def training_loss(model, batch: TrainBatch) -> torch.Tensor:
    """Mean squared error of the predicted velocity against eps - x."""
    z = forward_noise(batch.images, batch.eps, batch.t)
    v = model(z, batch.t, batch.prompts, batch.layouts)
    return ((v - velocity_target(batch.images, batch.eps)) ** 2).mean()


@torch.no_grad()
def sample(
    model,
    prompts: PromptBatch,
    layouts: LayoutBatch | None,
    cfg: SampleConfig,
    *,
    image_size: int | None = None,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    clamp: bool = True,
) -> torch.Tensor:
    """Euler-integrate the velocity field from seeded noise to an image.

    Steps run at t = 1, (S-1)/S, ..., 1/S; the layout enters the first
    layout_step_count(S, ratio) calls only.  Output is clamped to [0, 1]
    unless disabled (tests drive analytic fields through unclamped space).
    """
    cfg.validate()
    n_steps = cfg.steps
    n_layout = layout_step_count(n_steps, cfg.layout_ratio)
    if noise is not None:
        z = noise.clone()
    else:
        size = image_size if image_size is not None else model.cfg.image_size
        gen = generator if generator is not None else torch.Generator().manual_seed(cfg.seed)
        z = torch.randn(prompts.ids.shape[0], 3, size, size, generator=gen)
    b = z.shape[0]
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = torch.full((b,), (n_steps - i) / n_steps, dtype=z.dtype)
        cond = layouts if (i < n_layout and layouts is not None) else None
        v = model(z, t, prompts, cond)
        z = z - dt * v
    return z.clamp(0.0, 1.0) if clamp else z


@dataclass
class TensorizedScenes:
    """A dataset preloaded into dense tensors for index-select minibatching."""

    images: torch.Tensor  # (n, 3, H, W) in [0, 1]
    prompt_ids: torch.Tensor  # (n, L) long
    prompt_mask: torch.Tensor  # (n, L) bool
    layouts: LayoutBatch

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, index: torch.Tensor, *, with_layout: bool) -> tuple:
        prompts = PromptBatch(self.prompt_ids[index], self.prompt_mask[index])
        layouts = self.layouts.select(index) if with_layout else None
        return self.images[index], prompts, layouts


def _step_generator(seed: int, step: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed * 1_000_003 + step)
    return gen


def train(
    model,
    scenes: TensorizedScenes,
    cfg: TrainConfig,
    phase: str,
    *,
    start_step: int = 0,
    on_loss=None,
    on_checkpoint=None,
) -> list[float]:
    """Run optimization steps [start_step, cfg.steps) and return the losses.

    Phase "base" trains everything with no layout condition; phase "layout"
    freezes the base weights (and adapter bases) and trains only the layout
    modules, with the layout condition on.  Each step reseeds its RNG from
    (seed, step), so a resumed run draws the same minibatches the
    uninterrupted run would have.
    """
    if phase not in ("base", "layout"):
        raise ConfigError(f"unknown training phase {phase!r}")
    if phase == "layout":
        params = model.set_layout_phase()
    else:
        model.requires_grad_(True)
        params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=cfg.resolve_lr(phase))
    n = len(scenes)
    if n == 0:
        raise ConfigError("empty dataset")
    losses: list[float] = []
    for step in range(start_step, cfg.steps):
        lr = cfg.lr_at(step, phase)
        for group in opt.param_groups:
            group["lr"] = lr
        gen = _step_generator(cfg.seed, step)
        index = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        t = torch.rand(cfg.batch_size, generator=gen).clamp_(1e-5, 1.0 - 1e-5)
        images, prompts, layouts = scenes.batch(index, with_layout=phase == "layout")
        eps = torch.randn(images.shape, generator=gen)
        loss = training_loss(model, TrainBatch(images, prompts, layouts, t, eps))
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        losses.append(value)
        if on_loss is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            on_loss(step, value)
        if on_checkpoint is not None and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return losses
