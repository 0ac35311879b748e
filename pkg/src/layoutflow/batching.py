"""Padded tensor collation of per-example layouts for batched forwards."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CropRegion, bbox_to_crop, dense_sample, density_map, fourier_dim, fourier_embed
from .layout import ImageContent, Layout, TextContent
from .vocab import VOCAB_SIZE


@dataclass
class LayoutBatch:
    """Instance conditioning for a batch, padded to the widest layout.

    Padding rows carry zero masks everywhere; their crop indices point at
    token 0 but never contribute because their deltas are masked.
    """

    n_max: int
    inst_mask: torch.Tensor   # (B, N) bool
    ids: torch.Tensor         # (B, N, Li) long
    ids_mask: torch.Tensor    # (B, N, Li) bool
    box_feats: torch.Tensor   # (B, N, F)
    visual: torch.Tensor | None    # (B, N, 3, P, P) or None when all-text
    is_visual: torch.Tensor | None  # (B, N) bool
    crop_idx: torch.Tensor    # (B, N, Lc) long, flat row-major token indices
    cell_mask: torch.Tensor   # (B, N, Lc) bool
    density: torch.Tensor     # (B, T) per-cell covering count
    crops: list[list[CropRegion]]

    def __len__(self) -> int:
        return self.inst_mask.shape[0]

    def select(self, index: torch.Tensor) -> "LayoutBatch":
        """Row subset preserving padding geometry (used for minibatching)."""
        rows = index.tolist()
        return LayoutBatch(
            n_max=self.n_max,
            inst_mask=self.inst_mask[index],
            ids=self.ids[index],
            ids_mask=self.ids_mask[index],
            box_feats=self.box_feats[index],
            visual=self.visual[index] if self.visual is not None else None,
            is_visual=self.is_visual[index] if self.is_visual is not None else None,
            crop_idx=self.crop_idx[index],
            cell_mask=self.cell_mask[index],
            density=self.density[index],
            crops=[self.crops[r] for r in rows],
        )


def collate_layouts(
    layouts: list[Layout],
    grid: int,
    dense_k: int,
    n_freqs: int,
    visual_patch: int,
    dtype: torch.dtype = torch.float32,
) -> LayoutBatch:
    """Build the padded LayoutBatch for a list of layouts on a grid x grid
    token field."""
    b = len(layouts)
    t = grid * grid
    n_max = max((len(l) for l in layouts), default=0)
    crops_per = [
        [bbox_to_crop(inst.bbox, grid, grid) for inst in layout] for layout in layouts
    ]
    if n_max == 0:
        f = fourier_dim(dense_k, n_freqs)
        return LayoutBatch(
            n_max=0,
            inst_mask=torch.zeros(b, 0, dtype=torch.bool),
            ids=torch.zeros(b, 0, 1, dtype=torch.long),
            ids_mask=torch.zeros(b, 0, 1, dtype=torch.bool),
            box_feats=torch.zeros(b, 0, f, dtype=dtype),
            visual=None,
            is_visual=None,
            crop_idx=torch.zeros(b, 0, 1, dtype=torch.long),
            cell_mask=torch.zeros(b, 0, 1, dtype=torch.bool),
            density=torch.zeros(b, t, dtype=dtype),
            crops=crops_per,
        )

    li = 1
    any_visual = False
    for layout in layouts:
        for inst in layout:
            if isinstance(inst.content, TextContent):
                _check_ids(inst.content.ids)
                li = max(li, len(inst.content.ids))
            else:
                any_visual = True
    lc = max(crop.n_cells for crops in crops_per for crop in crops) if any(crops_per) else 1

    ids = torch.zeros(b, n_max, li, dtype=torch.long)
    ids_mask = torch.zeros(b, n_max, li, dtype=torch.bool)
    inst_mask = torch.zeros(b, n_max, dtype=torch.bool)
    fdim = fourier_dim(dense_k, n_freqs)
    box_feats = torch.zeros(b, n_max, fdim, dtype=dtype)
    crop_idx = torch.zeros(b, n_max, lc, dtype=torch.long)
    cell_mask = torch.zeros(b, n_max, lc, dtype=torch.bool)
    density = torch.zeros(b, t, dtype=dtype)
    visual = None
    is_visual = None
    if any_visual:
        visual = torch.zeros(b, n_max, 3, visual_patch, visual_patch, dtype=dtype)
        is_visual = torch.zeros(b, n_max, dtype=torch.bool)

    for bi, layout in enumerate(layouts):
        for ni, inst in enumerate(layout):
            inst_mask[bi, ni] = True
            feats = fourier_embed(dense_sample(inst.bbox, dense_k), n_freqs)
            box_feats[bi, ni] = torch.from_numpy(feats).to(dtype)
            if isinstance(inst.content, TextContent):
                n = len(inst.content.ids)
                ids[bi, ni, :n] = torch.tensor(inst.content.ids, dtype=torch.long)
                ids_mask[bi, ni, :n] = True
            else:
                is_visual[bi, ni] = True
                visual[bi, ni] = _resize(
                    torch.as_tensor(inst.content.pixels, dtype=dtype), visual_patch
                )
            cells = crops_per[bi][ni].token_indices(grid)
            crop_idx[bi, ni, : len(cells)] = torch.tensor(cells, dtype=torch.long)
            cell_mask[bi, ni, : len(cells)] = True
        if layout:
            counts = density_map(crops_per[bi], grid, grid)
            density[bi] = torch.from_numpy(counts.reshape(-1)).to(dtype)

    return LayoutBatch(
        n_max=n_max,
        inst_mask=inst_mask,
        ids=ids,
        ids_mask=ids_mask,
        box_feats=box_feats,
        visual=visual,
        is_visual=is_visual,
        crop_idx=crop_idx,
        cell_mask=cell_mask,
        density=density,
        crops=crops_per,
    )


def _resize(pixels: torch.Tensor, size: int) -> torch.Tensor:
    if pixels.shape[1] == size and pixels.shape[2] == size:
        return pixels
    return torch.nn.functional.interpolate(
        pixels.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    )[0]


def _check_ids(ids):
    for i in ids:
        if not (0 <= int(i) < VOCAB_SIZE):
            raise ValueError(f"content id {i} outside vocabulary of size {VOCAB_SIZE}")
