"""Layout encoder: one conditioning token per instance.

Text instances: mean-pooled vocabulary embeddings concatenated with Fourier
features of densely sampled box corners, pushed through a two-layer MLP.
Visual instances: the crop is bilinearly resized to a small square, flattened
through its own MLP, and the box enters through an additive embedding so
position is always encoded.
"""

from __future__ import annotations

import torch
from torch import nn

from .geometry import BBox, dense_sample, fourier_dim, fourier_embed
from .layout import ImageContent, Layout, TextContent
from .vocab import VOCAB_SIZE


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, d_out))


class LayoutEncoder(nn.Module):
    def __init__(
        self,
        width: int,
        dense_k: int = 2,
        n_freqs: int = 4,
        visual_patch: int = 8,
        vocab_size: int = VOCAB_SIZE,
    ):
        super().__init__()
        self.width = width
        self.dense_k = dense_k
        self.n_freqs = n_freqs
        self.visual_patch = visual_patch
        self.vocab_size = vocab_size
        self.box_dim = fourier_dim(dense_k, n_freqs)
        hidden = 2 * width
        self.embed = nn.Embedding(vocab_size, width)
        self.text_mlp = _mlp(width + self.box_dim, hidden, width)
        self.box_mlp = _mlp(self.box_dim, hidden, width)
        self.visual_mlp = _mlp(3 * visual_patch * visual_patch, hidden, width)
        nn.init.normal_(self.embed.weight, std=0.02)

    @property
    def _dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def box_features(self, box: BBox) -> torch.Tensor:
        """Fourier features of the dense corner grid, shape (box_dim,)."""
        feats = fourier_embed(dense_sample(box, self.dense_k), self.n_freqs)
        return torch.from_numpy(feats).to(self._dtype)

    def forward_rows(
        self,
        ids: torch.Tensor,           # (M, L) long, 0-padded
        ids_mask: torch.Tensor,      # (M, L) bool
        box_feats: torch.Tensor,     # (M, box_dim)
        visual: torch.Tensor | None = None,    # (M, 3, P, P)
        is_visual: torch.Tensor | None = None,  # (M,) bool
    ) -> torch.Tensor:
        """Encode M instances at once; returns (M, width).

        Each output row depends only on its own inputs.
        """
        emb = self.embed(ids) * ids_mask.unsqueeze(-1).to(self._dtype)  # (M, L, D)
        denom = ids_mask.sum(dim=1, keepdim=True).clamp(min=1).to(self._dtype)
        pooled = emb.sum(dim=1) / denom  # (M, D)
        out = self.text_mlp(torch.cat([pooled, box_feats], dim=1))
        if is_visual is not None and bool(is_visual.any()):
            flat = visual.reshape(visual.shape[0], -1)
            vis = self.visual_mlp(flat) + self.box_mlp(box_feats)
            out = torch.where(is_visual.unsqueeze(-1), vis, out)
        return out

    def encode_text_instance(self, ids: tuple[int, ...], box: BBox) -> torch.Tensor:
        """Single text instance token, shape (width,)."""
        self._check_ids(ids)
        id_t = torch.tensor([list(ids)], dtype=torch.long)
        mask = torch.ones(1, len(ids), dtype=torch.bool)
        return self.forward_rows(id_t, mask, self.box_features(box).unsqueeze(0))[0]

    def encode_visual_instance(self, pixels, box: BBox) -> torch.Tensor:
        """Single visual instance token, shape (width,)."""
        px = torch.as_tensor(pixels, dtype=self._dtype)
        if px.ndim != 3 or px.shape[0] != 3:
            raise ValueError(f"visual content must be (3, h, w), got {tuple(px.shape)}")
        resized = self.resize_crop(px)
        ids = torch.zeros(1, 1, dtype=torch.long)
        mask = torch.zeros(1, 1, dtype=torch.bool)
        return self.forward_rows(
            ids,
            mask,
            self.box_features(box).unsqueeze(0),
            visual=resized.unsqueeze(0),
            is_visual=torch.ones(1, dtype=torch.bool),
        )[0]

    def resize_crop(self, pixels: torch.Tensor) -> torch.Tensor:
        """Bilinear resize of (3, h, w) to the encoder's square input size."""
        p = self.visual_patch
        if pixels.shape[1] == p and pixels.shape[2] == p:
            return pixels
        return torch.nn.functional.interpolate(
            pixels.unsqueeze(0), size=(p, p), mode="bilinear", align_corners=False
        )[0]

    def encode_layout(self, layout: Layout) -> torch.Tensor:
        """Row-stacked instance tokens in layout order, shape (N, width)."""
        if len(layout) == 0:
            return torch.zeros(0, self.width, dtype=self._dtype)
        rows = []
        for inst in layout:
            if isinstance(inst.content, TextContent):
                rows.append(self.encode_text_instance(inst.content.ids, inst.bbox))
            elif isinstance(inst.content, ImageContent):
                rows.append(self.encode_visual_instance(inst.content.pixels, inst.bbox))
            else:
                raise TypeError(f"unsupported content type {type(inst.content).__name__}")
        return torch.stack(rows)

    def _check_ids(self, ids):
        if len(ids) == 0:
            raise ValueError("instance needs at least one content id")
        for i in ids:
            if not (0 <= int(i) < self.vocab_size):
                raise ValueError(f"content id {i} outside vocabulary of size {self.vocab_size}")
