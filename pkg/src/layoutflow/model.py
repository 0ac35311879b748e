"""Dual-stream diffusion-transformer backbone over pixel patches.

The denoiser state is the raw image; tokens are linear projections of
non-overlapping patches, and the text stream attends jointly with the image
stream inside every block.  Modulation comes from an adaptive layer norm
driven by the timestep embedding plus the mean-pooled prompt embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .vocab import VOCAB_SIZE


def split_patches(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, 3, S, S) -> (B, T, 3*patch*patch) row-major patch tokens."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, p, p)
    return x.reshape(b, gh * gw, c * patch * patch)


def merge_patches(tokens: torch.Tensor, patch: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Inverse arrangement of split_patches."""
    b, t, d = tokens.shape
    if t != grid_h * grid_w or d % (patch * patch) != 0:
        raise ValueError(f"token field {tokens.shape} does not match grid {grid_h}x{grid_w}")
    c = d // (patch * patch)
    x = tokens.reshape(b, grid_h, grid_w, c, patch, patch)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, grid_h * patch, grid_w * patch)


def sinusoidal_features(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Standard sin/cos features of a scalar per batch element; (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
    )
    ang = t[:, None] * scale * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class TimestepEmbed(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.ndim != 1:
            raise ValueError(f"t must be a 1-d batch of scalars, got shape {tuple(t.shape)}")
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise ValueError("timesteps must lie in [0, 1]")
        return self.mlp(sinusoidal_features(t, self.width))


class AdaLayerNorm(nn.Module):
    """gamma(cond) * normalize(h) + beta(cond), channel-wise, eps 1e-6.

    The modulation projection starts at zero, so a fresh module is a plain
    layer norm (gamma = 1, beta = 0).
    """

    def __init__(self, width: int, cond_dim: int):
        super().__init__()
        self.width = width
        self.lin = nn.Linear(cond_dim, 2 * width)
        nn.init.zeros_(self.lin.weight)
        nn.init.zeros_(self.lin.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        normed = nn.functional.layer_norm(h, (self.width,), eps=1e-6)
        scale, shift = self.lin(cond).chunk(2, dim=-1)
        while scale.ndim < h.ndim:
            scale = scale.unsqueeze(1)
            shift = shift.unsqueeze(1)
        return normed * (1 + scale) + shift


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    key_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Multi-head softmax attention over already-projected q/k/v (B, T, C).

    key_mask is (B, Tk) bool; masked keys receive zero weight.  Every query
    row must keep at least one valid key.
    """
    b, tq, c = q.shape
    if c % heads:
        raise ValueError(f"width {c} not divisible by heads {heads}")
    hd = c // heads
    qh = q.reshape(b, tq, heads, hd).transpose(1, 2)
    kh = k.reshape(b, k.shape[1], heads, hd).transpose(1, 2)
    vh = v.reshape(b, v.shape[1], heads, hd).transpose(1, 2)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(hd)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, tq, c)
    if return_weights:
        return out, weights
    return out


class StreamProjections(nn.Module):
    """Per-stream q/k/v/out linear maps of one attention participant."""

    def __init__(self, width: int, proj_factory=None):
        super().__init__()
        make = proj_factory or (lambda: nn.Linear(width, width))
        self.q = make()
        self.k = make()
        self.v = make()
        self.out = make()


class JointAttention(nn.Module):
    """Softmax attention over the concatenation of two token streams, each
    with its own projections."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.img = StreamProjections(width)
        self.txt = StreamProjections(width)
        for stream in (self.img, self.txt):
            nn.init.zeros_(stream.out.weight)
            nn.init.zeros_(stream.out.bias)

    def forward(
        self,
        img: torch.Tensor,
        txt: torch.Tensor,
        txt_mask: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        b, ti, _ = img.shape
        tt = txt.shape[1]
        q = torch.cat([self.img.q(img), self.txt.q(txt)], dim=1)
        k = torch.cat([self.img.k(img), self.txt.k(txt)], dim=1)
        v = torch.cat([self.img.v(img), self.txt.v(txt)], dim=1)
        key_mask = None
        if txt_mask is not None:
            key_mask = torch.cat(
                [torch.ones(b, ti, dtype=torch.bool, device=img.device), txt_mask], dim=1
            )
        res = attention(q, k, v, self.heads, key_mask, return_weights=return_weights)
        out, weights = res if return_weights else (res, None)
        img_out = self.img.out(out[:, :ti])
        txt_out = self.txt.out(out[:, ti:])
        if return_weights:
            return img_out, txt_out, weights
        return img_out, txt_out


def _stream_mlp(width: int, ratio: int) -> nn.Sequential:
    mlp = nn.Sequential(
        nn.Linear(width, ratio * width), nn.SiLU(), nn.Linear(ratio * width, width)
    )
    nn.init.zeros_(mlp[2].weight)
    nn.init.zeros_(mlp[2].bias)
    return mlp


class MMDiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ada1_img = AdaLayerNorm(width, width)
        self.ada1_txt = AdaLayerNorm(width, width)
        self.attn = JointAttention(width, heads)
        self.ada2_img = AdaLayerNorm(width, width)
        self.ada2_txt = AdaLayerNorm(width, width)
        self.mlp_img = _stream_mlp(width, mlp_ratio)
        self.mlp_txt = _stream_mlp(width, mlp_ratio)

    def forward(self, img, txt, cond, txt_mask=None):
        o_img, o_txt = self.attn(self.ada1_img(img, cond), self.ada1_txt(txt, cond), txt_mask)
        img = img + o_img
        txt = txt + o_txt
        img = img + self.mlp_img(self.ada2_img(img, cond))
        txt = txt + self.mlp_txt(self.ada2_txt(txt, cond))
        return img, txt


class FinalLayer(nn.Module):
    """Modulated norm followed by the shared projection to patch pixels."""

    def __init__(self, width: int, patch_dim: int):
        super().__init__()
        self.norm = AdaLayerNorm(width, width)
        self.proj = nn.Linear(width, patch_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, tokens, cond):
        return self.proj(self.norm(tokens, cond))


@dataclass
class PromptBatch:
    ids: torch.Tensor   # (B, L) long, PAD-filled
    mask: torch.Tensor  # (B, L) bool

    def __post_init__(self):
        if self.ids.shape[1] < 1:
            raise ValueError("prompts must hold at least the begin-of-prompt token")


def collate_prompts(prompts: list[list[int]]) -> PromptBatch:
    """Pad variable-length id lists into one batch (pad id 0, masked out)."""
    if any(len(p) == 0 for p in prompts):
        raise ValueError("every prompt needs at least one token")
    width = max(len(p) for p in prompts)
    ids = torch.zeros(len(prompts), width, dtype=torch.long)
    mask = torch.zeros(len(prompts), width, dtype=torch.bool)
    for i, p in enumerate(prompts):
        ids[i, : len(p)] = torch.tensor(p, dtype=torch.long)
        mask[i, : len(p)] = True
    return PromptBatch(ids, mask)


class BaseCore(nn.Module):
    """Prompt-conditioned velocity backbone without any layout machinery."""

    def __init__(self, cfg: ModelConfig, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.grid = cfg.grid
        self.patch_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_proj = nn.Linear(self.patch_dim, cfg.width)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, cfg.width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.prompt_embed = nn.Embedding(vocab_size, cfg.width)
        nn.init.normal_(self.prompt_embed.weight, std=0.02)
        self.time_embed = TimestepEmbed(cfg.width)
        self.blocks = nn.ModuleList(
            MMDiTBlock(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.final = FinalLayer(cfg.width, self.patch_dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        return self.patch_proj(split_patches(images, self.cfg.patch_size))

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        return merge_patches(tokens, self.cfg.patch_size, self.grid, self.grid)

    def embed_prompts(self, prompts: PromptBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Prompt token embeddings and their masked mean, ((B, L, C), (B, C))."""
        dt = self.prompt_embed.weight.dtype
        txt = self.prompt_embed(prompts.ids)
        mask = prompts.mask.unsqueeze(-1).to(dt)
        pooled = (txt * mask).sum(dim=1) / prompts.mask.sum(dim=1, keepdim=True).clamp(min=1).to(dt)
        return txt, pooled

    def cond_vector(self, t: torch.Tensor, pooled_prompt: torch.Tensor) -> torch.Tensor:
        return self.time_embed(t) + pooled_prompt
