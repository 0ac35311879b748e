"""Instance-assembling attention and the cascaded velocity model.

Each instance attends independently over its cropped image tokens plus its
own conditioning token; the per-instance results are merged back onto the
token grid by uniform averaging wherever crops overlap (cells covered by no
instance pass through untouched).  One assemble block trails every base
block; ablation toggles swap in plain joint attention, a single trailing
block, direct training instead of low-rank adapters, or single-corner box
sampling.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .batching import LayoutBatch
from .config import ModelConfig
from .encoder import LayoutEncoder
from .model import (
    AdaLayerNorm,
    BaseCore,
    PromptBatch,
    StreamProjections,
    _stream_mlp,
    attention,
)
from .vocab import VOCAB_SIZE


class LoRALinear(nn.Module):
    """Frozen-base linear plus a rank-r update scaled by alpha/r.

    The up-projection starts at zero so a fresh adapter is exactly the base
    map.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.base = nn.Linear(d_in, d_out)
        self.lora_a = nn.Parameter(torch.empty(rank, d_in))
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        down = nn.functional.linear(x, self.lora_a)
        return self.base(x) + nn.functional.linear(down, self.lora_b) * self.scaling

    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)


def _plain_linear(proj: nn.Module) -> nn.Linear:
    return proj.base if isinstance(proj, LoRALinear) else proj


class AssembleAttention(nn.Module):
    """Projection set shared by every instance's attention; image and
    instance streams each own q/k/v/out."""

    def __init__(self, width: int, heads: int, lora: tuple[int, float] | None):
        super().__init__()
        self.heads = heads
        if lora is not None:
            rank, alpha = lora
            factory = lambda: LoRALinear(width, width, rank, alpha)  # noqa: E731
        else:
            factory = None
        self.img = StreamProjections(width, factory)
        self.inst = StreamProjections(width, factory)
        for stream in (self.img, self.inst):
            out = _plain_linear(stream.out)
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)


def gather_crops(h_z: torch.Tensor, batch: LayoutBatch) -> torch.Tensor:
    """Collect each instance's crop tokens, (B, T, C) -> (B, N, Lc, C)."""
    b, t, c = h_z.shape
    offsets = torch.arange(b, device=h_z.device).view(b, 1, 1) * t
    flat_idx = (batch.crop_idx + offsets).reshape(-1)
    rows = h_z.reshape(b * t, c).index_select(0, flat_idx)
    return rows.view(b, batch.n_max, batch.crop_idx.shape[2], c)


def assembling_attention(
    h_z: torch.Tensor,
    h_L: torch.Tensor,
    batch: LayoutBatch,
    attn: AssembleAttention,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-instance attention over [crop tokens, instance token].

    Instances are independent of each other: instance k sees only its own
    crop of h_z and its own row of h_L.

    Returns:
        (image updates (B, N, Lc, C), instance updates (B, N, C)), both
        post output-projection, without residuals.
    """
    x = gather_crops(h_z, batch)  # (B, N, Lc, C)
    b, n, lc, c = x.shape
    inst = h_L.unsqueeze(2)  # (B, N, 1, C)
    q = torch.cat([attn.img.q(x), attn.inst.q(inst)], dim=2)
    k = torch.cat([attn.img.k(x), attn.inst.k(inst)], dim=2)
    v = torch.cat([attn.img.v(x), attn.inst.v(inst)], dim=2)
    ones = torch.ones(b, n, 1, dtype=torch.bool, device=h_z.device)
    key_mask = torch.cat([batch.cell_mask, ones], dim=2)
    out = attention(
        q.view(b * n, lc + 1, c),
        k.view(b * n, lc + 1, c),
        v.view(b * n, lc + 1, c),
        attn.heads,
        key_mask.view(b * n, lc + 1),
    ).view(b, n, lc + 1, c)
    o_img = attn.img.out(out[:, :, :lc])
    o_inst = attn.inst.out(out[:, :, lc])
    return o_img, o_inst


def _canonical_order(batch: LayoutBatch, deltas: torch.Tensor) -> torch.Tensor:
    """Permutation placing instances in a layout-order-independent order.

    Sorts by crop rectangle; exact crop ties are broken by the update bytes,
    so permuting the input instances cannot change the reduction tree.
    """
    b, n = batch.inst_mask.shape
    rows = []
    for bi, crops in enumerate(batch.crops):
        m = len(crops)
        keys = [crop.sort_key() for crop in crops]
        if len(set(keys)) < m:
            det = deltas[bi].detach()
            keys = [keys[i] + (det[i].numpy().tobytes(),) for i in range(m)]
        perm = sorted(range(m), key=keys.__getitem__)
        rows.append(torch.tensor(perm + list(range(m, n)), dtype=torch.long))
    return torch.stack(rows) if rows else torch.zeros(0, n, dtype=torch.long)


def _tree_sum_instances(buf: torch.Tensor) -> torch.Tensor:
    """Pairwise-tree reduction over the instance dim; (B, N, T, C) -> (B, T, C)."""
    while buf.shape[1] > 1:
        if buf.shape[1] % 2:
            buf = torch.cat([buf, buf.new_zeros(buf[:, :1].shape)], dim=1)
        buf = buf[:, 0::2] + buf[:, 1::2]
    return buf[:, 0]


def assemble(
    per_instance_updates: torch.Tensor,
    batch: LayoutBatch,
    h_z: torch.Tensor,
) -> torch.Tensor:
    """Merge per-instance updated crop fields back onto the token grid.

    Covered cells take the uniform average of every covering instance's
    updated value; uncovered cells keep h_z bit-identically.  The average is
    evaluated as h_z + sum(update - h_z)/count so that updates equal to the
    original tokens leave the grid bit-identical, and the sum runs as a
    pairwise tree over canonically ordered instances, which makes the result
    invariant to instance permutation.
    """
    b, t, c = h_z.shape
    n, lc = batch.crop_idx.shape[1], batch.crop_idx.shape[2]
    if n == 0:
        return h_z
    gathered = gather_crops(h_z, batch)
    mask = batch.cell_mask.unsqueeze(-1).to(h_z.dtype)
    deltas = (per_instance_updates - gathered) * mask
    order = _canonical_order(batch, deltas)
    deltas = deltas.gather(1, order[:, :, None, None].expand(b, n, lc, c))
    idx = batch.crop_idx.gather(1, order[:, :, None].expand(b, n, lc))
    buf = h_z.new_zeros(b, n, t, c)
    buf = buf.scatter_add(2, idx.unsqueeze(-1).expand(b, n, lc, c), deltas)
    total = _tree_sum_instances(buf)
    dens = batch.density.unsqueeze(-1)
    return torch.where(dens > 0, h_z + total / dens.clamp(min=1), h_z)


def _joint_layout_attention(a_z, a_L, batch: LayoutBatch, attn: AssembleAttention):
    """No-assemble ablation: one attention over image tokens plus all
    instance tokens, no cropping, no density averaging."""
    b, t, _ = a_z.shape
    q = torch.cat([attn.img.q(a_z), attn.inst.q(a_L)], dim=1)
    k = torch.cat([attn.img.k(a_z), attn.inst.k(a_L)], dim=1)
    v = torch.cat([attn.img.v(a_z), attn.inst.v(a_L)], dim=1)
    key_mask = torch.cat(
        [torch.ones(b, t, dtype=torch.bool, device=a_z.device), batch.inst_mask], dim=1
    )
    out = attention(q, k, v, attn.heads, key_mask)
    return attn.img.out(out[:, :t]), attn.inst.out(out[:, t:])


class AssembleBlock(nn.Module):
    """AdaLayerNorm -> instance attention -> reassembly -> per-stream MLP,
    with residuals on both streams.  Examples whose layout is empty pass
    through bit-identically."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width
        self.per_instance = cfg.use_assemble
        lora = (cfg.lora_rank, cfg.lora_alpha) if cfg.use_lora else None
        self.ada1_img = AdaLayerNorm(w, w)
        self.ada1_inst = AdaLayerNorm(w, w)
        self.attn = AssembleAttention(w, cfg.heads, lora)
        self.ada2_img = AdaLayerNorm(w, w)
        self.ada2_inst = AdaLayerNorm(w, w)
        self.mlp_img = _stream_mlp(w, cfg.mlp_ratio)
        self.mlp_inst = _stream_mlp(w, cfg.mlp_ratio)

    def forward(self, h_z, h_L, batch: LayoutBatch, cond):
        if batch is None or batch.n_max == 0:
            return h_z, h_L
        active = batch.inst_mask.any(dim=1)[:, None, None]  # (B, 1, 1)
        inst_mask = batch.inst_mask.unsqueeze(-1).to(h_z.dtype)
        a_z = self.ada1_img(h_z, cond)
        a_L = self.ada1_inst(h_L, cond)
        if self.per_instance:
            o_img, o_inst = assembling_attention(a_z, a_L, batch, self.attn)
            updates = gather_crops(h_z, batch) + o_img
            h_z = assemble(updates, batch, h_z)
        else:
            o_z, o_inst = _joint_layout_attention(a_z, a_L, batch, self.attn)
            h_z = torch.where(active, h_z + o_z, h_z)
        h_L = h_L + o_inst * inst_mask
        h_z = torch.where(active, h_z + self.mlp_img(self.ada2_img(h_z, cond)), h_z)
        h_L = h_L + self.mlp_inst(self.ada2_inst(h_L, cond)) * inst_mask
        return h_z, h_L


class CascadedModel(nn.Module):
    """Base backbone optionally interleaved with assemble blocks.

    Without a layout (or without layout modules) the forward pass is exactly
    the base forward.
    """

    def __init__(self, cfg: ModelConfig, with_layout: bool = True, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.with_layout = with_layout
        self.base = BaseCore(cfg, vocab_size)
        if with_layout:
            self.layout_encoder = LayoutEncoder(
                cfg.width,
                dense_k=cfg.effective_k,
                n_freqs=cfg.fourier_freqs,
                visual_patch=cfg.visual_patch,
                vocab_size=vocab_size,
            )
            n_blocks = cfg.depth if cfg.use_cascade else 1
            self.assemble = nn.ModuleList(AssembleBlock(cfg) for _ in range(n_blocks))
        else:
            self.layout_encoder = None
            self.assemble = None

    # -- forward paths ----------------------------------------------------

    def base_forward(self, z: torch.Tensor, t: torch.Tensor, prompts: PromptBatch) -> torch.Tensor:
        txt, pooled = self.base.embed_prompts(prompts)
        cond = self.base.cond_vector(t, pooled)
        tokens = self.base.patchify(z) + self.base.pos_embed
        for blk in self.base.blocks:
            tokens, txt = blk(tokens, txt, cond, prompts.mask)
        return self.base.unpatchify(self.base.final(tokens, cond))

    def encode_layout_batch(self, batch: LayoutBatch) -> torch.Tensor:
        b, n = batch.inst_mask.shape
        li = batch.ids.shape[2]
        rows = self.layout_encoder.forward_rows(
            batch.ids.view(b * n, li),
            batch.ids_mask.view(b * n, li),
            batch.box_feats.view(b * n, -1),
            visual=batch.visual.view(b * n, *batch.visual.shape[2:])
            if batch.visual is not None
            else None,
            is_visual=batch.is_visual.view(b * n) if batch.is_visual is not None else None,
        )
        return rows.view(b, n, -1) * batch.inst_mask.unsqueeze(-1).to(rows.dtype)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        prompts: PromptBatch,
        layouts: LayoutBatch | None = None,
    ) -> torch.Tensor:
        if layouts is None or layouts.n_max == 0 or not self.with_layout:
            return self.base_forward(z, t, prompts)
        txt, pooled = self.base.embed_prompts(prompts)
        cond = self.base.cond_vector(t, pooled)
        tokens = self.base.patchify(z) + self.base.pos_embed
        h_L = self.encode_layout_batch(layouts)
        if self.cfg.use_cascade:
            for bblk, ablk in zip(self.base.blocks, self.assemble):
                tokens, txt = bblk(tokens, txt, cond, prompts.mask)
                tokens, h_L = ablk(tokens, h_L, layouts, cond)
        else:
            for bblk in self.base.blocks:
                tokens, txt = bblk(tokens, txt, cond, prompts.mask)
            tokens, h_L = self.assemble[0](tokens, h_L, layouts, cond)
        return self.base.unpatchify(self.base.final(tokens, cond))

    # -- phase plumbing ----------------------------------------------------

    def init_assemble_from_base(self):
        """Copy trained base attention projections into the assemble blocks.

        The image stream copies the base image-stream maps, the instance
        stream copies the text-stream maps; with adapters enabled these
        copies are the frozen bases the low-rank updates build on.  Without
        the cascade the single trailing block copies the last base block.
        """
        if self.assemble is None:
            raise RuntimeError("model has no layout modules")
        for i, ablk in enumerate(self.assemble):
            bblk = self.base.blocks[i if self.cfg.use_cascade else -1]
            pairs = [(bblk.attn.img, ablk.attn.img), (bblk.attn.txt, ablk.attn.inst)]
            for src_stream, dst_stream in pairs:
                for name in ("q", "k", "v", "out"):
                    src = getattr(src_stream, name)
                    dst = _plain_linear(getattr(dst_stream, name))
                    with torch.no_grad():
                        dst.weight.copy_(src.weight)
                        dst.bias.copy_(src.bias)

    def set_layout_phase(self) -> list[torch.nn.Parameter]:
        """Freeze the base weights (and adapter bases); return what trains."""
        if self.assemble is None:
            raise RuntimeError("model has no layout modules")
        self.base.requires_grad_(False)
        self.layout_encoder.requires_grad_(True)
        self.assemble.requires_grad_(True)
        if self.cfg.use_lora:
            for m in self.assemble.modules():
                if isinstance(m, LoRALinear):
                    m.base.requires_grad_(False)
        return [p for p in self.parameters() if p.requires_grad]

    def zero_assemble_output_projections(self):
        """Zero every assemble-side output projection (attention out maps,
        MLP out layers, adapter up-projections): the cascade then reproduces
        the base forward exactly."""
        if self.assemble is None:
            return
        with torch.no_grad():
            for blk in self.assemble:
                for stream in (blk.attn.img, blk.attn.inst):
                    out = _plain_linear(stream.out)
                    out.weight.zero_()
                    out.bias.zero_()
                for m in blk.modules():
                    if isinstance(m, LoRALinear):
                        m.lora_b.zero_()
                for mlp in (blk.mlp_img, blk.mlp_inst):
                    mlp[2].weight.zero_()
                    mlp[2].bias.zero_()

    def base_state_names(self) -> list[str]:
        return [k for k in self.state_dict() if k.startswith("base.")]

    def layout_state_names(self) -> list[str]:
        return [
            k
            for k in self.state_dict()
            if k.startswith("assemble.") or k.startswith("layout_encoder.")
        ]
