"""Multi-modal cross-attention adapter layers placed on top of the encoder token streams."""

from __future__ import annotations

import torch.nn as nn

from .config import ModelConfig
from .errors import InputError
from .model import Attention, AttentionRecord, TokenSequence


class Bottleneck(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.down = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.up = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.up(self.act(self.down(x)))


class AdapterSide(nn.Module):
    """One modality's half of an adapter layer.

    ``mode`` gates which sub-blocks exist: ``none`` keeps only the bottleneck,
    ``self_only`` adds self-attention, ``self_plus_cross`` adds cross-attention
    over the other modality's tokens.
    """

    def __init__(self, dim: int, other_dim: int, num_heads: int, bottleneck: int, mode: str):
        super().__init__()
        self.mode = mode
        if mode in ("self_only", "self_plus_cross"):
            self.ln_self = nn.LayerNorm(dim)
            self.self_attn = Attention(dim, num_heads)
        if mode == "self_plus_cross":
            self.ln_query = nn.LayerNorm(dim)
            self.ln_context = nn.LayerNorm(other_dim)
            self.cross_attn = Attention(dim, num_heads, key_dim=other_dim)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = Bottleneck(dim, bottleneck)
        # residual branches start closed so a fresh adapter is the identity map
        for proj in (getattr(self, "self_attn", None), getattr(self, "cross_attn", None)):
            if proj is not None:
                nn.init.zeros_(proj.out_proj.weight)
                nn.init.zeros_(proj.out_proj.bias)
        nn.init.zeros_(self.ffn.up.weight)
        nn.init.zeros_(self.ffn.up.bias)

    def self_block(self, x, pad_mask):
        if self.mode == "none":
            return x, None
        h, w = self.self_attn(self.ln_self(x), key_padding_mask=pad_mask if pad_mask.any() else None)
        return x + h, w

    def cross_block(self, x, other, other_pad):
        h, w = self.cross_attn(
            self.ln_query(x), self.ln_context(other), key_padding_mask=other_pad if other_pad.any() else None
        )
        return x + h, w

    def ffn_block(self, x):
        return x + self.ffn(self.ln_ffn(x))


class MCAdapter(nn.Module):
    """Stack of adapter layers coupling the image and text token streams.

    Within a layer both sides first run self-attention; cross-attention then
    reads the other side's post-self-attention states (image queries attend to
    text keys and vice versa), followed by a residual bottleneck MLP.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.adapter
        self.mode = cfg.mode
        self.has_image = cfg.attach_image_branch != "none"
        self.has_text = cfg.attach_text_branch != "none"
        di, dt = config.embed_dim_image, config.embed_dim_text
        bi = cfg.bottleneck_dim or max(1, di // 2)
        bt = cfg.bottleneck_dim or max(1, dt // 2)
        if self.has_image:
            self.image_layers = nn.ModuleList(
                AdapterSide(di, dt, cfg.num_heads, bi, cfg.mode) for _ in range(cfg.depth)
            )
        if self.has_text:
            self.text_layers = nn.ModuleList(
                AdapterSide(dt, di, cfg.num_heads, bt, cfg.mode) for _ in range(cfg.depth)
            )
        self.depth = cfg.depth

    @property
    def uses_cross(self) -> bool:
        return self.mode == "self_plus_cross" and self.has_image and self.has_text

    def forward(self, image_seq: TokenSequence | None, text_seq: TokenSequence | None):
        if self.uses_cross and (image_seq is None or text_seq is None):
            raise InputError("cross-attention adapter needs both image and text streams")
        if image_seq is not None and text_seq is not None and image_seq.batch_size != text_seq.batch_size:
            raise InputError(
                f"batch-size mismatch between image ({image_seq.batch_size}) and text ({text_seq.batch_size})"
            )
        run_image = image_seq is not None and self.has_image
        run_text = text_seq is not None and self.has_text
        xi = image_seq.tokens if run_image else None
        xt = text_seq.tokens if run_text else None
        records: list[AttentionRecord] = []
        for i in range(self.depth):
            if run_image:
                xi, w = self.image_layers[i].self_block(xi, image_seq.pad_mask)
                if w is not None:
                    records.append(AttentionRecord(i, w, "image", "image", "adapter", image_seq.roles, image_seq.roles))
            if run_text:
                xt, w = self.text_layers[i].self_block(xt, text_seq.pad_mask)
                if w is not None:
                    records.append(AttentionRecord(i, w, "text", "text", "adapter", text_seq.roles, text_seq.roles))
            if self.uses_cross:
                new_i, w_it = self.image_layers[i].cross_block(xi, xt, text_seq.pad_mask)
                new_t, w_ti = self.text_layers[i].cross_block(xt, xi, image_seq.pad_mask)
                xi, xt = new_i, new_t
                records.append(AttentionRecord(i, w_it, "image", "text", "adapter", image_seq.roles, text_seq.roles))
                records.append(AttentionRecord(i, w_ti, "text", "image", "adapter", text_seq.roles, image_seq.roles))
            if run_image:
                xi = self.image_layers[i].ffn_block(xi)
            if run_text:
                xt = self.text_layers[i].ffn_block(xt)
        out_i = image_seq.with_tokens(xi) if run_image else image_seq
        out_t = text_seq.with_tokens(xt) if run_text else text_seq
        return out_i, out_t, records
