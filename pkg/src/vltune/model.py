"""Prompted dual encoder: ViT-style image tower, text tower, deep prompts, projection heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, InputError, LengthError, NumericError
from .tokenizer import PAD_ID, Tokenizer

CHECKPOINT_FORMAT = "vltune-checkpoint/1"

# parameter namespaces; everything under BACKBONE_PREFIXES is frozen with the backbone
BACKBONE_PREFIXES = ("image_encoder.", "text_encoder.")
TUNABLE_PREFIXES = ("prompts.", "adapter.", "image_proj.", "text_proj.")


@dataclass
class TokenSequence:
    """A batch of token states for one modality.

    ``roles`` describes the shared sequence layout (class/patch/word/prompt);
    per-row padding lives in ``pad_mask`` (True at pad positions) and
    ``pool_index`` gives each row's pooled position (class token or end-of-text).
    """

    tokens: torch.Tensor
    roles: tuple
    modality: str
    pad_mask: torch.Tensor
    pool_index: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise InputError(f"tokens must be [batch, seq_len, dim], got shape {tuple(self.tokens.shape)}")
        if len(self.roles) != self.tokens.shape[1]:
            raise InputError(f"{len(self.roles)} roles for sequence length {self.tokens.shape[1]}")

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def row_roles(self, row: int) -> list[str]:
        return ["pad" if p else r for r, p in zip(self.roles, self.pad_mask[row].tolist())]

    def pooled(self) -> torch.Tensor:
        rows = torch.arange(self.batch_size, device=self.tokens.device)
        return self.tokens[rows, self.pool_index]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)

    def select(self, rows) -> "TokenSequence":
        return TokenSequence(self.tokens[rows], self.roles, self.modality, self.pad_mask[rows], self.pool_index[rows])

    def expand(self, batch_size: int) -> "TokenSequence":
        """Broadcast a single-row sequence to ``batch_size`` rows."""
        if self.batch_size == batch_size:
            return self
        if self.batch_size != 1:
            raise InputError(f"cannot expand a batch of {self.batch_size} to {batch_size}")
        return TokenSequence(
            tokens=self.tokens.expand(batch_size, -1, -1),
            roles=self.roles,
            modality=self.modality,
            pad_mask=self.pad_mask.expand(batch_size, -1),
            pool_index=self.pool_index.expand(batch_size),
        )


@dataclass
class AttentionRecord:
    layer_index: int
    weights: torch.Tensor  # [batch, heads, query_len, key_len]
    query_modality: str
    key_modality: str
    source: str = "encoder"
    query_roles: tuple = field(default=(), repr=False)
    key_roles: tuple = field(default=(), repr=False)

    @property
    def is_cross(self) -> bool:
        return self.query_modality != self.key_modality


class Attention(nn.Module):
    """Multi-head attention that also returns its weights; keys may have their own width."""

    def __init__(self, dim: int, num_heads: int, key_dim: int | None = None):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"attention dim {dim} not divisible by {num_heads} heads")
        key_dim = dim if key_dim is None else key_dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(key_dim, dim)
        self.v_proj = nn.Linear(key_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, key_padding_mask=None):
        context = x if context is None else context
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(context))
        v = self._heads(self.v_proj(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.out_proj(out), weights


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, key_padding_mask=None):
        h, weights = self.attn(self.ln_1(x), key_padding_mask=key_padding_mask)
        x = x + h
        x = x + self.mlp(self.ln_2(x))
        return x, weights


class PromptStack(nn.Module):
    """Learnable prompt rows, one ``[P, dim]`` block per prompted layer and modality."""

    def __init__(self, config: ModelConfig, trainable: bool = True):
        super().__init__()
        depth = config.prompt_depth if config.prompt_length > 0 else 0
        shape_i = (depth, config.prompt_length, config.embed_dim_image)
        shape_t = (depth, config.prompt_length, config.embed_dim_text)
        self.image_prompts = nn.Parameter(torch.randn(shape_i) * config.prompt_init_std)
        self.text_prompts = nn.Parameter(torch.randn(shape_t) * config.prompt_init_std)
        self.set_trainable(trainable)

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad_(flag)

    @property
    def depth(self) -> int:
        return self.image_prompts.shape[0]

    @property
    def length(self) -> int:
        return self.image_prompts.shape[1]


def _run_prompted_blocks(blocks, seq: TokenSequence, prompts: torch.Tensor | None, records: list):
    """Run ``blocks`` with deep prompting: prompts are inserted after position 0 and the
    prompt slots are overwritten with a fresh row before each of the first ``depth`` layers."""
    x, roles, pad_mask, pool = seq.tokens, tuple(seq.roles), seq.pad_mask, seq.pool_index
    depth = 0 if prompts is None else prompts.shape[0]
    plen = 0 if prompts is None else prompts.shape[1]
    if depth and plen:
        b = x.shape[0]
        x = torch.cat([x[:, :1], prompts[0].to(x.dtype).expand(b, -1, -1), x[:, 1:]], dim=1)
        roles = roles[:1] + ("prompt",) * plen + roles[1:]
        pad_mask = torch.cat([pad_mask[:, :1], pad_mask.new_zeros(b, plen), pad_mask[:, 1:]], dim=1)
        pool = torch.where(pool > 0, pool + plen, pool)
    for i, block in enumerate(blocks):
        if 0 < i < depth and plen:
            x = torch.cat([x[:, :1], prompts[i].to(x.dtype).expand(x.shape[0], -1, -1), x[:, 1 + plen :]], dim=1)
        x, weights = block(x, key_padding_mask=pad_mask if pad_mask.any() else None)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations in {seq.modality} encoder", layer=i)
        records.append(AttentionRecord(i, weights, seq.modality, seq.modality, "encoder", roles, roles))
    return TokenSequence(x, roles, seq.modality, pad_mask, pool)


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim_image
        self.config = config
        self.patch_proj = nn.Conv2d(config.channels, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.class_token = nn.Parameter(torch.randn(d) * d**-0.5)
        self.pos_embed = nn.Parameter(torch.randn(config.num_patches + 1, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers))
        self.ln_post = nn.LayerNorm(d)

    def embed(self, images: torch.Tensor) -> TokenSequence:
        cfg = self.config
        if images.dim() != 4:
            raise ConfigError(f"images must be [batch, channels, H, W], got {tuple(images.shape)}")
        _, c, h, w = images.shape
        if c != cfg.channels:
            raise ConfigError(f"channels: expected {cfg.channels}, got {c}")
        if h != cfg.image_size:
            raise ConfigError(f"height: expected {cfg.image_size}, got {h}")
        if w != cfg.image_size:
            raise ConfigError(f"width: expected {cfg.image_size}, got {w}")
        patches = self.patch_proj(images.to(self.pos_embed.dtype)).flatten(2).transpose(1, 2)
        cls = self.class_token.expand(patches.shape[0], 1, -1)
        tokens = torch.cat([cls, patches], dim=1) + self.pos_embed
        b, n = tokens.shape[:2]
        roles = ("class",) + ("patch",) * (n - 1)
        return TokenSequence(
            tokens,
            roles,
            "image",
            torch.zeros(b, n, dtype=torch.bool, device=tokens.device),
            torch.zeros(b, dtype=torch.long, device=tokens.device),
        )

    def forward(self, seq: TokenSequence, prompts=None, records=None):
        records = [] if records is None else records
        out = _run_prompted_blocks(self.blocks, seq, prompts, records)
        return out.with_tokens(self.ln_post(out.tokens)), records


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim_text
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, d)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.max_text_len, d) * 0.01)
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers))
        self.ln_final = nn.LayerNorm(d)

    def embed(self, token_ids: torch.Tensor) -> TokenSequence:
        cfg = self.config
        if token_ids.dim() == 1:
            token_ids = token_ids[None]
        if token_ids.shape[1] > cfg.max_text_len:
            raise LengthError(f"text length {token_ids.shape[1]} exceeds max_text_len {cfg.max_text_len}")
        bad = (token_ids < 0) | (token_ids >= cfg.vocab_size)
        if bad.any():
            row, pos = (int(v) for v in bad.nonzero()[0])
            raise InputError(
                f"token id {int(token_ids[row, pos])} at row {row}, position {pos} is outside vocab_size {cfg.vocab_size}"
            )
        pad_mask = token_ids == PAD_ID
        lengths = (~pad_mask).sum(dim=1)
        if (lengths == 0).any():
            raise InputError("empty text row (all padding)")
        tokens = self.token_embed(token_ids) + self.pos_embed[: token_ids.shape[1]]
        roles = ("word",) * token_ids.shape[1]
        # pooled at the last non-pad token (end-of-text)
        return TokenSequence(tokens, roles, "text", pad_mask, lengths - 1)

    def forward(self, seq: TokenSequence, prompts=None, records=None):
        records = [] if records is None else records
        out = _run_prompted_blocks(self.blocks, seq, prompts, records)
        return out.with_tokens(self.ln_final(out.tokens)), records


class PromptedDualEncoder(nn.Module):
    """Image and text towers with deep prompts, shared-space projections and an optional adapter."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        from .adapters import MCAdapter

        self.config = config
        self.tokenizer = Tokenizer(config.vocab_size, config.max_text_len)
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config)
        self.prompts = PromptStack(config)
        self.image_proj = nn.Linear(config.embed_dim_image, config.shared_dim, bias=False)
        self.text_proj = nn.Linear(config.embed_dim_text, config.shared_dim, bias=False)
        self.adapter = MCAdapter(config) if config.adapter.depth > 0 else None

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=torch.float32) -> "PromptedDualEncoder":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(config)
        return model.to(dtype)

    # ---- token streams -------------------------------------------------
    def _prompt_rows(self, which: str):
        if not self.config.prompts_active:
            return None
        return self.prompts.image_prompts if which == "image" else self.prompts.text_prompts

    def patch_embed(self, images: torch.Tensor) -> TokenSequence:
        return self.image_encoder.embed(images)

    def tokenize(self, texts) -> torch.Tensor:
        return self.tokenizer(texts)

    def encode_image_tokens(self, images: torch.Tensor):
        return self.image_encoder(self.patch_embed(images), self._prompt_rows("image"))

    def encode_text_tokens(self, token_ids: torch.Tensor):
        return self.text_encoder(self.text_encoder.embed(token_ids), self._prompt_rows("text"))

    def text_stream_position(self, token_index: int) -> int:
        """Position of a token-id index inside the encoded (prompt-expanded) text stream."""
        if token_index > 0 and self.config.prompts_active:
            return token_index + self.config.prompt_length
        return token_index

    # ---- projections ---------------------------------------------------
    def project_image(self, seq: TokenSequence) -> torch.Tensor:
        return F.normalize(self.image_proj(seq.pooled()), dim=-1)

    def project_text(self, seq: TokenSequence) -> torch.Tensor:
        return F.normalize(self.text_proj(seq.pooled()), dim=-1)

    def encode_image(self, images: torch.Tensor):
        seq, records = self.encode_image_tokens(images)
        return self.project_image(seq), records

    def encode_text(self, token_ids: torch.Tensor):
        seq, records = self.encode_text_tokens(token_ids)
        return self.project_text(seq), records

    # ---- adapters ------------------------------------------------------
    def adapt(self, image_seq: TokenSequence | None, text_seq: TokenSequence | None):
        """Run the cross-attention adapter on a paired (image, text) stream and project.

        Either side may be ``None`` when that modality has no adapter attached; the
        corresponding output is then ``None``.
        """
        if image_seq is not None and text_seq is not None and image_seq.batch_size != text_seq.batch_size:
            raise InputError(
                f"batch-size mismatch between image ({image_seq.batch_size}) and text ({text_seq.batch_size})"
            )
        records: list[AttentionRecord] = []
        if self.adapter is not None:
            image_seq, text_seq, records = self.adapter(image_seq, text_seq)
        u = None if image_seq is None else self.project_image(image_seq)
        v = None if text_seq is None else self.project_text(text_seq)
        return u, v, records

    def adapt_all_pairs(self, image_seq: TokenSequence, text_seq: TokenSequence):
        """Adapt every (image j, text l) combination of two equal-size batches.

        Returns ``(u, v, records)`` with ``u, v`` shaped ``[N, N, d]`` (index ``[j, l]``).
        """
        n = image_seq.batch_size
        if text_seq.batch_size != n:
            raise InputError(f"batch-size mismatch between image ({n}) and text ({text_seq.batch_size})")
        rows = torch.arange(n, device=image_seq.tokens.device)
        u, v, records = self.adapt(image_seq.select(rows.repeat_interleave(n)), text_seq.select(rows.repeat(n)))
        return u.view(n, n, -1), v.view(n, n, -1), records

    def adapt_pairwise_for_eval(self, image_seq: TokenSequence, class_text_seqs: list[TokenSequence]):
        """Class-conditioned embeddings: one adapter pass per candidate class text."""
        if not class_text_seqs:
            raise InputError("adapt_pairwise_for_eval needs at least one class text")
        out = []
        for text_seq in class_text_seqs:
            text_seq = text_seq.expand(image_seq.batch_size)
            img_in = image_seq if self.adapter is not None and self.adapter.has_image else None
            txt_in = text_seq if self.adapter is not None and self.adapter.has_text else None
            u, v, _ = self.adapt(img_in, txt_in)
            out.append((self.project_image(image_seq) if u is None else u, self.project_text(text_seq) if v is None else v))
        return out

    # ---- parameter partition ------------------------------------------
    def backbone_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(BACKBONE_PREFIXES)]

    def trainable_parameter_names(self, freeze_backbone: bool = True) -> list[str]:
        names = [n for n, _ in self.named_parameters()]
        if freeze_backbone:
            return [n for n in names if n.startswith(TUNABLE_PREFIXES)]
        return names

    def set_backbone_frozen(self, frozen: bool = True):
        for name, p in self.named_parameters():
            if name.startswith(BACKBONE_PREFIXES):
                p.requires_grad_(not frozen)


def save_checkpoint(path, model: PromptedDualEncoder, train_state: dict | None = None) -> Path:
    """Write parameters, their shapes and the model config to a single archive."""
    path = Path(path)
    params = {name: t.detach().clone() for name, t in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "params": params,
        "shapes": {name: list(t.shape) for name, t in params.items()},
        "train_state": train_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(model, train_state)`` from an archive written by :func:`save_checkpoint`."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    config = ModelConfig.from_dict(payload["model_config"])
    model = PromptedDualEncoder.build(config, dtype=getattr(torch, payload["dtype"]))
    for name, shape in payload["shapes"].items():
        if list(payload["params"][name].shape) != shape:
            raise InputError(f"checkpoint tensor {name} has shape {list(payload['params'][name].shape)}, expected {shape}")
    model.load_state_dict(payload["params"])
    return model, payload.get("train_state")
