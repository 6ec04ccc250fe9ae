"""Cross-attention heatmaps for a text object token, upsampled and blended over the image."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .errors import InputError
from .model import AttentionRecord

DIRECTIONS = ("text_to_image", "image_to_text")


def minmax_normalize(values: torch.Tensor) -> torch.Tensor:
    """Scale to [0, 1]; a constant input maps to 0.5 everywhere."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return torch.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def _cross_records(records, direction):
    want = ("text", "image") if direction == "text_to_image" else ("image", "text")
    found = [r for r in records if (r.query_modality, r.key_modality) == want]
    if not found:
        raise InputError("no cross-attention recorded")
    return found


def extract_object_attention(
    records: list[AttentionRecord],
    object_token_index: int,
    direction: str = "text_to_image",
    batch_index: int = 0,
    per_layer: bool = False,
) -> torch.Tensor:
    """Heatmap over the patch grid for one text token.

    ``object_token_index`` indexes the text token stream as seen by the
    adapter. For ``text_to_image`` the token's attention row over image patch
    keys is used; for ``image_to_text`` the column of patch queries attending
    to the token. Heads and layers are averaged (``per_layer`` keeps layers as
    a leading axis), the vector is reshaped to the grid and min-max normalized.
    """
    if direction not in DIRECTIONS:
        raise InputError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    found = _cross_records(records, direction)
    layers = []
    for rec in found:
        image_roles = rec.key_roles if direction == "text_to_image" else rec.query_roles
        patch_pos = [i for i, r in enumerate(image_roles) if r == "patch"]
        w = rec.weights[batch_index].detach()
        text_len = w.shape[1] if direction == "text_to_image" else w.shape[2]
        if not 0 <= object_token_index < text_len:
            raise InputError(f"object token index {object_token_index} outside text length {text_len}")
        if direction == "text_to_image":
            vec = w[:, object_token_index, patch_pos]
        else:
            vec = w[:, patch_pos, object_token_index]
        layers.append(vec.mean(dim=0))
    grid = math.isqrt(len(layers[0]))
    if grid * grid != len(layers[0]):
        raise InputError(f"{len(layers[0])} patch positions do not form a square grid")
    if per_layer:
        return torch.stack([minmax_normalize(v.view(grid, grid)) for v in layers])
    return minmax_normalize(torch.stack(layers).mean(dim=0).view(grid, grid))


def upsample_map(heatmap: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear upsampling with corner alignment, so grid cells land exactly on edge pixels."""
    return F.interpolate(heatmap[None, None].double(), size=(height, width), mode="bilinear", align_corners=True)[0, 0]


def blend_overlay(heatmap: torch.Tensor, image: torch.Tensor, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """``(1 - alpha) * image + alpha * colormap(upsampled map)`` as float ``[H, W, 3]``."""
    if image.dim() != 3:
        raise InputError(f"expected a [C, H, W] image, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    # rounding keeps interpolation noise from flipping colormap bins on flat regions
    up = upsample_map(heatmap, h, w).clamp(0, 1).numpy().round(9)
    colored = colormaps[cmap](up)[..., :3]
    base = image.detach().double().clamp(0, 1).permute(1, 2, 0).numpy()
    if base.shape[-1] == 1:
        base = np.repeat(base, 3, axis=-1)
    return (1 - alpha) * base + alpha * colored


def render_overlay(heatmap: torch.Tensor, image: torch.Tensor, out_path, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Write the blended overlay as a PNG with the image's dimensions; returns the float blend."""
    if heatmap.min() < 0 or heatmap.max() > 1:
        raise InputError("heatmap must be normalized to [0, 1]")
    blended = blend_overlay(heatmap, image, alpha, cmap)
    out_path = Path(out_path)
    try:
        Image.fromarray((blended * 255).round().astype(np.uint8)).save(out_path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write overlay to {out_path}: {exc}") from exc
    return blended
