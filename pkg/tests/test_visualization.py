import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import tiny_config
from vltune.config import AdapterConfig
from vltune.errors import InputError
from vltune.model import AttentionRecord, PromptedDualEncoder
from vltune.visualization import blend_overlay, extract_object_attention, minmax_normalize, render_overlay, upsample_map

GRID = 4
IMAGE_ROLES = ("class",) + ("prompt",) * 2 + ("patch",) * (GRID * GRID)
TEXT_ROLES = ("bos", "word", "word", "eos")


def record(patch_weights, token=1, layer=0, heads=2):
    """A text->image record whose ``token`` row puts ``patch_weights`` on the patch keys."""
    key_len = len(IMAGE_ROLES)
    w = torch.full((1, heads, len(TEXT_ROLES), key_len), 1.0 / key_len, dtype=torch.float64)
    row = torch.zeros(key_len, dtype=torch.float64)
    row[3:] = torch.as_tensor(patch_weights, dtype=torch.float64).flatten()
    w[0, :, token] = row / row.sum() if row.sum() > 0 else row
    return AttentionRecord(layer, w, "text", "image", "adapter", TEXT_ROLES, IMAGE_ROLES)


def test_single_patch_spike():
    spike = torch.zeros(GRID, GRID)
    spike[1, 2] = 1.0
    heat = extract_object_attention([record(spike)], 1)
    assert heat.shape == (GRID, GRID)
    assert heat[1, 2] == 1.0 and heat.sum() == 1.0


def test_uniform_attention_maps_to_half():
    heat = extract_object_attention([record(torch.ones(GRID, GRID))], 1)
    assert torch.equal(heat, torch.full((GRID, GRID), 0.5, dtype=heat.dtype))
    assert torch.equal(minmax_normalize(torch.zeros(3)), torch.full((3,), 0.5))


def test_grid_aligned_ramp_reproduced_at_sample_points():
    ramp = torch.arange(GRID, dtype=torch.float64).repeat(GRID, 1) + 1  # columns 1..4
    heat = extract_object_attention([record(ramp)], 1)
    expected = (ramp - 1) / (GRID - 1)
    assert torch.allclose(heat, expected, atol=1e-12)
    up = upsample_map(heat, 31, 31)
    step = (31 - 1) // (GRID - 1)
    for i in range(GRID):
        for j in range(GRID):
            assert up[i * step, j * step].item() == pytest.approx(expected[i, j].item(), abs=1e-12)


def test_layers_and_heads_are_averaged():
    a = torch.zeros(GRID, GRID)
    a[0, 0] = 1
    b = torch.zeros(GRID, GRID)
    b[3, 3] = 1
    recs = [record(a, layer=0), record(b, layer=1)]
    heat = extract_object_attention(recs, 1)
    assert heat[0, 0] == heat[3, 3] == 1.0
    per_layer = extract_object_attention(recs, 1, per_layer=True)
    assert per_layer.shape == (2, GRID, GRID) and per_layer[1, 3, 3] == 1.0 and per_layer[1, 0, 0] == 0.0


def test_multiple_objects_give_separate_maps():
    a = torch.zeros(GRID, GRID)
    a[0, 1] = 1
    b = torch.zeros(GRID, GRID)
    b[2, 2] = 1
    rec = record(a, token=1)
    rec.weights[0, :, 2] = record(b, token=2).weights[0, :, 2]
    assert extract_object_attention([rec], 1)[0, 1] == 1.0
    assert extract_object_attention([rec], 2)[2, 2] == 1.0


def test_image_to_text_direction():
    key_len = len(TEXT_ROLES)
    w = torch.full((1, 1, len(IMAGE_ROLES), key_len), 0.25, dtype=torch.float64)
    w[0, 0, 3 + 5] = torch.tensor([0.0, 1.0, 0.0, 0.0])
    rec = AttentionRecord(0, w, "image", "text", "adapter", IMAGE_ROLES, TEXT_ROLES)
    heat = extract_object_attention([rec], 1, direction="image_to_text")
    assert heat.flatten().argmax() == 5 and heat.max() == 1.0


def test_errors():
    self_rec = AttentionRecord(0, torch.ones(1, 1, 3, 3) / 3, "image", "image", "adapter")
    with pytest.raises(InputError, match="no cross-attention recorded"):
        extract_object_attention([self_rec], 0)
    with pytest.raises(InputError):
        extract_object_attention([record(torch.ones(GRID, GRID))], 9)
    with pytest.raises(InputError):
        extract_object_attention([record(torch.ones(GRID, GRID))], 1, direction="sideways")


def test_self_only_model_has_no_cross_attention(images):
    m = PromptedDualEncoder.build(tiny_config(adapter=AdapterConfig(depth=1, num_heads=2, mode="self_only")), seed=0, dtype=torch.float64)
    img, _ = m.encode_image_tokens(images[:1])
    txt, _ = m.encode_text_tokens(m.tokenize(["a cat"]))
    _, _, recs = m.adapt(img, txt)
    with pytest.raises(InputError, match="no cross-attention recorded"):
        extract_object_attention(recs, 1)


def test_model_records_produce_grid_heatmap(tiny_model, images):
    img, _ = tiny_model.encode_image_tokens(images[:1])
    txt, _ = tiny_model.encode_text_tokens(tiny_model.tokenize(["a photo of a cat"]))
    _, _, recs = tiny_model.adapt(img, txt)
    heat = extract_object_attention(recs, 5)
    side = tiny_model.config.image_size // tiny_model.config.patch_size
    assert heat.shape == (side, side) and 0 <= heat.min() and heat.max() <= 1


def test_overlay_dims_and_constant_tint(tmp_path):
    image = torch.rand(3, 20, 28)
    out = tmp_path / "o.png"
    blended = render_overlay(torch.full((GRID, GRID), 0.5), image, out)
    with Image.open(out) as im:
        assert im.size == (28, 20)
    tint = blended - 0.5 * image.double().permute(1, 2, 0).numpy()
    assert np.allclose(tint, tint[0, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(4, 40), w=st.integers(4, 40), alpha=st.floats(0, 1))
def test_blend_dims_and_range(h, w, alpha):
    blended = blend_overlay(torch.rand(GRID, GRID), torch.rand(3, h, w), alpha)
    assert blended.shape == (h, w, 3) and blended.min() >= 0 and blended.max() <= 1 + 1e-12


def test_overlay_rejects_bad_inputs(tmp_path):
    with pytest.raises(InputError):
        render_overlay(torch.full((2, 2), 2.0), torch.rand(3, 4, 4), tmp_path / "x.png")
    with pytest.raises(InputError):
        blend_overlay(torch.rand(2, 2), torch.rand(4, 4))
    with pytest.raises(OSError):
        render_overlay(torch.rand(2, 2), torch.rand(3, 4, 4), tmp_path / "missing" / "x.png")
