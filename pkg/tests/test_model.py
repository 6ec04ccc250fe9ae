import pytest
import torch

from conftest import tiny_config
from vltune.config import AdapterConfig, ModelConfig
from vltune.errors import ConfigError, InputError, LengthError, NumericError
from vltune.model import PromptedDualEncoder, load_checkpoint, save_checkpoint
from vltune.tokenizer import BOS_ID, EOS_ID, PAD_ID, Tokenizer, fill_template


def build(**kw):
    return PromptedDualEncoder.build(tiny_config(**kw), seed=0, dtype=torch.float64)


def test_patch_grid_geometry():
    m = build(image_size=32, patch_size=16)
    seq = m.patch_embed(torch.zeros(2, 3, 32, 32, dtype=torch.float64))
    assert seq.tokens.shape[1] == 5
    assert seq.roles == ("class",) + ("patch",) * 4
    assert ModelConfig(image_size=224, patch_size=16).num_patches == 196


def test_zero_image_patch_tokens_are_bias_plus_positions():
    m = build()
    seq = m.patch_embed(torch.zeros(1, 3, 16, 16, dtype=torch.float64))
    enc = m.image_encoder
    expected = enc.patch_proj.bias + enc.pos_embed[1:]
    assert torch.allclose(seq.tokens[0, 1:], expected)


@pytest.mark.parametrize("shape,name", [((1, 1, 16, 16), "channels"), ((1, 3, 8, 16), "height"), ((1, 3, 16, 8), "width")])
def test_patch_embed_names_bad_dimension(shape, name):
    with pytest.raises(ConfigError, match=name):
        build().patch_embed(torch.zeros(shape, dtype=torch.float64))


def test_encoders_return_unit_vectors(tiny_model, images):
    u, records = tiny_model.encode_image(images)
    assert torch.allclose(u.norm(dim=-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert len(records) == tiny_model.config.num_layers
    v, _ = tiny_model.encode_text(tiny_model.tokenize(["a photo of a cat", "a dog"]))
    assert torch.allclose(v.norm(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-6)


def test_identical_images_identical_rows(tiny_model, images):
    batch = torch.stack([images[0], images[0]])
    u, _ = tiny_model.encode_image(batch)
    assert torch.equal(u[0], u[1])


def test_deep_prompting_keeps_length_constant(tiny_model, images):
    seq, records = tiny_model.encode_image_tokens(images)
    lengths = {r.weights.shape[-1] for r in records}
    assert lengths == {1 + tiny_model.config.prompt_length + tiny_model.config.num_patches}
    assert seq.roles.count("prompt") == tiny_model.config.prompt_length
    assert seq.roles.count("class") == 1


def test_prompt_rows_replace_per_layer(images):
    m = build(num_layers=3, prompt_depth=2)
    base, _ = m.encode_image(images)
    with torch.no_grad():
        m.prompts.image_prompts[1] += torch.randn(m.prompts.image_prompts[1].shape, dtype=torch.float64)
    changed, _ = m.encode_image(images)
    assert not torch.allclose(base, changed)
    assert m.prompts.image_prompts.shape[0] == 2


def test_prompt_length_zero_is_plain_encoder(images):
    m = build(prompt_length=0, adapter=AdapterConfig(depth=0))
    seq = m.patch_embed(images)
    x = seq.tokens
    for block in m.image_encoder.blocks:
        x, _ = block(x)
    plain = torch.nn.functional.normalize(m.image_proj(m.image_encoder.ln_post(x)[:, 0]), dim=-1)
    u, _ = m.encode_image(images)
    assert torch.allclose(u, plain)


def test_vanilla_dual_encoder_ignores_prompt_contents(images):
    m = build(prompt_depth=0, adapter=AdapterConfig(depth=0))
    before, _ = m.encode_image(images)
    with torch.no_grad():
        for p in m.prompts.parameters():
            p.normal_()
    after, _ = m.encode_image(images)
    assert torch.equal(before, after)


def test_padding_is_masked(tiny_model):
    ids = tiny_model.tokenize(["a photo of a cat"])
    padded = torch.cat([ids, torch.full((1, 4), PAD_ID)], dim=1)
    v1, _ = tiny_model.encode_text(ids)
    v2, _ = tiny_model.encode_text(padded)
    assert torch.allclose(v1, v2, atol=1e-12)


def test_text_errors(tiny_model):
    with pytest.raises(InputError, match="position 2"):
        tiny_model.encode_text(torch.tensor([[BOS_ID, 5, 999, EOS_ID]]))
    with pytest.raises(LengthError):
        tiny_model.encode_text(torch.ones(1, 40, dtype=torch.long))
    with pytest.raises(LengthError):
        tiny_model.tokenize(["word " * 40])


def test_tokenizer_deterministic():
    tok = Tokenizer(512, 32)
    a = tok.encode("a photo of a cat")
    assert a == tok.encode("A photo of a CAT!")
    assert a[0] == BOS_ID and a[-1] == EOS_ID and len(a) == 7
    assert tok.word_position("a photo of a cat", "cat") == 5
    assert fill_template("a photo of a <CLASS>", "dog") == "a photo of a dog"
    with pytest.raises(InputError):
        fill_template("no placeholder", "dog")


def test_gradients_reach_prompts(tiny_model, images):
    u, _ = tiny_model.encode_image(images)
    v, _ = tiny_model.encode_text(tiny_model.tokenize(["a cat", "a dog", "a bird"]))
    (u @ v.T).diagonal().sum().backward()
    assert tiny_model.prompts.image_prompts.grad.abs().sum() > 0
    assert tiny_model.prompts.text_prompts.grad.abs().sum() > 0


def test_non_finite_activation_reports_layer(tiny_model, images):
    with torch.no_grad():
        tiny_model.image_encoder.blocks[1].mlp[0].weight.fill_(float("inf"))
    with pytest.raises(NumericError) as exc:
        tiny_model.encode_image(images)
    assert exc.value.layer == 1


def test_parameter_partition(tiny_model):
    backbone = set(tiny_model.backbone_parameter_names())
    tunable = set(tiny_model.trainable_parameter_names(True))
    everything = {n for n, _ in tiny_model.named_parameters()}
    assert backbone | tunable == everything and not backbone & tunable
    assert any(n.startswith("adapter.") for n in tunable)
    assert set(tiny_model.trainable_parameter_names(False)) == everything


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_model, images):
    path = save_checkpoint(tmp_path / "m.pt", tiny_model, {"epoch": 3})
    loaded, state = load_checkpoint(path)
    assert state == {"epoch": 3}
    assert loaded.config == tiny_model.config
    for (n1, p1), (n2, p2) in zip(tiny_model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2) and p1.dtype == p2.dtype
    assert torch.equal(tiny_model.encode_image(images)[0], loaded.encode_image(images)[0])


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "x.pt")


def test_build_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    build()
    assert torch.equal(torch.rand(1), expected)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        ModelConfig(prompt_depth=5, num_layers=4)
    with pytest.raises(ConfigError):
        ModelConfig(temperature=0)
    assert ModelConfig(num_layers=12).prompt_depth == 12
