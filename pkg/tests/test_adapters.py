import pytest
import torch

from conftest import tiny_config
from vltune.adapters import MCAdapter
from vltune.config import AdapterConfig
from vltune.errors import ConfigError, InputError
from vltune.model import PromptedDualEncoder


def build(seed=0, **adapter_kw):
    adapter = AdapterConfig(**{"depth": 2, "num_heads": 2, **adapter_kw})
    return PromptedDualEncoder.build(tiny_config(adapter=adapter), seed=seed, dtype=torch.float64)


def randomize_adapter(model, seed=1):
    # zero-initialized residual branches would hide most behaviour
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.adapter.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)


def streams(model, images, texts):
    img, _ = model.encode_image_tokens(images)
    txt, _ = model.encode_text_tokens(model.tokenize(texts))
    return img, txt


TEXTS = ["a photo of a cat", "a dog", "a red bird"]


def test_fresh_adapter_is_identity(images):
    m = build()
    img, txt = streams(m, images, TEXTS)
    u, v, records = m.adapt(img, txt)
    assert torch.allclose(u, m.project_image(img)) and torch.allclose(v, m.project_text(txt))
    assert records


def test_depth_zero_is_identity(images):
    m = build(depth=0)
    assert m.adapter is None
    img, txt = streams(m, images, TEXTS)
    u, v, records = m.adapt(img, txt)
    assert torch.equal(u, m.project_image(img)) and torch.equal(v, m.project_text(txt))
    assert records == []


def test_attention_rows_are_stochastic(images):
    m = build()
    randomize_adapter(m)
    img, txt = streams(m, images, TEXTS)
    u, v, records = m.adapt(img, txt)
    assert torch.allclose(u.norm(dim=-1), torch.ones(3, dtype=torch.float64))
    kinds = {(r.query_modality, r.key_modality) for r in records}
    assert kinds == {("image", "image"), ("text", "text"), ("image", "text"), ("text", "image")}
    for r in records:
        assert torch.allclose(r.weights.sum(-1), torch.ones_like(r.weights.sum(-1)), atol=1e-5)
        assert r.weights.min() >= 0 and r.weights.max() <= 1
        assert r.source == "adapter"
    # pad keys get no mass
    cross = [r for r in records if (r.query_modality, r.key_modality) == ("image", "text")]
    assert float(cross[0].weights.detach()[1, :, :, txt.pad_mask[1]].abs().sum()) == 0.0


def test_self_only_records_no_cross(images):
    m = build(mode="self_only")
    img, txt = streams(m, images, TEXTS)
    _, _, records = m.adapt(img, txt)
    assert records and not any(r.is_cross for r in records)


def test_mode_lattice_changes_only_sub_blocks():
    names = {}
    for mode in ("none", "self_only", "self_plus_cross"):
        names[mode] = {n for n, _ in build(mode=mode).adapter.named_parameters()}
    assert names["none"] < names["self_only"] < names["self_plus_cross"]
    assert all("cross" in n or "ln_query" in n or "ln_context" in n for n in names["self_plus_cross"] - names["self_only"])


def test_identical_text_keys_give_uniform_cross_rows(images):
    m = build()
    randomize_adapter(m)
    img, _ = m.encode_image_tokens(images)
    txt, _ = m.encode_text_tokens(m.tokenize(TEXTS))
    same = txt.with_tokens(txt.tokens[:, :1].expand_as(txt.tokens).clone())
    same.pad_mask = torch.zeros_like(same.pad_mask)
    m.adapter.depth = 1
    _, _, records = m.adapt(img, same)
    rec = next(r for r in records if (r.query_modality, r.key_modality) == ("image", "text"))
    key_len = rec.weights.shape[-1]
    assert torch.allclose(rec.weights, torch.full_like(rec.weights, 1 / key_len), atol=1e-12)


def test_key_permutation_equivariance(images):
    m = build()
    randomize_adapter(m)
    m.adapter.depth = 1
    img, txt = streams(m, images, ["a photo of a cat"] * 3)
    perm = torch.tensor([0, 3, 1, 2, 4, 5, 6] + list(range(7, txt.tokens.shape[1])))
    permuted = txt.with_tokens(txt.tokens[:, perm])
    permuted.pad_mask = txt.pad_mask[:, perm]
    # image-side output only sees text through attention over keys
    u1, _, r1 = m.adapt(img, txt)
    u2, _, r2 = m.adapt(img, permuted)
    assert torch.allclose(u1, u2, atol=1e-12)
    w1 = next(r.weights for r in r1 if (r.query_modality, r.key_modality) == ("image", "text"))
    w2 = next(r.weights for r in r2 if (r.query_modality, r.key_modality) == ("image", "text"))
    assert torch.allclose(w1[..., perm], w2, atol=1e-12)


def test_batch_mismatch_rejected(images):
    m = build()
    img, txt = streams(m, images, TEXTS[:2])
    with pytest.raises(InputError, match="batch-size"):
        m.adapt(img, txt)


def test_pairwise_eval_examples(images):
    m = build()
    randomize_adapter(m)
    img, _ = m.encode_image_tokens(images)
    rows = [m.encode_text_tokens(m.tokenize([t]))[0] for t in ("a cat", "a dog", "a cat")]
    pairs = m.adapt_pairwise_for_eval(img, rows)
    assert len(pairs) == 3
    assert torch.equal(pairs[0][0], pairs[2][0]) and torch.equal(pairs[0][1], pairs[2][1])
    assert not torch.allclose(pairs[0][0], pairs[1][0])
    single = m.adapt(img, rows[1].expand(3))
    assert torch.equal(pairs[1][0], single[0]) and torch.equal(pairs[1][1], single[1])
    with pytest.raises(InputError):
        m.adapt_pairwise_for_eval(img, [])


def test_pairwise_depth_zero_unconditioned(images):
    m = build(depth=0)
    img, _ = m.encode_image_tokens(images)
    rows = [m.encode_text_tokens(m.tokenize([t]))[0] for t in ("a cat", "a dog")]
    pairs = m.adapt_pairwise_for_eval(img, rows)
    assert torch.equal(pairs[0][0], pairs[1][0])


def test_adapt_all_pairs_matches_individual_calls(images):
    m = build()
    randomize_adapter(m)
    img, txt = streams(m, images, TEXTS)
    u, v, _ = m.adapt_all_pairs(img, txt)
    for j in range(3):
        for l in range(3):
            uj, vl, _ = m.adapt(img.select([j]), txt.select([l]))
            assert torch.allclose(u[j, l], uj[0], atol=1e-12) and torch.allclose(v[j, l], vl[0], atol=1e-12)


def test_adapter_trains_with_frozen_backbone(images):
    m = build()
    m.set_backbone_frozen(True)
    img, txt = streams(m, images, TEXTS)
    u, v, _ = m.adapt(img, txt)
    loss = -(u * v).sum()
    opt = torch.optim.SGD([p for n, p in m.named_parameters() if n.startswith("adapter.")], lr=0.1)
    before = {n: p.detach().clone() for n, p in m.adapter.named_parameters()}
    loss.backward()
    opt.step()
    assert any(not torch.equal(before[n], p) for n, p in m.adapter.named_parameters())
    assert all(p.grad is None for n, p in m.named_parameters() if n.startswith("image_encoder."))


def test_attach_points():
    with pytest.raises(ConfigError):
        AdapterConfig(attach_image_branch="none")
    with pytest.raises(ConfigError):
        AdapterConfig(attach_image_branch="both", attach_text_branch="original")
    cfg = tiny_config(adapter=AdapterConfig(depth=1, num_heads=2, mode="self_only", attach_text_branch="none"))
    adapter = MCAdapter(cfg)
    assert adapter.has_image and not adapter.has_text and not adapter.uses_cross
    assert all(n.startswith("image_layers") for n, _ in adapter.named_parameters())
