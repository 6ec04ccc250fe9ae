import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import tiny_config
from vltune.data import DatasetManifest, ImageStore, Sample, load_manifest, make_shapes_dataset, split_base_novel
from vltune.errors import InputError
from vltune.evaluation import (
    ModelScorer,
    TransferTable,
    accuracy,
    classify,
    eval_base_to_novel,
    eval_transfer,
    format_delta,
    probabilities_from_similarities,
    read_results,
    write_results,
)
from vltune.model import PromptedDualEncoder, save_checkpoint


def fixed_scorer(sims):
    return lambda images, classes, template: torch.as_tensor(sims, dtype=torch.float64).expand(len(images), -1)


def gray_manifest(root, classes=("a", "b", "c", "d"), per_class=5):
    """Each class's images are a flat gray level, so an oracle can read the label off the pixels."""
    samples = []
    for label, _ in enumerate(classes):
        for i in range(per_class):
            rel = f"{label}_{i}.png"
            Image.fromarray(np.full((16, 16, 3), 40 * label + 20, dtype=np.uint8)).save(root / rel)
            samples.append(Sample(rel, label, "test"))
    return DatasetManifest("gray", list(classes), samples, root=root)


def gray_oracle(manifest):
    levels = {c: (40 * i + 20) / 255 for i, c in enumerate(manifest.classes)}

    def score(images, classes, template):
        means = images.mean(dim=(1, 2, 3))
        return -torch.stack([(means - levels[c]).abs() for c in classes], dim=1)

    return score


def test_softmax_two_class_example():
    _, probs = classify(torch.zeros(1, 3, 4, 4), ["x", "y"], "<CLASS>", scorer=fixed_scorer([1.0, 0.0]), tau=1.0)
    e = math.e
    assert probs[0].tolist() == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)
    assert probs[0, 0].item() == pytest.approx(0.731, abs=5e-4)


def test_equal_similarities_uniform():
    pred, probs = classify(torch.zeros(2, 3, 4, 4), list("abcde"), "<CLASS>", scorer=fixed_scorer([0.3] * 5), tau=0.01)
    assert torch.allclose(probs, torch.full_like(probs, 0.2))


@settings(max_examples=60, deadline=None)
@given(
    sims=st.lists(st.floats(-1, 1), min_size=2, max_size=8),
    shift=st.floats(-5, 5),
    tau=st.floats(0.01, 2.0),
)
def test_softmax_rows_and_shift_invariance(sims, shift, tau):
    s = torch.tensor([sims], dtype=torch.float64)
    p = probabilities_from_similarities(s, tau)
    q = probabilities_from_similarities(s + shift, tau)
    assert abs(p.sum().item() - 1) <= 1e-6
    assert torch.allclose(p, q, atol=1e-9)
    # temperature divides every exponent
    expected = [math.exp(x / tau) for x in sims]
    total = sum(expected)
    assert p[0].tolist() == pytest.approx([x / total for x in expected], rel=1e-9)


def test_classify_errors():
    with pytest.raises(InputError):
        classify(torch.zeros(1, 3, 4, 4), [], "<CLASS>", scorer=fixed_scorer([]))
    with pytest.raises(InputError):
        classify(torch.zeros(1, 3, 4, 4), ["a", "b"], "<CLASS>")


def test_classify_with_model_is_deterministic(tiny_model, images):
    a = classify(images, ["cat", "dog", "bird"], "a photo of a <CLASS>", model=tiny_model)
    b = classify(images, ["cat", "dog", "bird"], "a photo of a <CLASS>", model=tiny_model)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert torch.allclose(a[1].sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)


def test_unconditioned_scorer_bypasses_adapter(tiny_model, images):
    sims = ModelScorer(tiny_model, pairwise=False)(images, ["cat", "dog"], "a <CLASS>")
    img, _ = tiny_model.encode_image_tokens(images)
    txt, _ = tiny_model.encode_text_tokens(tiny_model.tokenize(["a cat", "a dog"]))
    assert torch.allclose(sims, tiny_model.project_image(img) @ tiny_model.project_text(txt).T)


def test_oracle_scorer_is_perfect(tmp_path):
    m = gray_manifest(tmp_path)
    split = split_base_novel(m)
    res = eval_base_to_novel(None, m, split, scorer=gray_oracle(m))
    assert (res.base_accuracy, res.novel_accuracy) == (1.0, 1.0)
    assert res.num_base == res.num_novel == 10
    assert res.as_percent() == {"base": 100.0, "novel": 100.0}


def test_novel_space_joint_widens_candidates(tmp_path):
    m = gray_manifest(tmp_path)
    seen = []

    def spy(images, classes, template):
        seen.append(tuple(classes))
        return gray_oracle(m)(images, classes, template)

    eval_base_to_novel(None, m, split_base_novel(m), scorer=spy)
    assert seen == [("a", "b"), ("c", "d")]
    seen.clear()
    eval_base_to_novel(None, m, split_base_novel(m), scorer=spy, novel_space="joint")
    assert seen == [("a", "b"), ("a", "b", "c", "d")]


def test_random_model_is_near_chance(tmp_path):
    path = make_shapes_dataset(tmp_path, train_per_class=1, test_per_class=50, image_size=16)
    m = load_manifest(path)
    model = PromptedDualEncoder.build(tiny_config(), seed=3, dtype=torch.float64)
    res = eval_base_to_novel(model, m, split_base_novel(m))
    sigma = math.sqrt(0.25 / 100)
    assert abs(res.base_accuracy - 0.5) <= 3 * sigma
    assert abs(res.novel_accuracy - 0.5) <= 3 * sigma


def test_missing_test_samples_error(tmp_path):
    m = gray_manifest(tmp_path)
    m.samples = [s for s in m.samples if s.label != 3]
    with pytest.raises(InputError, match="no test samples"):
        eval_base_to_novel(None, m, split_base_novel(m), scorer=gray_oracle(m))


def test_wrong_split_role(tmp_path):
    m = gray_manifest(tmp_path)
    split = split_base_novel(m)
    split.role = "cross_dataset"
    with pytest.raises(InputError):
        eval_base_to_novel(None, m, split, scorer=gray_oracle(m))


def test_delta_row_arithmetic():
    assert format_delta(70.38, 68.69) == "+1.69"
    assert format_delta(95.12, 93.53) == "+1.59"
    assert format_delta(68.69, 70.38) == "-1.69"
    assert format_delta(50.0, 50.0) == "+0.00"
    table = TransferTable("cross_dataset", {"UCF101": 70.38}, {"UCF101": 68.69})
    assert table.deltas == {"UCF101": "+1.69"}
    assert table.format().splitlines()[-1].split() == ["Delta", "+1.69"]


def test_table_without_baseline_has_no_delta_row():
    table = TransferTable("domain_shift", {"x": 50.0})
    text = table.format()
    assert "Delta" not in text and len(text.splitlines()) == 2


def test_baseline_mismatch_rejected():
    with pytest.raises(InputError, match="do not match"):
        TransferTable("cross_dataset", {"a": 1.0}, {"b": 2.0})


def test_results_round_trip(tmp_path):
    path = write_results(tmp_path / "r.json", {"role": "cross_dataset", "accuracies": {"a": 68.69}})
    assert read_results(path)["accuracies"] == {"a": 68.69}
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(InputError):
        read_results(tmp_path / "bad.json")


def test_transfer_on_source_equals_source_eval(tmp_path, shapes4):
    m = load_manifest(shapes4)
    model = PromptedDualEncoder.build(tiny_config(), seed=0, dtype=torch.float64)
    ckpt = save_checkpoint(tmp_path / "m.pt", model, {})
    table = eval_transfer(ckpt, [m], "cross_dataset")
    direct = accuracy(model, ImageStore(m), m.samples_of("test"), m.classes, m.template, m.classes)
    assert table.accuracies == {m.name: round(100 * direct, 2)}


def test_transfer_with_baseline_file(tmp_path):
    m = gray_manifest(tmp_path)
    base = write_results(tmp_path / "base.json", {"role": "cross_dataset", "accuracies": {"gray": 68.69}})
    table = eval_transfer(None, [m], "cross_dataset", baseline=base, scorer=gray_oracle(m))
    assert table.accuracies == {"gray": 100.0} and table.deltas == {"gray": "+31.31"}
    with pytest.raises(InputError):
        eval_transfer(None, [("other", m)], "cross_dataset", baseline=base, scorer=gray_oracle(m))
    with pytest.raises(InputError):
        eval_transfer(None, [m], "base_to_novel", scorer=gray_oracle(m))
