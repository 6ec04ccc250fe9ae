"""Zero-shot classification and the base-to-novel / cross-dataset / domain-shift protocols."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable

import torch

from .data import DatasetManifest, EvalSplit, ImageStore, Sample
from .errors import InputError
from .model import PromptedDualEncoder, load_checkpoint
from .tokenizer import fill_template

# scorer(images [B, C, H, W], class_names, template) -> similarity matrix [B, num_classes]
Scorer = Callable[[torch.Tensor, list, str], torch.Tensor]


def probabilities_from_similarities(sims: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over classes of ``sim / tau`` (temperature applied to every term)."""
    return (sims / tau).softmax(dim=-1)


class ModelScorer:
    """Cosine similarities from a model; class-conditioned adapter passes when ``pairwise``.

    With ``pairwise`` off the adapters are bypassed and plain encoder
    projections are compared.
    """

    def __init__(self, model: PromptedDualEncoder, pairwise: bool = True):
        self.model = model
        self.pairwise = pairwise

    @torch.no_grad()
    def __call__(self, images: torch.Tensor, class_names, template: str) -> torch.Tensor:
        model = self.model
        model.eval()
        dtype = next(model.parameters()).dtype
        ids = model.tokenize([fill_template(template, c) for c in class_names])
        img_seq, _ = model.encode_image_tokens(images.to(dtype))
        txt_seq, _ = model.encode_text_tokens(ids)
        if self.pairwise and model.adapter is not None:
            rows = [txt_seq.select(slice(c, c + 1)) for c in range(len(class_names))]
            pairs = model.adapt_pairwise_for_eval(img_seq, rows)
            return torch.stack([(u * v).sum(-1) for u, v in pairs], dim=1)
        return model.project_image(img_seq) @ model.project_text(txt_seq).T


def classify(images, class_names, template, model: PromptedDualEncoder | None = None, pairwise=True, scorer=None, tau=None):
    """Zero-shot prediction over ``class_names``; returns ``(pred [B], probs [B, C])``."""
    if not class_names:
        raise InputError("classify needs a non-empty class list")
    if scorer is None:
        if model is None:
            raise InputError("classify needs a model or a scorer")
        scorer = ModelScorer(model, pairwise)
    if tau is None:
        tau = model.config.temperature if model is not None else 1.0
    sims = scorer(images, list(class_names), template)
    probs = probabilities_from_similarities(sims.double(), tau)
    return probs.argmax(dim=-1), probs


def accuracy(model_or_scorer, store: ImageStore, samples: list[Sample], candidates: list[str], template: str,
             label_names: list[str], pairwise=True, batch_size: int = 64) -> float:
    """Top-1 accuracy of ``samples`` against the candidate class list (fraction in [0, 1])."""
    if not samples:
        raise InputError("no samples to evaluate")
    scorer = model_or_scorer if not isinstance(model_or_scorer, PromptedDualEncoder) else ModelScorer(model_or_scorer, pairwise)
    index = {c: i for i, c in enumerate(candidates)}
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = store.batch(chunk)
        sims = scorer(images, candidates, template)
        pred = sims.argmax(dim=-1).tolist()
        correct += sum(int(p == index[label_names[s.label]]) for p, s in zip(pred, chunk))
    return correct / len(samples)


def _test_samples(manifest: DatasetManifest, classes: list[str]) -> list[Sample]:
    samples = manifest.samples_of("test", classes)
    present = {manifest.classes[s.label] for s in samples}
    missing = [c for c in classes if c not in present]
    if missing:
        raise InputError(f"no test samples for evaluated classes {missing} in {manifest.name}")
    return samples


def _as_model(model_or_path):
    if isinstance(model_or_path, (str, Path)):
        return load_checkpoint(model_or_path)[0]
    return model_or_path


@dataclass
class BaseNovelResult:
    base_accuracy: float
    novel_accuracy: float
    num_base: int
    num_novel: int

    def as_percent(self) -> dict:
        return {"base": round(100 * self.base_accuracy, 2), "novel": round(100 * self.novel_accuracy, 2)}


def eval_base_to_novel(checkpoint, manifest: DatasetManifest, split: EvalSplit, pairwise=True,
                       novel_space: str = "novel", scorer=None, batch_size: int = 64) -> BaseNovelResult:
    """Base accuracy over base test samples with base candidates; novel accuracy over novel
    test samples with novel candidates (or base+novel when ``novel_space='joint'``)."""
    if split.role != "base_to_novel":
        raise InputError(f"eval_base_to_novel needs a base_to_novel split, got {split.role}")
    model = None if scorer is not None else _as_model(checkpoint)
    scorer = scorer or ModelScorer(model, pairwise)
    channels = model.config.channels if model is not None else 3
    size = model.config.image_size if model is not None else None
    store = ImageStore(manifest, channels, size)
    base_samples = _test_samples(manifest, split.base_classes)
    novel_samples = _test_samples(manifest, split.novel_classes)
    novel_candidates = list(split.novel_classes) if novel_space == "novel" else list(split.base_classes) + list(split.novel_classes)
    base_acc = accuracy(scorer, store, base_samples, list(split.base_classes), manifest.template, manifest.classes, batch_size=batch_size)
    novel_acc = accuracy(scorer, store, novel_samples, novel_candidates, manifest.template, manifest.classes, batch_size=batch_size)
    return BaseNovelResult(base_acc, novel_acc, len(base_samples), len(novel_samples))


def format_delta(ours: float, baseline: float) -> str:
    """Signed two-decimal difference of two two-decimal accuracies, e.g. ``+1.69``."""
    diff = Decimal(f"{ours:.2f}") - Decimal(f"{baseline:.2f}")
    return f"{diff:+.2f}"


@dataclass
class TransferTable:
    role: str
    accuracies: dict[str, float]
    baseline: dict[str, float] | None = None
    label: str = "Ours"
    baseline_label: str = "Baseline"
    deltas: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.baseline:
            if set(self.baseline) != set(self.accuracies):
                raise InputError(
                    f"baseline targets {sorted(self.baseline)} do not match evaluated targets {sorted(self.accuracies)}"
                )
            self.deltas = {k: format_delta(self.accuracies[k], self.baseline[k]) for k in self.accuracies}

    def to_results(self) -> dict:
        return {"role": self.role, "accuracies": dict(self.accuracies)}

    def format(self) -> str:
        names = list(self.accuracies)
        width = max([len(self.label), len(self.baseline_label), len("Delta")]) + 2
        cols = [max(len(n), 6) + 2 for n in names]
        lines = ["Method".ljust(width) + "".join(n.rjust(c) for n, c in zip(names, cols))]
        if self.baseline:
            lines.append(self.baseline_label.ljust(width) + "".join(f"{self.baseline[n]:.2f}".rjust(c) for n, c in zip(names, cols)))
        lines.append(self.label.ljust(width) + "".join(f"{self.accuracies[n]:.2f}".rjust(c) for n, c in zip(names, cols)))
        if self.baseline:
            lines.append("Delta".ljust(width) + "".join(self.deltas[n].rjust(c) for n, c in zip(names, cols)))
        return "\n".join(lines) + "\n"


def write_results(path, results: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_results(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "accuracies" not in data:
        raise InputError(f"{path} is not a results file (missing 'accuracies')")
    return data


def eval_transfer(checkpoint, targets, role: str, baseline=None, pairwise=True, scorer=None,
                  batch_size: int = 64) -> TransferTable:
    """Zero-shot accuracy (percent, 2 decimals) on each target with its own classes and template.

    ``targets`` is a list of manifests (or ``(name, manifest)`` pairs); ``baseline``
    is an optional results mapping or results-file path for the Delta row.
    """
    if role not in ("cross_dataset", "domain_shift"):
        raise InputError(f"eval_transfer role must be cross_dataset or domain_shift, got {role!r}")
    model = None if scorer is not None else _as_model(checkpoint)
    scorer = scorer or ModelScorer(model, pairwise)
    channels = model.config.channels if model is not None else 3
    size = model.config.image_size if model is not None else None
    accs = {}
    for target in targets:
        name, manifest = target if isinstance(target, tuple) else (target.name, target)
        samples = _test_samples(manifest, manifest.classes)
        store = ImageStore(manifest, channels, size)
        acc = accuracy(scorer, store, samples, list(manifest.classes), manifest.template, manifest.classes, batch_size=batch_size)
        accs[name] = round(100 * acc, 2)
    if isinstance(baseline, (str, Path)):
        baseline = read_results(baseline)["accuracies"] if str(baseline) else None
    elif isinstance(baseline, dict) and "accuracies" in baseline:
        baseline = baseline["accuracies"]
    return TransferTable(role, accs, baseline or None)
