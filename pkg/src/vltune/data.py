"""Dataset manifests, base/novel splits, few-shot sampling and the bundled synthetic shapes data.

Manifest file format (version 1)::

    # vltune-manifest 1
    name = shapes4
    template = a photo of a <CLASS>
    class = circle
    class = square
    ---
    images/0000.png<TAB>0<TAB>train
    images/0001.png<TAB>1<TAB>test

Header lines are ``key = value``; one ``class`` line per class, in label order.
Sample paths are relative to the manifest's directory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError, ManifestError
from .seeding import derive_seed
from .tokenizer import CLASS_PLACEHOLDER

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# vltune-manifest 1"
SPLIT_TAGS = ("train", "test")


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    samples: list[Sample]
    template: str = "a photo of a <CLASS>"
    root: Path = field(default_factory=Path)

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.path)
        return p if p.is_absolute() else self.root / p

    def samples_of(self, split: str, classes=None) -> list[Sample]:
        wanted = None if classes is None else {self.classes.index(c) for c in classes}
        return [s for s in self.samples if s.split == split and (wanted is None or s.label in wanted)]

    def serialize(self) -> str:
        lines = [MANIFEST_MAGIC, f"name = {self.name}", f"template = {self.template}"]
        lines += [f"class = {c}" for c in self.classes]
        lines.append("---")
        lines += [f"{s.path}\t{s.label}\t{s.split}" for s in self.samples]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.serialize(), encoding="utf-8")
        return path


@dataclass
class EvalSplit:
    base_classes: list[str]
    novel_classes: list[str]
    role: str = "base_to_novel"

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise InputError(f"base and novel classes overlap: {sorted(overlap)}")


def parse_manifest(text: str, root=Path(".")) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ManifestError(f"missing header {MANIFEST_MAGIC!r}", line=1)
    header: dict[str, str] = {}
    classes: list[str] = []
    class_lines: dict[str, int] = {}
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if stripped == "---":
            body_start = lineno
            break
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ManifestError(f"expected 'key = value', got {stripped!r}", line=lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key == "class":
            if not value:
                raise ManifestError("empty class name", line=lineno)
            if value in class_lines:
                raise ManifestError(f"duplicate class name {value!r} (first at line {class_lines[value]})", line=lineno)
            class_lines[value] = lineno
            classes.append(value)
        elif key in ("name", "template"):
            header[key] = value
        else:
            raise ManifestError(f"unknown header key {key!r}", line=lineno)
    if body_start is None:
        raise ManifestError("missing '---' separator between header and samples")
    if "name" not in header:
        raise ManifestError("missing 'name' header")
    template = header.get("template", "a photo of a <CLASS>")
    if CLASS_PLACEHOLDER not in template:
        raise ManifestError(f"template {template!r} lacks the {CLASS_PLACEHOLDER} placeholder")
    if not classes:
        raise ManifestError("no classes declared")
    samples = []
    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ManifestError(f"expected 'path<TAB>class index<TAB>split', got {line!r}", line=lineno)
        path, label_text, split = (p.strip() for p in parts)
        try:
            label = int(label_text)
        except ValueError:
            raise ManifestError(f"class index {label_text!r} is not an integer", line=lineno) from None
        if not 0 <= label < len(classes):
            raise ManifestError(f"class index {label} out of range [0, {len(classes)})", line=lineno)
        if split not in SPLIT_TAGS:
            raise ManifestError(f"split tag must be one of {SPLIT_TAGS}, got {split!r}", line=lineno)
        samples.append(Sample(path, label, split))
    if not samples:
        raise ManifestError("empty dataset")
    return DatasetManifest(header["name"], classes, samples, template, Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def split_base_novel(manifest: DatasetManifest, seed: int = 0, randomized: bool = False) -> EvalSplit:
    """First ceil(C/2) classes in manifest order are base, the rest novel.

    ``randomized`` shuffles the class order with ``seed`` before halving.
    """
    classes = list(manifest.classes)
    if len(classes) < 2:
        raise InputError(f"base/novel split needs at least 2 classes, got {len(classes)}")
    if randomized:
        order = np.random.default_rng(derive_seed("split", seed)).permutation(len(classes))
        classes = [classes[i] for i in order]
    n_base = math.ceil(len(classes) / 2)
    return EvalSplit(classes[:n_base], classes[n_base:], "base_to_novel")


def transfer_split(manifest: DatasetManifest, role: str) -> EvalSplit:
    """Source-side split for cross-dataset / domain-shift runs: train on every source class."""
    if role not in ("cross_dataset", "domain_shift"):
        raise InputError(f"transfer role must be cross_dataset or domain_shift, got {role!r}")
    return EvalSplit(list(manifest.classes), [], role)


def sample_few_shot(manifest: DatasetManifest, split: EvalSplit, shots: int, seed: int) -> list[Sample]:
    """``min(shots, available)`` train samples per base class, drawn without replacement."""
    if shots < 1:
        raise InputError(f"shots must be >= 1, got {shots}")
    chosen = []
    for name in split.base_classes:
        label = manifest.classes.index(name)
        pool = [s for s in manifest.samples if s.split == "train" and s.label == label]
        if not pool:
            raise InputError(f"base class {name!r} has no train samples")
        k = min(shots, len(pool))
        if k < shots:
            log.warning("class %r has only %d train samples (< %d shots); using all", name, len(pool), shots)
        rng = np.random.default_rng(derive_seed("few-shot", seed, name))
        picks = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
        chosen.extend(pool[i] for i in picks)
    return chosen


def load_image(path, channels: int = 3) -> torch.Tensor:
    """Read a raster as a float ``[C, H, W]`` tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB" if channels == 3 else "L"), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


class ImageStore:
    """Loads manifest images on first use and keeps them in memory."""

    def __init__(self, manifest: DatasetManifest, channels: int = 3, image_size: int | None = None):
        self.manifest = manifest
        self.channels = channels
        self.image_size = image_size
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, sample: Sample) -> torch.Tensor:
        image = self._cache.get(sample.path)
        if image is None:
            image = load_image(self.manifest.resolve(sample), self.channels)
            if self.image_size is not None and image.shape[-1] != self.image_size:
                image = torch.nn.functional.interpolate(
                    image[None], size=(self.image_size, self.image_size), mode="bilinear", align_corners=False
                )[0]
            self._cache[sample.path] = image
        return image

    def batch(self, samples) -> torch.Tensor:
        return torch.stack([self.get(s) for s in samples])


# ---------------------------------------------------------------- synthetic shapes

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar", "diamond", "dot", "column", "frame")
STYLES = ("clean", "noisy", "inverted", "lowcontrast")


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u**2 + v**2)
    m = np.maximum(np.abs(u), np.abs(v))
    if shape == "circle":
        return r <= 1.0
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.6)
    if shape == "square":
        return m <= 0.85
    if shape == "frame":
        return (m <= 0.9) & (m >= 0.6)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        return (v <= 0.8) & (v >= -1.0) & (np.abs(u) <= (v + 1.0) / 1.8)
    if shape == "cross":
        return ((np.abs(u) <= 0.28) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 1.0))
    if shape == "bar":
        return (np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)
    if shape == "column":
        return (np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)
    if shape == "dot":
        return r <= 0.45
    raise InputError(f"unknown shape {shape!r}; choose from {SHAPES}")


def render_shape(shape: str, size: int, rng: np.random.Generator, style: str = "clean") -> np.ndarray:
    """Render one ``[size, size, 3]`` uint8 image of ``shape`` with random colour, scale and offset."""
    if style not in STYLES:
        raise InputError(f"unknown style {style!r}; choose from {STYLES}")
    radius = rng.uniform(0.28, 0.4) * size
    cy, cx = rng.uniform(0.4, 0.6, size=2) * size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = _shape_mask(shape, (xs - cx) / radius, (ys - cy) / radius)
    fg = rng.uniform(0.55, 1.0, size=3)
    fg[rng.integers(3)] = rng.uniform(0.0, 0.3)
    bg = rng.uniform(0.0, 0.25, size=3)
    img = np.where(mask[..., None], fg, bg)
    if style == "noisy":
        img = img + rng.normal(0.0, 0.12, size=img.shape)
    elif style == "inverted":
        img = 1.0 - img
    elif style == "lowcontrast":
        img = 0.5 + 0.35 * (img - 0.5)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def make_shapes_dataset(
    out_dir,
    classes=SHAPES[:4],
    train_per_class: int = 24,
    test_per_class: int = 20,
    image_size: int = 32,
    seed: int = 0,
    style: str = "clean",
    name: str | None = None,
    template: str = "a photo of a <CLASS>",
) -> Path:
    """Write a procedurally generated shapes dataset and return its manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    classes = sorted(classes)  # manifest class order is alphabetical, so base/novel halves are stable
    name = name or f"shapes{len(classes)}-{style}"
    samples = []
    for label, shape in enumerate(classes):
        rng = np.random.default_rng(derive_seed("shapes", seed, style, shape))
        for split, count in (("train", train_per_class), ("test", test_per_class)):
            for i in range(count):
                rel = f"images/{shape}_{split}_{i:04d}.png"
                Image.fromarray(render_shape(shape, image_size, rng, style)).save(out_dir / rel)
                samples.append(Sample(rel, label, split))
    manifest = DatasetManifest(name, classes, samples, template, out_dir)
    return manifest.save(out_dir / "manifest.txt")
