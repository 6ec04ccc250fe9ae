"""Augmented-branch inputs: remote generative augmenters behind a content-addressed cache,
plus deterministic local fallbacks (EDA for text, geometric/photometric ops for images).

Wire protocol for remote augmenters: one ``POST`` per request with a JSON body
``{"modality", "class", "template", "seed"}``. Text endpoints answer with the
sentence as UTF-8; image endpoints answer with a base64-encoded raster.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import random
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from filelock import FileLock
from PIL import Image

from .errors import AugmentationUnavailable, ConfigError, InputError
from .seeding import derive_seed
from .tokenizer import CLASS_PLACEHOLDER, fill_template, split_words

log = logging.getLogger(__name__)

KINDS = {
    "text": ("llm_remote", "eda_local"),
    "image": ("diffusion_remote", "standard_local"),
}

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class AugmenterSpec:
    modality: str
    kind: str
    endpoint: str = ""
    seed: int = 0
    cache_dir: str = ""
    timeout: float = 30.0
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.modality not in KINDS:
            raise ConfigError(f"augmenter modality must be image or text, got {self.modality!r}")
        if self.kind not in KINDS[self.modality]:
            raise ConfigError(f"{self.kind!r} is not a {self.modality} augmenter (choose from {KINDS[self.modality]})")
        if self.kind.endswith("_remote") and not (self.endpoint or self.cache_dir):
            raise ConfigError(f"{self.kind} augmenter needs an endpoint or a cache_dir")

    @property
    def is_remote(self) -> bool:
        return self.kind.endswith("_remote")


@dataclass
class AugmentationRecord:
    key: str
    payload: object
    provenance: str  # remote | cache | local


def content_key(input_value: str, kind: str, seed: int, template: str) -> str:
    blob = json.dumps({"input": input_value, "kind": kind, "seed": seed, "template": template}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- cache


class AugmentationCache:
    """``cache_dir/<modality>/<hex key>``: UTF-8 text or PNG rasters.

    Readers never lock; writers serialize through a lock file and publish
    with an atomic rename.
    """

    def __init__(self, cache_dir):
        self.root = Path(cache_dir)

    def path(self, modality: str, key: str) -> Path:
        return self.root / modality / key

    def _lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".write.lock"))

    def _publish(self, modality, key, data: bytes):
        target = self.path(modality, key)
        with self._lock():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(target)

    def has(self, modality: str, key: str) -> bool:
        return self.path(modality, key).is_file()

    def read_text(self, key: str) -> str | None:
        p = self.path("text", key)
        return p.read_text(encoding="utf-8") if p.is_file() else None

    def write_text(self, key: str, text: str):
        self._publish("text", key, text.encode("utf-8"))

    def read_image(self, key: str) -> torch.Tensor | None:
        p = self.path("image", key)
        if not p.is_file():
            return None
        with Image.open(p) as im:
            return uint8_to_tensor(np.asarray(im))

    def write_image(self, key: str, image: torch.Tensor):
        buf = io.BytesIO()
        Image.fromarray(tensor_to_uint8(image)).save(buf, format="PNG")
        self._publish("image", key, buf.getvalue())


def tensor_to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = (image.detach().double().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy().squeeze()


def uint8_to_tensor(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


# ---------------------------------------------------------------- remote


def post_request(endpoint: str, body: dict, timeout: float) -> bytes:
    req = urllib.request.Request(
        endpoint,
        data=json.dumps(body).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


def _fetch(spec: AugmenterSpec, key: str, body: dict, reader, writer, decode):
    cache = AugmentationCache(spec.cache_dir) if spec.cache_dir else None
    if cache is not None:
        hit = reader(cache, key)
        if hit is not None:
            return AugmentationRecord(key, hit, "cache")
    if not spec.endpoint:
        raise AugmentationUnavailable(
            f"{spec.kind}: cache miss for {body['class']!r} and no endpoint configured; "
            "warm the cache (augment-cache) or switch to a local augmenter"
        )
    try:
        raw = post_request(spec.endpoint, body, spec.timeout)
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        raise AugmentationUnavailable(
            f"{spec.kind}: endpoint {spec.endpoint} unreachable ({exc}) and cache is cold; "
            "warm the cache (augment-cache) or switch to a local augmenter"
        ) from exc
    payload = decode(raw)
    if cache is not None:
        writer(cache, key, payload)
    return AugmentationRecord(key, payload, "remote")


def first_sentence(text: str) -> str:
    text = " ".join(text.strip().split())
    parts = [p for p in _SENTENCE_END.split(text) if p]
    if not parts:
        return ""
    if len(parts) > 1:
        log.warning("augmenter returned %d sentences; keeping the first", len(parts))
    return parts[0]


def fetch_text_llm(class_name: str, template: str, spec: AugmenterSpec) -> AugmentationRecord:
    if not class_name or not class_name.strip():
        raise InputError("class name must be non-empty")
    if spec.kind != "llm_remote":
        raise ConfigError(f"fetch_text_llm needs an llm_remote spec, got {spec.kind}")
    if CLASS_PLACEHOLDER not in template:
        raise InputError(f"template {template!r} lacks the {CLASS_PLACEHOLDER} placeholder")
    key = content_key(class_name, spec.kind, spec.seed, template)
    body = {"modality": "text", "class": class_name, "template": template, "seed": spec.seed}

    def decode(raw: bytes) -> str:
        sentence = first_sentence(raw.decode("utf-8"))
        if not sentence:
            raise AugmentationUnavailable(f"endpoint returned an empty sentence for {class_name!r}")
        return sentence

    return _fetch(spec, key, body, lambda c, k: c.read_text(k), lambda c, k, v: c.write_text(k, v), decode)


def augment_text_llm(class_name: str, template: str, spec: AugmenterSpec) -> str:
    """One descriptive sentence about ``class_name`` from the LLM endpoint or the cache."""
    return fetch_text_llm(class_name, template, spec).payload


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    if image.shape[-2:] == (size, size):
        return image
    return F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def decode_image_payload(raw: bytes, size: int, channels: int = 3) -> torch.Tensor:
    with Image.open(io.BytesIO(base64.b64decode(raw))) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        image = uint8_to_tensor(np.asarray(im))
    # quantize after resizing so the fresh payload equals its cached PNG bit-for-bit
    return uint8_to_tensor(tensor_to_uint8(resize_image(image, size)))


def fetch_image_diffusion(class_name: str, spec: AugmenterSpec, template: str = "a photo of a <CLASS>") -> AugmentationRecord:
    if not class_name or not class_name.strip():
        raise InputError("class name must be non-empty")
    if spec.kind != "diffusion_remote":
        raise ConfigError(f"fetch_image_diffusion needs a diffusion_remote spec, got {spec.kind}")
    key = content_key(class_name, spec.kind, spec.seed, template)
    body = {"modality": "image", "class": class_name, "template": template, "seed": spec.seed}

    def read(cache, k):
        image = cache.read_image(k)
        if image is not None and image.shape[-2:] != (spec.image_size, spec.image_size):
            image = uint8_to_tensor(tensor_to_uint8(resize_image(image, spec.image_size)))
        return image

    return _fetch(
        spec,
        key,
        body,
        read,
        lambda c, k, v: c.write_image(k, v),
        lambda raw: decode_image_payload(raw, spec.image_size, spec.channels),
    )


def augment_image_diffusion(class_name: str, spec: AugmenterSpec, template: str = "a photo of a <CLASS>") -> torch.Tensor:
    """A generated exemplar of ``class_name`` resized to ``spec.image_size``."""
    return fetch_image_diffusion(class_name, spec, template).payload


# ---------------------------------------------------------------- local: EDA


def load_thesaurus() -> dict[str, list[str]]:
    text = resources.files("vltune").joinpath("resources/thesaurus.json").read_text()
    return json.loads(text)


_THESAURUS = None


def _thesaurus():
    global _THESAURUS
    if _THESAURUS is None:
        _THESAURUS = load_thesaurus()
    return _THESAURUS


EDA_OPS = ("synonym", "swap", "insert", "delete")


def augment_text_eda(sentence: str, seed: int, keep=(), thesaurus=None) -> str:
    """Apply one seeded EDA operation; words in ``keep`` are never replaced or deleted.

    Operations are tried in a seeded order until one applies. A single-word
    sentence is returned unchanged.
    """
    if not sentence or not sentence.strip():
        raise InputError("EDA needs a non-empty sentence")
    thesaurus = _thesaurus() if thesaurus is None else thesaurus
    words = sentence.split()
    if len(words) <= 1:
        return sentence
    protected = {w for k in keep for w in split_words(k)}
    rng = random.Random(seed)

    def is_free(w):
        return w.lower() not in protected

    def synonyms(w):
        return [s for s in thesaurus.get(w.lower(), []) if s.lower() != w.lower()]

    for op in rng.sample(EDA_OPS, len(EDA_OPS)):
        if op == "synonym":
            cands = [i for i, w in enumerate(words) if is_free(w) and synonyms(w)]
            if cands:
                i = rng.choice(cands)
                out = list(words)
                out[i] = rng.choice(synonyms(words[i]))
                return " ".join(out)
        elif op == "swap":
            i, j = rng.sample(range(len(words)), 2)
            out = list(words)
            out[i], out[j] = out[j], out[i]
            return " ".join(out)
        elif op == "insert":
            cands = [w for w in words if is_free(w) and synonyms(w)]
            if cands:
                new = rng.choice(synonyms(rng.choice(cands)))
                out = list(words)
                out.insert(rng.randint(0, len(out)), new)
                return " ".join(out)
        elif op == "delete":
            cands = [i for i, w in enumerate(words) if is_free(w)]
            if cands:
                i = rng.choice(cands)
                out = words[:i] + words[i + 1 :]
                return " ".join(out) if out else sentence
    return sentence


# ---------------------------------------------------------------- local: images

STANDARD_PROBS = {"crop": 0.5, "flip": 0.5, "solarize": 0.2, "invert": 0.2}


def sample_standard_plan(seed: int, height: int, width: int, probs=None) -> dict:
    """Draw the op plan for :func:`augment_image_standard`; ``None`` means the op is off."""
    probs = STANDARD_PROBS if probs is None else probs
    rng = random.Random(seed)
    plan = {}
    for op in ("crop", "flip", "solarize", "invert"):
        plan[op] = rng.random() < probs[op]
    if plan["crop"]:
        scale = rng.uniform(0.5, 1.0)
        ch, cw = max(1, round(height * scale)), max(1, round(width * scale))
        plan["crop"] = (rng.randint(0, height - ch), rng.randint(0, width - cw), ch, cw)
    else:
        plan["crop"] = None
    return plan


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def solarize(image: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return torch.where(image >= threshold, 1.0 - image, image)


def invert(image: torch.Tensor) -> torch.Tensor:
    return 1.0 - image


def crop_and_resize(image: torch.Tensor, top: int, left: int, h: int, w: int) -> torch.Tensor:
    H, W = image.shape[-2:]
    patch = image[..., top : top + h, left : left + w]
    return F.interpolate(patch[None], size=(H, W), mode="bilinear", align_corners=False)[0]


def augment_image_standard(image: torch.Tensor, seed: int, probs=None) -> torch.Tensor:
    """Seeded composition of crop-and-resize, horizontal flip, solarization and inversion
    on a ``[C, H, W]`` image with values in [0, 1]."""
    if image.dim() != 3:
        raise InputError(f"expected a [C, H, W] image, got shape {tuple(image.shape)}")
    plan = sample_standard_plan(seed, image.shape[-2], image.shape[-1], probs)
    out = image
    if plan["crop"] is not None:
        out = crop_and_resize(out, *plan["crop"])
    if plan["flip"]:
        out = hflip(out)
    if plan["solarize"]:
        out = solarize(out)
    if plan["invert"]:
        out = invert(out)
    return out


# ---------------------------------------------------------------- branch augmenters


class TextBranchAugmenter:
    """Class-keyed text for the augmented text branch: one sentence per class per epoch."""

    def __init__(self, spec: AugmenterSpec, template: str, pool_size: int = 1):
        self.spec = spec
        self.template = template
        self.pool_size = pool_size

    def slot_seed(self, epoch: int) -> int:
        return self.spec.seed + epoch % self.pool_size

    def __call__(self, class_name: str, epoch: int) -> str:
        if self.spec.kind == "llm_remote":
            return augment_text_llm(class_name, self.template, replace(self.spec, seed=self.slot_seed(epoch)))
        sentence = fill_template(self.template, class_name)
        return augment_text_eda(sentence, derive_seed("eda", self.spec.seed, epoch, class_name), keep=[class_name])


class ImageBranchAugmenter:
    """Augmented image branch: class-keyed diffusion exemplars or per-sample standard ops."""

    def __init__(self, spec: AugmenterSpec, template: str = "a photo of a <CLASS>", pool_size: int = 1):
        self.spec = spec
        self.template = template
        self.pool_size = pool_size

    def __call__(self, image: torch.Tensor, class_name: str, sample_id, epoch: int) -> torch.Tensor:
        if self.spec.kind == "diffusion_remote":
            slot = replace(self.spec, seed=self.spec.seed + epoch % self.pool_size)
            return augment_image_diffusion(class_name, slot, self.template).to(image.dtype)
        return augment_image_standard(image, derive_seed("img", self.spec.seed, epoch, sample_id))


def bundled_llm_fixtures() -> dict:
    text = resources.files("vltune").joinpath("resources/llm_fixtures.json").read_text()
    return json.loads(text)


def warm_text_cache(cache_dir, sentences: dict[str, str], template: str, seed: int = 0) -> int:
    """Write fixture sentences into the cache under the keys an ``llm_remote`` spec would use."""
    cache = AugmentationCache(cache_dir)
    for class_name, sentence in sentences.items():
        cache.write_text(content_key(class_name, "llm_remote", seed, template), sentence)
    return len(sentences)
