"""Few-shot fine-tuning loop: four-branch forward, adapters, losses, SGD on the tunable partition."""

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .augmentation import AugmenterSpec, ImageBranchAugmenter, TextBranchAugmenter
from .config import RunConfig
from .data import DatasetManifest, EvalSplit, ImageStore, Sample, sample_few_shot
from .errors import ConfigError, NumericError
from .losses import BranchEmbeddings, LossReport, compute_losses
from .model import PromptedDualEncoder, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .tokenizer import fill_template

log = logging.getLogger(__name__)

LOG_HEADER = "\t".join(["step"] + LossReport.field_names())


@dataclass
class Augmenters:
    text: TextBranchAugmenter
    image: ImageBranchAugmenter


def build_augmenters(cfg: RunConfig, template: str) -> Augmenters:
    aug, m = cfg.augment, cfg.model
    common = dict(seed=aug.seed, cache_dir=aug.cache_dir, timeout=aug.timeout, image_size=m.image_size, channels=m.channels)
    text_spec = AugmenterSpec("text", aug.text_kind, endpoint=aug.text_endpoint, **common)
    image_spec = AugmenterSpec("image", aug.image_kind, endpoint=aug.image_endpoint, **common)
    return Augmenters(
        TextBranchAugmenter(text_spec, template, aug.pool_size),
        ImageBranchAugmenter(image_spec, template, aug.pool_size),
    )


def make_optimizer(model: PromptedDualEncoder, cfg: RunConfig):
    """SGD over the tunable partition; returns ``(optimizer, parameter names)``."""
    tc = cfg.train
    model.set_backbone_frozen(tc.freeze_backbone)
    names = model.trainable_parameter_names(tc.freeze_backbone)
    params = dict(model.named_parameters())
    opt = torch.optim.SGD(
        [params[n] for n in names], lr=tc.learning_rate, momentum=tc.momentum, weight_decay=tc.weight_decay
    )
    return opt, names


def forward_branches(model: PromptedDualEncoder, images, token_ids, aug_images=None, aug_token_ids=None):
    """Encode the (up to) four branches, run adapters on the attached ones and project.

    Returns ``(BranchEmbeddings, adapter attention records)``.
    """
    cfg = model.config
    img, _ = model.encode_image_tokens(images)
    txt, _ = model.encode_text_tokens(token_ids)
    streams = {("image", "original"): img, ("text", "original"): txt}
    if aug_images is not None:
        streams[("image", "augmented")], _ = model.encode_image_tokens(aug_images)
    if aug_token_ids is not None:
        streams[("text", "augmented")], _ = model.encode_text_tokens(aug_token_ids)

    out = {}
    records = []
    pair_sim = None
    if model.adapter is not None:
        acfg = cfg.adapter

        def attached(attach):
            return {"original": ["original"], "augmented": ["augmented"], "both": ["original", "augmented"], "none": []}[attach]

        img_branches = attached(acfg.attach_image_branch)
        txt_branches = attached(acfg.attach_text_branch)
        wanted = [("image", b) for b in img_branches] + [("text", b) for b in txt_branches]
        if any(key not in streams for key in wanted):
            raise ConfigError("adapters attached to an augmented branch but the augmented inputs are missing")
        if model.adapter.uses_cross:
            for bi, bt in zip(img_branches, txt_branches):
                if (bi, bt) == ("original", "original"):
                    # every image-text combination gets its own cross-attended pass so that
                    # a text embedding never sees its paired image only
                    u, v, recs = model.adapt_all_pairs(streams[("image", bi)], streams[("text", bt)])
                    pair_sim = (u * v).sum(-1)
                    u, v = u.diagonal().T, v.diagonal().T
                else:
                    u, v, recs = model.adapt(streams[("image", bi)], streams[("text", bt)])
                out[("image", bi)], out[("text", bt)] = u, v
                records.extend(recs)
        else:
            for bi in img_branches:
                out[("image", bi)], _, recs = model.adapt(streams[("image", bi)], None)
                records.extend(recs)
            for bt in txt_branches:
                _, out[("text", bt)], recs = model.adapt(None, streams[("text", bt)])
                records.extend(recs)
    for key, seq in streams.items():
        if key not in out:
            out[key] = model.project_image(seq) if key[0] == "image" else model.project_text(seq)
    branches = BranchEmbeddings(
        z_img_orig=out[("image", "original")],
        z_img_aug=out.get(("image", "augmented")),
        z_txt_orig=out[("text", "original")],
        z_txt_aug=out.get(("text", "augmented")),
        pair_similarity=pair_sim,
    )
    return branches, records


def train_step(model, optimizer, images, texts, aug_images, aug_texts, cfg: RunConfig) -> LossReport:
    """One SGD step on a batch of (image, templated text) pairs plus their augmented views."""
    model.train()
    use_aug = cfg.model.use_consistency
    ids = model.tokenize(texts)
    aug_ids = model.tokenize(aug_texts) if use_aug else None
    branches, _ = forward_branches(model, images, ids, aug_images if use_aug else None, aug_ids)
    loss, report = compute_losses(branches, cfg.model, single_alpha=cfg.train.single_alpha)
    if not report.is_finite():
        raise NumericError(f"non-finite loss: {report}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.train.grad_clip_norm is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip_norm)
    optimizer.step()
    return report


def epoch_batches(samples: list[Sample], batch_size: int, seed: int, epoch: int) -> list[list[Sample]]:
    """Seeded shuffle into batches; a trailing batch smaller than 2 is merged into the previous one."""
    gen = torch.Generator().manual_seed(derive_seed("batches", seed, epoch))
    order = torch.randperm(len(samples), generator=gen).tolist()
    batches = [[samples[i] for i in order[j : j + batch_size]] for j in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


@contextmanager
def deterministic_mode():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    reports: list[LossReport]
    model: PromptedDualEncoder
    samples: list[Sample]
    epoch_checkpoints: list[Path] = field(default_factory=list)
    trainable_names: list[str] = field(default_factory=list)


def train(
    manifest: DatasetManifest,
    split: EvalSplit,
    cfg: RunConfig,
    run_dir,
    augmenters: Augmenters | None = None,
    resume_from=None,
    model: PromptedDualEncoder | None = None,
    store: ImageStore | None = None,
) -> TrainResult:
    """Run ``epochs`` x batches of :func:`train_step`, checkpointing every epoch.

    The log gets one tab-separated line per step (``step`` then every
    LossReport field). On a non-finite loss the run aborts and the last
    epoch checkpoint is left in place.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    dtype = getattr(torch, tc.dtype)
    samples = sample_few_shot(manifest, split, cfg.data.shots, cfg.data.seed)
    class_names = list(split.base_classes)
    label_names = {s: manifest.classes[s.label] for s in samples}
    store = store or ImageStore(manifest, cfg.model.channels, cfg.model.image_size)
    if augmenters is None and cfg.model.use_consistency:
        augmenters = build_augmenters(cfg, manifest.template)

    start_epoch, step = 0, 0
    train_state = None
    if resume_from is not None:
        model, train_state = load_checkpoint(resume_from)
        start_epoch, step = train_state["epoch"], train_state["step"]
    elif model is None:
        model = PromptedDualEncoder.build(cfg.model, seed=tc.seed, dtype=dtype)
    optimizer, names = make_optimizer(model, cfg)
    if train_state is not None:
        optimizer.load_state_dict(train_state["optimizer"])

    log_path = run_dir / "train_log.tsv"
    reports: list[LossReport] = []
    epoch_ckpts: list[Path] = []
    done = False
    fresh_log = not resume_from or not log_path.exists()
    with deterministic_mode(), open(log_path, "w" if fresh_log else "a", encoding="utf-8") as fh:
        if fresh_log:
            fh.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, tc.epochs):
            for batch in epoch_batches(samples, tc.batch_size, tc.seed, epoch):
                images = store.batch(batch).to(dtype)
                texts = [fill_template(manifest.template, label_names[s]) for s in batch]
                aug_images = aug_texts = None
                if cfg.model.use_consistency:
                    aug_images = torch.stack(
                        [augmenters.image(store.get(s), label_names[s], s.path, epoch) for s in batch]
                    ).to(dtype)
                    aug_texts = [augmenters.text(label_names[s], epoch) for s in batch]
                report = train_step(model, optimizer, images, texts, aug_images, aug_texts, cfg)
                step += 1
                reports.append(report)
                fh.write(report.to_row(step) + "\n")
                if tc.max_steps is not None and step >= tc.max_steps:
                    done = True
                    break
            if done:
                break
            state = {"epoch": epoch + 1, "step": step, "optimizer": optimizer.state_dict(), "classes": class_names}
            epoch_ckpts.append(save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:03d}.pt", model, state))
    final_state = {"epoch": tc.epochs, "step": step, "optimizer": optimizer.state_dict(), "classes": class_names}
    final = save_checkpoint(ckpt_dir / "final.pt", model, final_state)
    return TrainResult(final, log_path, reports, model, samples, epoch_ckpts, names)


def parameter_signature(model: PromptedDualEncoder, names=None, values: bool = True) -> str:
    """SHA-256 over parameter names and shapes (and values when ``values``)."""
    params = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params if names is None else names):
        t = params[name].detach()
        h.update(f"{name}:{tuple(t.shape)};".encode())
        if values:
            h.update(t.contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
