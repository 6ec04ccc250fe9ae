"""Command-line entry point: ``vltune <command> [options]``.

Every command except ``make-synthetic`` and ``show-config`` gets its own run
directory holding the resolved config, logs and outputs. An existing,
non-empty run directory is never reused.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from .config import RunConfig, dump_run_config, load_run_config
from .errors import ConfigError, InputError, VLTuneError

log = logging.getLogger("vltune")

PRESETS = ("desk", "paper")
IO_EXIT_CODE = 6


# ---------------------------------------------------------------- config plumbing


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return Path(str(resources.files("vltune").joinpath(f"presets/{name}.cfg")))


def resolve_config_path(value: str | None) -> Path | None:
    """A config argument is a file path or the name of a bundled preset."""
    if value is None:
        return None
    path = Path(value)
    if path.is_file() or value not in PRESETS:
        return path
    return preset_path(value)


def flag_overrides(args) -> list[str]:
    """Translate convenience flags into ``section.key=value`` overrides (applied after --set)."""
    mapping = {
        "seed": "train.seed",
        "manifest": "data.manifest",
        "shots": "data.shots",
        "split_role": "data.split_role",
        "targets": "data.targets",
        "baseline": "eval.baseline",
        "max_steps": "train.max_steps",
    }
    out = list(getattr(args, "set", None) or [])
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def resolve_config(args, require_mandatory: bool) -> RunConfig:
    path = resolve_config_path(args.config)
    return load_run_config(path, flag_overrides(args), require_mandatory=require_mandatory)


# ---------------------------------------------------------------- run directories


class RunDirectory:
    """A fresh per-invocation directory guarded by a lock file for the command's lifetime."""

    LOCK_NAME = ".lock"

    def __init__(self, path: Path):
        self.path = path
        self._lock = None

    @classmethod
    def create(cls, requested: str | None, command: str, root: str = "runs") -> "RunDirectory":
        if requested:
            path = Path(requested)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            base = Path(root) / f"{command}-{stamp}-{os.getpid()}"
            path, n = base, 1
            while path.exists():
                path, n = base.with_name(f"{base.name}-{n}"), n + 1
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            path.mkdir()
        except FileExistsError:
            if not path.is_dir() or any(path.iterdir()):
                raise InputError(f"run directory {path} already exists and is not empty; runs are never overwritten")
        return cls(path)

    def __enter__(self):
        self._lock = FileLock(str(self.path / self.LOCK_NAME))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise InputError(f"run directory {self.path} is locked by another process") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def echo_config(self, cfg: RunConfig) -> Path:
        out = self.path / "config.cfg"
        out.write_text(dump_run_config(cfg), encoding="utf-8")
        return out


# ---------------------------------------------------------------- commands


def _load_manifest(path_value: str, what: str = "data.manifest"):
    from .data import load_manifest

    if not path_value:
        raise ConfigError(f"{what} is not set (use --manifest or --set {what}=...)")
    return load_manifest(path_value)


def _split_for(cfg: RunConfig, manifest):
    from .data import split_base_novel, transfer_split

    if cfg.data.split_role == "base_to_novel":
        return split_base_novel(manifest, cfg.data.seed, cfg.data.randomized_split)
    return transfer_split(manifest, cfg.data.split_role)


def cmd_train(args) -> int:
    from .training import train

    cfg = resolve_config(args, require_mandatory=True)
    manifest = _load_manifest(cfg.data.manifest)
    split = _split_for(cfg, manifest)
    with RunDirectory.create(args.run_dir, "train", args.runs_root) as run:
        run.echo_config(cfg)
        result = train(manifest, split, cfg, run.path, resume_from=args.resume)
        summary = {
            "checkpoint": str(result.checkpoint),
            "log": str(result.log_path),
            "steps": len(result.reports),
            "final_l_total": result.reports[-1].l_total if result.reports else None,
        }
        (run.path / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"run directory: {run.path}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import eval_base_to_novel, eval_transfer, write_results
    from .model import load_checkpoint

    cfg = resolve_config(args, require_mandatory=False)
    model, _ = load_checkpoint(args.checkpoint)
    with RunDirectory.create(args.run_dir, "eval", args.runs_root) as run:
        run.echo_config(cfg)
        role = cfg.data.split_role
        if role == "base_to_novel":
            manifest = _load_manifest(cfg.data.manifest)
            split = _split_for(cfg, manifest)
            res = eval_base_to_novel(model, manifest, split, pairwise=cfg.eval.pairwise, novel_space=cfg.eval.novel_space)
            results = {"role": role, "accuracies": res.as_percent()}
            text = f"base {results['accuracies']['base']:.2f}\nnovel {results['accuracies']['novel']:.2f}\n"
        else:
            if not cfg.data.target_list:
                raise ConfigError("data.targets is empty; list target manifests for transfer evaluation")
            targets = [load_manifest(t) for t in cfg.data.target_list]
            table = eval_transfer(model, targets, role, baseline=cfg.eval.baseline or None, pairwise=cfg.eval.pairwise)
            results = table.to_results()
            text = table.format()
        write_results(run.path / "results.json", results)
        (run.path / "results.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"run directory: {run.path}")
    return 0


def cmd_augment_cache(args) -> int:
    from dataclasses import replace

    from .augmentation import (
        AugmenterSpec,
        bundled_llm_fixtures,
        fetch_image_diffusion,
        fetch_text_llm,
        warm_text_cache,
    )

    cfg = resolve_config(args, require_mandatory=False)
    aug = cfg.augment
    if not aug.cache_dir:
        raise ConfigError("augment.cache_dir is not set")
    manifest = _load_manifest(cfg.data.manifest)
    with RunDirectory.create(args.run_dir, "augment-cache", args.runs_root) as run:
        run.echo_config(cfg)
        counts = {"text": 0, "image": 0}
        seeds = [aug.seed + slot for slot in range(aug.pool_size)]
        if args.fixtures is not None:
            data = bundled_llm_fixtures() if args.fixtures == "bundled" else json.loads(Path(args.fixtures).read_text())
            sentences = data.get("sentences", data)
            missing = [c for c in manifest.classes if c not in sentences]
            if missing:
                raise InputError(f"fixtures have no sentence for classes {missing}")
            for seed in seeds:
                counts["text"] += warm_text_cache(aug.cache_dir, {c: sentences[c] for c in manifest.classes}, manifest.template, seed)
        common = dict(cache_dir=aug.cache_dir, timeout=aug.timeout, image_size=cfg.model.image_size, channels=cfg.model.channels)
        if aug.text_kind == "llm_remote" and args.fixtures is None:
            spec = AugmenterSpec("text", "llm_remote", endpoint=aug.text_endpoint, seed=aug.seed, **common)
            for seed in seeds:
                for c in manifest.classes:
                    fetch_text_llm(c, manifest.template, replace(spec, seed=seed))
                    counts["text"] += 1
        if aug.image_kind == "diffusion_remote":
            spec = AugmenterSpec("image", "diffusion_remote", endpoint=aug.image_endpoint, seed=aug.seed, **common)
            for seed in seeds:
                for c in manifest.classes:
                    fetch_image_diffusion(c, replace(spec, seed=seed), manifest.template)
                    counts["image"] += 1
        (run.path / "cache_summary.json").write_text(json.dumps(counts) + "\n", encoding="utf-8")
    print(f"cached {counts['text']} text and {counts['image']} image entries in {aug.cache_dir}")
    return 0


def cmd_visualize(args) -> int:
    from .augmentation import resize_image
    from .data import load_image
    from .model import load_checkpoint
    from .tokenizer import fill_template
    from .visualization import extract_object_attention, render_overlay

    cfg = resolve_config(args, require_mandatory=False)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    mc = model.config
    image = load_image(args.image, mc.channels)
    if tuple(image.shape[-2:]) != (mc.image_size, mc.image_size):
        image = resize_image(image, mc.image_size)
    text = fill_template(args.prompt, args.class_word) if "<CLASS>" in args.prompt else args.prompt
    word_index = model.tokenizer.word_position(text, args.class_word)
    position = model.text_stream_position(word_index)
    with RunDirectory.create(args.run_dir, "visualize", args.runs_root) as run:
        run.echo_config(cfg)
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            img_seq, _ = model.encode_image_tokens(image[None].to(dtype))
            txt_seq, _ = model.encode_text_tokens(model.tokenize([text]))
            _, _, records = model.adapt(img_seq, txt_seq)
        heat = extract_object_attention(records, position, direction=args.direction)
        out = Path(args.out) if args.out else run.path / "overlay.png"
        render_overlay(heat, image, out)
        written = [out]
        if args.per_layer:
            layers = extract_object_attention(records, position, direction=args.direction, per_layer=True)
            for i, layer_map in enumerate(layers):
                path = out.with_name(f"{out.stem}_layer{i}{out.suffix}")
                render_overlay(layer_map, image, path)
                written.append(path)
        torch.save({"heatmap": heat, "text": text, "token_position": position}, run.path / "heatmap.pt")
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_make_synthetic(args) -> int:
    from .data import SHAPES, make_shapes_dataset

    if args.class_names:
        classes = [c.strip() for c in args.class_names.split(",") if c.strip()]
    else:
        if not 2 <= args.num_classes <= len(SHAPES):
            raise ConfigError(f"--num-classes must lie in [2, {len(SHAPES)}]")
        classes = list(SHAPES[: args.num_classes])
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise InputError(f"{out} already exists and is not empty")
    path = make_shapes_dataset(
        out,
        classes=classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        image_size=args.image_size,
        seed=args.seed,
        style=args.style,
    )
    print(f"wrote {path}")
    return 0


def cmd_show_config(args) -> int:
    cfg = resolve_config(args, require_mandatory=not args.lenient)
    sys.stdout.write(dump_run_config(cfg))
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, run_dir: bool = True):
    p.add_argument("--config", help="config file path or bundled preset name (desk, paper)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    if run_dir:
        p.add_argument("--run-dir", help="run directory to create (default: <runs-root>/<command>-<time>-<pid>)")
        p.add_argument("--runs-root", default="runs", help="parent of auto-named run directories")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--manifest", help="dataset manifest (data.manifest)")
    p.add_argument("--shots", type=int, help="training shots per class (data.shots)")
    p.add_argument("--split-role", choices=("base_to_novel", "cross_dataset", "domain_shift"), help="data.split_role")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vltune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="few-shot fine-tuning")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (train.max_steps)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="base-to-novel or transfer evaluation")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", help="comma-separated target manifests (data.targets)")
    p.add_argument("--baseline", help="baseline results file for the Delta row (eval.baseline)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-cache", help="pre-warm the augmentation cache for a manifest")
    _add_common(p)
    p.add_argument("--manifest", help="dataset manifest (data.manifest)")
    p.add_argument("--fixtures", nargs="?", const="bundled",
                   help="seed the text cache from a JSON fixture file instead of the endpoint (no value: bundled fixtures)")
    p.set_defaults(func=cmd_augment_cache)

    p = sub.add_parser("visualize", help="cross-attention heatmap overlay for one class word")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", default="a photo of a <CLASS>")
    p.add_argument("--class-word", required=True)
    p.add_argument("--out", help="overlay PNG path (default: <run-dir>/overlay.png)")
    p.add_argument("--direction", choices=("text_to_image", "image_to_text"), default="text_to_image")
    p.add_argument("--per-layer", action="store_true", help="also write one overlay per adapter layer")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("make-synthetic", help="generate a procedural shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--class-names", help="comma-separated shape names (overrides --num-classes)")
    p.add_argument("--train-per-class", type=int, default=24)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--style", default="clean")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("show-config", help="print the resolved config")
    _add_common(p, run_dir=False)
    p.add_argument("--lenient", action="store_true", help="do not require the mandatory keys")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VLTuneError as exc:
        print(f"vltune: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vltune: io error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
