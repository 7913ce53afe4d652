"""Command-line entry point wiring the modules into reproducible runs.

Every run writes a manifest before producing outputs. Exit codes: 0 success,
2 usage, 3 configuration or contract violation, 4 I/O or file format,
5 numerical failure. Config files are flat key=value text; command-line
flags override config values, which override the built-in defaults.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import codec, metrics as metrics_mod, pipeline
from .data import SpriteDataset
from .errors import (
    ConfigError,
    ContractError,
    FrameIOError,
    NumericalError,
    TensorFormatError,
    VidFuseError,
    VocabularyError,
)
from .fusion import FusionConfig
from .schedule import build_schedule
from .store import AttentionStore, AttnKey
from .text import Vocabulary, tokenize
from .unet import ModelConfig, init_model, load_model, save_model, weights_digest

PRESET_FLAGS = {"style": "style_attribute", "shape": "shape"}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


class Settings:
    """Layered config: defaults < config file < command-line flags."""

    def __init__(self, config_path: str | None):
        self.values = parse_config_file(config_path) if config_path else {}

    def _get(self, key: str, cast, default):
        if key not in self.values:
            return default
        try:
            return cast(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}={self.values[key]!r}: {exc}") from exc

    def schedule(self):
        return build_schedule(
            T_train=self._get("schedule.T_train", int, 1000),
            T_sample=self._get("schedule.T_sample", int, 50),
            beta_min=self._get("schedule.beta_min", float, 1e-4),
            beta_max=self._get("schedule.beta_max", float, 0.02),
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_size=self._get("model.latent_size", int, 16),
            base_width=self._get("model.base_width", int, 64),
            heads=self._get("model.heads", int, 4),
            text_dim=self._get("model.text_dim", int, 64),
            time_embed_dim=self._get("model.time_embed_dim", int, 128),
            norm_groups=self._get("model.norm_groups", int, 8),
            temporal_mode=self._get("model.temporal_mode", str, "spatial_temporal"),
        )

    def fusion(self, args, total_steps: int) -> FusionConfig:
        preset = PRESET_FLAGS[args.preset] if getattr(args, "preset", None) else None
        cfg = FusionConfig.from_preset(preset) if preset else FusionConfig()
        overrides = {
            "t_s": self._get("fusion.t_s", float, cfg.t_s),
            "t_c": self._get("fusion.t_c", float, cfg.t_c),
            "tau": self._get("fusion.tau", float, cfg.tau),
            "s_cfg": self._get("fusion.s_cfg", float, cfg.s_cfg),
            "total_steps": total_steps,
        }
        for flag in ("t_s", "t_c", "tau", "s_cfg"):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[flag] = value
        return cfg.with_overrides(**overrides)

    def store_kwargs(self, out: Path) -> dict:
        budget_mb = self._get("store.budget_mb", float, None)
        kwargs = {"store_precision": self._get("store.precision", str, "fp32")}
        if budget_mb is not None:
            kwargs["store_budget"] = int(budget_mb * 1024 * 1024)
            kwargs["spill_dir"] = out / "store"
        return kwargs

    def dataset(self, seed: int) -> SpriteDataset:
        return SpriteDataset(
            seed=seed,
            size=self._get("data.count", int, 256),
            frames=self._get("data.frames", int, 8),
            resolution=self._get("data.resolution", int, 32),
        )


def _write_manifest(out: Path, manifest: pipeline.RunManifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.txt")


def _normalize_heat(values: torch.Tensor) -> np.ndarray:
    arr = values.to(torch.float64).numpy()
    peak = arr.max()
    if peak > 0:
        arr = arr / peak
    return (arr * 255.0).round().astype(np.uint8)


def cmd_gen_data(args, settings: Settings) -> int:
    out = Path(args.out)
    dataset = settings.dataset(args.seed)
    count = args.count if args.count is not None else len(dataset)
    schedule = settings.schedule()
    manifest = pipeline.RunManifest.build(
        "gen-data", args.seed, args.sequential, schedule, model_digest="none",
        extra={"data.count": count, "data.frames": dataset.frames, "data.resolution": dataset.resolution},
    )
    _write_manifest(out, manifest)
    for index in range(count):
        frames, caption = dataset.clip(index)
        clip_dir = out / f"clip_{index:03d}"
        codec.write_frames(clip_dir, frames)
        (clip_dir / "caption.txt").write_text(caption + "\n")
    Vocabulary().save(out / "vocabulary.txt")
    return 0


def cmd_train(args, settings: Settings) -> int:
    out = Path(args.out)
    schedule = settings.schedule()
    dataset = settings.dataset(settings._get("data.seed", int, 0))
    with pipeline.sequential_mode(args.sequential):
        model = init_model(settings.model_config(), args.seed)
        manifest = pipeline.RunManifest.build(
            "train", args.seed, args.sequential, schedule,
            model_digest=weights_digest(model), model_fields=model.config.describe(),
            extra={"train.steps": args.steps, "train.lr": args.lr},
        )
        _write_manifest(out, manifest)
        losses = pipeline.train_toy(
            model, dataset, schedule, steps=args.steps, lr=args.lr, seed=args.seed,
            trace_path=out / "trace.csv",
        )
        save_model(model, out / "weights")
    manifest.fields["model.digest.trained"] = weights_digest(model)
    manifest.fields["train.final_loss"] = f"{losses[-1]:.8f}" if losses else "nan"
    manifest.save(out / "manifest.txt")
    return 0


def cmd_finetune(args, settings: Settings) -> int:
    out = Path(args.out)
    schedule = settings.schedule()
    with pipeline.sequential_mode(args.sequential):
        model = load_model(args.weights)
        frames = codec.read_frames(args.frames)
        z0 = codec.encode_video(frames)
        manifest = pipeline.RunManifest.build(
            "finetune", args.seed, args.sequential, schedule,
            model_digest=weights_digest(model), model_fields=model.config.describe(),
            source_prompt=args.source_prompt,
            extra={"finetune.iters": args.iters, "finetune.lr": args.lr},
        )
        _write_manifest(out, manifest)
        tuned, losses = pipeline.oneshot_finetune(
            model, z0, args.source_prompt, schedule, iters=args.iters, lr=args.lr, seed=args.seed,
        )
        save_model(tuned, out / "weights")
        pipeline.write_loss_trace(out / "trace.csv", losses)
    return 0


def cmd_invert(args, settings: Settings) -> int:
    out = Path(args.out)
    schedule = settings.schedule()
    with pipeline.sequential_mode(args.sequential):
        model = load_model(args.weights)
        frames = codec.read_frames(args.frames)
        z0 = codec.encode_video(frames)
        kwargs = settings.store_kwargs(out)
        manifest = pipeline.RunManifest.build(
            "invert", args.seed, args.sequential, schedule,
            model_digest=weights_digest(model), model_fields=model.config.describe(),
            source_prompt=args.source_prompt,
            store_dir="store",  # relative to the run directory
            store_precision=kwargs["store_precision"],
        )
        _write_manifest(out, manifest)
        z_T, store = pipeline.invert(model, z0, args.source_prompt, schedule, **kwargs)
        codec.write_tensor(out / "z_T.vt", z_T)
        store.save(out / "store")
    return 0


def _load_inversion(args, settings: Settings, command: str):
    inversion = Path(args.inversion)
    schedule = settings.schedule()
    model = load_model(args.weights)
    current = pipeline.RunManifest.build(
        command, args.seed, args.sequential, schedule,
        model_digest=weights_digest(model),
    )
    recorded = pipeline.RunManifest.load(inversion / "manifest.txt")
    pinned = ["schedule.T_train", "schedule.T_sample", "schedule.beta_min",
              "schedule.beta_max", "model.digest"]
    mismatches = recorded.diff(current, keys=pinned)
    source = getattr(args, "source_prompt", None)
    if source is not None and recorded.fields.get("prompt.source") != source:
        mismatches.append(
            f"prompt.source: {recorded.fields.get('prompt.source')!r} != {source!r}"
        )
    if mismatches:
        raise ContractError("inversion manifest mismatch: " + "; ".join(mismatches))
    z_T = codec.read_tensor(inversion / "z_T.vt")
    store = AttentionStore.load(inversion / "store")
    return model, schedule, z_T, store, recorded


def cmd_reconstruct(args, settings: Settings) -> int:
    out = Path(args.out)
    with pipeline.sequential_mode(args.sequential):
        model, schedule, z_T, store, recorded = _load_inversion(args, settings, "reconstruct")
        prompt = args.source_prompt or recorded.fields.get("prompt.source", "")
        manifest = pipeline.RunManifest.build(
            "reconstruct", args.seed, args.sequential, schedule,
            model_digest=weights_digest(model), model_fields=model.config.describe(),
            source_prompt=prompt, extra={"s_cfg": args.s_cfg},
        )
        _write_manifest(out, manifest)
        z0 = pipeline.reconstruct(model, z_T, prompt, schedule, s_cfg=args.s_cfg)
        codec.write_tensor(out / "z0.vt", z0)
        codec.write_frames(out / "frames", codec.decode_video(z0))
    return 0


def cmd_edit(args, settings: Settings) -> int:
    out = Path(args.out)
    with pipeline.sequential_mode(args.sequential):
        model, schedule, z_T, store, _ = _load_inversion(args, settings, "edit")
        fusion_cfg = settings.fusion(args, schedule.T_sample)
        manifest = pipeline.RunManifest.build(
            "edit", args.seed, args.sequential, schedule,
            model_digest=weights_digest(model), model_fields=model.config.describe(),
            fusion=fusion_cfg, source_prompt=args.source_prompt, target_prompt=args.target_prompt,
            store_dir=str(Path(args.inversion) / "store"),
        )
        _write_manifest(out, manifest)
        z0 = pipeline.edit(
            model, z_T, store, args.source_prompt, args.target_prompt, fusion_cfg, schedule
        )
        codec.write_tensor(out / "z0.vt", z0)
        codec.write_frames(out / "frames", codec.decode_video(z0))
    return 0


def cmd_metrics(args, settings: Settings) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = codec.read_frames(args.frames)
    embedder = metrics_mod.toy_oracle_embedder()
    values = {"tem_con": metrics_mod.tem_con(frames, embedder)}
    if args.target_prompt:
        if not args.source_prompt:
            raise ConfigError("--target-prompt requires --source-prompt")
        values["frame_acc"] = metrics_mod.frame_acc(
            frames, args.source_prompt, args.target_prompt, embedder
        )
    path = metrics_mod.write_metrics(out, values)
    sys.stdout.write("".join(f"{k}={v:.6f}\n" for k, v in sorted(values.items())))
    sys.stdout.write(f"written to {path}\n")
    return 0


def cmd_dump_attn(args, settings: Settings) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = AttentionStore.load(args.store)
    for selector in args.select:
        parts = selector.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"selector must be step:block:kind[:token], got {selector!r}")
        step, block, kind = int(parts[0]), parts[1], parts[2]
        token = int(parts[3]) if len(parts) == 4 else None
        attn = store.fetch(AttnKey(step, block, kind))
        maps = attn.values.to(torch.float64)
        frames = maps.shape[0]
        res = attn.resolution
        name = f"step{step}_{block}_{kind}" + (f"_tok{token}" if token is not None else "")
        target = out / name
        target.mkdir(parents=True, exist_ok=True)
        for i in range(frames):
            if kind == "cross":
                if token is None:
                    raise ConfigError(f"cross selector needs a token index: {selector!r}")
                heat = maps[i].mean(dim=0)[:, token].reshape(res, res)
            else:
                heat = maps[i].mean(dim=(0, 1)).reshape(-1, res)
            codec.write_graymap(target / f"frame_{i:04d}.pgm", _normalize_heat(heat))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidfuse",
        description="Zero-shot text-driven video editing on a toy latent diffusion stack.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--sequential", action="store_true", help="bit-reproducible single-thread mode")

    p = sub.add_parser("gen-data", help="write procedural sprite clips")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy denoiser from scratch")
    common(p)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=2e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="one-shot finetune on a single clip")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("invert", help="DDIM inversion with attention capture")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--source-prompt", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("reconstruct", help="plain DDIM denoising of an inversion")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--inversion", required=True, help="output directory of a prior invert run")
    p.add_argument("--source-prompt", default=None)
    p.add_argument("--s-cfg", type=float, default=1.0, dest="s_cfg")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("edit", help="fused editing of an inverted clip")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--inversion", required=True)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--target-prompt", required=True)
    p.add_argument("--preset", choices=sorted(PRESET_FLAGS), default="style")
    p.add_argument("--t-s", type=float, default=None, dest="t_s")
    p.add_argument("--t-c", type=float, default=None, dest="t_c")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--s-cfg", type=float, default=None, dest="s_cfg")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("metrics", help="temporal consistency and frame accuracy")
    common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--source-prompt", default=None)
    p.add_argument("--target-prompt", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("dump-attn", help="grayscale heatmaps of stored attention maps")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--select", action="append", required=True,
                   help="step:block:kind[:token], repeatable")
    p.set_defaults(func=cmd_dump_attn)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args.config)
        return args.func(args, settings)
    except (ConfigError, ContractError, VocabularyError) as exc:
        sys.stderr.write(f"vidfuse: {exc}\n")
        return 3
    except (FrameIOError, TensorFormatError, OSError) as exc:
        sys.stderr.write(f"vidfuse: {exc}\n")
        return 4
    except NumericalError as exc:
        sys.stderr.write(f"vidfuse: {exc}\n")
        return 5
    except VidFuseError as exc:
        sys.stderr.write(f"vidfuse: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
