"""Attention fusion: cross-attention column fusion and masked self-attention blending.

During editing, each live attention map is paired with the map captured at
the same position of the inversion pass. Cross-attention keeps the target
prompt's columns for edited words and takes aligned words' columns from the
source; self-attention rows are blended under a binary mask thresholded from
the source cross-attention of the edited words, so the edited region follows
the live maps while everything else replays inversion. Both fusions are
gated by timestep-fraction thresholds.

Mask arithmetic runs in float64 with explicit accumulation order so results
are bit-reproducible against elementwise reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import ConfigError, ContractError, ShapeError
from .store import AttentionStore, AttnKey
from .text import EditPlan
from .unet import AttentionHook, AttentionTensor

PRESETS = {
    "style_attribute": {"t_s": 0.2, "t_c": 0.3, "tau": 1.0},
    "shape": {"t_s": 0.5, "t_c": 0.5, "tau": 0.3},
}


@dataclass(frozen=True)
class FusionConfig:
    t_s: float = 0.2              # self-attention blending active for t/T > t_s
    t_c: float = 0.3              # cross-attention fusion active for t/T > t_c
    tau: float = 1.0              # blend-mask threshold (strict >)
    s_cfg: float = 7.5
    total_steps: int = 50
    preset: str = "style_attribute"
    skip_blocks: frozenset[str] = frozenset()

    def __post_init__(self):
        for name in ("t_s", "t_c", "tau"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"fusion.{name} must be in [0, 1], got {value}")
        if self.s_cfg < 1.0:
            raise ConfigError(f"fusion.s_cfg must be >= 1, got {self.s_cfg}")
        if self.total_steps < 1:
            raise ConfigError(f"fusion.total_steps must be >= 1, got {self.total_steps}")

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "FusionConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        fields = dict(PRESETS[preset], preset=preset)
        fields.update(overrides)
        return cls(**fields)

    def with_overrides(self, **overrides) -> "FusionConfig":
        return replace(self, **overrides)

    def self_active(self, t: int) -> bool:
        return t / self.total_steps > self.t_s

    def cross_active(self, t: int) -> bool:
        return t / self.total_steps > self.t_c


@dataclass
class MaskVolume:
    """Per-frame binary spatial masks; 1 marks the region being edited."""

    values: torch.Tensor  # (frames, resolution, resolution), float32 in {0, 1}
    resolution: int

    def query_rows(self) -> torch.Tensor:
        """(frames, resolution^2) view aligned with flattened attention queries."""
        return self.values.reshape(self.values.shape[0], -1)

    def save_graymaps(self, directory) -> None:
        """One P5 graymap per frame (0 preserved, 255 edited) for inspection."""
        from pathlib import Path

        from . import codec

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(self.values):
            arr = (frame.numpy() * 255).astype("uint8")
            codec.write_graymap(directory / f"mask_{i:04d}.pgm", arr)


def _resample(v: torch.Tensor, target: int) -> torch.Tensor:
    """Area resample (n, s, s) -> (n, target, target) for integer ratios.

    Downsampling accumulates block elements in row-major offset order so the
    result is reproducible against a loop-based reference.
    """
    source = v.shape[-1]
    if target == source:
        return v
    if target < source:
        if source % target:
            raise ConfigError(f"resolution {target} incompatible with source {source}")
        factor = source // target
        acc = torch.zeros(v.shape[0], target, target, dtype=v.dtype)
        for dy in range(factor):
            for dx in range(factor):
                acc = acc + v[:, dy::factor, dx::factor]
        return acc / float(factor * factor)
    if target % source:
        raise ConfigError(f"resolution {target} incompatible with source {source}")
    factor = target // source
    return v.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def compute_blend_mask(
    c_src: AttentionTensor,
    plan: EditPlan,
    tau: float,
    resolution: int,
) -> MaskVolume:
    """Binary mask from the source cross-attention of the edited words.

    Head-mean, max over the edited words' token columns, per-frame
    max-normalization to [0, 1], area resample to the target resolution,
    then a strict > tau threshold. An empty source edited set yields an
    all-zero mask.
    """
    if c_src.kind != "cross":
        raise ContractError(f"blend mask needs a cross-attention map, got kind={c_src.kind!r}")
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    values = c_src.values.to(torch.float64)
    frames, heads, q_pixels, _ = values.shape
    source_res = int(round(q_pixels ** 0.5))
    if source_res * source_res != q_pixels:
        raise ShapeError(f"query pixels {q_pixels} is not a square spatial map")

    acc = torch.zeros(frames, q_pixels, values.shape[-1], dtype=torch.float64)
    for h in range(heads):
        acc = acc + values[:, h]
    mean = acc / float(heads)

    columns = sorted(plan.src_edited)
    if columns:
        word_map = mean[:, :, columns].amax(dim=-1)
    else:
        word_map = torch.zeros(frames, q_pixels, dtype=torch.float64)

    peak = word_map.amax(dim=1, keepdim=True)
    normalized = torch.where(peak > 0, word_map / peak, torch.zeros_like(word_map))

    grid = _resample(normalized.reshape(frames, source_res, source_res), resolution)
    mask = (grid > tau).to(torch.float32)
    return MaskVolume(mask, resolution)


def cross_fuse(
    c_edit: AttentionTensor,
    c_src: AttentionTensor,
    plan: EditPlan,
    t: int,
    cfg: FusionConfig,
) -> AttentionTensor:
    """Column fusion: aligned words take the source columns, edited and pad
    columns keep the live editing map. Inactive below the t_c gate."""
    if c_edit.values.shape[:3] != c_src.values.shape[:3] or c_edit.values.shape[-1] != c_src.values.shape[-1]:
        raise ContractError(
            f"cross maps disagree: {tuple(c_edit.values.shape)} vs {tuple(c_src.values.shape)}"
        )
    token_axis = c_edit.values.shape[-1]
    highest = max((p for pair in plan.alignment for p in pair), default=-1)
    if highest >= token_axis:
        raise ContractError(f"plan references token column {highest} beyond axis {token_axis}")
    if not cfg.cross_active(t):
        return c_edit
    out = c_edit.values.clone()
    for src_pos, edit_pos in plan.alignment:
        out[..., edit_pos] = c_src.values[..., src_pos].to(out.dtype)
    return AttentionTensor(out, c_edit.kind, c_edit.block_id, c_edit.resolution)


def self_blend(
    s_edit: AttentionTensor,
    s_src: AttentionTensor,
    mask: MaskVolume,
    t: int,
    cfg: FusionConfig,
) -> AttentionTensor:
    """Row blending: masked query rows keep the live map, the rest replay the
    source map; the mask broadcasts over heads and keys. Inactive below t_s."""
    if s_edit.values.shape != s_src.values.shape:
        raise ShapeError(
            f"self maps disagree: {tuple(s_edit.values.shape)} vs {tuple(s_src.values.shape)}"
        )
    rows = mask.query_rows()
    if rows.shape != (s_edit.values.shape[0], s_edit.values.shape[2]):
        raise ShapeError(
            f"mask rows {tuple(rows.shape)} do not match queries "
            f"{(s_edit.values.shape[0], s_edit.values.shape[2])}"
        )
    if not cfg.self_active(t):
        return s_edit
    keep_edit = rows.bool()[:, None, :, None]
    out = torch.where(keep_edit, s_edit.values, s_src.values.to(s_edit.values.dtype))
    return AttentionTensor(out, s_edit.kind, s_edit.block_id, s_edit.resolution)


def controller_step(
    cfg: FusionConfig,
    store: AttentionStore,
    plan: EditPlan,
    t: int,
    block_id: str,
    kind: str,
    live: AttentionTensor,
) -> torch.Tensor:
    """Fuse one live attention map with its paired inversion map.

    ``t`` is the 1-based sampling position counting down from total_steps; the
    paired store key is t - 1. An edit whose plan changes nothing is a
    reconstruction, so identity plans pass live maps through untouched.
    """
    if block_id in cfg.skip_blocks:
        return live.values
    if plan.is_identity:
        return live.values
    key = AttnKey(step=t - 1, block=block_id, kind=kind)
    if kind == "cross":
        if not cfg.cross_active(t):
            return live.values
        return cross_fuse(live, store.fetch(key), plan, t, cfg).values
    if not cfg.self_active(t):
        return live.values
    source = store.fetch(key)
    cross_source = store.fetch(AttnKey(step=t - 1, block=block_id, kind="cross"))
    mask = compute_blend_mask(cross_source, plan, cfg.tau, live.resolution)
    return self_blend(live, source, mask, t, cfg).values


class FusionController:
    """Builds per-step attention hooks for the editing loop.

    The conditional branch fuses cross-attention and blends self-attention;
    the unconditional branch (no word alignment) only blends self-attention.
    """

    def __init__(self, cfg: FusionConfig, store: AttentionStore, plan: EditPlan):
        self.cfg = cfg
        self.store = store
        self.plan = plan

    def hook(self, t: int, branch: str = "cond") -> AttentionHook:
        if branch not in ("cond", "uncond"):
            raise ConfigError(f"branch must be cond|uncond, got {branch!r}")

        def _hook(attn: AttentionTensor) -> torch.Tensor | None:
            if branch == "uncond" and attn.kind == "cross":
                return None
            return controller_step(self.cfg, self.store, self.plan, t, attn.block_id, attn.kind, attn)

        return _hook
