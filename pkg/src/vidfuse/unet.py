"""The toy latent video denoiser.

A two-resolution U-Net over per-frame latents: res-block at full latent
resolution, downsample, res-block plus self/cross attention at half
resolution, downsample, a mid block with the same attention pair at quarter
resolution, then the mirrored up path with skip connections. Attention lives
only at the two deepest resolutions to bound the attention-store footprint.

Self-attention is inflatable to spatial-temporal attention: keys and values
for frame i concatenate frame i with the clip's middle frame (round-half-up
on 1-based indices), doubling the key length. Every attention evaluation
flows through :func:`attention_core`, which hands the row-stochastic map to
an optional controller hook that may replace it before values are mixed.

Output projections of attention and residual blocks plus the final
convolution are zero-initialized, so a freshly initialized model predicts
exactly zero noise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import torch
from torch import nn

from . import codec
from .errors import ConfigError, ContractError, ShapeError, VocabularyError
from .text import MAX_TOKENS, TokenSeq, default_vocabulary

SPATIAL_ONLY = "spatial_only"
SPATIAL_TEMPORAL = "spatial_temporal"


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 12
    latent_size: int = 16
    base_width: int = 64
    heads: int = 4
    text_dim: int = 64
    time_embed_dim: int = 128
    vocab_size: int = field(default_factory=lambda: len(default_vocabulary()))
    max_tokens: int = MAX_TOKENS
    norm_groups: int = 8
    temporal_mode: str = SPATIAL_TEMPORAL

    @property
    def attn_width(self) -> int:
        return 2 * self.base_width

    @property
    def head_dim(self) -> int:
        return self.attn_width // self.heads

    @property
    def attention_resolutions(self) -> tuple[int, int]:
        return (self.latent_size // 2, self.latent_size // 4)

    def validate(self) -> None:
        if self.temporal_mode not in (SPATIAL_ONLY, SPATIAL_TEMPORAL):
            raise ConfigError(f"temporal_mode must be spatial_only|spatial_temporal, got {self.temporal_mode!r}")
        if self.attn_width % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide attention width {self.attn_width}")
        if self.latent_size % 4:
            raise ConfigError(f"latent_size={self.latent_size} must be divisible by 4")
        for width in (self.base_width, self.attn_width):
            if width % self.norm_groups:
                raise ConfigError(f"norm_groups={self.norm_groups} does not divide width {width}")
        for name in ("latent_channels", "base_width", "heads", "text_dim", "time_embed_dim", "vocab_size", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def with_temporal_mode(self, mode: str) -> "ModelConfig":
        return replace(self, temporal_mode=mode)

    def describe(self) -> dict[str, object]:
        return {name: getattr(self, name) for name in (
            "latent_channels", "latent_size", "base_width", "heads", "text_dim",
            "time_embed_dim", "vocab_size", "max_tokens", "norm_groups", "temporal_mode",
        )}


def attention_blocks(config: ModelConfig) -> tuple[tuple[str, int], ...]:
    """(block_id, resolution) for every attention location, in forward order."""
    half, quarter = config.attention_resolutions
    return ((f"down{half}", half), (f"mid{quarter}", quarter), (f"up{half}", half))


@dataclass
class AttentionTensor:
    """One captured attention map: (frames, heads, query_pixels, key_len)."""

    values: torch.Tensor
    kind: str            # "self" | "cross"
    block_id: str
    resolution: int


AttentionHook = Callable[[AttentionTensor], Optional[torch.Tensor]]


def attention_core(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    scale: float,
    hook: AttentionHook | None = None,
    *,
    kind: str = "self",
    block_id: str = "",
    resolution: int = 0,
) -> tuple[torch.Tensor, AttentionTensor]:
    """Softmax attention with an optional map-replacement hook.

    q is (frames, heads, Q, d); k and v are (frames, heads, K, d). The
    row-stochastic map is handed to the hook, which may return a same-shape
    replacement used for the value mix.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k inner dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v key lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    weights = torch.softmax(logits, dim=-1)
    attn = AttentionTensor(weights, kind=kind, block_id=block_id, resolution=resolution)
    mix = weights
    if hook is not None:
        replacement = hook(attn)
        if replacement is not None:
            if replacement.shape != weights.shape:
                raise ContractError(
                    f"hook returned shape {tuple(replacement.shape)} for map of shape {tuple(weights.shape)}"
                )
            mix = replacement
    return torch.matmul(mix, v), attn


def warp_frame_index(n: int) -> int:
    """0-based index of the clip's warp (middle) frame; round-half-up on 1-based indices."""
    if n < 1:
        raise ConfigError(f"frame count must be >= 1, got {n}")
    return (n + 1) // 2 - 1


def spatial_temporal_keys(features: torch.Tensor, frame: int) -> torch.Tensor:
    """Key/value features for one frame: [current frame ; warp frame], doubling length.

    ``features`` is (frames, tokens, channels); ``frame`` is 0-based.
    """
    n = features.shape[0]
    if not 0 <= frame < n:
        raise ConfigError(f"frame index {frame} outside [0, {n})")
    return torch.cat([features[frame], features[warp_frame_index(n)]], dim=0)


def _st_concat(features: torch.Tensor) -> torch.Tensor:
    """Vectorized spatial_temporal_keys over all frames: (n, T, c) -> (n, 2T, c)."""
    n = features.shape[0]
    warp = features[warp_frame_index(n)].unsqueeze(0).expand_as(features)
    return torch.cat([features, warp], dim=1)


def sinusoidal_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)  # zero-init output projection
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x), inplace=True))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[None, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h), inplace=True))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int, kind: str, block_id: str,
                 resolution: int, groups: int, context_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.kind = kind
        self.block_id = block_id
        self.resolution = resolution
        # the paper's d is the full projection width of the block
        self.scale = channels ** -0.5
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim or channels, channels, bias=False)
        self.to_v = nn.Linear(context_dim or channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)  # zero-init output projection

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, tokens, c = x.shape
        return x.view(n, tokens, self.heads, c // self.heads).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor | None = None,
        hook: AttentionHook | None = None,
        temporal: bool = False,
    ) -> torch.Tensor:
        n, c, height, width = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # (n, HW, c)
        q = self.to_q(h)
        if self.kind == "cross":
            if text is None:
                raise ContractError(f"cross-attention block {self.block_id} needs a text embedding")
            ctx = text.unsqueeze(0).expand(n, -1, -1)
            k, v = self.to_k(ctx), self.to_v(ctx)
        else:
            k, v = self.to_k(h), self.to_v(h)
            if temporal:
                k, v = _st_concat(k), _st_concat(v)
        out, _ = attention_core(
            self._split(q), self._split(k), self._split(v), self.scale, hook,
            kind=self.kind, block_id=self.block_id, resolution=height,
        )
        out = out.transpose(1, 2).reshape(n, height * width, c)
        out = self.to_out(out).transpose(1, 2).reshape(n, c, height, width)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        # 2x2 stride-2 transposed conv: exact non-overlapping upsample
        self.conv = nn.ConvTranspose2d(channels, channels, 2, stride=2)

    def forward(self, x):
        return self.conv(x)


class NoisePredictor(nn.Module):
    """U-Net noise predictor with text conditioning and controller hooks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        w, w2, g = config.base_width, config.attn_width, config.norm_groups
        half, quarter = config.attention_resolutions
        heads, tdim = config.heads, config.text_dim

        self.token_embed = nn.Embedding(config.vocab_size, tdim)
        self.pos_embed = nn.Parameter(torch.zeros(config.max_tokens, tdim))
        self.time_in = nn.Linear(config.time_embed_dim, config.time_embed_dim)
        self.time_out = nn.Linear(config.time_embed_dim, config.time_embed_dim)

        self.conv_in = nn.Conv2d(config.latent_channels, w, 3, padding=1)
        self.res_down1 = ResBlock(w, w, config.time_embed_dim, g)
        self.down1 = Downsample(w)
        self.res_down2 = ResBlock(w, w2, config.time_embed_dim, g)
        self.self_down = AttentionBlock(w2, heads, "self", f"down{half}", half, g)
        self.cross_down = AttentionBlock(w2, heads, "cross", f"down{half}", half, g, context_dim=tdim)
        self.down2 = Downsample(w2)
        self.res_mid = ResBlock(w2, w2, config.time_embed_dim, g)
        self.self_mid = AttentionBlock(w2, heads, "self", f"mid{quarter}", quarter, g)
        self.cross_mid = AttentionBlock(w2, heads, "cross", f"mid{quarter}", quarter, g, context_dim=tdim)
        self.up2 = Upsample(w2)
        self.res_up2 = ResBlock(w2 + w2, w2, config.time_embed_dim, g)
        self.self_up = AttentionBlock(w2, heads, "self", f"up{half}", half, g)
        self.cross_up = AttentionBlock(w2, heads, "cross", f"up{half}", half, g, context_dim=tdim)
        self.up1 = Upsample(w2)
        self.res_up1 = ResBlock(w2 + w, w, config.time_embed_dim, g)
        self.norm_out = nn.GroupNorm(g, w)
        self.conv_out = nn.Conv2d(w, config.latent_channels, 3, padding=1)  # zero-init

    def embed_text(self, tokens: TokenSeq) -> torch.Tensor:
        """Token table lookup plus learned positional offsets: (max_tokens, text_dim)."""
        ids = torch.tensor(tokens.ids, dtype=torch.long)
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise VocabularyError(
                f"token id outside vocabulary of size {self.config.vocab_size}"
            )
        return self.token_embed(ids) + self.pos_embed

    def time_embedding(self, t: int) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.config.time_embed_dim).to(self.time_in.weight.dtype)
        return self.time_out(torch.nn.functional.silu(self.time_in(emb)))

    def forward(
        self,
        z: torch.Tensor,
        t: int,
        text: torch.Tensor,
        hook: AttentionHook | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] != cfg.latent_size or z.shape[3] != cfg.latent_size:
            raise ShapeError(
                f"latent must be (n, {cfg.latent_channels}, {cfg.latent_size}, {cfg.latent_size}), got {tuple(z.shape)}"
            )
        if t < 0:
            raise ConfigError(f"timestep must be >= 0, got {t}")
        if text.shape != (cfg.max_tokens, cfg.text_dim):
            raise ShapeError(f"text embedding must be ({cfg.max_tokens}, {cfg.text_dim}), got {tuple(text.shape)}")
        temporal = cfg.temporal_mode == SPATIAL_TEMPORAL

        temb = self.time_embedding(t)
        h0 = self.conv_in(z)
        h1 = self.res_down1(h0, temb)
        h2 = self.res_down2(self.down1(h1), temb)
        h2 = self.self_down(h2, hook=hook, temporal=temporal)
        h2 = self.cross_down(h2, text=text, hook=hook)
        m = self.res_mid(self.down2(h2), temb)
        m = self.self_mid(m, hook=hook, temporal=temporal)
        m = self.cross_mid(m, text=text, hook=hook)
        u2 = self.res_up2(torch.cat([self.up2(m), h2], dim=1), temb)
        u2 = self.self_up(u2, hook=hook, temporal=temporal)
        u2 = self.cross_up(u2, text=text, hook=hook)
        u1 = self.res_up1(torch.cat([self.up1(u2), h1], dim=1), temb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(u1), inplace=True))


def _is_zero_init(name: str) -> bool:
    return any(tag in name for tag in (".to_out.", ".conv2.")) or name.startswith("conv_out.")


def init_model(config: ModelConfig, seed: int) -> NoisePredictor:
    """Deterministically initialized model; same (config, seed) gives bit-identical weights."""
    model = NoisePredictor(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if _is_zero_init(name):
                p.zero_()
            elif "norm" in name or ".norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name == "token_embed.weight":
                # unit-norm random rows: tokens are well separated for the
                # cross-attention keys/values from the first step
                raw = torch.randn(p.shape, generator=g)
                p.copy_(raw / raw.norm(dim=1, keepdim=True))
            elif name == "pos_embed":
                p.copy_(torch.randn(p.shape, generator=g) * 0.1)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))
    return model


def weights_digest(model: NoisePredictor) -> str:
    """SHA-256 over all parameters in name order; identifies a weight set."""
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(model: NoisePredictor, directory: str | Path) -> None:
    """One VT01 tensor file per parameter plus a flat config file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in sorted(model.config.describe().items())]
    (directory / "config.txt").write_text("\n".join(lines) + "\n")
    for name, p in sorted(model.state_dict().items()):
        codec.write_tensor(directory / f"{name}.vt", p.detach().float())


def load_model(directory: str | Path) -> NoisePredictor:
    directory = Path(directory)
    fields: dict[str, object] = {}
    for line in (directory / "config.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    config = ModelConfig(
        latent_channels=int(fields["latent_channels"]),
        latent_size=int(fields["latent_size"]),
        base_width=int(fields["base_width"]),
        heads=int(fields["heads"]),
        text_dim=int(fields["text_dim"]),
        time_embed_dim=int(fields["time_embed_dim"]),
        vocab_size=int(fields["vocab_size"]),
        max_tokens=int(fields["max_tokens"]),
        norm_groups=int(fields["norm_groups"]),
        temporal_mode=str(fields["temporal_mode"]),
    )
    model = NoisePredictor(config)
    state = {}
    for name in model.state_dict():
        path = directory / f"{name}.vt"
        if not path.exists():
            raise ConfigError(f"weights directory {directory} missing tensor {name}")
        state[name] = codec.read_tensor(path)
    model.load_state_dict(state)
    return model
