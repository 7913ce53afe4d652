"""Top-level procedures: inversion with attention capture, reconstruction,
fused editing under classifier-free guidance, toy training, and one-shot
finetuning.

Conventions shared by all loops: the inversion pass makes T_sample model
calls indexed 0..T_sample-1 from the clean end, evaluating the model at the
current latent with the target timestep's embedding; denoising passes count
the same positions down from the noisy end, so the i-th inversion call pairs
with the i-th-from-the-end denoising call and both see the same timestep
embedding. Inversion and reconstruction run the source prompt at guidance
scale 1.
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from pathlib import Path

import torch

from .errors import ConfigError, ContractError, TrainingError
from .fusion import FusionConfig, FusionController
from .schedule import NoiseSchedule, ddim_inverse_step, ddim_step, q_sample
from .store import AttentionStore, AttnKey
from .text import align_prompts, tokenize
from .unet import NoisePredictor, attention_blocks
from . import codec
from .data import SpriteDataset


@contextmanager
def sequential_mode(enabled: bool = True):
    """Single-threaded execution for bit-reproducible runs."""
    if not enabled:
        yield
        return
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s_cfg: float) -> torch.Tensor:
    """Classifier-free guidance: extrapolate from unconditional toward conditional."""
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(
            f"guidance branches disagree: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return eps_uncond + s_cfg * (eps_cond - eps_uncond)


def _capture_hook(store: AttentionStore, step: int):
    def hook(attn):
        store.record(AttnKey(step, attn.block_id, attn.kind), attn)
        return None

    return hook


@torch.inference_mode()
def invert(
    model: NoisePredictor,
    z0: torch.Tensor,
    p_src: str,
    schedule: NoiseSchedule,
    *,
    store_precision: str = "fp32",
    store_budget: int | None = None,
    spill_dir: str | Path | None = None,
    keep_noise: bool = False,
) -> tuple[torch.Tensor, AttentionStore]:
    """DDIM inversion of a clean latent, recording every attention map.

    Returns the final noisy latent and the completed store. With
    ``keep_noise`` the per-step noise predictions are retained on the store's
    ``noise_trace`` attribute for diagnostics; nothing consumes them.
    """
    store = AttentionStore(store_precision, store_budget, spill_dir)
    store.noise_trace = [] if keep_noise else None
    text = model.embed_text(tokenize(p_src))
    z = z0
    t_prev = 0
    for i, t in enumerate(schedule.step_indices):
        eps = model(z, t, text, _capture_hook(store, i))
        if keep_noise:
            store.noise_trace.append(eps)
        z = ddim_inverse_step(schedule, z, eps, t, t_prev)
        t_prev = t
    return z, store


@torch.inference_mode()
def reconstruct(
    model: NoisePredictor,
    z_T: torch.Tensor,
    p_src: str,
    schedule: NoiseSchedule,
    *,
    s_cfg: float = 1.0,
    capture: bool = False,
    store_precision: str = "fp32",
):
    """Plain DDIM denoising with the source prompt.

    At the default s_cfg=1 this is the reconstruction pass; larger scales (and
    ``capture=True``) support the inversion-vs-denoising attention
    diagnostics. Captured maps come from the conditional branch, keyed to pair
    with the inversion store.
    """
    store = AttentionStore(store_precision) if capture else None
    text = model.embed_text(tokenize(p_src))
    uncond = model.embed_text(tokenize(""))
    z = z_T
    total = schedule.T_sample
    for j, (t, t_prev) in enumerate(schedule.sampling_pairs()):
        hook = _capture_hook(store, total - 1 - j) if capture else None
        eps = model(z, t, text, hook)
        if s_cfg != 1.0:
            eps = cfg_combine(eps, model(z, t, uncond, None), s_cfg)
        z = ddim_step(schedule, z, eps, t, t_prev)
    return (z, store) if capture else z


@torch.inference_mode()
def edit(
    model: NoisePredictor,
    z_T: torch.Tensor,
    store: AttentionStore,
    p_src: str,
    p_edit: str,
    cfg: FusionConfig,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Denoise the inverted latent under the target prompt with attention fusion.

    The conditional branch runs the full fusion controller; the unconditional
    branch has no word alignment, so only self-attention blending applies to
    it. At s_cfg=1 guidance mixing is the mathematical identity, so the
    unconditional branch is skipped entirely and the pass stays bit-compatible
    with reconstruction.
    """
    if cfg.total_steps != schedule.T_sample:
        raise ContractError(
            f"fusion gates assume {cfg.total_steps} steps but the schedule samples {schedule.T_sample}"
        )
    expected = schedule.T_sample * len(attention_blocks(model.config)) * 2
    if len(store) != expected:
        raise ContractError(
            f"attention store holds {len(store)} maps, expected {expected}; "
            "it was not produced by invert() on this model and schedule"
        )
    plan = align_prompts(p_src, p_edit)
    controller = FusionController(cfg, store, plan)
    text = model.embed_text(plan.edit_tokens)
    uncond = model.embed_text(tokenize(""))
    z = z_T
    total = schedule.T_sample
    for j, (t, t_prev) in enumerate(schedule.sampling_pairs()):
        position = total - j  # 1-based sampling position, counting down
        eps = model(z, t, text, controller.hook(position, "cond"))
        if cfg.s_cfg != 1.0:
            eps_uncond = model(z, t, uncond, controller.hook(position, "uncond"))
            eps = cfg_combine(eps, eps_uncond, cfg.s_cfg)
        z = ddim_step(schedule, z, eps, t, t_prev)
    return z


def _training_step(model, optimizer, z0, text, schedule, generator) -> float:
    t = int(torch.randint(1, schedule.T_train + 1, (1,), generator=generator))
    eps = torch.randn(z0.shape, generator=generator)
    z_t = q_sample(schedule, z0, eps, t)
    pred = model(z_t, t, text)
    loss = torch.mean((pred - eps) ** 2)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_toy(
    model: NoisePredictor,
    dataset: SpriteDataset,
    schedule: NoiseSchedule,
    *,
    steps: int,
    lr: float = 2e-3,
    seed: int = 0,
    uncond_prob: float = 0.1,
    fresh_epochs: bool = True,
    exclude: frozenset[int] = frozenset(),
    trace_path: str | Path | None = None,
) -> list[float]:
    """Noise-prediction training on the sprite clips; returns the loss trace.

    One clip per step (frames are the batch); timestep uniform in
    [1, T_train], unit-normal noise. The caption is dropped to the empty
    prompt with probability ``uncond_prob`` so the unconditional branch used
    by classifier-free guidance is trained too.

    With ``fresh_epochs`` every epoch regenerates its clips from a new
    generator seed, so the model cannot memorize individual clips and must
    keep reading the prompt; ``exclude`` then holds back index slots (and so
    whole grammar combinations) across every epoch. Deterministic for a fixed
    seed in sequential mode.
    """
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    usable = [i for i in range(len(dataset)) if i not in exclude]
    if not usable:
        raise ConfigError("exclude leaves no training clips")
    current_epoch = 0
    source = dataset
    latents: dict[int, torch.Tensor] = {}
    losses = []
    for step in range(steps):
        epoch = step // len(usable) if fresh_epochs else 0
        if epoch != current_epoch:
            current_epoch = epoch
            source = SpriteDataset(
                seed=dataset.seed + 7919 * epoch, size=dataset.size,
                frames=dataset.frames, resolution=dataset.resolution,
            )
            latents.clear()
        pick = usable[int(torch.randint(0, len(usable), (1,), generator=generator))]
        if pick not in latents:
            frames, _ = source.clip(pick)
            latents[pick] = codec.encode_video(frames)
        caption = source.spec(pick).caption
        if uncond_prob > 0 and float(torch.rand((), generator=generator)) < uncond_prob:
            caption = ""
        text = model.embed_text(tokenize(caption))
        loss = _training_step(model, optimizer, latents[pick], text, schedule, generator)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        losses.append(loss)
    if trace_path is not None:
        write_loss_trace(trace_path, losses)
    return losses


@torch.inference_mode()
def evaluate_loss(
    model: NoisePredictor,
    dataset: SpriteDataset,
    schedule: NoiseSchedule,
    *,
    batches: int = 8,
    seed: int = 0,
) -> float:
    """Mean per-element noise-prediction loss over sampled clips (no updates)."""
    generator = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(batches):
        idx = int(torch.randint(0, len(dataset), (1,), generator=generator))
        frames, caption = dataset.clip(idx)
        z0 = codec.encode_video(frames)
        t = int(torch.randint(1, schedule.T_train + 1, (1,), generator=generator))
        eps = torch.randn(z0.shape, generator=generator)
        pred = model(q_sample(schedule, z0, eps, t), t, model.embed_text(tokenize(caption)))
        total += float(((pred - eps) ** 2).sum())
        count += z0.numel()
    return total / count


_FINETUNE_TAGS = ("to_q", "to_k", "to_v", "to_out")


def oneshot_finetune(
    model: NoisePredictor,
    video_latent: torch.Tensor,
    p_src: str,
    schedule: NoiseSchedule,
    *,
    iters: int = 100,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[NoisePredictor, list[float]]:
    """Continue noise-prediction training on one clip, attention projections only.

    Returns a tuned copy of the model (the input is untouched) and the loss
    trace; ``iters=0`` returns a bit-exact copy.
    """
    tuned = copy.deepcopy(model)
    if iters == 0:
        return tuned, []
    trainable = []
    for name, param in tuned.named_parameters():
        if any(f".{tag}." in name for tag in _FINETUNE_TAGS):
            trainable.append(param)
        else:
            param.requires_grad_(False)
    optimizer = torch.optim.Adam(trainable, lr=lr)
    generator = torch.Generator().manual_seed(seed)
    text = tuned.embed_text(tokenize(p_src)).detach()
    losses = []
    for step in range(iters):
        loss = _training_step(tuned, optimizer, video_latent, text, schedule, generator)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at finetune step {step}")
        losses.append(loss)
    for param in tuned.parameters():
        param.requires_grad_(True)
    return tuned, losses


def write_loss_trace(path: str | Path, losses: list[float]) -> None:
    lines = [f"{step},{loss:.8f}" for step, loss in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


class RunManifest:
    """Flat key=value record that pins everything needed to reproduce a run."""

    def __init__(self, fields: dict[str, str]):
        self.fields = dict(fields)

    @classmethod
    def build(
        cls,
        command: str,
        seed: int,
        sequential: bool,
        schedule: NoiseSchedule,
        model_digest: str,
        model_fields: dict[str, object] | None = None,
        fusion: FusionConfig | None = None,
        source_prompt: str | None = None,
        target_prompt: str | None = None,
        store_dir: str | None = None,
        store_precision: str | None = None,
        extra: dict[str, object] | None = None,
    ) -> "RunManifest":
        fields: dict[str, str] = {
            "command": command,
            "seed": str(seed),
            "sequential": str(sequential).lower(),
            "schedule.T_train": str(schedule.T_train),
            "schedule.T_sample": str(schedule.T_sample),
            "schedule.beta_min": repr(schedule.beta_min),
            "schedule.beta_max": repr(schedule.beta_max),
            "model.digest": model_digest,
        }
        for key, value in (model_fields or {}).items():
            fields[f"model.{key}"] = str(value)
        if fusion is not None:
            fields.update({
                "fusion.t_s": repr(fusion.t_s),
                "fusion.t_c": repr(fusion.t_c),
                "fusion.tau": repr(fusion.tau),
                "fusion.s_cfg": repr(fusion.s_cfg),
                "fusion.preset": fusion.preset,
            })
        if source_prompt is not None:
            fields["prompt.source"] = source_prompt
        if target_prompt is not None:
            fields["prompt.target"] = target_prompt
        if store_dir is not None:
            fields["store.dir"] = store_dir
        if store_precision is not None:
            fields["store.precision"] = store_precision
        for key, value in (extra or {}).items():
            fields[key] = str(value)
        return cls(fields)

    def save(self, path: str | Path) -> None:
        lines = [f"{k}={self.fields[k]}" for k in sorted(self.fields)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        fields = {}
        for line in Path(path).read_text().splitlines():
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
        return cls(fields)

    def diff(self, other: "RunManifest", keys: list[str] | None = None) -> list[str]:
        names = keys if keys is not None else sorted(set(self.fields) | set(other.fields))
        out = []
        for name in names:
            a, b = self.fields.get(name), other.fields.get(name)
            if a != b:
                out.append(f"{name}: {a!r} != {b!r}")
        return out
