"""vidfuse: zero-shot text-driven video editing on a toy latent diffusion stack.

A clip is inverted to noise with DDIM while every self- and cross-attention
map is captured; editing then denoises under the target prompt, fusing the
live attention with the captured maps (cross-attention columns of unchanged
words, self-attention rows outside a mask thresholded from the source
cross-attention of the edited words).
"""

from .codec import decode_video, encode_video, read_frames, read_tensor, write_frames, write_tensor
from .data import SpriteDataset
from .fusion import FusionConfig, FusionController, MaskVolume, compute_blend_mask, cross_fuse, self_blend
from .metrics import attention_divergence, frame_acc, tem_con, toy_oracle_embedder
from .pipeline import (
    RunManifest,
    cfg_combine,
    edit,
    evaluate_loss,
    invert,
    oneshot_finetune,
    reconstruct,
    sequential_mode,
    train_toy,
)
from .schedule import NoiseSchedule, build_schedule, ddim_inverse_step, ddim_step, q_sample
from .store import AttentionStore, AttnKey, footprint
from .text import EditPlan, TokenSeq, Vocabulary, align_prompts, tokenize
from .unet import (
    AttentionTensor,
    ModelConfig,
    NoisePredictor,
    attention_core,
    init_model,
    load_model,
    save_model,
    spatial_temporal_keys,
    warp_frame_index,
    weights_digest,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionStore", "AttentionTensor", "AttnKey", "EditPlan", "FusionConfig",
    "FusionController", "MaskVolume", "ModelConfig", "NoisePredictor", "NoiseSchedule",
    "RunManifest", "SpriteDataset", "TokenSeq", "Vocabulary", "align_prompts",
    "attention_core", "attention_divergence", "build_schedule", "cfg_combine",
    "compute_blend_mask", "cross_fuse", "ddim_inverse_step", "ddim_step",
    "decode_video", "edit", "encode_video", "evaluate_loss", "frame_acc",
    "footprint", "init_model", "invert", "load_model", "oneshot_finetune",
    "q_sample", "read_frames", "read_tensor", "reconstruct", "save_model",
    "self_blend", "sequential_mode", "spatial_temporal_keys", "tem_con",
    "tokenize", "toy_oracle_embedder", "train_toy", "warp_frame_index",
    "weights_digest", "write_frames", "write_tensor",
]
