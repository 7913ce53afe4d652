"""Lossless frame/latent transforms and the on-disk formats.

Frames travel as uint8 numpy arrays shaped (n, h, w, 3); latents as float32
torch tensors shaped (n, c, h, w). The encoder normalizes to [-1, 1] and
applies a space-to-depth rearrangement with factor 2, so decode(encode(x))
is bit-exact on 8-bit input and every latent-space error is attributable to
the diffusion pipeline rather than to a lossy autoencoder.

File formats:
  frames  - binary P6 pixmaps named frame_%04d.ppm inside a directory
  tensors - "VT01" magic, u8 dtype code (0=fp32, 1=fp16), u8 rank,
            rank x u32 little-endian dims, row-major little-endian payload
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FrameIOError, ShapeError, TensorFormatError

SPACE_TO_DEPTH = 2

_MAGIC = b"VT01"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_TO_CODE = {torch.float32: 0, torch.float16: 1}


def normalize_frames(frames: np.ndarray) -> torch.Tensor:
    """uint8 (n, h, w, 3) -> float32 (n, 3, h, w) in [-1, 1]."""
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"frames must be (n, h, w, 3), got {frames.shape}")
    if frames.dtype != np.uint8:
        raise ShapeError(f"frames must be uint8, got {frames.dtype}")
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def denormalize_frames(x: torch.Tensor) -> np.ndarray:
    """float (n, 3, h, w) in [-1, 1] -> uint8 (n, h, w, 3), clamped and rounded half-to-even."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"normalized frames must be (n, 3, h, w), got {tuple(x.shape)}")
    v = ((x.detach().double() + 1.0) * 127.5).clamp(0.0, 255.0)
    v = torch.round(v)  # round half-to-even
    return v.to(torch.uint8).permute(0, 2, 3, 1).contiguous().numpy()


def encode_video(frames: np.ndarray) -> torch.Tensor:
    """Frames -> latent: normalize then space-to-depth, (n,3,h,w) -> (n,12,h/2,w/2)."""
    x = normalize_frames(frames)
    r = SPACE_TO_DEPTH
    if x.shape[2] % r or x.shape[3] % r:
        raise ConfigError(
            f"frame size {x.shape[2]}x{x.shape[3]} not divisible by space-to-depth factor {r}"
        )
    return torch.pixel_unshuffle(x, r)


def decode_video(latent: torch.Tensor) -> np.ndarray:
    """Latent -> frames: inverse rearrangement, denormalize, clamp, round."""
    if latent.ndim != 4:
        raise ShapeError(f"latent must be rank 4, got rank {latent.ndim}")
    r = SPACE_TO_DEPTH
    if latent.shape[1] % (r * r):
        raise ConfigError(f"latent channels {latent.shape[1]} not divisible by {r * r}")
    return denormalize_frames(torch.pixel_shuffle(latent, r))


# ---------------------------------------------------------------------------
# P6 frame directories


def write_frames(path: str | Path, frames: np.ndarray) -> None:
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.dtype != np.uint8:
        raise ShapeError(f"frames must be uint8 (n, h, w, 3), got {frames.shape} {frames.dtype}")
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w, _ = frames.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    for i in range(n):
        (directory / f"frame_{i:04d}.ppm").write_bytes(header + frames[i].tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise TensorFormatError(f"{path}: malformed P6 header at byte 0")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise TensorFormatError(f"{path}: unsupported maxval {maxval}")
    payload = data[m.end():]
    expected = w * h * 3
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: expected {expected} payload bytes at offset {m.end()}, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def read_frames(path: str | Path) -> np.ndarray:
    directory = Path(path)
    found = {}
    for p in directory.glob("frame_*.ppm"):
        m = re.fullmatch(r"frame_(\d{4})\.ppm", p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise FrameIOError(f"no frame_%04d.ppm files in {directory}")
    n = max(found) + 1
    missing = sorted(set(range(n)) - set(found))
    if missing:
        raise FrameIOError(f"{directory}: missing frame index {missing[0]}")
    frames = [_read_ppm(found[i]) for i in range(n)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FrameIOError(f"{directory}: mixed frame dimensions {sorted(shapes)}")
    return np.stack(frames)


def write_graymap(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary P5 graymap for mask and attention-heatmap dumps."""
    if values.ndim != 2 or values.dtype != np.uint8:
        raise ShapeError(f"graymap must be uint8 (h, w), got {values.shape} {values.dtype}")
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + values.tobytes())


def read_graymap(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise TensorFormatError(f"{path}: malformed P5 header at byte 0")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise TensorFormatError(f"{path}: unsupported maxval {maxval}")
    payload = data[m.end():]
    if len(payload) != w * h:
        raise TensorFormatError(
            f"{path}: expected {w * h} payload bytes at offset {m.end()}, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# VT01 tensor files


def write_tensor(path: str | Path, tensor: torch.Tensor) -> None:
    if tensor.dtype not in _DTYPE_TO_CODE:
        raise TensorFormatError(f"unsupported dtype {tensor.dtype}; use float32 or float16")
    if tensor.ndim > 255:
        raise TensorFormatError(f"rank {tensor.ndim} exceeds format limit")
    code = _DTYPE_TO_CODE[tensor.dtype]
    arr = tensor.detach().contiguous().cpu().numpy().astype(_DTYPE_CODES[code], copy=False)
    header = bytearray(_MAGIC)
    header.append(code)
    header.append(tensor.ndim)
    for d in tensor.shape:
        header += int(d).to_bytes(4, "little")
    Path(path).write_bytes(bytes(header) + arr.tobytes())


def read_tensor(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < 6:
        raise TensorFormatError(f"{path}: truncated header, {len(data)} bytes at offset 0")
    if data[:4] != _MAGIC:
        raise TensorFormatError(f"{path}: bad magic {data[:4]!r} at byte 0")
    code, rank = data[4], data[5]
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code} at byte 4")
    header_len = 6 + 4 * rank
    if len(data) < header_len:
        raise TensorFormatError(f"{path}: truncated dims, {len(data)} bytes at offset 6")
    dims = [int.from_bytes(data[6 + 4 * i : 10 + 4 * i], "little") for i in range(rank)]
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    payload = data[header_len:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: expected {expected} payload bytes at offset {header_len}, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype)
    if rank:
        arr = arr.reshape(dims)
    return torch.from_numpy(arr.copy())
