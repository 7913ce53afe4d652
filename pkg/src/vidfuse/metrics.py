"""Evaluation metrics over a pluggable embedder, plus attention diagnostics.

Temporal consistency is the mean cosine similarity of consecutive frame
embeddings; frame accuracy is the fraction of frames strictly closer to the
target prompt than to the source prompt. The default embedder is a color
histogram oracle over the sprite region, standing in for a learned image/text
encoder so metric values on the toy data are checkable by construction.
"""

from __future__ import annotations

from collections import deque
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .data import COLORS
from .errors import ContractError, MetricError
from .store import AttentionStore

_BINS = 8
_SHIFT = 8 - 3  # 256 values -> 8 bins per channel


class Embedder(Protocol):
    def frame_embed(self, frame: np.ndarray) -> np.ndarray: ...
    def text_embed(self, prompt: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise MetricError("zero-norm embedding")
    return v / norm


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def tem_con(frames: np.ndarray, embedder: Embedder) -> float:
    """Mean cosine similarity between embeddings of consecutive frames."""
    if frames.shape[0] < 2:
        raise MetricError(f"temporal consistency needs >= 2 frames, got {frames.shape[0]}")
    embeds = [embedder.frame_embed(f) for f in frames]
    sims = [_cos(embeds[i], embeds[i + 1]) for i in range(len(embeds) - 1)]
    return float(np.mean(sims))


def frame_acc(frames: np.ndarray, p_src: str, p_edit: str, embedder: Embedder) -> float:
    """Fraction of frames strictly closer to the target prompt than the source."""
    if p_src == p_edit:
        raise MetricError("frame accuracy is undefined for identical prompts")
    src_vec = embedder.text_embed(p_src)
    edit_vec = embedder.text_embed(p_edit)
    hits = sum(
        1 for f in frames if _cos(embedder.frame_embed(f), edit_vec) > _cos(embedder.frame_embed(f), src_vec)
    )
    return hits / frames.shape[0]


def attention_divergence(store_a: AttentionStore, store_b: AttentionStore) -> list[float]:
    """Per-step mean elementwise L1 distance between two captured stores."""
    keys_a, keys_b = set(store_a.keys()), set(store_b.keys())
    if keys_a != keys_b:
        missing = sorted(keys_a ^ keys_b)[:4]
        raise ContractError(f"attention stores hold different key sets, e.g. {missing}")
    steps = sorted({k.step for k in keys_a})
    series = []
    for step in steps:
        total, count = 0.0, 0
        for key in sorted(k for k in keys_a if k.step == step):
            a = store_a.fetch(key).values.to(torch.float64)
            b = store_b.fetch(key).values.to(torch.float64)
            total += float((a - b).abs().sum())
            count += a.numel()
        series.append(total / count)
    return series


class ColorHistogramEmbedder:
    """Oracle embedder: 8-bins-per-channel color histogram of the sprite region.

    The sprite region is the largest 4-connected component of pixels that
    differ from the estimated background color; a frame with no foreground
    falls back to a histogram of the background itself. Text embeddings are
    the expected histogram of the prompt's sprite color.
    """

    color_threshold = 40

    def frame_embed(self, frame: np.ndarray) -> np.ndarray:
        if frame.ndim != 3 or frame.shape[-1] != 3:
            raise MetricError(f"frame must be (h, w, 3), got {frame.shape}")
        pixels = frame.reshape(-1, 3)
        codes = (pixels[:, 0] >> _SHIFT) * 64 + (pixels[:, 1] >> _SHIFT) * 8 + (pixels[:, 2] >> _SHIFT)
        mode = np.bincount(codes).argmax()
        background = pixels[codes == mode].mean(axis=0)
        component = self._largest_component(frame, background)
        region = frame[component] if component.any() else pixels
        return _unit(self._histogram(region.reshape(-1, 3)))

    def text_embed(self, prompt: str) -> np.ndarray:
        words = prompt.lower().split()
        color = next((w.strip(",.") for w in words if w.strip(",.") in COLORS), None)
        if color is None:
            return _unit(np.ones(3 * _BINS))
        expected = np.array(COLORS[color], dtype=np.uint8).reshape(1, 3)
        return _unit(self._histogram(expected))

    @staticmethod
    def _histogram(pixels: np.ndarray) -> np.ndarray:
        hist = np.zeros((3, _BINS), dtype=np.float64)
        for ch in range(3):
            hist[ch] = np.bincount(pixels[:, ch] >> _SHIFT, minlength=_BINS)[:_BINS]
        return hist.reshape(-1)

    def _largest_component(self, frame: np.ndarray, background: np.ndarray) -> np.ndarray:
        diff = np.abs(frame.astype(np.int16) - background.astype(np.int16)).max(axis=-1)
        foreground = diff > self.color_threshold
        h, w = foreground.shape
        seen = np.zeros_like(foreground)
        best = np.zeros_like(foreground)
        best_size = 0
        for sy in range(h):
            for sx in range(w):
                if not foreground[sy, sx] or seen[sy, sx]:
                    continue
                member = np.zeros_like(foreground)
                queue = deque([(sy, sx)])
                seen[sy, sx] = member[sy, sx] = True
                size = 0
                while queue:
                    y, x = queue.popleft()
                    size += 1
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and foreground[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = member[ny, nx] = True
                            queue.append((ny, nx))
                if size > best_size:
                    best, best_size = member, size
        return best


def toy_oracle_embedder() -> ColorHistogramEmbedder:
    return ColorHistogramEmbedder()


def write_metrics(directory: str | Path, values: dict[str, float]) -> Path:
    """Append key=value lines to the run directory's metrics file."""
    path = Path(directory) / "metrics.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]:.6f}\n")
    return path
