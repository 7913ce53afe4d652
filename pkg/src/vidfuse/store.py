"""Capture-and-replay storage for attention maps.

Maps are keyed by (step index, block id, kind) where the step index counts
model calls of the inversion pass from 0; the i-th call of inversion pairs
with the i-th-from-the-end call of editing. Keys are write-once. Entries are
held at a configured precision and the oldest steps spill to disk as VT01
files once a memory budget is exceeded; fetch transparently reloads them.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Iterable, NamedTuple

import torch

from . import codec
from .errors import ConfigError, ContractError, StoreLookupError
from .unet import AttentionTensor, ModelConfig, attention_blocks

_PRECISIONS = {"fp32": torch.float32, "fp16": torch.float16}
_BYTES = {"fp32": 4, "fp16": 2}


class AttnKey(NamedTuple):
    step: int
    block: str
    kind: str

    def filename(self) -> str:
        return f"step{self.step}_{self.block}_{self.kind}.vt"

    @classmethod
    def from_filename(cls, name: str) -> "AttnKey":
        stem = name[:-3] if name.endswith(".vt") else name
        parts = stem.split("_")
        if len(parts) != 3 or not parts[0].startswith("step"):
            raise ConfigError(f"not a store entry filename: {name}")
        return cls(int(parts[0][4:]), parts[1], parts[2])


class _Entry:
    __slots__ = ("tensor", "meta", "path")

    def __init__(self, tensor: torch.Tensor | None, meta: AttentionTensor, path: Path | None = None):
        self.tensor = tensor
        self.meta = meta
        self.path = path


class AttentionStore:
    """Write-once map store with optional disk spill.

    Insertion is serialized with a lock so concurrent block captures within a
    step are safe; reads after capture completes are lock-free on resident
    entries.
    """

    def __init__(
        self,
        precision: str = "fp32",
        budget_bytes: int | None = None,
        spill_dir: str | Path | None = None,
    ):
        if precision not in _PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
        if budget_bytes is not None and spill_dir is None:
            raise ConfigError("a memory budget requires spill_dir")
        self.precision = precision
        self.budget_bytes = budget_bytes
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.noise_trace: list[torch.Tensor] | None = None  # diagnostics only
        self._entries: dict[AttnKey, _Entry] = {}
        self._resident_bytes = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: AttnKey) -> bool:
        return key in self._entries

    def keys(self) -> Iterable[AttnKey]:
        return self._entries.keys()

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    def record(self, key: AttnKey, attn: AttentionTensor) -> None:
        tensor = attn.values.detach().to(_PRECISIONS[self.precision])
        meta = AttentionTensor(
            values=torch.empty(0), kind=attn.kind, block_id=attn.block_id, resolution=attn.resolution
        )
        with self._lock:
            if key in self._entries:
                raise ContractError(f"duplicate attention record for {key}")
            self._entries[key] = _Entry(tensor, meta)
            self._resident_bytes += tensor.numel() * tensor.element_size()
            if self.budget_bytes is not None:
                self._spill_over_budget()

    def fetch(self, key: AttnKey) -> AttentionTensor:
        entry = self._entries.get(key)
        if entry is None:
            raise StoreLookupError(
                f"no attention map recorded for step={key.step} block={key.block} kind={key.kind}"
            )
        tensor = entry.tensor
        if tensor is None:
            tensor = codec.read_tensor(entry.path)
        return AttentionTensor(tensor, entry.meta.kind, entry.meta.block_id, entry.meta.resolution)

    def _spill_over_budget(self) -> None:
        # oldest (lowest step index) entries leave memory first
        resident = sorted(
            (k for k, e in self._entries.items() if e.tensor is not None),
            key=lambda k: (k.step, k.block, k.kind),
        )
        for key in resident:
            if self._resident_bytes <= self.budget_bytes:
                break
            self._spill_one(key)

    def _spill_one(self, key: AttnKey) -> None:
        entry = self._entries[key]
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        path = self.spill_dir / key.filename()
        try:
            codec.write_tensor(path, entry.tensor)
        except OSError as exc:
            raise IOError(f"failed to spill attention map to {path}: {exc}") from exc
        self._resident_bytes -= entry.tensor.numel() * entry.tensor.element_size()
        entry.tensor = None
        entry.path = path

    def save(self, directory: str | Path) -> None:
        """Persist every entry as a VT01 file (the spill layout) plus an index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"precision={self.precision}"]
        for key in sorted(self._entries, key=lambda k: (k.step, k.block, k.kind)):
            attn = self.fetch(key)
            codec.write_tensor(directory / key.filename(), attn.values)
            lines.append(f"{key.filename()}={attn.kind},{attn.block_id},{attn.resolution}")
        (directory / "index.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "AttentionStore":
        """Open a persisted store; tensors are read lazily from disk."""
        directory = Path(directory)
        index = directory / "index.txt"
        if not index.exists():
            raise ConfigError(f"{directory} is not an attention store (no index.txt)")
        precision = "fp32"
        store: AttentionStore | None = None
        entries: dict[AttnKey, _Entry] = {}
        for line in index.read_text().splitlines():
            name, _, value = line.partition("=")
            if name == "precision":
                precision = value
                continue
            kind, block_id, resolution = value.split(",")
            key = AttnKey.from_filename(name)
            meta = AttentionTensor(torch.empty(0), kind, block_id, int(resolution))
            entries[key] = _Entry(None, meta, directory / name)
        store = cls(precision=precision)
        store._entries = entries
        return store


def footprint(
    config: ModelConfig,
    T_sample: int,
    frames: int,
    precision: str = "fp32",
) -> int:
    """Exact predicted bytes of a full capture over all attention blocks."""
    if T_sample < 0 or frames < 1:
        raise ConfigError(f"need T_sample >= 0 and frames >= 1, got {T_sample}, {frames}")
    if precision not in _BYTES:
        raise ConfigError(f"precision must be one of {sorted(_BYTES)}, got {precision!r}")
    per_el = _BYTES[precision]
    f = 2 if config.temporal_mode == "spatial_temporal" else 1
    total = 0
    for _, resolution in attention_blocks(config):
        q_pixels = resolution * resolution
        self_keys = f * q_pixels
        cross_keys = config.max_tokens
        per_step = frames * config.heads * q_pixels * (self_keys + cross_keys) * per_el
        total += per_step * T_sample
    return total
