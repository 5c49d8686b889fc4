"""Synthetic multi-domain images, the FARD file format, and per-domain batching.

Each image has a *shape* factor shared by every domain (a Gaussian blob in
channel 0 at a class-specific position) and a *texture* factor in channels
1-2 whose correlation with the label is set per domain by ``rho``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"FARD"
VERSION = 1
BLOB_STD = 2.0


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed data file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    style_shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    style_scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rho: float = 0.0
    noise_std: float = 0.0

    def validate(self) -> None:
        if len(self.style_shift) != 3 or len(self.style_scale) != 3:
            raise ConfigError(f"domain {self.domain_id}: style vectors need 3 entries")
        if any(s <= 0 for s in self.style_scale):
            raise ConfigError(f"domain {self.domain_id}: style_scale must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"domain {self.domain_id}: rho must lie in [-1, 1]")
        if self.noise_std < 0:
            raise ConfigError(f"domain {self.domain_id}: noise_std must be non-negative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class LabeledSet:
    images: np.ndarray  # n x 3 x H x W float32
    labels: np.ndarray  # n int64, or empty
    domain_id: int
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size not in (0, self.images.shape[0]):
            raise ContractError(f"{self.labels.size} labels for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels.size > 0

    def unlabeled(self) -> "LabeledSet":
        return LabeledSet(self.images, np.zeros(0, dtype=np.int64), self.domain_id, self.n_classes)


def default_domains(noise_std: float = 0.5) -> List[DomainSpec]:
    """Four styled domains; the last one carries no texture-label correlation."""
    shifts = [(0.0, 0.6, -0.6), (0.0, -0.6, 0.0), (0.0, 0.0, 0.6), (0.0, 0.3, 0.3)]
    scales = [(1.0, 1.0, 0.8), (1.0, 1.2, 1.0), (1.0, 0.8, 1.2), (1.0, 1.0, 1.0)]
    rhos = [0.9, 0.9, 0.9, 0.0]
    return [DomainSpec(i, shifts[i], scales[i], rhos[i], noise_std) for i in range(4)]


def class_centers(n_classes: int, h: int, w: int) -> List[Tuple[float, float]]:
    side = max(2, math.ceil(math.sqrt(n_classes)))
    rows = [(2 * i + 1) * h / (2 * side) for i in range(side)]
    cols = [(2 * j + 1) * w / (2 * side) for j in range(side)]
    grid = [(r, c) for r in rows for c in cols]
    return grid[:n_classes]


def class_codes(n_classes: int) -> np.ndarray:
    """Per-class texture code spread evenly over [-1, 1]."""
    if n_classes == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n_classes)


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def generate(spec: DomainSpec, n: int, n_classes: int, seed: int, size: int = 16) -> LabeledSet:
    spec.validate()
    if n < n_classes:
        raise ConfigError(f"need at least one sample per class ({n} < {n_classes})")
    if size < 8:
        raise ConfigError("images must be at least 8 x 8")
    rng = np.random.default_rng(seed)
    labels = balanced_labels(n, n_classes, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blobs = np.stack([np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * BLOB_STD ** 2))
                      for r, c in class_centers(n_classes, size, size)])
    u = rng.uniform(-1.0, 1.0, size=n)
    s = spec.rho * class_codes(n_classes)[labels] + math.sqrt(max(0.0, 1 - spec.rho ** 2)) * u
    shift = np.asarray(spec.style_shift)
    scl = np.asarray(spec.style_scale)
    images = np.empty((n, 3, size, size))
    images[:, 0] = shift[0] + scl[0] * blobs[labels]
    images[:, 1] = (shift[1] + scl[1] * s)[:, None, None]
    images[:, 2] = (shift[2] + scl[2] * s)[:, None, None]
    if spec.noise_std > 0:
        images += rng.normal(0.0, spec.noise_std, size=images.shape)
    return LabeledSet(images.astype(np.float32), labels, spec.domain_id, n_classes)


def leave_one_domain_out(domains: Sequence[LabeledSet], held_out: int, mode: str = "dg"):
    """Split into (sources, target). In UDA mode the target keeps its images
    but loses its labels; in DG mode it is returned as a test-only set."""
    ids = [d.domain_id for d in domains]
    if held_out not in ids:
        raise ContractError(f"unknown domain id {held_out}; have {ids}")
    sources = [d for d in domains if d.domain_id != held_out]
    target = next(d for d in domains if d.domain_id == held_out)
    if mode == "uda":
        target = target.unlabeled()
    elif mode != "dg":
        raise ConfigError(f"mode must be 'dg' or 'uda', got {mode!r}")
    return sources, target


# ---------------------------------------------------------------------------
# batching


@dataclass
class Block:
    domain_id: int
    rows: slice
    is_target: bool
    sample_ids: np.ndarray


@dataclass
class MultiDomainBatch:
    images: np.ndarray
    labels: np.ndarray  # -1 on target rows
    blocks: List[Block] = field(default_factory=list)

    @property
    def source_blocks(self) -> List[Block]:
        return [b for b in self.blocks if not b.is_target]

    @property
    def target_block(self) -> Optional[Block]:
        return next((b for b in self.blocks if b.is_target), None)

    @property
    def m(self) -> int:
        return self.blocks[0].rows.stop - self.blocks[0].rows.start


def _assemble(sets: Sequence[LabeledSet], flags: Sequence[bool], picks: Sequence[np.ndarray]) -> MultiDomainBatch:
    images, labels, blocks = [], [], []
    start = 0
    for s, is_t, idx in zip(sets, flags, picks):
        images.append(s.images[idx])
        if is_t or not s.has_labels:
            labels.append(np.full(len(idx), -1, dtype=np.int64))
        else:
            labels.append(s.labels[idx])
        blocks.append(Block(s.domain_id, slice(start, start + len(idx)), is_t, np.asarray(idx)))
        start += len(idx)
    return MultiDomainBatch(np.concatenate(images), np.concatenate(labels), blocks)


def _check_sizes(sets: Sequence[LabeledSet], m: int) -> None:
    if m < 2:
        raise ContractError("per-domain batch size must be at least 2")
    for s in sets:
        if len(s) < m:
            raise ContractError(f"domain {s.domain_id} has {len(s)} samples, fewer than m={m}")


def sample_batch(sources: Sequence[LabeledSet], target: Optional[LabeledSet], m: int,
                 rng: np.random.Generator) -> MultiDomainBatch:
    """One independent draw of ``m`` samples per domain, without replacement."""
    sets = list(sources) + ([target] if target is not None else [])
    _check_sizes(sets, m)
    flags = [False] * len(sources) + ([True] if target is not None else [])
    picks = [np.sort(rng.choice(len(s), size=m, replace=False)) for s in sets]
    return _assemble(sets, flags, picks)


def steps_per_epoch(sources: Sequence[LabeledSet], target: Optional[LabeledSet], m: int) -> int:
    sets = list(sources) + ([target] if target is not None else [])
    return min(len(s) for s in sets) // m


def epoch_batches(sources: Sequence[LabeledSet], target: Optional[LabeledSet], m: int,
                  rng: np.random.Generator) -> Iterator[MultiDomainBatch]:
    """Reshuffle every domain once, then walk the permutations in chunks of ``m``."""
    sets = list(sources) + ([target] if target is not None else [])
    _check_sizes(sets, m)
    flags = [False] * len(sources) + ([True] if target is not None else [])
    perms = [rng.permutation(len(s)) for s in sets]
    for k in range(steps_per_epoch(sources, target, m)):
        yield _assemble(sets, flags, [p[k * m:(k + 1) * m] for p in perms])


# ---------------------------------------------------------------------------
# FARD files

_HEADER = "4sIBIIIIIIB"  # magic version endian n c h w n_classes domain has_labels


def save(ds: LabeledSet, path) -> None:
    n, c, h, w = ds.images.shape
    head = struct.pack("<" + _HEADER, MAGIC, VERSION, 1, n, c, h, w, ds.n_classes, ds.domain_id,
                       1 if ds.has_labels else 0)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        if ds.has_labels:
            fh.write(ds.labels.astype("<u4").tobytes())


def to_bytes(ds: LabeledSet, big_endian: bool = False) -> bytes:
    """Serialise in either byte order (the loader honours the header flag)."""
    o = ">" if big_endian else "<"
    n, c, h, w = ds.images.shape
    head = struct.pack(o + _HEADER, MAGIC, VERSION, 0 if big_endian else 1, n, c, h, w,
                       ds.n_classes, ds.domain_id, 1 if ds.has_labels else 0)
    body = np.ascontiguousarray(ds.images, dtype=o + "f4").tobytes()
    if ds.has_labels:
        body += ds.labels.astype(o + "u4").tobytes()
    return head + body


def from_bytes(buf: bytes) -> LabeledSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'FARD'", 0)
    size = struct.calcsize("<" + _HEADER)
    if len(buf) < 9:
        raise FormatError("truncated header", len(buf))
    flag = buf[8]
    if flag not in (0, 1):
        raise FormatError(f"endian flag must be 0 or 1, got {flag}", 8)
    o = "<" if flag == 1 else ">"
    if len(buf) < size:
        raise FormatError("truncated header", len(buf))
    _, version, _, n, c, h, w, n_classes, domain_id, has_labels = struct.unpack(o + _HEADER, buf[:size])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}", size - 1)
    n_px = n * c * h * w
    need = size + 4 * n_px + (4 * n if has_labels else 0)
    if len(buf) < need:
        raise FormatError(f"truncated payload, expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after payload", need)
    images = np.frombuffer(buf, dtype=o + "f4", count=n_px, offset=size).astype(np.float32).reshape(n, c, h, w)
    labels = np.zeros(0, dtype=np.int64)
    if has_labels:
        labels = np.frombuffer(buf, dtype=o + "u4", count=n, offset=size + 4 * n_px).astype(np.int64)
    return LabeledSet(images, labels, domain_id, n_classes)


def load(path) -> LabeledSet:
    return from_bytes(Path(path).read_bytes())
