"""Binary dataset/checkpoint formats and the synthetic shape benchmark.

APTD dataset (little-endian)::

    b"APTD" | u32 version=1 | u32 N, H, W, C, K | N*H*W*C u8 pixels (row-major,
    channel-last) | N u8 labels

APCK checkpoint (little-endian)::

    b"APCK" | u32 version=1 | u32 len + UTF-8 JSON architecture | u32 tensor count |
    per tensor: u16 len + UTF-8 name, u8 rank, rank x u32 dims, float32 data
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ArchSpec, ClassifierParams, DatasetMeta, ImageBatch, param_shapes

DATASET_MAGIC = b"APTD"
CHECKPOINT_MAGIC = b"APCK"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """Quantise ``[0, 1]`` reals to u8, rounding halves up."""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255 + 0.5).clip(0, 255).astype(np.uint8)


def save_dataset(batch: ImageBatch, meta: DatasetMeta, path) -> None:
    n, h, w, c = batch.pixels.shape
    if (h, w, c) != (meta.height, meta.width, meta.channels):
        raise ConfigError(f"batch shape {batch.pixels.shape} disagrees with meta {meta}")
    if meta.classes > 256:
        raise ConfigError("APTD stores labels as u8; at most 256 classes")
    batch.validate(meta.classes)
    header = _HEADER.pack(DATASET_MAGIC, VERSION, n, h, w, c, meta.classes)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(to_bytes(batch.pixels).tobytes())
            f.write(batch.labels.astype(np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"cannot write dataset {path}: {e.strerror}") from e


def load_dataset(path) -> tuple[ImageBatch, DatasetMeta]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for an APTD header "
                          f"({len(data)} of {_HEADER.size} bytes)")
    magic, version, n, h, w, c, k = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported APTD version {version}")
    npix = n * h * w * c
    expected = _HEADER.size + npix + n
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for N={n}, H={h}, W={w}, C={c}, "
                          f"got {len(data)}")
    pixels = np.frombuffer(data, np.uint8, npix, _HEADER.size).reshape(n, h, w, c)
    labels = np.frombuffer(data, np.uint8, n, _HEADER.size + npix).astype(np.int64)
    if n and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for K={k}")
    batch = ImageBatch(pixels.astype(np.float32) / np.float32(255), labels)
    return batch, DatasetMeta(h, w, c, k, n)


def save_checkpoint(params: ClassifierParams, path) -> None:
    arch = params.arch.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(arch)), arch,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset "
                              f"{self.pos}, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> ClassifierParams:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    version, arch_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported APCK version {version}")
    try:
        arch = ArchSpec.from_dict(json.loads(r.take(arch_len).decode()))
    except (ValueError, ConfigError) as e:
        raise FormatError(f"{path}: invalid architecture: {e}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), "<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    for name, shape in param_shapes(arch).items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                              f"architecture expects {shape}")
    extra = set(tensors) - set(param_shapes(arch))
    if extra:
        raise FormatError(f"{path}: unexpected tensors {sorted(extra)}")
    return ClassifierParams(arch, tensors)


# --------------------------------------------------------------------------- #
# Synthetic benchmark
# --------------------------------------------------------------------------- #

SHAPE_FAMILIES = ("square", "circle", "diamond", "ring", "cross", "stripes", "diagonal")


def _shape_mask(family: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2
    r2 = (yy - centre) ** 2 + (xx - centre) ** 2
    if family == "square":
        return np.ones((size, size), dtype=bool)
    if family == "circle":
        return r2 <= (size / 2) ** 2
    if family == "stripes":
        return yy % 2 == 0
    if family == "diagonal":
        return np.abs(yy - xx) <= 0
    if family == "cross":
        return (np.abs(yy - centre) < 1) | (np.abs(xx - centre) < 1)
    if family == "ring":
        return (r2 <= (size / 2) ** 2) & (r2 >= (size / 2 - 1.5) ** 2)
    if family == "diamond":
        return np.abs(yy - centre) + np.abs(xx - centre) <= size / 2
    raise ConfigError(f"unknown shape family {family!r}; expected one of {SHAPE_FAMILIES}")


@dataclass(frozen=True)
class SynthSpec:
    """Class ``i`` shows ``families[i]`` drawn inside the centered ``center_side`` square."""

    classes: int = 3
    per_class: int = 500
    height: int = 16
    width: int = 16
    channels: int = 3
    noise_std: float = 0.1
    families: tuple = ()
    shape_size: int = 6
    center_side: int = 8
    background: float = 0.25
    foreground: float = 0.75
    seed: int = 0

    def resolved_families(self) -> tuple:
        fams = tuple(self.families) or SHAPE_FAMILIES[:self.classes]
        if len(fams) != self.classes:
            raise ConfigError(f"{self.classes} classes need {self.classes} shape families, "
                              f"got {len(fams)}")
        return fams


def make_synthetic(spec: SynthSpec) -> tuple[ImageBatch, DatasetMeta]:
    """Labelled shape images plus i.i.d. Gaussian noise, clipped to ``[0, 1]``; pure in ``spec``."""
    fams = spec.resolved_families()
    if spec.classes > len(SHAPE_FAMILIES):
        raise ConfigError(f"at most {len(SHAPE_FAMILIES)} classes are supported")
    if spec.center_side > min(spec.height, spec.width):
        raise ConfigError("center region larger than the image")
    if spec.shape_size < 1 or spec.shape_size > spec.center_side:
        raise ConfigError(f"shape size {spec.shape_size} does not fit the "
                          f"{spec.center_side}x{spec.center_side} center region")
    if spec.noise_std < 0 or spec.per_class < 0:
        raise ConfigError("noise_std and per_class must be non-negative")
    meta = DatasetMeta(spec.height, spec.width, spec.channels, spec.classes,
                       spec.classes * spec.per_class)
    top = (spec.height - spec.shape_size) // 2
    left = (spec.width - spec.shape_size) // 2
    templates = np.full((spec.classes, spec.height, spec.width), spec.background)
    for k, fam in enumerate(fams):
        m = _shape_mask(fam, spec.shape_size)
        block = templates[k, top:top + spec.shape_size, left:left + spec.shape_size]
        block[m] = spec.foreground

    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    labels = labels[rng.permutation(len(labels))]
    pixels = np.repeat(templates[labels][..., None], spec.channels, axis=3)
    if spec.noise_std > 0:
        pixels = pixels + rng.normal(0, spec.noise_std, size=pixels.shape)
    pixels = np.clip(pixels, 0, 1).astype(np.float32)
    return ImageBatch(pixels, labels), meta
