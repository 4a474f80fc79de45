"""Shared data model: images, codec descriptors, aligned triplets, manifests.

All pixel data is held as H×W×C float arrays in [0, 1]; 8-bit integers exist
only at codec and file boundaries. Raw and enhanced images are persisted as
PNG, manifests as line-delimited JSON records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


class ManifestError(Exception):
    """Manifest could not be read, written, or resolved against disk."""


class Codec(str, Enum):
    BPG = "bpg"
    JPEG = "jpeg"


# Quality grids used by the standard evaluation protocol. Other values are
# legal (sweeps may extend the grid); these are the defaults everywhere.
BPG_QP_GRID = (27, 32, 37, 42, 47)
JPEG_QF_GRID = (10, 20, 30, 40, 50)

_QUALITY_BOUNDS = {Codec.BPG: (0, 51), Codec.JPEG: (1, 100)}


@dataclass(frozen=True)
class CodecSpec:
    """A codec plus its quality knob (QP for BPG, QF for JPEG)."""

    codec_id: Codec
    quality_param: int

    def __post_init__(self):
        codec = Codec(self.codec_id)
        object.__setattr__(self, "codec_id", codec)
        lo, hi = _QUALITY_BOUNDS[codec]
        if not lo <= int(self.quality_param) <= hi:
            raise ValueError(
                f"{codec.value} quality {self.quality_param} outside legal range [{lo}, {hi}]"
            )
        object.__setattr__(self, "quality_param", int(self.quality_param))

    @property
    def in_default_grid(self) -> bool:
        grid = BPG_QP_GRID if self.codec_id is Codec.BPG else JPEG_QF_GRID
        return self.quality_param in grid

    @classmethod
    def default_grid(cls, codec: Codec | str) -> tuple["CodecSpec", ...]:
        codec = Codec(codec)
        grid = BPG_QP_GRID if codec is Codec.BPG else JPEG_QF_GRID
        return tuple(cls(codec, q) for q in grid)

    def tag(self) -> str:
        return f"{self.codec_id.value}_q{self.quality_param}"


@dataclass(frozen=True)
class ImageTensor:
    """H×W×C image with float32 values in [0, 1].

    The wrapped array is marked read-only; treat instances as immutable
    value objects.
    """

    data: np.ndarray
    bit_depth_origin: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be H×W×C, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be at least 1×1, got {arr.shape[:2]}")
        arr = arr.astype(np.float32, copy=not arr.flags.owndata)
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"pixel values must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def crop(self, y: int, x: int, size: int) -> "ImageTensor":
        if y < 0 or x < 0 or y + size > self.height or x + size > self.width:
            raise ValueError(f"crop ({y},{x},{size}) outside {self.height}×{self.width} image")
        return ImageTensor(self.data[y : y + size, x : x + size, :], self.bit_depth_origin)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageTensor":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)


def read_image(path: str | Path) -> ImageTensor:
    """Load a PNG/JPEG file into an ImageTensor (8-bit source assumed)."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    return ImageTensor.from_uint8(arr)


def write_image(img: ImageTensor, path: str | Path) -> Path:
    """Write an ImageTensor losslessly as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img.to_uint8()
    mode = "RGB" if img.channels == 3 else "L"
    if img.channels == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr, mode=mode).save(path, format="PNG")
    return path


@dataclass(frozen=True)
class ImageTriplet:
    """Aligned raw / compressed / (optionally) enhanced images of one source."""

    raw: ImageTensor
    compressed: ImageTensor
    codec: CodecSpec
    bpp: float
    source_id: str
    enhanced: ImageTensor | None = None

    def with_enhanced(self, enhanced: ImageTensor) -> "ImageTriplet":
        return replace(self, enhanced=enhanced)


def validate_triplet(t: ImageTriplet) -> list[str]:
    """Return human-readable invariant violations; empty list means valid.

    Pure: never raises, never mutates.
    """
    violations: list[str] = []
    if t.raw.shape != t.compressed.shape:
        violations.append(
            f"shape mismatch: raw {t.raw.shape} vs compressed {t.compressed.shape}"
        )
    if t.enhanced is not None and t.enhanced.shape != t.raw.shape:
        violations.append(
            f"shape mismatch: enhanced {t.enhanced.shape} vs raw {t.raw.shape}"
        )
    if t.bpp < 0:
        violations.append(f"negative bpp: {t.bpp}")
    if not np.isfinite(t.bpp):
        violations.append(f"non-finite bpp: {t.bpp}")
    if not t.source_id:
        violations.append("empty source_id")
    return violations


@dataclass(frozen=True)
class ManifestEntry:
    source_id: str
    raw_path: str
    compressed_path: str
    codec: CodecSpec
    bpp: float
    enhanced_path: str | None = None

    def to_record(self) -> dict:
        rec = {
            "source_id": self.source_id,
            "raw_path": self.raw_path,
            "compressed_path": self.compressed_path,
            "codec": self.codec.codec_id.value,
            "quality": self.codec.quality_param,
            "bpp": self.bpp,
        }
        if self.enhanced_path is not None:
            rec["enhanced_path"] = self.enhanced_path
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        try:
            return cls(
                source_id=rec["source_id"],
                raw_path=rec["raw_path"],
                compressed_path=rec["compressed_path"],
                codec=CodecSpec(Codec(rec["codec"]), rec["quality"]),
                bpp=float(rec["bpp"]),
                enhanced_path=rec.get("enhanced_path"),
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"malformed manifest record: {rec!r} ({exc})") from exc


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")
        ids = [e.source_id for e in self.entries]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ManifestError(f"duplicate source_ids: {sorted(dupes)}")

    def __len__(self) -> int:
        return len(self.entries)

    def with_entries(self, entries) -> "Manifest":
        return Manifest(tuple(entries), self.split)

    def load_triplet(self, entry: ManifestEntry) -> ImageTriplet:
        raw = read_image(entry.raw_path)
        compressed = read_image(entry.compressed_path)
        enhanced = read_image(entry.enhanced_path) if entry.enhanced_path else None
        return ImageTriplet(
            raw=raw,
            compressed=compressed,
            enhanced=enhanced,
            codec=entry.codec,
            bpp=entry.bpp,
            source_id=entry.source_id,
        )

    def load_triplets(self) -> list[ImageTriplet]:
        return [self.load_triplet(e) for e in self.entries]


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write a manifest as line-delimited JSON: a header line, then one entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"kind": "manifest", "split": manifest.split, "version": 1}, sort_keys=True)]
    for entry in manifest.entries:
        lines.append(json.dumps(entry.to_record(), sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Read a manifest; with check_files, verify every referenced image exists."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed record at {path}:{lineno}: {exc}") from exc
    if not records or records[0].get("kind") != "manifest":
        raise ManifestError(f"missing manifest header line in {path}")
    header = records[0]
    entries = [ManifestEntry.from_record(rec) for rec in records[1:]]
    manifest = Manifest(tuple(entries), split=header.get("split", "train"))
    if check_files:
        for entry in manifest.entries:
            for label, ref in (
                ("raw", entry.raw_path),
                ("compressed", entry.compressed_path),
                ("enhanced", entry.enhanced_path),
            ):
                if ref is not None and not Path(ref).exists():
                    raise ManifestError(
                        f"entry {entry.source_id}: missing {label} file {ref}"
                    )
    return manifest
