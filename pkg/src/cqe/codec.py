"""Compression front end: JPEG/BPG encoding, bpp accounting, patch cropping.

JPEG uses Pillow's libjpeg (the standard baseline encoder) in-process with
4:2:0 chroma subsampling. BPG runs the external bpgenc/bpgdec binaries;
their paths can be overridden with the CQE_BPGENC / CQE_BPGDEC environment
variables. Bitstreams are kept on disk so bpp values can be audited.
"""

from __future__ import annotations

import io
import os
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .types import (
    Codec,
    CodecSpec,
    ImageTensor,
    ImageTriplet,
    Manifest,
    ManifestEntry,
    read_image,
    save_manifest,
    validate_triplet,
    write_image,
)

BPGENC_ENV = "CQE_BPGENC"
BPGDEC_ENV = "CQE_BPGDEC"

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class CodecError(Exception):
    """Codec binary missing, process failure, or inconsistent decode."""


@dataclass(frozen=True)
class CompressionJob:
    input_path: str
    codec: CodecSpec
    output_image_path: str
    bitstream_path: str


@dataclass(frozen=True)
class PatchSpec:
    """Aligned patch extraction: fixed tiling (stride) or seeded random crops (count)."""

    size: int = 128
    stride: int | None = None
    count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"patch size must be >= 32, got {self.size}")
        if self.stride is not None and self.count is not None:
            raise ValueError("specify stride or count, not both")


def _encode_jpeg(raw: ImageTensor, quality: int, chroma: str = "4:2:0") -> bytes:
    arr = raw.to_uint8()
    mode = "RGB" if raw.channels == 3 else "L"
    if raw.channels == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    kwargs = {"format": "JPEG", "quality": int(quality)}
    if mode == "RGB":
        kwargs["subsampling"] = {"4:2:0": 2, "4:2:2": 1, "4:4:4": 0}[chroma]
    Image.fromarray(arr, mode=mode).save(buf, **kwargs)
    return buf.getvalue()


def _decode_jpeg(bitstream: bytes) -> ImageTensor:
    with Image.open(io.BytesIO(bitstream)) as im:
        arr = np.asarray(im)
    return ImageTensor.from_uint8(arr)


def _bpg_binary(name: str, env_var: str) -> str:
    override = os.environ.get(env_var)
    candidate = override or name
    resolved = shutil.which(candidate)
    if resolved is None:
        raise CodecError(
            f"codec binary missing: '{candidate}' not found on PATH "
            f"(set {env_var} to override)"
        )
    return resolved


def _run(cmd: list[str]) -> None:
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise CodecError(
            f"codec process failed ({' '.join(cmd)}): exit {proc.returncode}: "
            f"{proc.stderr.strip() or proc.stdout.strip()}"
        )


def _compress_bpg(raw: ImageTensor, qp: int, chroma: str, workdir: Path) -> tuple[ImageTensor, bytes]:
    enc = _bpg_binary("bpgenc", BPGENC_ENV)
    dec = _bpg_binary("bpgdec", BPGDEC_ENV)
    src = workdir / "in.png"
    bitstream = workdir / "out.bpg"
    decoded = workdir / "out.png"
    write_image(raw, src)
    fmt = {"4:2:0": "420", "4:4:4": "444", "4:2:2": "422"}[chroma]
    _run([enc, "-q", str(qp), "-f", fmt, "-o", str(bitstream), str(src)])
    _run([dec, "-o", str(decoded), str(bitstream)])
    return read_image(decoded), bitstream.read_bytes()


def compress(
    raw: ImageTensor,
    codec: CodecSpec,
    chroma: str = "4:2:0",
    bitstream_path: str | Path | None = None,
) -> tuple[ImageTensor, float]:
    """Compress and immediately decode an image; returns (decoded, bpp).

    bpp counts every bit of the encoded bitstream, headers included. When
    bitstream_path is given, the bitstream is written there for auditing.
    """
    if codec.codec_id is Codec.JPEG:
        bits = _encode_jpeg(raw, codec.quality_param, chroma)
        decoded = _decode_jpeg(bits)
    else:
        with tempfile.TemporaryDirectory(prefix="cqe_bpg_") as tmp:
            decoded, bits = _compress_bpg(raw, codec.quality_param, chroma, Path(tmp))
    if decoded.shape != raw.shape:
        raise CodecError(
            f"decoded dimensions {decoded.shape} do not match input {raw.shape}"
        )
    if bitstream_path is not None:
        bitstream_path = Path(bitstream_path)
        bitstream_path.parent.mkdir(parents=True, exist_ok=True)
        bitstream_path.write_bytes(bits)
    bpp = len(bits) * 8 / (raw.height * raw.width)
    return decoded, bpp


def list_raw_images(raw_dir: str | Path) -> list[Path]:
    raw_dir = Path(raw_dir)
    files = sorted(
        p for p in raw_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    ) if raw_dir.is_dir() else []
    return files


def build_dataset(
    raw_dir: str | Path,
    codecs: list[CodecSpec],
    out_dir: str | Path,
    split: str = "train",
    chroma: str = "4:2:0",
    jobs: int = 1,
) -> Manifest:
    """Compress every raw image with every codec setting and emit a manifest.

    Output layout: out/raw/*.png, out/<codec_tag>/*.png, out/bitstreams/.
    Deterministic: inputs sorted by filename, entries ordered (image, codec).
    """
    out_dir = Path(out_dir)
    files = list_raw_images(raw_dir)
    if not files:
        raise CodecError(f"no input images in {raw_dir}")

    def one(task):
        src, spec = task
        raw = read_image(src)
        source_id = f"{src.stem}__{spec.tag()}"
        raw_path = out_dir / "raw" / f"{src.stem}.png"
        if not raw_path.exists():
            write_image(raw, raw_path)
        bitstream = out_dir / "bitstreams" / f"{source_id}.bin"
        try:
            decoded, bpp = compress(raw, spec, chroma=chroma, bitstream_path=bitstream)
        except CodecError as exc:
            raise CodecError(f"{source_id}: {exc}") from exc
        comp_path = out_dir / spec.tag() / f"{src.stem}.png"
        write_image(decoded, comp_path)
        triplet = ImageTriplet(raw, decoded, spec, bpp, source_id)
        problems = validate_triplet(triplet)
        if problems:
            raise CodecError(f"{source_id}: invalid triplet: {problems}")
        return ManifestEntry(
            source_id=source_id,
            raw_path=str(raw_path),
            compressed_path=str(comp_path),
            codec=spec,
            bpp=bpp,
        )

    tasks = [(src, spec) for src in files for spec in codecs]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(one, tasks))
    else:
        entries = [one(t) for t in tasks]
    manifest = Manifest(tuple(entries), split=split)
    save_manifest(manifest, out_dir / f"{split}.manifest.jsonl")
    return manifest


def crop_patches(t: ImageTriplet, spec: PatchSpec) -> list[ImageTriplet]:
    """Cut a triplet into spatially aligned patches.

    With stride (or neither stride nor count) the grid is top-left anchored
    tiling; with count, positions are drawn from a seeded RNG. Identical
    inputs and seed always give identical patch lists.
    """
    h, w = t.raw.height, t.raw.width
    if spec.size > min(h, w):
        raise ValueError(f"patch size {spec.size} larger than image {h}×{w}")
    if spec.count is not None:
        rng = np.random.default_rng(spec.seed)
        ys = rng.integers(0, h - spec.size + 1, size=spec.count)
        xs = rng.integers(0, w - spec.size + 1, size=spec.count)
        positions = list(zip(ys.tolist(), xs.tolist()))
    else:
        stride = spec.stride or spec.size
        positions = [
            (y, x)
            for y in range(0, h - spec.size + 1, stride)
            for x in range(0, w - spec.size + 1, stride)
        ]
    patches = []
    for y, x in positions:
        patches.append(
            ImageTriplet(
                raw=t.raw.crop(y, x, spec.size),
                compressed=t.compressed.crop(y, x, spec.size),
                enhanced=t.enhanced.crop(y, x, spec.size) if t.enhanced is not None else None,
                codec=t.codec,
                bpp=t.bpp,
                source_id=f"{t.source_id}#y{y}x{x}",
            )
        )
    return patches
