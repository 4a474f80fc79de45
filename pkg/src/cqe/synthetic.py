"""Procedural image corpus for desk-scale experiments and tests.

Generates textured RGB images (gradients, sinusoids, shapes, mild noise)
with enough structure that lossy compression produces visible artifacts,
then degrades them through a real codec to form training triplets.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import build_dataset
from .types import Codec, CodecSpec, ImageTensor, Manifest, write_image


def make_raw_image(size: int, rng: np.random.Generator) -> ImageTensor:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, size=2)
        img[:, :, c] = 0.5 + 0.25 * (gx * xx + gy * yy)
    for _ in range(rng.integers(2, 5)):
        freq = rng.uniform(2, 14)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += rng.uniform(0.04, 0.16) * wave[:, :, None] * rng.uniform(0.3, 1.0, size=3)
    for _ in range(rng.integers(2, 6)):
        y0, x0 = rng.integers(0, size, size=2)
        hh, ww = rng.integers(size // 8, size // 2, size=2)
        color = rng.uniform(0, 1, size=3)
        alpha = rng.uniform(0.3, 0.9)
        ys, ye = max(0, y0 - hh // 2), min(size, y0 + hh // 2 + 1)
        xs, xe = max(0, x0 - ww // 2), min(size, x0 + ww // 2 + 1)
        img[ys:ye, xs:xe] = (1 - alpha) * img[ys:ye, xs:xe] + alpha * color
    img += rng.normal(0, 0.01, size=img.shape)
    return ImageTensor(np.clip(img, 0.0, 1.0).astype(np.float32))


def make_raw_images(n: int, size: int, seed: int) -> list[ImageTensor]:
    rng = np.random.default_rng(seed)
    return [make_raw_image(size, rng) for _ in range(n)]


def write_raw_corpus(out_dir: str | Path, n: int, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i, img in enumerate(make_raw_images(n, size, seed)):
        paths.append(write_image(img, out_dir / f"synth_{i:04d}.png"))
    return paths


def build_synthetic_dataset(
    out_dir: str | Path,
    n: int = 40,
    size: int = 64,
    seed: int = 0,
    codecs: list[CodecSpec] | None = None,
    val_fraction: float = 0.2,
) -> tuple[Manifest, Manifest]:
    """Generate a raw corpus, compress it, and split into train/val manifests.

    The split is by source image (all codec settings of one image land in the
    same split) and is deterministic in the seed.
    """
    out_dir = Path(out_dir)
    if codecs is None:
        codecs = [CodecSpec(Codec.JPEG, 10)]
    raw_dir = out_dir / "raw_src"
    write_raw_corpus(raw_dir, n, size, seed)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    val_ids = {f"synth_{i:04d}" for i in order[:n_val]}

    full = build_dataset(raw_dir, codecs, out_dir / "data", split="train")
    train_entries = [e for e in full.entries if e.source_id.split("__")[0] not in val_ids]
    val_entries = [e for e in full.entries if e.source_id.split("__")[0] in val_ids]
    train = Manifest(tuple(train_entries), split="train")
    val = Manifest(tuple(val_entries), split="val")
    from .types import save_manifest

    save_manifest(train, out_dir / "train.manifest.jsonl")
    save_manifest(val, out_dir / "val.manifest.jsonl")
    return train, val
