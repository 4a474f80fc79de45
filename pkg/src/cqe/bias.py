"""Enhancement-bias metrology.

Quantifies how strongly enhanced images gravitate toward their compressed
sources: discriminator realism scoring over aligned patches, pairwise
domain-similarity triangles with a signed deviation percentage

    deviation = (S_CE^2 - S_RE^2) / S_CR^2 * 100

(negative when the enhancement domain sits nearer the compression domain),
and amplified residual maps for visual inspection.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .features import FeatureStats, extract_dataset_stats
from .metrics import LpipsMetric, MetricError, fid
from .tensors import to_batch
from .types import ImageTensor, ImageTriplet, Manifest


class BiasError(Exception):
    """Degenerate metrology inputs (zero base distance, missing images, ...)."""


@dataclass(frozen=True)
class RealismReport:
    mean_score_raw: float
    mean_score_enhanced: float
    mean_score_compressed: float
    delta_enh_to_raw: float
    delta_comp_to_raw: float
    patch_size: int
    n_patches: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TriangleReport:
    s_ce: float
    s_cr: float
    s_re: float
    metric_id: str
    deviation_pct: float
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def deviation(s_ce: float, s_cr: float, s_re: float) -> float:
    """Signed horizontal deviation of the enhancement vertex, in percent."""
    if s_cr <= 0:
        raise BiasError("undefined deviation: s_cr = 0")
    return (s_ce**2 - s_re**2) / s_cr**2 * 100.0


def _tile(img: ImageTensor, size: int) -> list[ImageTensor]:
    tiles = [
        img.crop(y, x, size)
        for y in range(0, img.height - size + 1, size)
        for x in range(0, img.width - size + 1, size)
    ]
    return tiles


def realism_scores(
    d,
    manifest: Manifest | Sequence[ImageTriplet],
    patch_size: int = 128,
    conditional: bool | None = None,
    batch_size: int = 16,
) -> RealismReport:
    """Mean discriminator sigmoid scores per domain over aligned patches.

    All patches are tiled top-left anchored at patch_size. For conditional
    discriminators the compressed patch is the condition for raw, enhanced,
    and compressed inputs alike. Per-pixel logit maps reduce by mean sigmoid.
    """
    triplets = manifest.load_triplets() if isinstance(manifest, Manifest) else list(manifest)
    if not triplets:
        raise BiasError("no triplets to score")
    missing = [t.source_id for t in triplets if t.enhanced is None]
    if missing:
        raise BiasError(f"missing enhanced image for source_id {missing[0]}")
    if conditional is None:
        conditional = bool(getattr(getattr(d, "cfg", None), "conditional", False))

    patches = {"raw": [], "enhanced": [], "compressed": [], "cond": []}
    for t in triplets:
        if patch_size > min(t.raw.height, t.raw.width):
            raise BiasError(
                f"{t.source_id}: patch size {patch_size} larger than image "
                f"{t.raw.height}×{t.raw.width}"
            )
        for part, key in ((t.raw, "raw"), (t.enhanced, "enhanced"), (t.compressed, "compressed")):
            patches[key].extend(_tile(part, patch_size))
        patches["cond"].extend(_tile(t.compressed, patch_size))

    def mean_score(images: list[ImageTensor]) -> float:
        scores = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start : start + batch_size]
                cond_chunk = patches["cond"][start : start + batch_size]
                cond = to_batch(cond_chunk) if conditional else None
                logits = d(to_batch(chunk), cond)
                probs = torch.sigmoid(logits)
                while probs.ndim > 1:
                    probs = probs.mean(dim=-1)
                scores.extend(probs.tolist())
        return float(np.mean(scores))

    mean_raw = mean_score(patches["raw"])
    mean_enh = mean_score(patches["enhanced"])
    mean_comp = mean_score(patches["compressed"])
    return RealismReport(
        mean_score_raw=mean_raw,
        mean_score_enhanced=mean_enh,
        mean_score_compressed=mean_comp,
        delta_enh_to_raw=mean_enh - mean_raw,
        delta_comp_to_raw=mean_comp - mean_raw,
        patch_size=patch_size,
        n_patches=len(patches["raw"]),
    )


def triangle_from_stats(
    stats_raw: FeatureStats,
    stats_comp: FeatureStats,
    stats_enh: FeatureStats,
    metric_id: str = "fid",
    label: str = "",
) -> TriangleReport:
    s_ce = fid(stats_comp, stats_enh)
    s_cr = fid(stats_comp, stats_raw)
    s_re = fid(stats_raw, stats_enh)
    return TriangleReport(
        s_ce=s_ce,
        s_cr=s_cr,
        s_re=s_re,
        metric_id=metric_id,
        deviation_pct=deviation(s_ce, s_cr, s_re),
        label=label,
    )


def triangle_report(
    raw_set: Sequence[ImageTensor],
    comp_set: Sequence[ImageTensor],
    enh_set: Sequence[ImageTensor],
    metric_id: str = "fid",
    pool_extractor=None,
    lpips_metric: LpipsMetric | None = None,
    patch_size: int | None = None,
    label: str = "",
) -> TriangleReport:
    """Pairwise domain similarity triangle plus deviation percentage.

    FID compares set statistics (optionally over a fixed non-overlapping
    patch grid); LPIPS averages pairwise distances over aligned triplets.
    """
    if not raw_set or not comp_set or not enh_set:
        raise BiasError("all three image sets must be non-empty")
    if metric_id == "fid":
        if pool_extractor is None:
            raise BiasError("fid triangles need a pooled feature extractor")
        sets = []
        for images in (raw_set, comp_set, enh_set):
            tiles: list[ImageTensor] = []
            for img in images:
                tiles.extend(_tile(img, patch_size) if patch_size else [img])
            sets.append(tiles)
        try:
            stats = [extract_dataset_stats(tiles, pool_extractor) for tiles in sets]
        except ValueError as exc:
            raise BiasError(str(exc)) from exc
        return triangle_from_stats(stats[0], stats[1], stats[2], metric_id="fid", label=label)
    if metric_id == "lpips":
        if lpips_metric is None:
            raise BiasError("lpips triangles need an LpipsMetric")
        if not (len(raw_set) == len(comp_set) == len(enh_set)):
            raise BiasError("lpips triangles need aligned sets of equal length")
        s_ce = float(np.mean([lpips_metric(c, e) for c, e in zip(comp_set, enh_set)]))
        s_cr = float(np.mean([lpips_metric(c, r) for c, r in zip(comp_set, raw_set)]))
        s_re = float(np.mean([lpips_metric(r, e) for r, e in zip(raw_set, enh_set)]))
        return TriangleReport(
            s_ce=s_ce,
            s_cr=s_cr,
            s_re=s_re,
            metric_id="lpips",
            deviation_pct=deviation(s_ce, s_cr, s_re),
            label=label,
        )
    raise BiasError(f"unknown triangle metric: {metric_id}")


def residual_map(a: ImageTensor, b: ImageTensor, amplify: float = 1.0) -> ImageTensor:
    """Absolute difference scaled by `amplify`, clipped to [0, 1]."""
    if a.shape != b.shape:
        raise BiasError(f"shape mismatch: {a.shape} vs {b.shape}")
    data = np.clip(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64)) * amplify, 0.0, 1.0)
    return ImageTensor(data.astype(np.float32))


def apex_position(s_ce: float, s_cr: float, s_re: float, slack: float = 0.01):
    """Apex (x, y) of the domain triangle with base C=(0,0) to R=(s_cr,0).

    Returns (x, y, violated): violated is True when the side lengths break
    the triangle inequality by more than `slack` relative to the base, in
    which case the apex is flattened onto the base line (y = 0).
    """
    if s_cr <= 0:
        raise BiasError("undefined triangle: s_cr = 0")
    x = (s_cr**2 + s_ce**2 - s_re**2) / (2.0 * s_cr)
    y_sq = s_ce**2 - x**2
    violated = (s_ce + s_re) - s_cr < -slack * s_cr or s_cr - abs(s_ce - s_re) < -slack * s_cr
    y = math.sqrt(y_sq) if y_sq > 0 else 0.0
    return x, y, violated


def triangle_plot(reports: Sequence[TriangleReport], out_path: str | Path) -> Path:
    """Render domain triangles (one panel per report) to a static image."""
    if not reports:
        raise BiasError("no triangle reports to plot")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.6), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        if rep.s_cr <= 0:
            ax.set_title(f"{rep.label or rep.metric_id}: degenerate (s_cr = 0)")
            continue
        x, y, violated = apex_position(rep.s_ce, rep.s_cr, rep.s_re)
        if violated:
            warnings.warn(
                f"triangle inequality violated beyond 1% slack for {rep.label or rep.metric_id}; "
                "apex flattened",
                stacklevel=2,
            )
        ax.plot([0, rep.s_cr], [0, 0], "k-", lw=1.5)
        ax.plot([0, x], [0, y], "b-", lw=1.2)
        ax.plot([rep.s_cr, x], [0, y], "g-", lw=1.2)
        ax.scatter([0, rep.s_cr, x], [0, 0, y], c=["tab:red", "tab:green", "tab:blue"], zorder=3)
        ax.annotate("C", (0, 0), textcoords="offset points", xytext=(-8, -12))
        ax.annotate("R", (rep.s_cr, 0), textcoords="offset points", xytext=(2, -12))
        ax.annotate("E", (x, y), textcoords="offset points", xytext=(2, 6))
        ax.axvline(rep.s_cr / 2, color="gray", ls=":", lw=0.8)
        title = f"{rep.label or rep.metric_id}  dev {rep.deviation_pct:+.1f}%"
        if violated:
            title += "  [triangle inequality violated]"
        ax.set_title(title, fontsize=9)
        ax.set_aspect("equal")
        ax.margins(0.15)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
