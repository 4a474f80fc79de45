"""Reference quality metrics and rate-distortion aggregation.

FID follows the Gaussian Frechet distance

    d^2 = ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))

with the matrix square root computed by scipy's Schur-based sqrtm after
clipping slightly negative covariance eigenvalues (below -1e-6 is an error).
BD-BR is the classic Bjontegaard computation: cubic fit of log-rate against
quality, integrated over the common quality interval, with a monotone
piecewise-cubic fallback when the polynomial fit is rank-deficient.
"""

from __future__ import annotations

import csv
import math
import subprocess
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
from scipy.interpolate import PchipInterpolator

from .features import ConvTapExtractor, FeatureStats
from .tensors import to_batch
from .types import ImageTensor

PSNR_CAP_DB = 100.0


class MetricError(Exception):
    """Invalid metric inputs (dimension mismatch, degenerate curves, ...)."""


class NonPsdError(MetricError):
    """Covariance eigenvalues below the -1e-6 tolerance."""


def _pixel_array(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        return np.asarray(img.data, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for near-zero MSE."""
    arr_a, arr_b = _pixel_array(a), _pixel_array(b)
    if arr_a.shape != arr_b.shape:
        raise MetricError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    mse = float(np.mean((arr_a - arr_b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)


def _psd_clip(cov: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-6:
        raise NonPsdError(f"{what}: eigenvalue {vals.min():.3e} below -1e-6 tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits; symmetric, >= 0."""
    if a.dim != b.dim:
        raise MetricError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    cov_a = _psd_clip(a.cov, "first covariance")
    cov_b = _psd_clip(b.cov, "second covariance")
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        if np.abs(covmean.imag).max() > 1e-3:
            raise NonPsdError(
                f"matrix square root has imaginary part {np.abs(covmean.imag).max():.3e}"
            )
        covmean = covmean.real
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    if value < -1e-6:
        raise NonPsdError(f"FID evaluated to {value:.3e}, beyond negative tolerance")
    return max(value, 0.0)


class LpipsMetric:
    """Layer-weighted normalized-feature squared distance between image pairs.

    Features from every block of a spatial extractor are unit-normalized
    along channels; squared differences are channel-weighted (uniform by
    default, or per-layer calibration vectors), spatially averaged, and
    summed over layers.
    """

    def __init__(
        self,
        extractor: ConvTapExtractor,
        layer_weights: Sequence[np.ndarray | torch.Tensor] | None = None,
    ):
        self.extractor = extractor
        self.layer_weights = None
        if layer_weights is not None:
            self.layer_weights = [torch.as_tensor(np.asarray(w), dtype=torch.float32) for w in layer_weights]

    @classmethod
    def load_calibration(cls, extractor: ConvTapExtractor, path: str | Path) -> "LpipsMetric":
        path = Path(path)
        if not path.exists():
            raise MetricError(f"calibration weights unavailable: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        weights = [state[k] for k in sorted(state)]
        return cls(extractor, layer_weights=weights)

    def __call__(self, a: ImageTensor, b: ImageTensor) -> float:
        batch = to_batch([a, b])
        with torch.no_grad():
            taps = self.extractor.multi_features(batch)
        total = 0.0
        for idx, feat in enumerate(taps):
            norm = feat / torch.sqrt((feat**2).sum(dim=1, keepdim=True) + 1e-10)
            diff2 = (norm[0] - norm[1]) ** 2
            if self.layer_weights is not None:
                w = self.layer_weights[idx].view(-1, 1, 1)
                diff2 = diff2 * w
            total += float(diff2.sum(dim=0).mean())
        return total


def lpips_distance(a: ImageTensor, b: ImageTensor, metric: LpipsMetric | None = None) -> float:
    if metric is None:
        from .features import vgg19_extractor

        metric = LpipsMetric(vgg19_extractor(block=5, pre_activation=False, weights="auto"))
    return metric(a, b)


@dataclass(frozen=True)
class RdCurve:
    """A rate-distortion curve for one method: (bpp, quality) points."""

    label: str
    codec: str
    points: tuple[tuple[float, float], ...]
    metric_id: str
    higher_is_better: bool = True

    def __post_init__(self):
        pts = tuple((float(r), float(q)) for r, q in self.points)
        object.__setattr__(self, "points", pts)
        rates = [r for r, _ in pts]
        if any(r <= 0 for r in rates):
            raise MetricError(f"curve {self.label}: bpp values must be positive")
        if any(r2 <= r1 for r1, r2 in zip(rates, rates[1:])):
            raise MetricError(f"curve {self.label}: bpp must be strictly increasing")

    @property
    def rates(self) -> list[float]:
        return [r for r, _ in self.points]

    @property
    def qualities(self) -> list[float]:
        return [q for _, q in self.points]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "codec": self.codec,
            "metric_id": self.metric_id,
            "higher_is_better": self.higher_is_better,
            "points": [list(p) for p in self.points],
        }


def _integrated_log_rate(quality: np.ndarray, log_rate: np.ndarray, lo: float, hi: float) -> float:
    order = np.argsort(quality)
    q, r = quality[order], log_rate[order]
    with warnings.catch_warnings():
        warnings.simplefilter("error", np.exceptions.RankWarning)
        try:
            poly = np.polyfit(q, r, 3)
            anti = np.polyint(poly)
            return float(np.polyval(anti, hi) - np.polyval(anti, lo))
        except (np.exceptions.RankWarning, np.linalg.LinAlgError):
            pass
    # Fallback: monotone piecewise cubic through the points.
    interp = PchipInterpolator(q, r)
    return float(interp.integrate(lo, hi))


def bd_br(reference: RdCurve, test: RdCurve) -> float:
    """Bjontegaard delta bitrate (%); negative means the test curve saves rate."""
    for curve in (reference, test):
        if len(curve.points) < 4:
            raise MetricError(f"curve {curve.label}: BD-BR needs >= 4 points, got {len(curve.points)}")
    if reference.higher_is_better != test.higher_is_better:
        raise MetricError("curves disagree on metric orientation")
    sign = 1.0 if reference.higher_is_better else -1.0
    q_ref = sign * np.asarray(reference.qualities, dtype=np.float64)
    q_test = sign * np.asarray(test.qualities, dtype=np.float64)
    r_ref = np.log(np.asarray(reference.rates, dtype=np.float64))
    r_test = np.log(np.asarray(test.rates, dtype=np.float64))
    lo = max(q_ref.min(), q_test.min())
    hi = min(q_ref.max(), q_test.max())
    if hi <= lo:
        raise MetricError("no quality overlap between curves")
    int_ref = _integrated_log_rate(q_ref, r_ref, lo, hi)
    int_test = _integrated_log_rate(q_test, r_test, lo, hi)
    avg_diff = (int_test - int_ref) / (hi - lo)
    if avg_diff > 700:
        raise MetricError(f"degenerate BD-BR (log-rate offset {avg_diff:.1f})")
    return (math.exp(avg_diff) - 1.0) * 100.0


def build_rd_curve(
    manifests: Sequence,
    metric_id: str,
    scorer: Callable,
    label: str,
    codec: str = "",
    higher_is_better: bool = True,
) -> RdCurve:
    """One curve point per quality-setting manifest: (mean bpp, aggregate quality).

    scorer(manifest) -> aggregate metric value over that manifest's images.
    Points are sorted by bpp regardless of input order.
    """
    points = []
    for manifest in manifests:
        if len(manifest) == 0:
            raise MetricError("empty manifest in RD curve input")
        missing = [e.source_id for e in manifest.entries if e.enhanced_path is None]
        if missing:
            raise MetricError(f"missing enhanced images for: {missing[0]}")
        mean_bpp = float(np.mean([e.bpp for e in manifest.entries]))
        points.append((mean_bpp, float(scorer(manifest))))
    points.sort(key=lambda p: p[0])
    return RdCurve(
        label=label,
        codec=codec,
        points=tuple(points),
        metric_id=metric_id,
        higher_is_better=higher_is_better,
    )


class ExternalScorer:
    """Plug-in protocol for external per-image quality scorers.

    The executable receives one line per image on stdin, formatted as
    "<image_path>\\t<reference_path>" (reference equals the image path when
    no reference applies), and must write one float per line to stdout in
    the same order.
    """

    def __init__(self, name: str, executable: str | Path):
        self.name = name
        self.executable = Path(executable)
        if not self.executable.exists():
            raise MetricError(f"external scorer executable not found: {executable}")

    def score(self, image_paths: Sequence[str], reference_paths: Sequence[str] | None = None) -> list[float]:
        refs = list(reference_paths) if reference_paths is not None else list(image_paths)
        if len(refs) != len(image_paths):
            raise MetricError("image and reference path counts differ")
        payload = "".join(f"{img}\t{ref}\n" for img, ref in zip(image_paths, refs))
        proc = subprocess.run(
            [str(self.executable)], input=payload, capture_output=True, text=True
        )
        if proc.returncode != 0:
            raise MetricError(
                f"external scorer {self.name} failed (exit {proc.returncode}): {proc.stderr.strip()}"
            )
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(image_paths):
            raise MetricError(
                f"external scorer {self.name} returned {len(lines)} scores for {len(image_paths)} images"
            )
        try:
            return [float(ln) for ln in lines]
        except ValueError as exc:
            raise MetricError(f"external scorer {self.name} emitted a non-numeric score: {exc}") from exc


def evaluate_manifest(
    manifest,
    metrics: Sequence[str] = ("psnr",),
    lpips_metric: LpipsMetric | None = None,
    fid_extractor=None,
    external: Sequence[ExternalScorer] = (),
) -> tuple[list[dict], dict]:
    """Per-image scores plus aggregates for an enhanced manifest.

    psnr/lpips aggregate as means over images; fid is a single set-level
    value between the enhanced and raw sets.
    """
    missing = [e.source_id for e in manifest.entries if e.enhanced_path is None]
    if missing:
        raise MetricError(f"missing enhanced image for source_id {missing[0]}")
    rows = []
    triplets = [manifest.load_triplet(e) for e in manifest.entries]
    for entry, t in zip(manifest.entries, triplets):
        row = {"source_id": entry.source_id, "bpp": entry.bpp}
        if "psnr" in metrics:
            row["psnr"] = psnr(t.enhanced, t.raw)
            row["psnr_compressed"] = psnr(t.compressed, t.raw)
        if "lpips" in metrics:
            if lpips_metric is None:
                raise MetricError("lpips requested but no LPIPS metric configured")
            row["lpips"] = lpips_metric(t.enhanced, t.raw)
        rows.append(row)
    for scorer in external:
        values = scorer.score(
            [e.enhanced_path for e in manifest.entries],
            [e.raw_path for e in manifest.entries],
        )
        for row, value in zip(rows, values):
            row[scorer.name] = value
    aggregate: dict[str, float] = {"mean_bpp": float(np.mean([e.bpp for e in manifest.entries]))}
    numeric_keys = [k for k in rows[0] if k != "source_id"]
    for key in numeric_keys:
        aggregate[f"mean_{key}"] = float(np.mean([row[key] for row in rows]))
    if "fid" in metrics:
        if fid_extractor is None:
            raise MetricError("fid requested but no pooled extractor configured")
        from .features import extract_dataset_stats

        stats_enh = extract_dataset_stats([t.enhanced for t in triplets], fid_extractor)
        stats_raw = extract_dataset_stats([t.raw for t in triplets], fid_extractor)
        aggregate["fid"] = fid(stats_enh, stats_raw)
    return rows, aggregate


def write_per_image_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path
