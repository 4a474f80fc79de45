"""Frozen convolutional feature taps.

Two families are exposed: spatial taps at the final convolution of a VGG-19
block (used by the perceptual loss and the domain-divergence regularizer),
and pooled features for set-level statistics (FID). A small seeded random
backbone is substitutable anywhere a pretrained one is unavailable, which
is the desk-scale default for tests.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .tensors import seed_module_, to_batch
from .types import ImageTensor


class ExtractorError(Exception):
    """Weights unavailable or an unsupported tap was requested."""


class Backbone(str, Enum):
    VGG19 = "vgg19"
    INCEPTION_POOL = "inception_pool"


@dataclass(frozen=True)
class FeatureTapSpec:
    backbone: Backbone = Backbone.VGG19
    block: int = 5
    pre_activation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        if self.backbone is Backbone.VGG19 and not 1 <= self.block <= 5:
            raise ExtractorError(f"VGG19 block must be in [1, 5], got {self.block}")


@dataclass(frozen=True)
class FeatureMap:
    """Extracted features: h×w×c spatial array or a pooled d-vector."""

    data: np.ndarray
    tap: FeatureTapSpec | None = None

    @property
    def pooled(self) -> bool:
        return self.data.ndim == 1


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of pooled features for one image set (FID input)."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"inconsistent stats shapes: mean {mean.shape}, cov {cov.shape}")
        if self.n < 2:
            raise ValueError(f"insufficient samples: need >= 2, got {self.n}")
        if np.abs(cov - cov.T).max() > 1e-10:
            raise ValueError("covariance not symmetric within 1e-10")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _replicate_gray(batch: torch.Tensor) -> torch.Tensor:
    if batch.shape[1] == 1:
        return batch.repeat(1, 3, 1, 1)
    return batch


class ConvTapExtractor(nn.Module):
    """Staged convolutional stack tapped at the final conv of a chosen block.

    Each stage ends at its block's final convolution; `links` hold the
    activation/pooling applied between stages, so chaining stages reproduces
    the full network while stage outputs are the pre-activation taps.
    """

    def __init__(
        self,
        stages: Sequence[nn.Module],
        links: Sequence[nn.Module],
        tap_block: int,
        pre_activation: bool = True,
        normalize: tuple[tuple[float, ...], tuple[float, ...]] | None = None,
        tap_act: nn.Module | None = None,
        out_gain: float = 1.0,
    ):
        super().__init__()
        if not 1 <= tap_block <= len(stages):
            raise ExtractorError(f"tap block {tap_block} outside [1, {len(stages)}]")
        self.stages = nn.ModuleList(stages)
        self.links = nn.ModuleList(links)
        self.tap_block = tap_block
        self.pre_activation = pre_activation
        self.tap_act = tap_act or nn.ReLU()
        self.out_gain = out_gain
        if normalize is not None:
            mean, std = normalize
            self.register_buffer("in_mean", torch.tensor(mean).view(1, -1, 1, 1))
            self.register_buffer("in_std", torch.tensor(std).view(1, -1, 1, 1))
        else:
            self.in_mean = None
            self.in_std = None
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def _prepare(self, batch: torch.Tensor) -> torch.Tensor:
        x = _replicate_gray(batch)
        if self.in_mean is not None:
            x = (x - self.in_mean.to(x.dtype)) / self.in_std.to(x.dtype)
        return x

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        """Differentiable tap at the configured block; input N×C×H×W in [0, 1]."""
        x = self._prepare(batch)
        for i in range(self.tap_block):
            x = self.stages[i](x)
            if i + 1 == self.tap_block:
                tap = x if self.pre_activation else self.tap_act(x)
                return tap * self.out_gain if self.out_gain != 1.0 else tap
            x = self.links[i](x)
        raise AssertionError("unreachable")

    def multi_features(self, batch: torch.Tensor, up_to: int | None = None) -> list[torch.Tensor]:
        """Taps at every block up to `up_to` (default: all stages)."""
        stop = up_to or len(self.stages)
        x = self._prepare(batch)
        taps = []
        for i in range(stop):
            x = self.stages[i](x)
            tap = x if self.pre_activation else self.tap_act(x)
            taps.append(tap * self.out_gain if self.out_gain != 1.0 else tap)
            if i + 1 < stop:
                x = self.links[i](x)
        return taps

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.features(batch)


# Indices of each block's final conv inside torchvision's vgg19().features.
_VGG19_FINAL_CONV = {1: 2, 2: 7, 3: 16, 4: 25, 5: 34}
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def vgg19_extractor(
    block: int = 5,
    pre_activation: bool = True,
    weights: str | Path = "auto",
    seed: int = 0,
) -> ConvTapExtractor:
    """VGG-19 tap extractor.

    weights: "auto" (torchvision pretrained), "random" (seeded init), or a
    path to a saved state dict for vgg19().features.
    """
    from torchvision.models import vgg19

    net = vgg19(weights=None)
    feats = net.features
    if weights == "auto":
        try:
            from torchvision.models import VGG19_Weights

            pretrained = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            feats = pretrained.features
        except Exception as exc:
            raise ExtractorError(
                "pretrained VGG-19 weights unavailable (no download possible); "
                "pass weights='random' or a state-dict path"
            ) from exc
    elif weights == "random":
        seed_module_(feats, seed)
    else:
        path = Path(weights)
        if not path.exists():
            raise ExtractorError(f"weights file missing: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            feats.load_state_dict(state)
        except Exception as exc:
            raise ExtractorError(f"weights file corrupt or incompatible: {path}: {exc}") from exc

    layers = list(feats)
    stages, links = [], []
    prev = 0
    for b in range(1, 6):
        end = _VGG19_FINAL_CONV[b]
        stages.append(nn.Sequential(*layers[prev : end + 1]))
        if b < 5:
            links.append(nn.Sequential(*layers[end + 1 : end + 3]))  # relu + pool
        prev = end + 3 if b < 5 else end + 1
    return ConvTapExtractor(
        stages,
        links,
        tap_block=block,
        pre_activation=pre_activation,
        normalize=(_IMAGENET_MEAN, _IMAGENET_STD),
    )


def tiny_extractor(
    blocks: int = 2,
    channels: int = 16,
    seed: int = 0,
    activation: str = "relu",
    tap_block: int | None = None,
    pre_activation: bool = True,
    gain: float = 1.0,
) -> ConvTapExtractor:
    """Small seeded random backbone, substitutable for VGG-19 in tests.

    `gain` rescales the tap output; random thin stacks produce much smaller
    feature magnitudes than deep pretrained ones, so desk-scale configs use
    a gain that restores paper-like loss-term balance.
    """
    act_cls = {"relu": nn.ReLU, "softplus": nn.Softplus, "leaky_relu": nn.LeakyReLU}[activation]
    stages, links = [], []
    in_ch = 3
    for b in range(blocks):
        stages.append(
            nn.Sequential(
                nn.Conv2d(in_ch, channels, 3, 1, 1),
                act_cls(),
                nn.Conv2d(channels, channels, 3, 1, 1),
            )
        )
        if b < blocks - 1:
            links.append(nn.Sequential(act_cls(), nn.AvgPool2d(2)))
        in_ch = channels
    ext = ConvTapExtractor(
        stages,
        links,
        tap_block=tap_block or blocks,
        pre_activation=pre_activation,
        tap_act=act_cls(),
        out_gain=gain,
    )
    seed_module_(ext, seed)
    return ext


class PooledExtractor(nn.Module):
    """Spatially pooled features of a base extractor (FID-style d-vectors).

    Optional high-pass front end (residual to a 3×3 box blur, amplified) and
    rectified pooling keep compression-artifact energy visible in set
    statistics, which small random backbones otherwise wash out.
    """

    def __init__(self, base: ConvTapExtractor, abs_pool: bool = False, highpass_gain: float = 0.0):
        super().__init__()
        self.base = base
        self.abs_pool = abs_pool
        self.highpass_gain = highpass_gain
        box = torch.full((3, 1, 3, 3), 1.0 / 9.0)
        self.register_buffer("box", box)
        self.eval()

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        x = _replicate_gray(batch)
        if self.highpass_gain:
            blur = torch.nn.functional.conv2d(
                torch.nn.functional.pad(x, (1, 1, 1, 1), mode="reflect"),
                self.box.to(x.dtype),
                groups=3,
            )
            x = (x - blur) * self.highpass_gain
        feats = self.base.features(x)
        if self.abs_pool:
            feats = feats.abs()
        return feats.mean(dim=(2, 3))

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.features(batch)


def tiny_pool_extractor(
    dim: int = 16,
    blocks: int = 2,
    seed: int = 0,
    highpass_gain: float = 8.0,
) -> PooledExtractor:
    """Desk-scale pooled backbone: artifact-sensitive by construction."""
    return PooledExtractor(
        tiny_extractor(blocks=blocks, channels=dim, seed=seed, pre_activation=True),
        abs_pool=True,
        highpass_gain=highpass_gain,
    )


class InceptionPoolExtractor(nn.Module):
    """2048-d pooled Inception-v3 features; inputs resized to 299×299 bilinear."""

    def __init__(self, weights: str | Path = "auto"):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        if weights == "auto":
            try:
                from torchvision.models import Inception_V3_Weights

                net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise ExtractorError(
                    "pretrained Inception weights unavailable (no download possible); "
                    "pass a state-dict path or use tiny_pool_extractor for desk scale"
                ) from exc
        elif weights != "random":
            path = Path(weights)
            if not path.exists():
                raise ExtractorError(f"weights file missing: {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        net.fc = nn.Identity()
        self.net = net
        self.register_buffer("in_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("in_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        x = _replicate_gray(batch)
        x = torch.nn.functional.interpolate(
            x, size=(299, 299), mode="bilinear", align_corners=False, antialias=False
        )
        x = (x - self.in_mean.to(x.dtype)) / self.in_std.to(x.dtype)
        return self.net(x)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.features(batch)


def build_extractor(tap: FeatureTapSpec, weights: str | Path = "auto", seed: int = 0):
    if tap.backbone is Backbone.VGG19:
        return vgg19_extractor(tap.block, tap.pre_activation, weights=weights, seed=seed)
    return InceptionPoolExtractor(weights=weights)


def extract(img: ImageTensor, extractor, tap: FeatureTapSpec | None = None) -> FeatureMap:
    """Run one image through a frozen extractor; deterministic in (weights, img).

    Returns spatial maps as h×w×c, pooled features as a d-vector. For the
    differentiable path used inside losses, call extractor.features on a
    batch tensor directly.
    """
    batch = to_batch(img)
    with torch.no_grad():
        feats = extractor.features(batch)
    if not torch.isfinite(feats).all():
        raise ExtractorError("non-finite feature values")
    arr = feats[0].cpu().numpy()
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    return FeatureMap(data=arr, tap=tap)


def extract_dataset_stats(
    images: Iterable[ImageTensor],
    extractor,
    batch_size: int = 16,
) -> FeatureStats:
    """Mean and covariance of pooled features over an image set.

    Spatial extractors are mean-pooled over space. Covariance uses the
    unbiased (n-1) estimator and is symmetrized to numerical exactness.
    """
    rows = []
    buffer: list[ImageTensor] = []

    def flush():
        if not buffer:
            return
        batch = to_batch(buffer)
        with torch.no_grad():
            feats = extractor.features(batch)
        if feats.ndim == 4:
            feats = feats.mean(dim=(2, 3))
        rows.append(feats.cpu().double().numpy())
        buffer.clear()

    for img in images:
        buffer.append(img)
        if len(buffer) >= batch_size:
            flush()
    flush()
    if not rows:
        raise ValueError("insufficient samples: got 0 images, need >= 2")
    feats = np.concatenate(rows, axis=0)
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"insufficient samples: got {n} image(s), need >= 2")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, cov=cov, n=n)
