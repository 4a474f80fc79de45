"""Enhancement generator and (optionally conditional) realism discriminators.

The generator is a residual CNN whose final projection is zero-initialized,
so a fresh network is exactly the identity map. Discriminators come in a
VGG-style scalar-logit variant and a U-Net per-pixel-logit variant; the
conditional form concatenates the compressed image on the channel axis at
the input, doubling the first layer's channel count.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import spectral_norm

from .tensors import from_batch, to_batch
from .types import ImageTensor


class DiscArch(str, Enum):
    VGG_STYLE = "vgg_style"
    UNET_STYLE = "unet_style"


@dataclass(frozen=True)
class GeneratorConfig:
    channels: int = 64
    num_blocks: int = 8
    in_channels: int = 3
    out_channels: int = 3


@dataclass(frozen=True)
class DiscriminatorConfig:
    arch: DiscArch = DiscArch.VGG_STYLE
    conditional: bool = False
    spectral_norm: bool = False
    base_channels: int = 64
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "arch", DiscArch(self.arch))

    @property
    def input_channels(self) -> int:
        return self.in_channels * (2 if self.conditional else 1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class Generator(nn.Module):
    """Residual enhancement network; output shape always equals input shape."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        c = self.cfg.channels
        self.head = nn.Conv2d(self.cfg.in_channels, c, 3, 1, 1)
        self.body = nn.Sequential(*[ResidualBlock(c) for _ in range(self.cfg.num_blocks)])
        self.tail = nn.Conv2d(c, self.cfg.out_channels, 3, 1, 1)
        self.init_identity()

    def init_identity(self):
        # Zeroed projection makes the whole network an exact identity map.
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"generator expects {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        return x + self.tail(self.body(self.head(x)))


class VggStyleDiscriminator(nn.Module):
    """Strided conv stack pooled to a single realism logit per image."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        sn = spectral_norm if cfg.spectral_norm else (lambda m: m)
        self.convs = nn.Sequential(
            sn(nn.Conv2d(cfg.input_channels, c, 3, 1, 1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(c, c, 4, 2, 1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(c, 2 * c, 3, 1, 1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(2 * c, 2 * c, 4, 2, 1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(2 * c, 4 * c, 3, 1, 1)),
            nn.LeakyReLU(0.2, inplace=True),
            sn(nn.Conv2d(4 * c, 4 * c, 4, 2, 1)),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = sn(nn.Linear(4 * c, 1))

    def forward(self, image: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
        x = _conditioned_input(self.cfg, image, condition)
        h = self.convs(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.fc(h).squeeze(1)


class UnetDiscriminator(nn.Module):
    """U-Net discriminator emitting a per-pixel logit map.

    Inputs are reflect-padded to a multiple of the 8× downsampling factor
    and the logit map is cropped back afterwards.
    """

    downsample_factor = 8

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        sn = spectral_norm if cfg.spectral_norm else (lambda m: m)
        self.conv_in = nn.Conv2d(cfg.input_channels, c, 3, 1, 1)
        self.down1 = sn(nn.Conv2d(c, 2 * c, 4, 2, 1))
        self.down2 = sn(nn.Conv2d(2 * c, 4 * c, 4, 2, 1))
        self.down3 = sn(nn.Conv2d(4 * c, 8 * c, 4, 2, 1))
        self.up3 = sn(nn.Conv2d(8 * c, 4 * c, 3, 1, 1))
        self.up2 = sn(nn.Conv2d(4 * c, 2 * c, 3, 1, 1))
        self.up1 = sn(nn.Conv2d(2 * c, c, 3, 1, 1))
        self.conv_out = nn.Conv2d(c, 1, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, image: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
        x = _conditioned_input(self.cfg, image, condition)
        h, w = x.shape[2], x.shape[3]
        f = self.downsample_factor
        pad_h = (f - h % f) % f
        pad_w = (f - w % f) % f
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        f0 = self.act(self.conv_in(x))
        f1 = self.act(self.down1(f0))
        f2 = self.act(self.down2(f1))
        f3 = self.act(self.down3(f2))
        u3 = self.act(self.up3(F.interpolate(f3, scale_factor=2, mode="bilinear", align_corners=False))) + f2
        u2 = self.act(self.up2(F.interpolate(u3, scale_factor=2, mode="bilinear", align_corners=False))) + f1
        u1 = self.act(self.up1(F.interpolate(u2, scale_factor=2, mode="bilinear", align_corners=False))) + f0
        out = self.conv_out(u1)
        return out[:, :, :h, :w]


def _conditioned_input(
    cfg: DiscriminatorConfig, image: torch.Tensor, condition: torch.Tensor | None
) -> torch.Tensor:
    if cfg.conditional:
        if condition is None:
            raise ValueError("conditional discriminator requires a condition image")
        if condition.shape != image.shape:
            raise ValueError(
                f"condition shape {tuple(condition.shape)} differs from image {tuple(image.shape)}"
            )
        return torch.cat([image, condition], dim=1)
    if condition is not None:
        raise ValueError("unconditional discriminator must not receive a condition")
    return image


def build_discriminator(cfg: DiscriminatorConfig) -> nn.Module:
    if cfg.arch is DiscArch.VGG_STYLE:
        return VggStyleDiscriminator(cfg)
    return UnetDiscriminator(cfg)


def enhance(g: Generator, compressed: ImageTensor) -> ImageTensor:
    """Inference-time enhancement: forward pass, clamp to [0, 1], export."""
    g.eval()
    with torch.no_grad():
        out = g(to_batch(compressed))
    return from_batch(out, clamp=True)[0]


def discriminate(
    d: nn.Module, image: ImageTensor, condition: ImageTensor | None = None
) -> torch.Tensor:
    """Realism logits for one image (scalar or per-pixel map, by architecture)."""
    cond = to_batch(condition) if condition is not None else None
    with torch.no_grad():
        return d(to_batch(image), cond)[0]


def realism_score(logits: torch.Tensor) -> float:
    """Mean sigmoid over whatever logit structure the discriminator emits."""
    return float(torch.sigmoid(logits).mean())
