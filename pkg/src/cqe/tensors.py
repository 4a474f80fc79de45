"""Conversions between ImageTensor values and torch NCHW batches."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch

from .types import ImageTensor


def to_batch(images: ImageTensor | Sequence[ImageTensor], dtype=torch.float32) -> torch.Tensor:
    """Stack one or more ImageTensors into an N×C×H×W torch tensor."""
    if isinstance(images, ImageTensor):
        images = [images]
    arrays = [np.ascontiguousarray(img.data.transpose(2, 0, 1)) for img in images]
    return torch.from_numpy(np.stack(arrays)).to(dtype)


def from_batch(batch: torch.Tensor, clamp: bool = True) -> list[ImageTensor]:
    """Convert an N×C×H×W tensor back to ImageTensors, clamping to [0, 1] by default."""
    if batch.ndim != 4:
        raise ValueError(f"expected N×C×H×W batch, got shape {tuple(batch.shape)}")
    out = batch.detach().cpu()
    if clamp:
        out = out.clamp(0.0, 1.0)
    arrays = out.numpy().transpose(0, 2, 3, 1)
    return [ImageTensor(a) for a in arrays]


def seed_module_(module: torch.nn.Module, seed: int, scale: str = "fan_in") -> torch.nn.Module:
    """Re-randomize all parameters of a module from a dedicated generator.

    Deterministic for a given seed regardless of global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters()):
        values = torch.randn(param.shape, generator=gen, dtype=torch.float32)
        if param.ndim > 1 and scale == "fan_in":
            fan_in = int(np.prod(param.shape[1:]))
            values = values / max(fan_in, 1) ** 0.5
        elif param.ndim <= 1:
            values = values * 0.1
        with torch.no_grad():
            param.copy_(values.to(param.dtype))
    return module
