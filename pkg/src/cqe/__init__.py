"""GAN-based quality enhancement of compressed images, with bias metrology.

Trains an enhancement generator against a conditional discriminator and a
domain-divergence regularizer that keeps enhanced images from collapsing
back onto their compressed sources, and measures that tendency with
discriminator realism scores, FID/LPIPS domain triangles, and BD-BR
rate-distortion summaries.
"""

__version__ = "0.1.0"

from .types import (  # noqa: F401
    Codec,
    CodecSpec,
    ImageTensor,
    ImageTriplet,
    Manifest,
    ManifestEntry,
    load_manifest,
    save_manifest,
    validate_triplet,
)
