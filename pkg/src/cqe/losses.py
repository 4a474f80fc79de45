"""Training objectives.

Discriminator gain (to maximize):

    L_D = E[log(1 - D(I_E | I_C))] + E[log D(I_R | I_C)]

with the condition dropped in the unconditional variant. Generator total:

    L_G = lambda_r * L_recon + lambda_p * L_percept + lambda_d * L_discrim
          + lambda_R * L_R

where L_R is a hinge on frozen-backbone feature distances to the compressed
image: it pushes the enhanced image away from its compressed source whenever
the enhanced image sits closer to it than the raw image does, and is inert
otherwise. Gradients of L_R flow only through the enhanced image.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, replace
from enum import Enum

import torch

EPS = 1e-7  # probability clamp before logs


class NonFiniteLossError(Exception):
    """A loss component evaluated to NaN/Inf."""


class AdvLossKind(str, Enum):
    VANILLA = "vanilla"
    RELATIVISTIC_AVG = "relativistic_avg"


TapFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_p: float = 1.0
    lambda_d: float = 1e-1
    lambda_R: float = 1e-1

    def __post_init__(self):
        for name in ("lambda_r", "lambda_p", "lambda_d", "lambda_R"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def esrgan_style(cls) -> "LossWeights":
        return cls(1e-2, 1.0, 5e-3, 1e-1)

    @classmethod
    def realesrgan_style(cls) -> "LossWeights":
        return cls(1.0, 1.0, 1e-1, 1e-1)

    def without_regularizer(self) -> "LossWeights":
        return replace(self, lambda_R=0.0)


@dataclass
class LossReport:
    """Per-step generator loss breakdown.

    Fields hold tensors while a graph is alive (total is differentiable);
    scalar() converts everything to plain floats for logging.
    """

    recon: float | torch.Tensor
    percept: float | torch.Tensor
    discrim: float | torch.Tensor
    domain_div: float | torch.Tensor
    total: float | torch.Tensor
    d_cr: float | torch.Tensor = 0.0
    d_ce: float | torch.Tensor = 0.0

    def scalar(self) -> "LossReport":
        return LossReport(*[_as_float(getattr(self, f)) for f in _REPORT_FIELDS])

    def to_dict(self) -> dict[str, float]:
        return {f: _as_float(getattr(self, f)) for f in _REPORT_FIELDS}


_REPORT_FIELDS = ("recon", "percept", "discrim", "domain_div", "total", "d_cr", "d_ce")


def _as_float(value: float | torch.Tensor) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _prob(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)


def recon_loss(enhanced: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
    """Pixel-wise mean absolute error."""
    _check_shapes(enhanced, raw, "recon_loss")
    return (enhanced - raw).abs().mean()


def percept_loss(enhanced: torch.Tensor, raw: torch.Tensor, tap: TapFn) -> torch.Tensor:
    """Feature-wise mean absolute error under a frozen backbone tap."""
    _check_shapes(enhanced, raw, "percept_loss")
    return (tap(enhanced) - tap(raw)).abs().mean()


def disc_loss(
    d,
    enhanced: torch.Tensor,
    raw: torch.Tensor,
    compressed: torch.Tensor,
    kind: AdvLossKind = AdvLossKind.VANILLA,
    conditional: bool = False,
) -> torch.Tensor:
    """Discriminator gain; training minimizes its negation.

    Pass enhanced detached when updating D so no gradient reaches G.
    """
    _check_shapes(enhanced, raw, "disc_loss")
    cond = compressed if conditional else None
    logits_fake = d(enhanced, cond)
    logits_real = d(raw, cond)
    if kind is AdvLossKind.VANILLA:
        return torch.log(1.0 - _prob(logits_fake)).mean() + torch.log(_prob(logits_real)).mean()
    rel_real = logits_real - logits_fake.mean()
    rel_fake = logits_fake - logits_real.mean()
    return torch.log(_prob(rel_real)).mean() + torch.log(1.0 - _prob(rel_fake)).mean()


def gen_adv_loss(
    d,
    enhanced: torch.Tensor,
    raw: torch.Tensor,
    compressed: torch.Tensor,
    kind: AdvLossKind = AdvLossKind.VANILLA,
    conditional: bool = False,
) -> torch.Tensor:
    """Generator-side adversarial loss (minimized); non-saturating for VANILLA."""
    _check_shapes(enhanced, raw, "gen_adv_loss")
    cond = compressed if conditional else None
    logits_fake = d(enhanced, cond)
    if kind is AdvLossKind.VANILLA:
        return -torch.log(_prob(logits_fake)).mean()
    logits_real = d(raw, cond)
    rel_real = logits_real - logits_fake.mean()
    rel_fake = logits_fake - logits_real.mean()
    return -(torch.log(_prob(rel_fake)).mean() + torch.log(1.0 - _prob(rel_real)).mean())


def domain_div_loss(
    enhanced: torch.Tensor,
    raw: torch.Tensor,
    compressed: torch.Tensor,
    tap: TapFn,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Hinge pushing the enhanced image away from its compressed source.

    Returns (L_R, d_cr, d_ce) with
        d_cr = mean |psi(raw) - psi(compressed)|
        d_ce = mean |psi(enhanced) - psi(compressed)|
        L_R  = max(0, d_cr - d_ce)
    Gradient flows only through `enhanced`; raw and compressed are detached.
    """
    _check_shapes(enhanced, raw, "domain_div_loss")
    _check_shapes(enhanced, compressed, "domain_div_loss")
    with torch.no_grad():
        feats_c = tap(compressed.detach())
        d_cr = (tap(raw.detach()) - feats_c).abs().mean()
    d_ce = (tap(enhanced) - feats_c).abs().mean()
    l_r = torch.clamp(d_cr - d_ce, min=0.0)
    return l_r, d_cr, d_ce


@dataclass
class LossTerms:
    recon: float | torch.Tensor = 0.0
    percept: float | torch.Tensor = 0.0
    discrim: float | torch.Tensor = 0.0
    domain_div: float | torch.Tensor = 0.0
    d_cr: float | torch.Tensor = 0.0
    d_ce: float | torch.Tensor = 0.0


def gen_total_loss(terms: LossTerms, weights: LossWeights) -> LossReport:
    """Weighted combination of generator loss components.

    With lambda_R = 0 this reduces exactly to the three-term baseline loss.
    Raises NonFiniteLossError naming the first non-finite component.
    """
    for name in ("recon", "percept", "discrim", "domain_div"):
        value = getattr(terms, name)
        scalar = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not _is_finite(scalar):
            raise NonFiniteLossError(f"non-finite loss component: {name} = {scalar}")
    total = (
        weights.lambda_r * terms.recon
        + weights.lambda_p * terms.percept
        + weights.lambda_d * terms.discrim
        + weights.lambda_R * terms.domain_div
    )
    return LossReport(
        recon=terms.recon,
        percept=terms.percept,
        discrim=terms.discrim,
        domain_div=terms.domain_div,
        total=total,
        d_cr=terms.d_cr,
        d_ce=terms.d_ce,
    )


def _is_finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")
