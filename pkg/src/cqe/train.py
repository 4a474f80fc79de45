"""Alternating GAN optimization with ablation gating, checkpoints, seeding.

Each iteration performs one discriminator update (maximizing the
discriminator gain on detached enhanced images) followed by one generator
update on the weighted total loss. The four ablation configurations gate
the conditional discriminator and the domain-divergence regularizer:

    VANILLA      unconditional D, regularizer off
    COND_D_ONLY  conditional D,   regularizer off
    REG_ONLY     unconditional D, regularizer on
    FULL         conditional D,   regularizer on

Training is deterministic for a fixed seed, and checkpoints capture enough
state (weights, optimizers, RNG) that save -> load -> continue reproduces
an uninterrupted run step for step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .features import tiny_extractor, vgg19_extractor
from .losses import (
    AdvLossKind,
    LossReport,
    LossTerms,
    LossWeights,
    NonFiniteLossError,
    disc_loss,
    domain_div_loss,
    gen_adv_loss,
    gen_total_loss,
    percept_loss,
    recon_loss,
)
from .networks import (
    DiscArch,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_discriminator,
)
from .tensors import to_batch
from .types import ImageTriplet, Manifest

from enum import Enum


class CheckpointError(Exception):
    """Checkpoint missing, unreadable, or incompatible."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture differs from the requested configuration."""


class Ablation(str, Enum):
    VANILLA = "vanilla"
    COND_D_ONLY = "cond_d_only"
    REG_ONLY = "reg_only"
    FULL = "full"


_CONDITIONAL_ABLATIONS = {Ablation.COND_D_ONLY, Ablation.FULL}
_REGULARIZED_ABLATIONS = {Ablation.REG_ONLY, Ablation.FULL}


@dataclass(frozen=True)
class ExtractorSpec:
    """Which frozen backbone provides the perceptual/regularizer tap."""

    kind: str = "vgg19"  # "vgg19" or "tiny"
    block: int = 5
    pre_activation: bool = True
    weights: str = "auto"  # "auto", "random", or a state-dict path
    channels: int = 16
    blocks: int = 2
    seed: int = 0
    gain: float = 1.0

    def build(self):
        if self.kind == "vgg19":
            return vgg19_extractor(
                block=self.block,
                pre_activation=self.pre_activation,
                weights=self.weights,
                seed=self.seed,
            )
        if self.kind == "tiny":
            return tiny_extractor(
                blocks=self.blocks,
                channels=self.channels,
                seed=self.seed,
                pre_activation=self.pre_activation,
                gain=self.gain,
            )
        raise ValueError(f"unknown extractor kind: {self.kind}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    patch_size: int = 128
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    seed: int = 0
    ablation: Ablation = Ablation.FULL
    weights: LossWeights = field(default_factory=LossWeights.realesrgan_style)
    adv_kind: AdvLossKind = AdvLossKind.VANILLA
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    pretrain_steps: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        object.__setattr__(self, "adv_kind", AdvLossKind(self.adv_kind))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.ablation in _REGULARIZED_ABLATIONS and self.weights.lambda_R <= 0:
            raise ValueError(
                f"ablation {self.ablation.value} requires lambda_R > 0, got {self.weights.lambda_R}"
            )

    @property
    def conditional(self) -> bool:
        return self.ablation in _CONDITIONAL_ABLATIONS

    @property
    def effective_weights(self) -> LossWeights:
        # Ablation is the source of truth: VANILLA/COND_D_ONLY force lambda_R = 0.
        if self.ablation in _REGULARIZED_ABLATIONS:
            return self.weights
        return self.weights.without_regularizer()

    @property
    def discriminator_config(self) -> DiscriminatorConfig:
        return replace(self.discriminator, conditional=self.conditional)

    def arch_fingerprint(self) -> dict:
        return {
            "generator": asdict(self.generator),
            "discriminator": {**asdict(self.discriminator_config), "arch": self.discriminator_config.arch.value},
        }


@dataclass
class TrainState:
    step: int
    generator: Generator
    discriminator: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    config: TrainConfig

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": 1,
            "step": self.step,
            "arch": self.config.arch_fingerprint(),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(payload, path)
        return path


def _init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    generator = Generator(cfg.generator)
    discriminator = build_discriminator(cfg.discriminator_config)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_g, betas=(0.9, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_d, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed)
    return TrainState(0, generator, discriminator, opt_g, opt_d, rng, cfg)


def resume(checkpoint_path: str | Path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint; continuation is bit-identical."""
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise CheckpointError(f"checkpoint not found: {checkpoint_path}")
    try:
        payload = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {checkpoint_path}: {exc}") from exc
    if not isinstance(payload, dict) or "arch" not in payload:
        raise CheckpointError(f"corrupt checkpoint {checkpoint_path}: missing fields")
    expected = cfg.arch_fingerprint()
    if payload["arch"] != expected:
        raise ArchitectureMismatchError(
            f"architecture mismatch: checkpoint {payload['arch']} vs config {expected}"
        )
    state = _init_state(cfg)
    state.step = int(payload["step"])
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.rng.bit_generator.state = payload["numpy_rng"]
    torch.set_rng_state(payload["torch_rng"].to(torch.uint8))
    return state


class _TripletCache:
    """Raw/compressed pixel arrays for every manifest entry, loaded once."""

    def __init__(self, manifest: Manifest):
        if len(manifest) == 0:
            raise ValueError("empty manifest")
        self.raw: list[np.ndarray] = []
        self.comp: list[np.ndarray] = []
        for entry in manifest.entries:
            t = manifest.load_triplet(entry)
            self.raw.append(t.raw.data)
            self.comp.append(t.compressed.data)

    def __len__(self) -> int:
        return len(self.raw)


def _sample_batch(
    cache: _TripletCache, rng: np.random.Generator, batch_size: int, patch: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Aligned random crops with identical random horizontal flips."""
    raws, comps = [], []
    for _ in range(batch_size):
        idx = int(rng.integers(len(cache)))
        raw, comp = cache.raw[idx], cache.comp[idx]
        h, w = raw.shape[:2]
        p = min(patch, h, w)
        y = int(rng.integers(h - p + 1))
        x = int(rng.integers(w - p + 1))
        raw_c = raw[y : y + p, x : x + p]
        comp_c = comp[y : y + p, x : x + p]
        if rng.random() < 0.5:
            raw_c = raw_c[:, ::-1]
            comp_c = comp_c[:, ::-1]
        raws.append(np.ascontiguousarray(raw_c.transpose(2, 0, 1)))
        comps.append(np.ascontiguousarray(comp_c.transpose(2, 0, 1)))
    return (
        torch.from_numpy(np.stack(raws)).float(),
        torch.from_numpy(np.stack(comps)).float(),
    )


def _set_requires_grad(module: torch.nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def train(
    manifest: Manifest,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    start_state: TrainState | None = None,
) -> tuple[TrainState, list[LossReport]]:
    """Run alternating optimization up to cfg.steps; returns state and loss stream.

    With start_state (from resume) training continues from its step counter.
    All reports in the stream are finite or training aborts with the step and
    offending component. When out_dir is given, per-step reports are appended
    to out_dir/log.jsonl and checkpoints written under out_dir/checkpoints/.
    """
    state = start_state or _init_state(cfg)
    cache = _TripletCache(manifest)
    weights = cfg.effective_weights
    need_extractor = weights.lambda_p > 0 or weights.lambda_R > 0
    extractor = cfg.extractor.build() if need_extractor else None
    tap = extractor.features if extractor is not None else None

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.jsonl"

    stream: list[LossReport] = []
    g, d = state.generator, state.discriminator
    g.train()
    d.train()

    for step in range(state.step, cfg.steps):
        warmup = step < cfg.pretrain_steps
        raw, comp = _sample_batch(cache, state.rng, cfg.batch_size, cfg.patch_size)

        disc_gain_value = 0.0
        if not warmup and weights.lambda_d > 0:
            _set_requires_grad(d, True)
            with torch.no_grad():
                fake = g(comp)
            gain = disc_loss(d, fake, raw, comp, cfg.adv_kind, cfg.conditional)
            state.opt_d.zero_grad()
            (-gain).backward()
            state.opt_d.step()
            disc_gain_value = float(gain.detach())

        _set_requires_grad(d, False)
        enhanced = g(comp)
        terms = LossTerms(recon=recon_loss(enhanced, raw))
        if not warmup:
            if weights.lambda_p > 0:
                terms.percept = percept_loss(enhanced, raw, tap)
            if weights.lambda_d > 0:
                terms.discrim = gen_adv_loss(d, enhanced, raw, comp, cfg.adv_kind, cfg.conditional)
            if weights.lambda_R > 0:
                l_r, d_cr, d_ce = domain_div_loss(enhanced, raw, comp, tap)
                terms.domain_div, terms.d_cr, terms.d_ce = l_r, d_cr, d_ce
        try:
            report = gen_total_loss(terms, weights)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"step {step}: {exc}") from exc
        state.opt_g.zero_grad()
        report.total.backward()
        state.opt_g.step()
        _set_requires_grad(d, True)

        scalar = report.scalar()
        if not all(np.isfinite(v) for v in scalar.to_dict().values()):
            raise NonFiniteLossError(f"step {step}: non-finite loss in report {scalar.to_dict()}")
        stream.append(scalar)
        state.step = step + 1
        if log_path is not None:
            record = {"step": step, "disc_gain": disc_gain_value, **scalar.to_dict()}
            with log_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            state.save(out_dir / "checkpoints" / f"step_{state.step}.ckpt")

    if out_dir is not None:
        state.save(out_dir / "checkpoints" / f"step_{state.step}.ckpt")
    return state, stream


def holdout_domain_distances(
    generator: Generator,
    triplets: list[ImageTriplet],
    extractor,
) -> tuple[float, float]:
    """Mean (d_cr, d_ce) feature distances over a holdout set.

    d_ce uses freshly enhanced images from the given generator, mirroring the
    training-time regularizer distances on unseen data.
    """
    generator.eval()
    d_crs, d_ces = [], []
    tap = extractor.features
    with torch.no_grad():
        for t in triplets:
            comp = to_batch(t.compressed)
            raw = to_batch(t.raw)
            enhanced = generator(comp)
            feats_c = tap(comp)
            d_crs.append(float((tap(raw) - feats_c).abs().mean()))
            d_ces.append(float((tap(enhanced) - feats_c).abs().mean()))
    generator.train()
    return float(np.mean(d_crs)), float(np.mean(d_ces))


def enhance_manifest_triplets(generator: Generator, triplets: list[ImageTriplet]) -> list[ImageTriplet]:
    """Attach generator outputs (clamped) to each triplet."""
    from .networks import enhance

    return [t.with_enhanced(enhance(generator, t.compressed)) for t in triplets]
