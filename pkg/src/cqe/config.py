"""Hierarchical run configuration.

A nested key-value tree resolved from three layers in ascending precedence:
YAML config file, environment variables, command-line --set overrides.
Environment overrides use the exact key path with a CQE_ prefix and double
underscores between levels, e.g. CQE_loss__lambda_R=0.2. Every command
echoes its fully resolved tree to <out>/config.resolved for provenance.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .losses import AdvLossKind, LossWeights
from .networks import DiscArch, DiscriminatorConfig, GeneratorConfig
from .train import Ablation, ExtractorSpec, TrainConfig

ENV_PREFIX = "CQE_"


class ConfigError(Exception):
    """Invalid or unknown configuration."""


DEFAULTS: dict = {
    "train": {
        "steps": 1000,
        "batch_size": 8,
        "patch_size": 128,
        "lr_g": 1.0e-4,
        "lr_d": 1.0e-4,
        "seed": 0,
        "ablation": "full",
        "pretrain_steps": 0,
        "checkpoint_every": 0,
    },
    "loss": {
        "lambda_r": 1.0,
        "lambda_p": 1.0,
        "lambda_d": 0.1,
        "lambda_R": 0.1,
        "adv_kind": "vanilla",
        "conditional": None,  # derived from train.ablation unless set
    },
    "model": {
        "generator": {"channels": 64, "num_blocks": 8},
        "discriminator": {"arch": "vgg_style", "base_channels": 64, "spectral_norm": False},
    },
    "percept": {
        "tap": {"block": 5, "pre_activation": True},
        "backbone": {
            "kind": "vgg19",
            "weights": "auto",
            "channels": 16,
            "blocks": 2,
            "seed": 0,
            "gain": 1.0,
        },
    },
    "fid": {
        "backbone": "inception",  # "inception" or "tiny"
        "backbone_weights": "auto",
        "dim": 16,
        "seed": 0,
        "patch": None,
    },
    "lpips": {
        "backbone": "vgg19",  # "vgg19" or "tiny"
        "weights": "auto",
        "calibration": None,
        "channels": 16,
        "blocks": 3,
        "seed": 0,
    },
    "codec": {"chroma": "4:2:0"},
    "bias": {"patch_size": 128},
}


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _parse_value(text: str):
    return yaml.safe_load(text)


def _assign_path(tree: dict, path: list[str], value):
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into non-mapping key {'.'.join(path)}")
    node[path[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].split("__")
        if name in (
            "CQE_BPGENC",
            "CQE_BPGDEC",
        ):  # codec binary overrides are read directly by the codec module
            continue
        _assign_path(tree, path, _parse_value(raw))
    return tree


def set_overrides(sets: list[str]) -> dict:
    tree: dict = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        _assign_path(tree, key.strip().split("."), _parse_value(raw))
    return tree


def resolve(
    config_path: str | Path | None = None,
    sets: list[str] | None = None,
    environ=None,
) -> dict:
    """file < env < flags, each layer merged over the built-in defaults."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        cfg = deep_merge(cfg, loaded)
    cfg = deep_merge(cfg, env_overrides(environ))
    cfg = deep_merge(cfg, set_overrides(sets or []))
    return cfg


def save_resolved(cfg: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def loss_weights_from(cfg: dict) -> LossWeights:
    loss = cfg["loss"]
    return LossWeights(
        lambda_r=float(loss["lambda_r"]),
        lambda_p=float(loss["lambda_p"]),
        lambda_d=float(loss["lambda_d"]),
        lambda_R=float(loss["lambda_R"]),
    )


def extractor_spec_from(cfg: dict) -> ExtractorSpec:
    tap = cfg["percept"]["tap"]
    backbone = cfg["percept"]["backbone"]
    return ExtractorSpec(
        kind=backbone["kind"],
        block=int(tap["block"]),
        pre_activation=bool(tap["pre_activation"]),
        weights=str(backbone["weights"]),
        channels=int(backbone["channels"]),
        blocks=int(backbone["blocks"]),
        seed=int(backbone["seed"]),
        gain=float(backbone.get("gain", 1.0)),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    train = cfg["train"]
    ablation = Ablation(train["ablation"])
    explicit_conditional = cfg["loss"].get("conditional")
    derived_conditional = ablation in (Ablation.COND_D_ONLY, Ablation.FULL)
    if explicit_conditional is not None and bool(explicit_conditional) != derived_conditional:
        raise ConfigError(
            f"loss.conditional={explicit_conditional} conflicts with ablation {ablation.value}"
        )
    gen = cfg["model"]["generator"]
    disc = cfg["model"]["discriminator"]
    return TrainConfig(
        steps=int(train["steps"]),
        batch_size=int(train["batch_size"]),
        patch_size=int(train["patch_size"]),
        lr_g=float(train["lr_g"]),
        lr_d=float(train["lr_d"]),
        seed=int(train["seed"]),
        ablation=ablation,
        weights=loss_weights_from(cfg),
        adv_kind=AdvLossKind(cfg["loss"]["adv_kind"]),
        generator=GeneratorConfig(
            channels=int(gen["channels"]), num_blocks=int(gen["num_blocks"])
        ),
        discriminator=DiscriminatorConfig(
            arch=DiscArch(disc["arch"]),
            base_channels=int(disc["base_channels"]),
            spectral_norm=bool(disc["spectral_norm"]),
        ),
        extractor=extractor_spec_from(cfg),
        pretrain_steps=int(train["pretrain_steps"]),
        checkpoint_every=int(train["checkpoint_every"]),
    )


def fid_extractor_from(cfg: dict):
    from .features import InceptionPoolExtractor, tiny_pool_extractor

    fid_cfg = cfg["fid"]
    if fid_cfg["backbone"] == "tiny":
        return tiny_pool_extractor(dim=int(fid_cfg["dim"]), seed=int(fid_cfg["seed"]))
    return InceptionPoolExtractor(weights=fid_cfg["backbone_weights"])


def lpips_metric_from(cfg: dict):
    from .features import tiny_extractor, vgg19_extractor
    from .metrics import LpipsMetric

    lp = cfg["lpips"]
    if lp["backbone"] == "tiny":
        extractor = tiny_extractor(
            blocks=int(lp["blocks"]),
            channels=int(lp["channels"]),
            seed=int(lp["seed"]),
            pre_activation=False,
        )
    else:
        extractor = vgg19_extractor(block=5, pre_activation=False, weights=lp["weights"])
    if lp.get("calibration"):
        return LpipsMetric.load_calibration(extractor, lp["calibration"])
    return LpipsMetric(extractor)
