"""Command-line entry point orchestrating all workflows.

Subcommands: prepare, compress, train, enhance, eval, bias-report, rd-curves.
Every run writes its resolved config plus an outputs.json manifest into the
output directory. Exit codes: 0 success, 1 runtime failure, 2 usage error;
failures additionally emit a machine-readable JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bias as bias_mod
from . import codec as codec_mod
from . import config as config_mod
from . import metrics as metrics_mod
from . import synthetic
from . import train as train_mod
from .types import (
    Codec,
    CodecSpec,
    Manifest,
    ManifestError,
    load_manifest,
    read_image,
    save_manifest,
    write_image,
)

log = logging.getLogger("cqe")

COMMANDS = ("prepare", "compress", "train", "enhance", "eval", "bias-report", "rd-curves")


class CliError(Exception):
    """Runtime failure surfaced with context (exit code 1)."""


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable (highest precedence)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build train/val manifests (real or synthetic corpus)")
    p.add_argument("--raw-dir", default=None, help="directory of raw images")
    p.add_argument("--synthetic", type=int, default=None, metavar="N",
                   help="generate N procedural raw images instead of --raw-dir")
    p.add_argument("--size", type=int, default=64, help="synthetic image size")
    p.add_argument("--codec", choices=["bpg", "jpeg", "both"], default="jpeg")
    p.add_argument("--qp", default=None, help="comma-separated BPG QP list")
    p.add_argument("--qf", default=None, help="comma-separated JPEG QF list")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common_flags(p)

    p = sub.add_parser("compress", help="compress a raw image directory across a quality grid")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--codec", choices=["bpg", "jpeg"], required=True)
    p.add_argument("--qp", default=None, help="comma-separated BPG QP list")
    p.add_argument("--qf", default=None, help="comma-separated JPEG QF list")
    p.add_argument("--split", choices=["train", "val"], default="train")
    p.add_argument("--out", required=True)
    _common_flags(p)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _common_flags(p)

    p = sub.add_parser("enhance", help="enhance a manifest's compressed images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)

    p = sub.add_parser("eval", help="reference-metric evaluation of an enhanced manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="psnr", help="comma list from {psnr,lpips,fid}")
    p.add_argument("--external-scorer", dest="external", action="append", default=[],
                   metavar="NAME=EXECUTABLE", help="external scorer plug-in, repeatable")
    p.add_argument("--out", required=True)
    _common_flags(p)

    p = sub.add_parser("bias-report", help="realism scores and domain triangles for a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", default="fid", help="comma list from {fid,lpips}")
    p.add_argument("--patch-size", type=int, default=None,
                   help="override bias.patch_size from config")
    p.add_argument("--out", required=True)
    _common_flags(p)

    p = sub.add_parser("rd-curves", help="rate-distortion curves and BD-BR from a curve spec")
    p.add_argument("--spec", required=True,
                   help="JSON file: {curves: [{label, manifests: [...]}], metric, higher_is_better}")
    p.add_argument("--reference", default=None, help="label of the BD-BR reference curve")
    p.add_argument("--out", required=True)
    _common_flags(p)

    return parser


def _parse_quality_list(text: str | None, fallback: tuple[int, ...]) -> list[int]:
    if not text:
        return list(fallback)
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _codec_specs(args) -> list[CodecSpec]:
    specs: list[CodecSpec] = []
    if args.codec in ("jpeg", "both"):
        from .types import JPEG_QF_GRID

        specs += [CodecSpec(Codec.JPEG, q) for q in _parse_quality_list(args.qf, JPEG_QF_GRID)]
    if args.codec in ("bpg", "both"):
        from .types import BPG_QP_GRID

        specs += [CodecSpec(Codec.BPG, q) for q in _parse_quality_list(args.qp, BPG_QP_GRID)]
    return specs


def _finish(out_dir: Path, cfg: dict, outputs: list[Path]) -> None:
    config_mod.save_resolved(cfg, out_dir)
    listing = sorted(str(p.relative_to(out_dir)) for p in outputs if p.exists())
    (out_dir / "outputs.json").write_text(json.dumps({"outputs": listing}, indent=2, sort_keys=True))


def cmd_prepare(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = _codec_specs(args)
    if args.synthetic is not None:
        train_m, val_m = synthetic.build_synthetic_dataset(
            out, n=args.synthetic, size=args.size, seed=args.seed,
            codecs=specs, val_fraction=args.val_fraction,
        )
    else:
        if not args.raw_dir:
            raise CliError("prepare needs --raw-dir or --synthetic N")
        import numpy as np

        files = codec_mod.list_raw_images(args.raw_dir)
        if not files:
            raise CodecFailure(f"no input images in {args.raw_dir}")
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(files))
        n_val = max(1, int(round(len(files) * args.val_fraction))) if len(files) > 1 else 0
        val_stems = {files[i].stem for i in order[:n_val]}
        full = codec_mod.build_dataset(args.raw_dir, specs, out / "data",
                                       chroma=cfg["codec"]["chroma"], jobs=args.jobs)
        train_entries = [e for e in full.entries if e.source_id.split("__")[0] not in val_stems]
        val_entries = [e for e in full.entries if e.source_id.split("__")[0] in val_stems]
        train_m = Manifest(tuple(train_entries), split="train")
        val_m = Manifest(tuple(val_entries), split="val")
        save_manifest(train_m, out / "train.manifest.jsonl")
        save_manifest(val_m, out / "val.manifest.jsonl")
    log.info("prepared %d train / %d val entries", len(train_m), len(val_m))
    _finish(out, cfg, [out / "train.manifest.jsonl", out / "val.manifest.jsonl"])
    return 0


CodecFailure = codec_mod.CodecError


def cmd_compress(args, cfg: dict) -> int:
    out = Path(args.out)
    manifest = codec_mod.build_dataset(
        args.raw_dir, _codec_specs(args), out, split=args.split,
        chroma=cfg["codec"]["chroma"], jobs=args.jobs,
    )
    log.info("compressed %d entries", len(manifest))
    _finish(out, cfg, [out / f"{args.split}.manifest.jsonl"])
    return 0


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = config_mod.train_config_from(cfg)
    manifest = load_manifest(args.manifest)
    start = train_mod.resume(args.resume, train_cfg) if args.resume else None
    state, stream = train_mod.train(manifest, train_cfg, out_dir=out, start_state=start)
    log.info("trained to step %d (%d new steps)", state.step, len(stream))
    _finish(out, cfg, [out / "log.jsonl", out / "checkpoints" / f"step_{state.step}.ckpt"])
    return 0


def enhance_cmd(checkpoint: str | Path, manifest_path: str | Path, out_dir: str | Path,
                cfg: dict | None = None) -> Manifest:
    """Enhance every compressed image in a manifest; returns the updated manifest.

    Deterministic for a fixed checkpoint: rerunning produces byte-identical
    PNG files.
    """
    cfg = cfg or config_mod.resolve()
    out_dir = Path(out_dir)
    train_cfg = config_mod.train_config_from(cfg)
    state = train_mod.resume(checkpoint, train_cfg)
    manifest = load_manifest(manifest_path)
    from .networks import enhance

    updated = []
    for entry in manifest.entries:
        compressed = read_image(entry.compressed_path)
        enhanced = enhance(state.generator, compressed)
        enh_path = out_dir / "enhanced" / f"{entry.source_id}.png"
        write_image(enhanced, enh_path)
        updated.append(
            type(entry)(
                source_id=entry.source_id,
                raw_path=entry.raw_path,
                compressed_path=entry.compressed_path,
                codec=entry.codec,
                bpp=entry.bpp,
                enhanced_path=str(enh_path),
            )
        )
    result = manifest.with_entries(updated)
    save_manifest(result, out_dir / "manifest.jsonl")
    return result


def cmd_enhance(args, cfg: dict) -> int:
    out = Path(args.out)
    result = enhance_cmd(args.checkpoint, args.manifest, out, cfg)
    log.info("enhanced %d images", len(result))
    outputs = [out / "manifest.jsonl"] + [Path(e.enhanced_path) for e in result.entries]
    _finish(out, cfg, outputs)
    return 0


def cmd_eval(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    metric_ids = [m.strip() for m in args.metrics.split(",") if m.strip()]
    lpips_metric = config_mod.lpips_metric_from(cfg) if "lpips" in metric_ids else None
    fid_extractor = config_mod.fid_extractor_from(cfg) if "fid" in metric_ids else None
    external = []
    for item in args.external:
        name, _, exe = item.partition("=")
        if not exe:
            raise CliError(f"--external-scorer expects NAME=EXECUTABLE, got {item!r}")
        external.append(metrics_mod.ExternalScorer(name, exe))
    rows, aggregate = metrics_mod.evaluate_manifest(
        manifest, metrics=metric_ids, lpips_metric=lpips_metric,
        fid_extractor=fid_extractor, external=external,
    )
    csv_path = metrics_mod.write_per_image_csv(rows, out / "per_image.csv")
    agg_path = out / "aggregate.json"
    agg_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True))
    log.info("evaluated %d images: %s", len(rows), aggregate)
    _finish(out, cfg, [csv_path, agg_path])
    return 0


def cmd_bias_report(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = config_mod.train_config_from(cfg)
    state = train_mod.resume(args.checkpoint, train_cfg)
    manifest = load_manifest(args.manifest)
    patch = args.patch_size or int(cfg["bias"]["patch_size"])
    metric_ids = [m.strip() for m in args.metrics.split(",") if m.strip()]

    triplets = manifest.load_triplets()
    if any(t.enhanced is None for t in triplets):
        triplets = train_mod.enhance_manifest_triplets(state.generator, triplets)

    outputs = []
    realism = bias_mod.realism_scores(state.discriminator, triplets, patch_size=patch,
                                      conditional=train_cfg.conditional)
    realism_path = out / "realism.json"
    realism_path.write_text(json.dumps(realism.to_dict(), indent=2, sort_keys=True))
    outputs.append(realism_path)

    raw_set = [t.raw for t in triplets]
    comp_set = [t.compressed for t in triplets]
    enh_set = [t.enhanced for t in triplets]
    for metric_id in metric_ids:
        if metric_id == "fid":
            report = bias_mod.triangle_report(
                raw_set, comp_set, enh_set, metric_id="fid",
                pool_extractor=config_mod.fid_extractor_from(cfg),
                patch_size=cfg["fid"]["patch"], label="fid",
            )
        elif metric_id == "lpips":
            report = bias_mod.triangle_report(
                raw_set, comp_set, enh_set, metric_id="lpips",
                lpips_metric=config_mod.lpips_metric_from(cfg), label="lpips",
            )
        else:
            raise CliError(f"unknown bias metric: {metric_id}")
        json_path = out / f"triangle_{metric_id}.json"
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        plot_path = bias_mod.triangle_plot([report], out / f"triangle_{metric_id}.png")
        outputs += [json_path, plot_path]
    log.info("bias report: realism %s", realism.to_dict())
    _finish(out, cfg, outputs)
    return 0


def cmd_rd_curves(args, cfg: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise CliError(f"curve spec not found: {spec_path}")
    spec = json.loads(spec_path.read_text())
    metric_id = spec.get("metric", "psnr")
    higher = bool(spec.get("higher_is_better", metric_id == "psnr"))

    def scorer(manifest):
        rows, aggregate = metrics_mod.evaluate_manifest(manifest, metrics=("psnr",))
        return aggregate["mean_psnr"]

    curves = []
    for entry in spec["curves"]:
        manifests = [load_manifest(p) for p in entry["manifests"]]
        curves.append(
            metrics_mod.build_rd_curve(
                manifests, metric_id, scorer, label=entry["label"],
                codec=entry.get("codec", ""), higher_is_better=higher,
            )
        )
    reference_label = args.reference or curves[0].label
    reference = next((c for c in curves if c.label == reference_label), None)
    if reference is None:
        raise CliError(f"reference curve {reference_label!r} not in spec")
    bdbr = {
        c.label: metrics_mod.bd_br(reference, c) for c in curves if c is not reference
    }
    curves_path = out / "rd_curves.json"
    curves_path.write_text(json.dumps(
        {"curves": [c.to_dict() for c in curves]}, indent=2, sort_keys=True))
    bdbr_path = out / "bdbr.json"
    bdbr_path.write_text(json.dumps(
        {"reference": reference_label, "bd_br_pct": bdbr}, indent=2, sort_keys=True))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.rates, c.qualities, marker="o", label=c.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel(metric_id)
    ax.legend()
    fig.tight_layout()
    plot_path = out / f"rd_{metric_id}.png"
    fig.savefig(plot_path, dpi=110)
    plt.close(fig)
    _finish(out, cfg, [curves_path, bdbr_path, plot_path])
    return 0


_DISPATCH = {
    "prepare": cmd_prepare,
    "compress": cmd_compress,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "bias-report": cmd_bias_report,
    "rd-curves": cmd_rd_curves,
}


def _error_record(command: str, exc: Exception) -> str:
    return json.dumps(
        {"error": type(exc).__name__, "command": command, "detail": str(exc)},
        sort_keys=True,
    )


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        print(_error_record("", ValueError(f"unknown command: {argv[0]}")), file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_mod.resolve(config_path=args.config, sets=args.sets)
        return _DISPATCH[args.command](args, cfg)
    except Exception as exc:  # surfaced as machine-readable record, exit 1
        print(_error_record(args.command, exc), file=sys.stderr)
        log.debug("failure detail", exc_info=True)
        return 1


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
