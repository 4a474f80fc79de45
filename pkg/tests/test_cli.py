import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from cqe.cli import enhance_cmd, main
from cqe.types import load_manifest, read_image, save_manifest

TINY_SETS = [
    "--set", "train.steps=4",
    "--set", "train.batch_size=2",
    "--set", "train.patch_size=32",
    "--set", "model.generator.channels=8",
    "--set", "model.generator.num_blocks=1",
    "--set", "model.discriminator.base_channels=8",
    "--set", "percept.backbone.kind=tiny",
    "--set", "percept.backbone.channels=8",
    "--set", "percept.backbone.gain=32.0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """prepare -> train -> enhance pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    prep = root / "prep"
    rc = main([
        "prepare", "--synthetic", "6", "--size", "64", "--codec", "jpeg",
        "--qf", "10", "--seed", "3", "--out", str(prep),
    ])
    assert rc == 0
    train_dir = root / "run"
    rc = main([
        "train", "--manifest", str(prep / "train.manifest.jsonl"),
        "--out", str(train_dir), *TINY_SETS,
    ])
    assert rc == 0
    ckpt = train_dir / "checkpoints" / "step_4.ckpt"
    assert ckpt.exists()
    enh_dir = root / "enh"
    rc = main([
        "enhance", "--checkpoint", str(ckpt),
        "--manifest", str(prep / "val.manifest.jsonl"),
        "--out", str(enh_dir), *TINY_SETS,
    ])
    assert rc == 0
    return {"root": root, "prep": prep, "train": train_dir, "enh": enh_dir, "ckpt": ckpt}


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "prepare" in capsys.readouterr().out


def test_unknown_command_exits_two(capsys):
    rc = main(["frobnicate"])
    assert rc == 2
    record = json.loads(capsys.readouterr().err.strip())
    assert "unknown command" in record["detail"]


def test_usage_error_exits_two():
    assert main(["train"]) == 2  # missing required flags


def test_prepare_outputs_self_describing(workspace):
    prep = workspace["prep"]
    assert (prep / "config.resolved").exists()
    assert (prep / "outputs.json").exists()
    train_m = load_manifest(prep / "train.manifest.jsonl")
    val_m = load_manifest(prep / "val.manifest.jsonl")
    assert len(train_m) + len(val_m) == 6
    assert train_m.split == "train" and val_m.split == "val"


def test_compress_command(tmp_path):
    from cqe.synthetic import write_raw_corpus

    raw_dir = tmp_path / "raw"
    write_raw_corpus(raw_dir, 2, size=48, seed=0)
    out = tmp_path / "out"
    rc = main([
        "compress", "--raw-dir", str(raw_dir), "--codec", "jpeg",
        "--qf", "10,30", "--out", str(out),
    ])
    assert rc == 0
    manifest = load_manifest(out / "train.manifest.jsonl")
    assert len(manifest) == 4
    assert (out / "bitstreams").is_dir()


def test_runtime_failure_exits_one(tmp_path, capsys):
    rc = main(["train", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")])
    assert rc == 1
    record = json.loads(capsys.readouterr().err.strip())
    assert record["command"] == "train"
    assert "manifest not found" in record["detail"]


def test_enhance_identity_checkpoint_matches_compressed(workspace, tmp_path):
    """A checkpoint with zero training steps is the identity map: enhanced
    pixel content equals the compressed input."""
    prep = workspace["prep"]
    run0 = tmp_path / "run0"
    rc = main([
        "train", "--manifest", str(prep / "train.manifest.jsonl"),
        "--out", str(run0), *TINY_SETS, "--set", "train.steps=0",
    ])
    assert rc == 0
    out = tmp_path / "enh0"
    result = enhance_cmd(run0 / "checkpoints" / "step_0.ckpt", prep / "val.manifest.jsonl", out)
    for entry in result.entries:
        enh = read_image(entry.enhanced_path)
        comp = read_image(entry.compressed_path)
        assert np.array_equal(enh.to_uint8(), comp.to_uint8())


def test_enhance_rerun_byte_identical(workspace, tmp_path):
    prep, ckpt = workspace["prep"], workspace["ckpt"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cfg = None
    from cqe import config as config_mod

    cfg = config_mod.resolve(sets=[s for s in TINY_SETS if s != "--set"])
    res_a = enhance_cmd(ckpt, prep / "val.manifest.jsonl", out_a, cfg)
    res_b = enhance_cmd(ckpt, prep / "val.manifest.jsonl", out_b, cfg)
    for e_a, e_b in zip(res_a.entries, res_b.entries):
        assert Path(e_a.enhanced_path).read_bytes() == Path(e_b.enhanced_path).read_bytes()


def test_eval_command(workspace):
    enh = workspace["enh"]
    out = workspace["root"] / "eval"
    rc = main([
        "eval", "--manifest", str(enh / "manifest.jsonl"),
        "--metrics", "psnr", "--out", str(out),
    ])
    assert rc == 0
    aggregate = json.loads((out / "aggregate.json").read_text())
    assert "mean_psnr" in aggregate
    assert (out / "per_image.csv").exists()
    assert (out / "config.resolved").exists()


def test_eval_missing_enhanced_names_source(workspace, capsys):
    prep = workspace["prep"]
    out = workspace["root"] / "eval_fail"
    rc = main(["eval", "--manifest", str(prep / "val.manifest.jsonl"), "--out", str(out)])
    assert rc == 1
    record = json.loads(capsys.readouterr().err.strip())
    assert "missing enhanced image" in record["detail"]
    assert "synth_" in record["detail"]


def test_eval_with_external_scorer(workspace, tmp_path):
    import stat

    exe = tmp_path / "scorer.py"
    exe.write_text(
        "#!/usr/bin/env python3\nimport sys\n"
        "for line in sys.stdin:\n    print(0.5)\n"
    )
    exe.chmod(exe.stat().st_mode | stat.S_IEXEC)
    out = tmp_path / "eval_ext"
    rc = main([
        "eval", "--manifest", str(workspace["enh"] / "manifest.jsonl"),
        "--metrics", "psnr", "--external-scorer", f"stub={exe}", "--out", str(out),
    ])
    assert rc == 0
    aggregate = json.loads((out / "aggregate.json").read_text())
    assert aggregate["mean_stub"] == pytest.approx(0.5)


def test_eval_lpips_fid_with_tiny_backbones(workspace):
    out = workspace["root"] / "eval_full"
    rc = main([
        "eval", "--manifest", str(workspace["enh"] / "manifest.jsonl"),
        "--metrics", "psnr,lpips,fid", "--out", str(out),
        "--set", "lpips.backbone=tiny", "--set", "fid.backbone=tiny",
    ])
    assert rc == 0
    aggregate = json.loads((out / "aggregate.json").read_text())
    assert "mean_lpips" in aggregate and "fid" in aggregate


def test_bias_report_command(workspace):
    out = workspace["root"] / "bias"
    rc = main([
        "bias-report", "--manifest", str(workspace["enh"] / "manifest.jsonl"),
        "--checkpoint", str(workspace["ckpt"]),
        "--metrics", "fid,lpips", "--patch-size", "32",
        "--out", str(out), *TINY_SETS,
        "--set", "fid.backbone=tiny", "--set", "lpips.backbone=tiny",
        "--set", "fid.patch=16",
    ])
    assert rc == 0
    realism = json.loads((out / "realism.json").read_text())
    assert set(realism) >= {"mean_score_raw", "mean_score_enhanced", "mean_score_compressed"}
    for metric in ("fid", "lpips"):
        assert (out / f"triangle_{metric}.json").exists()
        assert (out / f"triangle_{metric}.png").exists()


def test_rd_curves_command(workspace, tmp_path):
    prep_dirs = []
    for i, qf in enumerate((10, 20, 30, 40)):
        d = tmp_path / f"q{qf}"
        rc = main([
            "prepare", "--synthetic", "2", "--size", "48", "--codec", "jpeg",
            "--qf", str(qf), "--seed", "5", "--out", str(d),
            "--val-fraction", "0",
        ])
        assert rc == 0
        manifest = load_manifest(d / "train.manifest.jsonl")
        entries = [
            type(e)(
                source_id=e.source_id, raw_path=e.raw_path,
                compressed_path=e.compressed_path, codec=e.codec, bpp=e.bpp,
                enhanced_path=e.compressed_path,
            )
            for e in manifest.entries
        ]
        save_manifest(manifest.with_entries(entries), d / "enhanced.jsonl")
        prep_dirs.append(d)
    spec = {
        "metric": "psnr",
        "higher_is_better": True,
        "curves": [
            {"label": "identity", "manifests": [str(d / "enhanced.jsonl") for d in prep_dirs]},
            {"label": "identity2", "manifests": [str(d / "enhanced.jsonl") for d in prep_dirs]},
        ],
    }
    spec_path = tmp_path / "curves.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / "rd"
    rc = main(["rd-curves", "--spec", str(spec_path), "--out", str(out)])
    assert rc == 0
    curves = json.loads((out / "rd_curves.json").read_text())
    assert len(curves["curves"]) == 2
    assert len(curves["curves"][0]["points"]) == 4
    bdbr = json.loads((out / "bdbr.json").read_text())
    assert bdbr["bd_br_pct"]["identity2"] == pytest.approx(0.0, abs=1e-9)
    assert (out / "rd_psnr.png").exists()


def test_config_resolved_echoed_everywhere(workspace):
    for key in ("prep", "train", "enh"):
        out_dir = workspace[key]
        assert (out_dir / "config.resolved").exists(), key
        resolved = yaml.safe_load((out_dir / "config.resolved").read_text())
        assert isinstance(resolved, dict) and "loss" in resolved


def test_train_resume_via_cli(workspace, tmp_path):
    prep = workspace["prep"]
    out = tmp_path / "resumed"
    rc = main([
        "train", "--manifest", str(prep / "train.manifest.jsonl"),
        "--out", str(out), "--resume", str(workspace["ckpt"]),
        *TINY_SETS, "--set", "train.steps=6",
    ])
    assert rc == 0
    assert (out / "checkpoints" / "step_6.ckpt").exists()
