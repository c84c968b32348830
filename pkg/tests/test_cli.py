import json

import pytest

from dsss.cli import main

SMALL = ["--set", "K=4", "--set", "crop_size=8", "--set", "rgb_channels=4,6", "--set", "depth_channels=2,4",
         "--set", "decoder_channels=6", "--quiet"]


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen", "--domain", "source", "--count", "6", "--size", "16", "--K", "4", "--seed", "1",
                 "--out", str(root), "--quiet"]) == 0
    assert main(["gen", "--domain", "shifted", "--count", "3", "--size", "16", "--K", "4", "--seed", "2",
                 "--out", str(root), "--quiet"]) == 0
    return root / "source", root / "shifted"


def test_gen_file_count_and_determinism(tmp_path, capsys):
    args = ["gen", "--count", "10", "--size", "16", "--K", "3", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert "class pixel frequencies" in capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "b"), "--quiet"]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "source").iterdir())
    assert len(files) == 31 and "manifest.jsonl" in files
    for name in files:
        assert (tmp_path / "a" / "source" / name).read_bytes() == (tmp_path / "b" / "source" / name).read_bytes()


def test_gen_rejects_k1(tmp_path, capsys):
    assert main(["gen", "--K", "1", "--out", str(tmp_path)]) == 2
    assert "K must be >= 2" in capsys.readouterr().err


def test_gen_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--count", "1", "--size", "16", "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err


def test_train_override_precedence(tmp_path, datasets):
    src, _ = datasets
    cfg = tmp_path / "g.cfg"
    cfg.write_text(f"group=G\niterations=3\nsource={src}\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--set", "group=A", "--out", str(out)] + SMALL) == 0
    text = (out / "config.txt").read_text()
    assert "group=A\n" in text
    manifest = json.loads((out / "manifest.json").read_text())
    import hashlib

    assert manifest["config_hash"] == hashlib.sha256(text.encode()).hexdigest()
    listed = set(manifest["outputs"])
    assert {str(p) for p in out.iterdir()} == listed


def test_train_is_idempotent(tmp_path, datasets):
    src, _ = datasets
    args = ["train", "--set", f"source={src}", "--set", "iterations=3"] + SMALL
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("checkpoint.bin", "trail.jsonl", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nope"
    assert main(["train", "--set", f"source={missing}", "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_error_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("K=4\nthis line is wrong\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "line 2, column 1" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, datasets):
    src, _ = datasets
    # on-disk data cannot hold NaN, so an absurd learning rate forces the overflow
    code = main(["train", "--set", f"source={src}", "--set", "iterations=20", "--set", "lr=1e300",
                 "--set", "group=G", "--out", str(tmp_path / "run")] + SMALL)
    assert code == 3
    assert (tmp_path / "run" / "divergence.npz").is_file()
    meta = json.loads((tmp_path / "run" / "divergence.json").read_text())
    assert len(meta["ids"]) == 4


def test_eval_and_export(tmp_path, datasets, capsys):
    src, tgt = datasets
    run = tmp_path / "run"
    assert main(["train", "--set", f"source={src}", "--set", "iterations=3", "--out", str(run)] + SMALL) == 0
    ckpt = run / "checkpoint.bin"
    assert main(["eval", "--set", f"checkpoint={ckpt}", "--set", f"targets={tgt}", "--out", str(tmp_path / "ev")]
                + SMALL) == 0
    rec = json.loads((tmp_path / "ev" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["domain"] == "shifted" and 0 <= rec["miou"] <= 1
    assert main(["export-maps", "--set", f"checkpoint={ckpt}", "--dataset", str(tgt), "--id", "00000",
                 "--out", str(tmp_path / "ex")] + SMALL) == 0
    assert sorted(p.name for p in (tmp_path / "ex").iterdir()) == ["n_g.pgm", "pred.ppm", "s_g.pgm"]
    assert main(["export-maps", "--set", f"checkpoint={ckpt}", "--dataset", str(tgt), "--id", "99999",
                 "--out", str(tmp_path / "ex")] + SMALL) == 2
    assert main(["eval", "--set", f"checkpoint={tmp_path / 'none.bin'}", "--out", str(tmp_path)]) == 2


def test_ablate_runs_nine_cells_one_csv(tmp_path, datasets):
    src, tgt = datasets
    args = ["ablate", "--set", f"source={src}", "--set", f"targets={tgt}", "--set", "groups=A,B,G",
            "--set", "seeds=0,1,2", "--set", "iterations=2"] + SMALL
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    cells = sorted(p.name for p in (tmp_path / "a" / "cells").iterdir())
    assert len(cells) == 9
    assert len(list((tmp_path / "a").glob("*.csv"))) == 1
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    for name in cells:
        assert (tmp_path / "a" / "cells" / name).read_bytes() == (tmp_path / "b" / "cells" / name).read_bytes()


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for group in ("rgb_encoder", "depth_encoder", "decoder", "csss_conv"):
        assert group in out
    assert main(["gradcheck", "--inject-fault", "--quiet", "--out", str(tmp_path)]) == 4
    assert "decoder" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
