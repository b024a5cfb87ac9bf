import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dunet.cli import main
from dunet.pipeline import save_png
from dunet.scattering import load_sct


def config(tmp_path, name="run", epochs=2, kind="dunet", **ds):
    d = {"seed": 0, "output_dir": str(tmp_path / name),
         "dataset": {"layout": "synthetic", "size": 32,
                     "synthetic": {"task": "fundus", "n_train": 4, "n_test": 2, "seed": 2, "size": 48}},
         "scattering": {"J": 2, "L": 2, "order": 2},
         "model": {"kind": kind, "base_channels": 4},
         "train": {"epochs": epochs, "batch_size": 2}}
    d["dataset"].update(ds)
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(d))
    return p


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def read_csv(path: Path) -> list[dict]:
    return list(csv.DictReader(l for l in path.open() if not l.startswith("#")))


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_zero_samples(self, tmp_path, capsys):
        assert main(["synth", "--n", "0", "--out", str(tmp_path / "d")]) == 2
        err = error_line(capsys)
        assert err["exit"] == 2 and "--n" in err["message"]

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--n", "3", "--seed", "7", "--size", "32",
                         "--test-fraction", "0.34", "--out", str(tmp_path / name)]) == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert a == b and "manifest.csv" in a
        rows = list(csv.DictReader((tmp_path / "a" / "manifest.csv").open()))
        assert [r["split"] for r in rows] == ["train", "train", "test"]

    def test_ultrasound(self, tmp_path):
        assert main(["synth", "--task", "ultrasound", "--n", "2", "--size", "32",
                     "--out", str(tmp_path / "u")]) == 0
        rows = list(csv.DictReader((tmp_path / "u" / "manifest.csv").open()))
        assert all(r["a"] and r["pixelSizeMm"] and not r["maskPath"] for r in rows)


def test_scatter(tmp_path):
    img = (np.random.default_rng(0).random((16, 16)) * 255).astype(np.uint8)
    save_png(tmp_path / "x.png", img)
    out = tmp_path / "x.sct"
    assert main(["scatter", "--input", str(tmp_path / "x.png"), "--J", "2", "--L", "2",
                 "--out", str(out)]) == 0
    coeffs, paths = load_sct(out)
    assert coeffs.shape == (1, 9, 4, 4) and len(paths) == 9


def test_scatter_bad_size(tmp_path, capsys):
    save_png(tmp_path / "x.png", np.zeros((10, 10), np.uint8))
    assert main(["scatter", "--input", str(tmp_path / "x.png"), "--J", "3", "--out",
                 str(tmp_path / "x.sct")]) == 2
    assert error_line(capsys)["exit"] == 2


@pytest.mark.filterwarnings("ignore:.*Hausdorff undefined")
class TestTrainEval:
    def test_artifacts_and_repeatability(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = config(tmp_path, name)
            assert main(["train", str(cfg)]) == 0
            assert main(["eval", str(cfg)]) == 0
            outs.append(tree(tmp_path / name))
        a, b = outs
        for f in ("config.json", "model.sgw", "loss.csv", "train.log", "eval/metrics.csv",
                  "eval/summary.json", "eval/masks/fundus_0000.png", "eval/probs/fundus_0001.png"):
            assert f in a
        # config.json records the output dir, which differs by design
        assert {k: v for k, v in a.items() if k != "config.json"} == \
               {k: v for k, v in b.items() if k != "config.json"}
        assert a["loss.csv"].startswith(b"# seed=0\n")

    def test_seed_override(self, tmp_path):
        cfg = config(tmp_path, epochs=1)
        assert main(["train", str(cfg), "--seed", "3", "--out", str(tmp_path / "s3")]) == 0
        assert (tmp_path / "s3" / "loss.csv").read_text().startswith("# seed=3\n")
        assert json.loads((tmp_path / "s3" / "config.json").read_text())["seed"] == 3

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        cfg = config(tmp_path, epochs=1)
        bad = tmp_path / "bad.sgw"
        bad.write_bytes(b"SGW1\x00garbage")
        assert main(["eval", str(cfg), "--checkpoint", str(bad)]) == 2
        assert error_line(capsys)["error"] == "CheckpointError"
        assert main(["train", str(cfg), "--warm-start", str(bad)]) == 2
        assert error_line(capsys)["exit"] == 2

    def test_warm_start_other_arch(self, tmp_path, capsys):
        src = config(tmp_path, "src", epochs=1, kind="unet")
        assert main(["train", str(src)]) == 0
        cfg = config(tmp_path, "dst", epochs=1)
        assert main(["train", str(cfg), "--warm-start", str(tmp_path / "src" / "model.sgw")]) == 2
        assert "sc_enc0" in error_line(capsys)["message"]

    def test_missing_ground_truth(self, tmp_path):
        data = tmp_path / "data"
        assert main(["synth", "--n", "4", "--size", "32", "--test-fraction", "0.5",
                     "--out", str(data)]) == 0
        man = data / "manifest.csv"
        rows = list(csv.DictReader(man.open()))
        rows[-1]["maskPath"] = rows[-1]["cupMaskPath"] = ""
        with man.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        cfg = config(tmp_path, epochs=1, root=str(data), synthetic=None)
        assert main(["train", str(cfg)]) == 0
        with pytest.warns(UserWarning, match="no ground truth"):
            assert main(["eval", str(cfg)]) == 0
        metrics = read_csv(tmp_path / "run" / "eval" / "metrics.csv")
        assert len(metrics) == 2
        blank = metrics[-1]
        assert blank["dice"] == "" and blank["entropy"] != ""


class TestConfigErrors:
    def test_all_listed(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"model": {"kind": "vnet", "base_channels": 0},
                                 "train": {"lr": -1}}))
        assert main(["train", str(p)]) == 2
        msg = error_line(capsys)["message"]
        assert "kind" in msg and "base_channels" in msg and "train.lr" in msg

    def test_missing_file(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nope.json")]) == 2
        assert error_line(capsys)["exit"] == 2

    def test_no_command(self, capsys):
        assert main([]) == 2
        assert error_line(capsys)["error"] == "UsageError"


@pytest.mark.filterwarnings("ignore:.*Hausdorff undefined")
def test_compare(tmp_path, capsys):
    runs = []
    for kind in ("unet", "dunet"):
        cfg = config(tmp_path, kind, epochs=1, kind=kind)
        assert main(["train", str(cfg)]) == 0
        assert main(["eval", str(cfg)]) == 0
        runs.append(str(tmp_path / kind))
    capsys.readouterr()
    out = tmp_path / "table.csv"
    assert main(["compare", *runs, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("model,runs,dice")
    assert [l.split(",")[0] for l in lines[1:]] == ["unet", "dunet"]
    assert capsys.readouterr().out == out.read_text()
