import csv
import json
import shutil

import jsonschema
import numpy as np
import pytest
from PIL import Image

from mres.cli import main
from mres.dataset import Vocabulary
from mres.evaluate import REPORT_SCHEMA
from mres.model import ModelConfig, build_model, save_checkpoint

STUB_BACKENDS = {r: {"kind": "stub"} for r in ("captioner", "promptable_segmenter", "part_segmenter",
                                               "decomposer", "scorer")}


@pytest.fixture()
def object_only_root(fixture_root, tmp_path):
    root = tmp_path / "objonly"
    shutil.copytree(fixture_root / "images", root / "images")
    lines = [ln for ln in (fixture_root / "val.jsonl").read_text().splitlines()
             if json.loads(ln)["granularity"] == "object"]
    (root / "val.jsonl").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture(scope="module")
def group_checkpoint(tmp_path_factory):
    # small dims, default bank sizes
    cfg = ModelConfig.tiny(n_low_group=64, n_high_group=8)
    path = tmp_path_factory.mktemp("ckpt") / "model.pt"
    save_checkpoint(path, build_model(cfg, seed=0), vocab=Vocabulary.build(["x"]).to_json())
    return path


class TestEval:
    def test_oracle(self, fixture_root, tmp_path, capsys):
        assert main(["eval", "--dataset", str(fixture_root), "--checkpoint", "oracle", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        assert {k: v["miou"] for k, v in report["settings"].items()} == {
            "object_only": 1.0, "part_only": 1.0, "object_and_part": 1.0}
        assert report["settings"]["object_only"]["oiou"] == 1.0
        assert [v["count"] for v in report["settings"].values()] == [12, 8, 20]
        assert capsys.readouterr().out == (tmp_path / "report.txt").read_text()

    def test_table_matches_json(self, fixture_root, tmp_path, group_checkpoint):
        ckpt = tmp_path / "m.pt"
        vocab = Vocabulary.build(json.loads(ln)["expression"]
                                 for ln in (fixture_root / "val.jsonl").read_text().splitlines())
        save_checkpoint(ckpt, build_model(ModelConfig.tiny(vocab_size=len(vocab))), vocab=vocab.to_json())
        assert main(["eval", "--dataset", str(fixture_root), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        rows = (tmp_path / "report.txt").read_text().splitlines()[2:]
        for row, (name, m) in zip(rows, report["settings"].items()):
            cells = row.split()
            assert cells[0] == name and int(cells[1]) == m["count"]
            assert cells[2] == f"{m['miou']:.4f}"
            assert 0.0 <= m["miou"] <= 1.0

    def test_empty_setting_is_runtime_error(self, object_only_root, tmp_path):
        args = ["eval", "--dataset", str(object_only_root), "--checkpoint", "oracle", "--out", str(tmp_path)]
        assert main(args + ["--setting", "part_only"]) == 1
        assert main(args) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["settings"]["part_only"] == {"count": 0, "miou": None}

    @pytest.mark.parametrize("extra", [["--threshold", "1.5"], ["--split", "nope"], ["--checkpoint", "missing.pt"]])
    def test_usage_errors(self, fixture_root, tmp_path, extra):
        args = ["eval", "--dataset", str(fixture_root), "--checkpoint", "oracle", "--out", str(tmp_path)]
        assert main(args + extra) == 2

    def test_missing_root(self, tmp_path, monkeypatch):
        monkeypatch.delenv("MRES_DATA_ROOT", raising=False)
        assert main(["eval", "--checkpoint", "oracle", "--out", str(tmp_path)]) == 2

    def test_schema_error_exit(self, tmp_path):
        (tmp_path / "val.jsonl").write_text("{}\n")
        assert main(["eval", "--dataset", str(tmp_path), "--checkpoint", "oracle", "--out", str(tmp_path)]) == 1

    def test_argparse_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval"])
        assert exc.value.code == 2


class TestTrain:
    def config(self, tmp_path, **extra):
        lines = ["profile = tiny", "vocab_size = 64", "epochs = 2", "warmup_epochs = 1", "batch_size = 8",
                 "learning_rate = 1e-3"] + [f"{k} = {v}" for k, v in extra.items()]
        (tmp_path / "train.cfg").write_text("\n".join(lines) + "\n")
        return tmp_path / "train.cfg"

    def test_train_and_resume(self, fixture_root, tmp_path):
        cfg = self.config(tmp_path)
        out = tmp_path / "run"
        base = ["train", "--config", str(cfg), "--dataset", str(fixture_root), "--split", "val", "--out", str(out)]
        assert main(base) == 0
        log = [json.loads(ln) for ln in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == [0, 1, 2, 3, 4, 5]
        assert (out / "final.pt").read_bytes() == (out / "epoch_002.pt").read_bytes()

        resumed = tmp_path / "resumed"
        args = ["train", "--config", str(cfg), "--dataset", str(fixture_root), "--split", "val",
                "--out", str(resumed), "--resume", str(out / "epoch_001.pt")]
        assert main(args) == 0
        log2 = [json.loads(ln) for ln in (resumed / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log2] == [3, 4, 5]
        assert [r["loss"] for r in log2] == pytest.approx([r["loss"] for r in log[3:]], rel=1e-5)

        assert main(["eval", "--dataset", str(fixture_root), "--checkpoint", str(out / "final.pt"),
                     "--out", str(tmp_path / "ev")]) == 0

    def test_bad_config(self, fixture_root, tmp_path):
        base = ["train", "--dataset", str(fixture_root), "--split", "val", "--out", str(tmp_path / "r")]
        assert main(base + ["--config", str(tmp_path / "absent.cfg")]) == 2
        assert main(base + ["--config", str(self.config(tmp_path, colour="blue"))]) == 2
        assert main(base + ["--config", str(self.config(tmp_path, vocab_size=8))]) == 2

    def test_non_finite(self, fixture_root, tmp_path):
        cfg = self.config(tmp_path, learning_rate="1e30")
        args = ["train", "--config", str(cfg), "--dataset", str(fixture_root), "--split", "val",
                "--out", str(tmp_path / "r")]
        assert main(args) == 1


class TestEngine:
    def test_run(self, fixture_root, tmp_path):
        (tmp_path / "b.json").write_text(json.dumps(STUB_BACKENDS))
        args = ["engine", "--images", str(fixture_root / "engine_images.jsonl"), "--backends",
                str(tmp_path / "b.json"), "--out", str(tmp_path / "o")]
        assert main(args) == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["generated"] == {"object": 20, "part": 40}
        n = len((tmp_path / "o" / "records.jsonl").read_text().splitlines())
        assert n == report["total_kept"] and report["total_kept"] + report["total_dropped"] == 60

    def test_missing_role(self, fixture_root, tmp_path, capsys):
        cfg = dict(STUB_BACKENDS)
        del cfg["decomposer"]
        (tmp_path / "b.json").write_text(json.dumps(cfg))
        args = ["engine", "--images", str(fixture_root / "engine_images.jsonl"), "--backends",
                str(tmp_path / "b.json"), "--out", str(tmp_path / "o")]
        assert main(args) == 2
        assert "decomposer" in capsys.readouterr().err


class TestStats:
    def test_outputs(self, fixture_root, tmp_path):
        assert main(["stats", "--dataset", str(fixture_root), "--out", str(tmp_path)]) == 0
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert stats["avg_expression_length"] == 5.0
        with (tmp_path / "categories.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        parts = {r["category"]: int(r["count"]) for r in rows if r["granularity"] == "part"}
        assert parts == stats["expressions_per_category"]
        # every reference has an object category; part references also have a part category
        assert sum(int(r["count"]) for r in rows if r["granularity"] == "object") == 20
        assert sum(parts.values()) == 8


class TestGroups:
    def image(self, tmp_path):
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)).save(tmp_path / "in.png")
        return tmp_path / "in.png"

    @pytest.mark.parametrize("level,n", [("low", 64), ("high", 8)])
    def test_export(self, tmp_path, group_checkpoint, level, n):
        img = self.image(tmp_path)
        outs = []
        for name in ("a", "b"):
            args = ["groups", "--checkpoint", str(group_checkpoint), "--image", str(img), "--level", level,
                    "--out", str(tmp_path / name)]
            assert main(args) == 0
            outs.append(tmp_path / name)
        grid = np.loadtxt(outs[0] / f"groups_{level}.csv", delimiter=",", dtype=int)
        assert grid.shape == (4, 4) and grid.min() >= 0 and grid.max() < n
        for f in (f"groups_{level}.csv", f"groups_{level}.png"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        assert Image.open(outs[0] / f"groups_{level}.png").size == (32, 32)

    def test_disabled_level(self, tmp_path):
        ckpt = tmp_path / "m.pt"
        save_checkpoint(ckpt, build_model(ModelConfig.tiny(use_high_group=False)), vocab=Vocabulary.build([]).to_json())
        args = ["groups", "--checkpoint", str(ckpt), "--image", str(self.image(tmp_path)), "--level", "high",
                "--out", str(tmp_path / "o")]
        assert main(args) == 2
