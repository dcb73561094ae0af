"""End-to-end command-line behavior: artifacts, determinism, exit codes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from flowparse import tensorio
from flowparse.cli import main
from flowparse.parsing import save_frame_predictions
from flowparse.synthdata import Dataset


def digest_tree(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(workdir):
    out = workdir / "data"
    code = main(["generate", "--seed", "0", "--frames", "6", "--size", "48",
                 "--instances", "1", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint_dir(workdir, dataset_dir):
    out = workdir / "run"
    code = main(["train", "--data", str(dataset_dir), "--steps", "4",
                 "--lr", "1e-3", "--seed", "0", "--channels", "8", "--depth", "1",
                 "--out", str(out)])
    assert code == 0
    return out / "checkpoint"


class TestGenerate:
    def test_produces_valid_dataset(self, dataset_dir):
        ds = Dataset(dataset_dir)
        assert ds.num_frames == 6
        assert (dataset_dir / "config.json").exists()

    def test_repeat_identical_bytes(self, workdir):
        args = ["generate", "--seed", "3", "--frames", "4", "--size", "32",
                "--instances", "1"]
        assert main(args + ["--out", str(workdir / "g1")]) == 0
        assert main(args + ["--out", str(workdir / "g2")]) == 0
        assert digest_tree(workdir / "g1") == digest_tree(workdir / "g2")

    def test_bad_size_exits_2_and_names_rule(self, workdir, capsys):
        code = main(["generate", "--size", "63", "--out", str(workdir / "bad")])
        assert code == 2
        assert "multiples of 4" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_written(self, checkpoint_dir):
        run_dir = checkpoint_dir.parent
        assert (checkpoint_dir / "manifest.json").exists()
        assert (checkpoint_dir / "model_config.json").exists()
        assert (run_dir / "loss_curve.csv").exists()
        lines = (run_dir / "loss_curve.csv").read_text().strip().splitlines()
        assert lines[0] == "step,parsing,cls,box,mask,total"
        assert len(lines) == 5

    def test_config_echoed(self, checkpoint_dir):
        cfg = json.loads((checkpoint_dir.parent / "config.json").read_text())
        assert cfg["command"] == "train"
        assert cfg["steps"] == 4

    def test_missing_data_exits_2(self, workdir):
        assert main(["train", "--data", str(workdir / "nope"), "--steps", "1",
                     "--out", str(workdir / "t2")]) == 2


class TestInfer:
    def test_writes_predictions_and_report(self, workdir, dataset_dir, checkpoint_dir):
        out = workdir / "infer1"
        code = main(["infer", "--data", str(dataset_dir),
                     "--checkpoint", str(checkpoint_dir),
                     "--segment-length", "3", "--encoding-range", "1",
                     "--out", str(out)])
        assert code == 0
        for t in range(6):
            assert (out / "predictions" / f"{t:05d}" / "instances.json").exists()
            assert (out / "predictions" / f"{t:05d}" / "global_parts.pgm").exists()
            assert (out / "viz" / f"{t:05d}.png").exists()
        report = json.loads((out / "cost_report.json").read_text())
        assert set(report) >= {"counts", "r_exact", "r_approx", "wall_ms"}
        assert report["wall_ms"] == {}  # timing is opt-in

    def test_byte_identical_across_runs(self, workdir, dataset_dir, checkpoint_dir):
        args = ["infer", "--data", str(dataset_dir),
                "--checkpoint", str(checkpoint_dir),
                "--segment-length", "3", "--encoding-range", "1"]
        assert main(args + ["--out", str(workdir / "i1")]) == 0
        assert main(args + ["--out", str(workdir / "i2")]) == 0
        assert digest_tree(workdir / "i1") == digest_tree(workdir / "i2")

    def test_degenerate_config_accepted(self, workdir, dataset_dir, checkpoint_dir):
        out = workdir / "deg"
        code = main(["infer", "--data", str(dataset_dir),
                     "--checkpoint", str(checkpoint_dir),
                     "--segment-length", "1", "--encoding-range", "0",
                     "--viz", "0", "--out", str(out)])
        assert code == 0

    def test_zero_flow_copies_key_parts(self, workdir, dataset_dir, checkpoint_dir):
        out = workdir / "zeroflow"
        code = main(["infer", "--data", str(dataset_dir),
                     "--checkpoint", str(checkpoint_dir),
                     "--segment-length", "3", "--encoding-range", "1",
                     "--flow-source", "zero", "--proposal-source", "rpn",
                     "--viz", "0", "--out", str(out)])
        assert code == 0
        # frames 0..2 share the key frame 1; their label maps must be equal
        ref = tensorio.read_pgm(out / "predictions" / "00001" / "global_parts.pgm")
        for t in (0, 2):
            got = tensorio.read_pgm(out / "predictions" / f"{t:05d}" / "global_parts.pgm")
            np.testing.assert_array_equal(got, ref)

    def test_streaming_matches_default(self, workdir, dataset_dir, checkpoint_dir):
        base = ["infer", "--data", str(dataset_dir),
                "--checkpoint", str(checkpoint_dir),
                "--segment-length", "3", "--encoding-range", "2", "--viz", "0"]
        assert main(base + ["--out", str(workdir / "s0")]) == 0
        assert main(base + ["--streaming", "1", "--out", str(workdir / "s1")]) == 0
        a = digest_tree(workdir / "s0" / "predictions")
        b = digest_tree(workdir / "s1" / "predictions")
        assert a == b

    def test_missing_checkpoint_exits_2(self, workdir, dataset_dir):
        assert main(["infer", "--data", str(dataset_dir),
                     "--checkpoint", str(workdir / "missing"),
                     "--out", str(workdir / "i3")]) == 2

    def test_corrupt_dataset_exits_3(self, workdir, checkpoint_dir):
        bad = workdir / "baddata"
        bad.mkdir(exist_ok=True)
        (bad / "manifest.json").write_text("{\"format\": \"wrong\"}")
        assert main(["infer", "--data", str(bad),
                     "--checkpoint", str(checkpoint_dir),
                     "--out", str(workdir / "i4")]) == 3


class TestEval:
    def test_gt_as_predictions_scores_one(self, workdir, dataset_dir):
        ds = Dataset(dataset_dir)
        pred_root = workdir / "gt_as_pred"
        for t in range(ds.num_frames):
            fused = [
                {"box": g["box"], "score": 1.0, "mask": g["mask"], "parts": g["parts"]}
                for g in ds.gt_instances(t)
            ]
            save_frame_predictions(pred_root / "predictions" / f"{t:05d}", fused,
                                   ds.part_labels(t))
        report_path = workdir / "report.json"
        code = main(["eval", "--pred", str(pred_root), "--gt", str(dataset_dir),
                     "--report", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["mean_iou"] == 1.0
        assert report["ap_r"] == 1.0
        assert report["ap_r_vol"] == 1.0

    def test_missing_pred_exits_2(self, workdir, dataset_dir):
        assert main(["eval", "--pred", str(workdir / "nope"),
                     "--gt", str(dataset_dir),
                     "--report", str(workdir / "r.json")]) == 2


class TestBench:
    def test_sweep_writes_csv(self, workdir, dataset_dir, checkpoint_dir):
        report = workdir / "bench.csv"
        code = main(["bench", "--data", str(dataset_dir),
                     "--checkpoint", str(checkpoint_dir),
                     "--sweep-l", "1,3", "--encoding-range", "1",
                     "--report", str(report)])
        assert code == 0
        lines = report.read_text().strip().splitlines()
        assert lines[0] == "l,mean_iou,r_exact,wall_ms"
        assert len(lines) == 3
        r1 = float(lines[1].split(",")[2])
        r3 = float(lines[2].split(",")[2])
        assert r3 < r1  # larger l -> smaller predicted ratio


class TestConfigFile:
    def test_flags_override_file(self, workdir):
        cfg_path = workdir / "gen.json"
        cfg_path.write_text(json.dumps({"seed": 7, "frames": 4, "size": 32,
                                        "instances": 1}))
        out = workdir / "cfgd"
        code = main(["generate", "--config", str(cfg_path), "--seed", "9",
                     "--out", str(out)])
        assert code == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["seed"] == 9       # flag wins
        assert echoed["frames"] == 4     # file fills the rest

    def test_unknown_key_rejected(self, workdir):
        cfg_path = workdir / "bad.json"
        cfg_path.write_text(json.dumps({"bogus": 1}))
        assert main(["generate", "--config", str(cfg_path),
                     "--out", str(workdir / "x")]) == 2


def test_worker_cap_env(workdir, monkeypatch):
    monkeypatch.setenv("ATEN_THREADS", "0")
    assert main(["generate", "--seed", "1", "--frames", "2", "--size", "32",
                 "--instances", "1", "--out", str(workdir / "envbad")]) == 2
    monkeypatch.setenv("ATEN_THREADS", "2")
    out = workdir / "envok"
    assert main(["generate", "--seed", "1", "--frames", "2", "--size", "32",
                 "--instances", "1", "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["workers"] == 2
