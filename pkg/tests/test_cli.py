import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from _helpers import TABLE2_PRINTED, table2_scores_csv, write_dataset
from mobile_iris.cli import build_parser, run
from mobile_iris.io_utils import read_image, read_mask, write_image, write_mask
from mobile_iris.mobile_unet import build_model, read_container, read_sidecar, reduced_config, save_weights

VERBS = {
    "train": ["--manifest", "--task", "--out", "--lr", "--steps", "--seed", "--pretrained"],
    "infer-seg": ["--model", "--image", "--out", "--threshold"],
    "localize": ["--seg-model", "--loc-model", "--image", "--out-inner", "--out-outer", "--threshold"],
    "eval": ["--pred-dir", "--gt-dir", "--inner-dir", "--outer-dir", "--report"],
    "sweep-threshold": ["--model", "--manifest", "--out"],
    "match": ["--manifest", "--report", "--seed"],
    "rank": ["--scores", "--out"],
    "overlay": ["--image", "--mask", "--inner", "--outer", "--out"],
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    path = write_dataset(root, {f"s{i}": {"L": 5} for i in range(3)}, size=40, texture=0.4)
    return root, path


def _zero_model(path, task="segmentation"):
    model = build_model(reduced_config(task, 32), seed=0)
    for p in model.parameters():
        p.data[...] = 0
    save_weights(model, path)
    return path


@pytest.fixture
def models(tmp_path):
    return _zero_model(tmp_path / "seg.irkw"), _zero_model(tmp_path / "loc.irkw", "localization")


class TestParser:
    @pytest.mark.parametrize("verb", sorted(VERBS))
    def test_help_lists_flags(self, verb, capsys):
        assert run([verb, "--help"]) == 0
        out = capsys.readouterr().out
        for flag in VERBS[verb]:
            assert flag in out

    def test_defaults(self):
        args = build_parser().parse_args(["train", "--manifest", "m", "--task", "seg", "--out", "w"])
        assert args.lr == 1e-4 and args.seed == 0

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["bogus"],
            ["train", "--manifest", "m.json"],
            ["infer-seg", "--model", "nope.irkw", "--image", "nope.png", "--out", "x.png"],
            ["rank", "--scores", "nope.csv", "--out", "r.csv"],
        ],
    )
    def test_usage_errors_exit_2(self, argv, capsys):
        assert run(argv) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: ")

    def test_bad_threshold(self, models, tmp_path, capsys):
        write_image(tmp_path / "i.png", np.zeros((8, 8, 3), np.uint8))
        argv = ["infer-seg", "--model", str(models[0]), "--image", str(tmp_path / "i.png"), "--out", str(tmp_path / "o.png")]
        assert run(argv + ["--threshold", "1.5"]) == 2
        assert not (tmp_path / "o.png").exists()

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text("{broken")
        assert run(["match", "--manifest", str(tmp_path / "m.json"), "--report", str(tmp_path / "r.json")]) == 1
        assert capsys.readouterr().err.startswith("error: ")
        assert not (tmp_path / "r.json").exists()

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "mobile_iris.cli", "rank", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "--scores" in proc.stdout


class TestInference:
    def test_zero_model_full_mask(self, models, tmp_path):
        write_image(tmp_path / "i.png", np.full((30, 40, 3), 90, np.uint8))
        out = tmp_path / "o.png"
        assert run(["infer-seg", "--model", str(models[0]), "--image", str(tmp_path / "i.png"), "--out", str(out), "--threshold", "0.4"]) == 0
        mask = read_mask(out)
        assert mask.shape == (30, 40) and mask.all()

    def test_localize(self, models, tmp_path):
        write_image(tmp_path / "i.png", np.full((30, 40, 3), 90, np.uint8))
        argv = ["localize", "--seg-model", str(models[0]), "--loc-model", str(models[1]), "--image", str(tmp_path / "i.png")]
        argv += ["--out-inner", str(tmp_path / "in.png"), "--out-outer", str(tmp_path / "out.png"), "--threshold", "0.4"]
        assert run(argv) == 0
        inner, outer = read_mask(tmp_path / "in.png"), read_mask(tmp_path / "out.png")
        assert inner.shape == (30, 40) and not (inner & ~outer).any()

    def test_overlay(self, data, tmp_path):
        root, _ = data
        argv = ["overlay", "--image", str(root / "img" / "s0_L_0.png"), "--mask", str(root / "mask" / "s0_L_0_seg.png")]
        argv += ["--inner", str(root / "mask" / "s0_L_0_in.png"), "--outer", str(root / "mask" / "s0_L_0_out.png")]
        assert run(argv + ["--out", str(tmp_path / "ov.png")]) == 0
        assert read_image(tmp_path / "ov.png").shape == (40, 40, 3)

    def test_overlay_needs_both_boundaries(self, data, tmp_path):
        root, _ = data
        argv = ["overlay", "--image", str(root / "img" / "s0_L_0.png"), "--mask", str(root / "mask" / "s0_L_0_seg.png")]
        assert run(argv + ["--inner", str(root / "mask" / "s0_L_0_in.png"), "--out", str(tmp_path / "ov.png")]) == 2


class TestEval:
    def test_self_comparison(self, data, tmp_path):
        mask_dir = data[0] / "mask"
        report = tmp_path / "r.json"
        assert run(["eval", "--pred-dir", str(mask_dir), "--gt-dir", str(mask_dir), "--report", str(report)]) == 0
        body = json.loads(report.read_text())
        assert body["aggregates"]["E1"] == 0.0
        assert body["inputs"]["gt_dir"] == str(mask_dir)

    def test_localization_metrics(self, tmp_path):
        dirs = {name: tmp_path / name for name in ("seg", "in", "out")}
        rng = np.random.default_rng(0)
        for d in dirs.values():
            d.mkdir()
            for k in range(3):
                write_mask(d / f"{k}.png", rng.random((12, 12)) < 0.5)
        argv = ["eval", "--pred-dir", str(dirs["seg"]), "--gt-dir", str(dirs["seg"])]
        argv += ["--inner-dir", str(dirs["in"]), str(dirs["in"]), "--outer-dir", str(dirs["out"]), str(dirs["out"])]
        assert run(argv + ["--report", str(tmp_path / "r.json")]) == 0
        summary = json.loads((tmp_path / "r.json").read_text())["aggregates"]
        assert summary["mDice"] == 1.0 and summary["mHdis"] == 0.0

    def test_missing_prediction(self, tmp_path, capsys):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        write_mask(tmp_path / "g" / "a.png", np.ones((4, 4), bool))
        assert run(["eval", "--pred-dir", str(tmp_path / "p"), "--gt-dir", str(tmp_path / "g"), "--report", str(tmp_path / "r.json")]) == 2
        assert "a.png" in capsys.readouterr().err
        assert not (tmp_path / "r.json").exists()


class TestRank:
    def test_table_rows(self, tmp_path):
        scores = tmp_path / "s.csv"
        scores.write_text(table2_scores_csv())
        assert run(["rank", "--scores", str(scores), "--out", str(tmp_path / "r.csv")]) == 0
        rows = {r["method"]: r for r in csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text()))}
        got = rows["Lao Yang Sprint Team"]
        assert (got["segmentation_rank_sum"], got["localization_rank_sum"], got["rank_sum"]) == ("14", "42", "56")

    def test_published_mismatch_warned(self, tmp_path, capsys):
        (tmp_path / "s.csv").write_text(table2_scores_csv())
        (tmp_path / "p.json").write_text(json.dumps(TABLE2_PRINTED))
        argv = ["rank", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "r.csv"), "--published", str(tmp_path / "p.json")]
        assert run(argv) == 0
        warnings = [line for line in capsys.readouterr().err.splitlines() if line.startswith("warning:")]
        assert len(warnings) == 1 and "EyeCool" in warnings[0] and "126" in warnings[0] and "112" in warnings[0]

    def test_bad_header(self, tmp_path):
        (tmp_path / "s.csv").write_text("a,b\n1,2\n")
        assert run(["rank", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "r.csv")]) == 1


class TestMatchAndSweep:
    def test_match(self, data, tmp_path, capsys):
        report = tmp_path / "m.json"
        assert run(["match", "--manifest", str(data[1]), "--report", str(report), "--seed", "3"]) == 0
        body = json.loads(report.read_text())
        assert body["fold_accuracy"] == [1.0] * 5
        assert "1.0000" in capsys.readouterr().out

    def test_match_is_reproducible(self, data, tmp_path):
        for name in ("a.json", "b.json"):
            run(["match", "--manifest", str(data[1]), "--report", str(tmp_path / name), "--seed", "3"])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_sweep(self, data, models, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        assert run(["sweep-threshold", "--model", str(models[0]), "--manifest", str(data[1]), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "threshold,mean_e1" and len(lines) == 20
        assert "best threshold 0.55" in capsys.readouterr().out


class TestTrain:
    def _train(self, manifest, out, task="seg", seed=0):
        argv = ["train", "--manifest", str(manifest), "--task", task, "--out", str(out), "--arch", "reduced"]
        return run(argv + ["--input-size", "32", "--steps", "3", "--lr", "1e-3", "--batch-size", "2", "--seed", str(seed)])

    def test_seed_gives_identical_container(self, data, tmp_path):
        assert self._train(data[1], tmp_path / "a.irkw") == 0
        assert self._train(data[1], tmp_path / "b.irkw") == 0
        assert (tmp_path / "a.irkw").read_bytes() == (tmp_path / "b.irkw").read_bytes()
        side = read_sidecar(tmp_path / "a.irkw")
        assert side["step"] == 3 and side["seed"] == 0 and len(side["loss_history"]) == 3
        assert (tmp_path / "a.irkw.history.csv").exists()

    def test_localization_task(self, data, tmp_path):
        assert self._train(data[1], tmp_path / "loc.irkw", task="loc") == 0
        task, tensors = read_container(tmp_path / "loc.irkw")
        assert task == "localization" and tensors["decoder.up5.weight"].shape[1] == 2

    def test_localization_windows_from_predictions(self, data, models, tmp_path, capsys):
        argv = ["--seg-model", str(models[0]), "--window-source", "predicted", "--threshold", "0.4"]
        out = tmp_path / "loc.irkw"
        base = ["train", "--manifest", str(data[1]), "--task", "loc", "--out", str(out), "--arch", "reduced"]
        assert run(base + ["--input-size", "32", "--steps", "2"] + argv) == 0
        assert "ground-truth" not in capsys.readouterr().err

    def test_predicted_windows_need_model(self, data, tmp_path):
        argv = ["train", "--manifest", str(data[1]), "--task", "loc", "--out", str(tmp_path / "w.irkw"), "--window-source", "predicted"]
        assert run(argv) == 2
        assert not (tmp_path / "w.irkw").exists()

    def test_ground_truth_windows_noted(self, data, tmp_path, capsys):
        self._train(data[1], tmp_path / "loc.irkw", task="loc")
        assert "ground-truth" in capsys.readouterr().err

    def test_trained_model_feeds_inference(self, data, tmp_path):
        self._train(data[1], tmp_path / "w.irkw")
        out = tmp_path / "m.png"
        assert run(["infer-seg", "--model", str(tmp_path / "w.irkw"), "--image", str(data[0] / "img" / "s1_L_2.png"), "--out", str(out)]) == 0
        assert read_mask(out).shape == (40, 40)
