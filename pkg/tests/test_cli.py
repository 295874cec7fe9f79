import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from bevprobe.bev_grid import BevGridSpec, Heatmap, save_heatmap
from bevprobe.cli import main
from bevprobe.geometry import BevBox
from bevprobe.hip import (
    HipConfig,
    MaskType,
    candidates_from_jsonl,
    load_accumulated_mask,
    run_hip,
)
from bevprobe.metrics import RecallConfig, average_recall, merge_reports, recall_report_to_dict
from bevprobe.sim import experiment_from_config, run_experiment, scene_from_dict

RNG = np.random.default_rng


def tiny_config():
    return {
        "rng_seed": 31,
        "num_scenes": 3,
        "grid": {
            "size_x": 28, "size_y": 28, "num_classes": 2,
            "cell_size": 1.0, "origin_x": -14.0, "origin_y": -14.0,
        },
        "scene": {
            "num_objects_range": [3, 5],
            "class_mix": [0.6, 0.4],
            "size_table": [[4.0, 2.0, 0.1], [0.8, 0.6, 0.1]],
            "min_same_class_separation": 6.0,
        },
        "detectability": {
            "easy_fraction": 0.5,
            "hard_amplitude_range": [0.3, 0.55],
            "clutter_peaks": 30,
            "clutter_amplitude_range": [0.25, 0.9],
            "stage_gain": 1.6,
            "clutter_clearance": 6.0,
        },
        "hip": {
            "num_stages": 2, "k_per_stage": [5, 5],
            "mask_type": "pooling", "small_classes": [1],
        },
        "baseline": {"num_stages": 1, "k_per_stage": [10], "mask_type": "point"},
    }


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def digest_dir(path, exclude=("run_info.json",)):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(path.iterdir())
        if p.is_file() and p.name not in exclude
    }


SIM_FILES = {
    "summary.json", "run_info.json", "recall_curve.svg",
    "recall_hip.csv", "recall_hip.json", "candidates_hip.jsonl",
    "recall_baseline.csv", "recall_baseline.json", "candidates_baseline.jsonl",
}


class TestSimulateCommand:
    def test_outputs_and_summary_match_library(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_config())
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(out)]) == 0
        assert {p.name for p in out.iterdir()} == SIM_FILES

        summary = json.loads((out / "summary.json").read_text())
        result = run_experiment(experiment_from_config(tiny_config()))
        assert summary["mean_delta"] == result.mean_delta
        assert summary["num_scenes"] == 3
        assert summary["total_budget"] == 10
        assert summary["frac_scenes_delta_nonneg"] == result.frac_nonneg_delta
        assert [s["delta"] for s in summary["per_scene"]] == list(result.deltas)
        for arm in ("hip", "baseline"):
            assert summary["arms"][arm]["pooled"] == recall_report_to_dict(
                result.arms[arm].pooled
            )
            lines = (out / f"candidates_{arm}.jsonl").read_text().splitlines()
            assert len(lines) == 3 * 10
            record = json.loads(lines[0])
            assert record["scene_id"] == "scene_0000"
            assert set(record) == {
                "scene_id", "stage", "x", "y", "class_id", "score", "world_x", "world_y"
            }

        svg = (out / "recall_curve.svg").read_text()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "polyline" in svg and "hip" in svg and "baseline" in svg

    def test_rerun_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_config())
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(a)]) == 0
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(b)]) == 0
        assert digest_dir(a) == digest_dir(b)

    def test_jobs_flag_does_not_change_bytes(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_config())
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(a)]) == 0
        assert main([
            "simulate", "--config", str(cfg_path), "--output-dir", str(b), "--jobs", "2",
        ]) == 0
        assert digest_dir(a) == digest_dir(b)

    def test_save_scenes(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_config())
        out = tmp_path / "out"
        assert main([
            "simulate", "--config", str(cfg_path), "--output-dir", str(out), "--save-scenes",
        ]) == 0
        lines = (out / "scenes.jsonl").read_text().splitlines()
        assert len(lines) == 3
        for i, line in enumerate(lines):
            record = json.loads(line)
            assert record["scene_id"] == f"scene_{i:04d}"
            scene = scene_from_dict(record)
            assert len(scene.clutter) == 30

    def test_missing_config_is_config_error(self, tmp_path):
        code = main([
            "simulate", "--config", str(tmp_path / "nope.json"),
            "--output-dir", str(tmp_path / "out"),
        ])
        assert code == 2

    def test_malformed_config_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path), "--output-dir", str(tmp_path / "o")]) == 2

    def test_unequal_budgets_rejected(self, tmp_path):
        cfg = tiny_config()
        cfg["baseline"]["k_per_stage"] = [9]
        cfg_path = write_config(tmp_path, cfg)
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(tmp_path / "o")]) == 2

    def test_bad_scene_section(self, tmp_path):
        cfg = tiny_config()
        cfg["scene"]["class_mix"] = [0.6, 0.6]
        cfg_path = write_config(tmp_path, cfg)
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(tmp_path / "o")]) == 2


def stage_files(tmp_path, num_stages=2, seed=40, size=12, num_classes=2):
    spec = BevGridSpec(size, size, num_classes, 0.5, -3.0, -3.0)
    rng = RNG(seed)
    paths = []
    maps = []
    for s in range(num_stages):
        hm = Heatmap(spec, rng.random(spec.shape).astype(np.float32))
        path = tmp_path / f"stage{s}.bevgrid"
        save_heatmap(path, hm)
        paths.append(str(path))
        maps.append(hm)
    return spec, paths, maps


class TestProbeCommand:
    def test_matches_library_point_mode(self, tmp_path):
        spec, paths, maps = stage_files(tmp_path)
        out = tmp_path / "out"
        code = main([
            "probe", "--stage", paths[0], "--stage", paths[1],
            "--output-dir", str(out), "--k", "4",
        ])
        assert code == 0
        expected = run_hip(maps, HipConfig(2, (4, 4), MaskType.POINT), spec)
        got = candidates_from_jsonl((out / "candidates.jsonl").read_text())
        assert tuple(got) == expected.candidates
        acc = load_accumulated_mask(out / "mask_accumulated.bevgrid")
        np.testing.assert_array_equal(acc.bits, expected.accumulated_mask.bits)
        for trace in expected.traces:
            per_stage = load_accumulated_mask(out / f"mask_stage_{trace.stage}.bevgrid")
            np.testing.assert_array_equal(per_stage.bits, trace.positive_mask.bits)

    def test_pooling_and_small_classes(self, tmp_path):
        spec, paths, maps = stage_files(tmp_path)
        out = tmp_path / "out"
        code = main([
            "probe", "--stage", paths[0], "--stage", paths[1],
            "--output-dir", str(out), "--k-per-stage", "3,5",
            "--mask-type", "pooling", "--small-classes", "1", "--pooling-kernel", "3",
        ])
        assert code == 0
        cfg = HipConfig(2, (3, 5), MaskType.POOLING, frozenset({1}), 3)
        expected = run_hip(maps, cfg, spec)
        got = candidates_from_jsonl((out / "candidates.jsonl").read_text())
        assert tuple(got) == expected.candidates

    def test_box_mode_with_fixed_footprint(self, tmp_path):
        spec, paths, maps = stage_files(tmp_path)
        out = tmp_path / "out"
        code = main([
            "probe", "--stage", paths[0], "--stage", paths[1],
            "--output-dir", str(out), "--k", "3",
            "--mask-type", "box", "--box-length", "2.0", "--box-width", "1.0",
        ])
        assert code == 0

        def provider(cands):
            return [BevBox(c.world_x, c.world_y, 2.0, 1.0, 0.0, c.class_id) for c in cands]

        expected = run_hip(
            maps, HipConfig(2, (3, 3), MaskType.BOX), spec, box_provider=provider
        )
        got = candidates_from_jsonl((out / "candidates.jsonl").read_text())
        assert tuple(got) == expected.candidates
        acc = load_accumulated_mask(out / "mask_accumulated.bevgrid")
        np.testing.assert_array_equal(acc.bits, expected.accumulated_mask.bits)

    def test_flag_validation(self, tmp_path):
        spec, paths, _ = stage_files(tmp_path)
        out = str(tmp_path / "out")
        assert main(["probe", "--output-dir", out, "--k", "3"]) == 2
        assert main([
            "probe", "--stage", paths[0], "--output-dir", out,
        ]) == 2
        assert main([
            "probe", "--stage", paths[0], "--output-dir", out, "--k", "3",
            "--k-per-stage", "3",
        ]) == 2
        assert main([
            "probe", "--stage", paths[0], "--stage", paths[1],
            "--output-dir", out, "--k-per-stage", "3,4,5",
        ]) == 2
        assert main([
            "probe", "--stage", paths[0], "--output-dir", out, "--k", "3",
            "--mask-type", "box",
        ]) == 2
        assert main([
            "probe", "--stage", paths[0], "--output-dir", out, "--k", "0",
        ]) == 2
        assert main([
            "probe", "--stage", paths[0], "--output-dir", out, "--k", "3",
            "--mask-type", "pooling", "--pooling-kernel", "4",
        ]) == 2

    def test_missing_stage_file(self, tmp_path):
        code = main([
            "probe", "--stage", str(tmp_path / "missing.bevgrid"),
            "--output-dir", str(tmp_path / "out"), "--k", "3",
        ])
        assert code == 3

    def test_mismatched_stage_specs(self, tmp_path):
        _, paths_a, _ = stage_files(tmp_path, num_stages=1, size=12)
        spec_b = BevGridSpec(10, 10, 2, 0.5, -3.0, -3.0)
        other = tmp_path / "other.bevgrid"
        save_heatmap(other, Heatmap.zeros(spec_b))
        code = main([
            "probe", "--stage", paths_a[0], "--stage", str(other),
            "--output-dir", str(tmp_path / "out"), "--k", "3",
        ])
        assert code == 3

    def test_corrupt_stage_file(self, tmp_path):
        bad = tmp_path / "bad.bevgrid"
        bad.write_bytes(b"garbage, no header newline")
        code = main([
            "probe", "--stage", str(bad), "--output-dir", str(tmp_path / "out"), "--k", "3",
        ])
        assert code == 3


def detection_dump(tmp_path):
    dump = {
        "scenes": [
            {
                "scene_id": "a",
                "predictions": [
                    {"cx": 0.3, "cy": 0.0, "length": 4.0, "width": 2.0,
                     "yaw": 0.0, "class_id": 0, "score": 0.9},
                    {"cx": 40.0, "cy": 0.0, "length": 4.0, "width": 2.0,
                     "yaw": 0.0, "class_id": 0, "score": 0.8},
                ],
                "ground_truth": [
                    {"cx": 0.0, "cy": 0.0, "length": 4.0, "width": 2.0,
                     "yaw": 0.0, "class_id": 0},
                    {"cx": 10.0, "cy": 0.0, "length": 4.0, "width": 2.0,
                     "yaw": 0.0, "class_id": 0},
                ],
            },
            {
                "scene_id": "b",
                "predictions": [
                    {"cx": 5.0, "cy": 1.5, "length": 0.8, "width": 0.6,
                     "yaw": 0.1, "class_id": 1, "score": 0.7},
                ],
                "ground_truth": [
                    {"cx": 5.0, "cy": 0.0, "length": 0.8, "width": 0.6,
                     "yaw": 0.1, "class_id": 1},
                ],
            },
        ]
    }
    path = tmp_path / "dump.json"
    path.write_text(json.dumps(dump))
    return path, dump


def dump_boxes(dump):
    scenes = []
    for scene in dump["scenes"]:
        preds = [BevBox(p["cx"], p["cy"], p["length"], p["width"], p["yaw"],
                        p["class_id"], score=p["score"]) for p in scene["predictions"]]
        gts = [BevBox(g["cx"], g["cy"], g["length"], g["width"], g["yaw"],
                      g["class_id"]) for g in scene["ground_truth"]]
        scenes.append((preds, gts))
    return scenes


class TestAuditCommand:
    def test_outputs_match_library(self, tmp_path):
        path, dump = detection_dump(tmp_path)
        out = tmp_path / "out"
        assert main(["audit", "--dump", str(path), "--output-dir", str(out)]) == 0
        assert {p.name for p in out.iterdir()} == {
            "recall.csv", "recall.json", "fn_inventory.json", "classwise_recall.svg",
        }
        cfg = RecallConfig()
        pooled = merge_reports(
            [average_recall(p, g, cfg) for p, g in dump_boxes(dump)], cfg
        )
        assert json.loads((out / "recall.json").read_text()) == recall_report_to_dict(pooled)
        csv_text = (out / "recall.csv").read_text()
        assert csv_text.splitlines()[0] == "scope,class,threshold,recall,num_gt,num_matched"
        assert csv_text.splitlines()[1].startswith("overall,*,0.5,")

        inventory = json.loads((out / "fn_inventory.json").read_text())
        by_key = {(r["scene_id"], r["threshold"]): r["false_negatives"] for r in inventory}
        # Scene a: gt 1 is never matched; gt 0 (0.3 m off) matches everywhere.
        assert [fn["index"] for fn in by_key[("a", 0.5)]] == [1]
        assert [fn["index"] for fn in by_key[("a", 1.0)]] == [1]
        assert [fn["index"] for fn in by_key[("a", 4.0)]] == [1]
        # Scene b: the 1.5 m offset pred matches only at 2 m and up.
        assert [fn["index"] for fn in by_key[("b", 1.0)]] == [0]
        assert by_key[("b", 2.0)] == []
        svg = (out / "classwise_recall.svg").read_text()
        assert svg.startswith("<svg") and "rect" in svg

    def test_threshold_flag(self, tmp_path):
        path, dump = detection_dump(tmp_path)
        out = tmp_path / "out"
        assert main([
            "audit", "--dump", str(path), "--output-dir", str(out),
            "--thresholds", "1,3",
        ]) == 0
        report = json.loads((out / "recall.json").read_text())
        assert sorted(report["per_threshold_recall"]) == ["1.0", "3.0"]

    def test_class_agnostic_flag(self, tmp_path):
        dump = {
            "scenes": [{
                "scene_id": "x",
                "predictions": [{"cx": 0.1, "cy": 0.0, "length": 1.0, "width": 1.0,
                                 "yaw": 0.0, "class_id": 1, "score": 0.9}],
                "ground_truth": [{"cx": 0.0, "cy": 0.0, "length": 1.0, "width": 1.0,
                                  "yaw": 0.0, "class_id": 0}],
            }]
        }
        path = tmp_path / "dump.json"
        path.write_text(json.dumps(dump))
        strict_out, loose_out = tmp_path / "strict", tmp_path / "loose"
        assert main(["audit", "--dump", str(path), "--output-dir", str(strict_out)]) == 0
        assert main([
            "audit", "--dump", str(path), "--output-dir", str(loose_out), "--class-agnostic",
        ]) == 0
        strict = json.loads((strict_out / "recall.json").read_text())
        loose = json.loads((loose_out / "recall.json").read_text())
        assert strict["mean_average_recall"] == 0.0
        assert loose["mean_average_recall"] == 1.0

    def test_bad_threshold_flags(self, tmp_path):
        path, _ = detection_dump(tmp_path)
        out = str(tmp_path / "out")
        assert main(["audit", "--dump", str(path), "--output-dir", out,
                     "--thresholds", "abc"]) == 2
        assert main(["audit", "--dump", str(path), "--output-dir", out,
                     "--thresholds", "2,1"]) == 2

    def test_malformed_dumps(self, tmp_path):
        out = str(tmp_path / "out")

        def run_with(payload):
            path = tmp_path / "dump.json"
            path.write_text(json.dumps(payload))
            return main(["audit", "--dump", str(path), "--output-dir", out])

        assert run_with({"not_scenes": []}) == 3
        assert run_with({"scenes": []}) == 3
        assert run_with({"scenes": [{"scene_id": "a", "predictions": [],
                                     "ground_truth": {}}]}) == 3
        assert run_with({"scenes": [
            {"scene_id": "a", "predictions": [], "ground_truth": []},
            {"scene_id": "a", "predictions": [], "ground_truth": []},
        ]}) == 3
        # A prediction without a score is not auditable.
        assert run_with({"scenes": [{
            "scene_id": "a",
            "predictions": [{"cx": 0, "cy": 0, "length": 1, "width": 1}],
            "ground_truth": [],
        }]}) == 3
        assert run_with({"scenes": [{
            "scene_id": "a",
            "predictions": [],
            "ground_truth": [{"cx": 0, "cy": 0, "length": -1, "width": 1}],
        }]}) == 3

    def test_missing_dump_file(self, tmp_path):
        assert main([
            "audit", "--dump", str(tmp_path / "nope.json"),
            "--output-dir", str(tmp_path / "out"),
        ]) == 3


class TestReportCommand:
    def test_rebuilds_same_curve(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_config())
        sim_out = tmp_path / "sim"
        assert main(["simulate", "--config", str(cfg_path), "--output-dir", str(sim_out)]) == 0
        rep_out = tmp_path / "rep"
        assert main([
            "report", "--summary", str(sim_out / "summary.json"),
            "--output-dir", str(rep_out),
        ]) == 0
        assert (rep_out / "recall_curve.svg").read_bytes() == (
            sim_out / "recall_curve.svg"
        ).read_bytes()
        csv_lines = (rep_out / "recall_summary.csv").read_text().splitlines()
        assert csv_lines[0] == "scope,class,threshold,recall,num_gt,num_matched"
        scopes = {line.split(",")[0] for line in csv_lines[1:]}
        assert scopes == {"hip", "baseline"}

    def test_summary_without_arms(self, tmp_path):
        path = tmp_path / "summary.json"
        path.write_text(json.dumps({"mean_delta": 0.5}))
        assert main(["report", "--summary", str(path), "--output-dir", str(tmp_path / "o")]) == 3

    def test_missing_summary(self, tmp_path):
        assert main([
            "report", "--summary", str(tmp_path / "nope.json"),
            "--output-dir", str(tmp_path / "o"),
        ]) == 3


class TestEntryPoint:
    def test_module_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "bevprobe.cli", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        assert "simulate" in proc.stdout and "audit" in proc.stdout

    def test_console_script_help(self):
        import shutil

        exe = shutil.which("bevprobe")
        if exe is None:
            pytest.skip("console script not on PATH in this environment")
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0
        assert "probe" in proc.stdout
