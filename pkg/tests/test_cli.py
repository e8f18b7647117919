import json
from pathlib import Path

import numpy as np
import pytest

from catpose.cli import main
from catpose.geometry import SimilarityTransform, load_obj, rotation_geodesic_deg


@pytest.fixture(scope="module")
def synth_scene(tmp_path_factory):
    scene_dir = tmp_path_factory.mktemp("scene")
    rc = main(["synth", "--out", str(scene_dir), "--shape", "house",
               "--seed", "5"])
    assert rc == 0
    return scene_dir


class TestSynthCommand:
    def test_layout_complete(self, synth_scene):
        for name in ("intrinsics.json", "depth.uftn", "mask.png", "rgb.png",
                     "mesh.obj", "gt_pose.json", "synth.json", "config.json"):
            assert (synth_scene / name).exists(), name

    def test_gt_pose_valid(self, synth_scene):
        gt = SimilarityTransform.from_json(
            json.loads((synth_scene / "gt_pose.json").read_text()))
        gt.validate()


class TestCoarseCommand:
    def test_estimates_pose(self, synth_scene, tmp_path):
        out = tmp_path / "out"
        rc = main(["coarse", "--scene", str(synth_scene), "--out", str(out),
                   "--seed", "5"])
        assert rc == 0
        pose = json.loads((out / "pose.json").read_text())
        est = SimilarityTransform.from_json(pose)
        gt = SimilarityTransform.from_json(
            json.loads((synth_scene / "gt_pose.json").read_text()))
        assert rotation_geodesic_deg(est.r, gt.r) < 3.0
        assert pose["confidence"] > 0.9
        assert "view_index" in pose

    def test_single_view_flag(self, synth_scene, tmp_path):
        out = tmp_path / "out_view"
        rc = main(["coarse", "--scene", str(synth_scene), "--out", str(out),
                   "--seed", "5", "--view", "0"])
        assert rc == 0
        assert (out / "pose.json").exists()


class TestEstimateCommand:
    def test_end_to_end_and_determinism(self, synth_scene, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        args = ["estimate", "--scene", str(synth_scene), "--seed", "5",
                "--steps", "20"]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        b1 = (out1 / "pose.json").read_bytes()
        b2 = (out2 / "pose.json").read_bytes()
        assert b1 == b2
        assert (out1 / "refined_mesh.obj").exists()
        assert (out1 / "loss_trace.csv").exists()
        report = json.loads((out1 / "report.json").read_text())
        assert "config" in report and "timings" in report

    def test_missing_scene_file_exit_code(self, tmp_path):
        empty = tmp_path / "empty_scene"
        empty.mkdir()
        rc = main(["estimate", "--scene", str(empty), "--out",
                   str(tmp_path / "o")])
        assert rc == 2


class TestMatchCommand:
    def test_dumps_jsonl(self, synth_scene, tmp_path):
        out = tmp_path / "match"
        rc = main(["match", "--scene", str(synth_scene), "--out", str(out),
                   "--seed", "5", "--view", "0", "--overlay"])
        assert rc == 0
        lines = (out / "correspondences.jsonl").read_text().strip().splitlines()
        assert len(lines) >= 4
        rec = json.loads(lines[0])
        assert set(rec) == {"p", "q", "sim", "cyc"}
        cycs = [json.loads(l)["cyc"] for l in lines]
        assert cycs == sorted(cycs)
        assert (out / "overlay.png").exists()


class TestRenderCommand:
    def test_writes_buffers(self, synth_scene, tmp_path):
        out = tmp_path / "render"
        pose_path = tmp_path / "p.json"
        pose_path.write_text(json.dumps(
            {"R": list(np.eye(3).ravel()), "T": [0, 0, 0.8], "s": 0.3}))
        rc = main(["render", "--mesh", str(synth_scene / "mesh.obj"),
                   "--pose", str(pose_path),
                   "--intrinsics", str(synth_scene / "intrinsics.json"),
                   "--out", str(out)])
        assert rc == 0
        for name in ("depth.uftn", "mask.png", "shaded.png"):
            assert (out / name).exists()


class TestRefineCommand:
    def test_refines_from_pose_file(self, synth_scene, tmp_path):
        coarse_out = tmp_path / "c"
        assert main(["coarse", "--scene", str(synth_scene), "--out",
                     str(coarse_out), "--seed", "5"]) == 0
        out = tmp_path / "r"
        rc = main(["refine", "--scene", str(synth_scene),
                   "--pose", str(coarse_out / "pose.json"),
                   "--out", str(out), "--seed", "5", "--steps", "15"])
        assert rc == 0
        assert (out / "pose.json").exists()
        assert (out / "refined_mesh.obj").exists()
        mesh = load_obj(out / "refined_mesh.obj")
        assert mesh.n_vertices > 0
        trace = (out / "loss_trace.csv").read_text().splitlines()
        assert len(trace) == 17  # header + 15 steps + final eval


class TestEvalCommand:
    def test_scores_directories(self, tmp_path):
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        rng = np.random.default_rng(0)
        from catpose.geometry import random_rotation

        for i in range(6):
            r = random_rotation(rng)
            t = rng.uniform(-0.2, 0.2, 3)
            gt = {"R": list(r.ravel()), "T": list(t), "s": 1.0,
                  "category": "bottle" if i % 2 else "camera",
                  "extents": [0.3, 0.5, 0.3]}
            (gt_dir / f"inst{i}.json").write_text(json.dumps(gt))
            pred = dict(gt)
            pred["T"] = list(t + (0.001 if i < 4 else 0.2))
            (pred_dir / f"inst{i}.json").write_text(json.dumps(pred))
        out = tmp_path / "metrics.json"
        table = tmp_path / "table.txt"
        rc = main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                   "--out", str(out), "--table", str(table),
                   "--samples", "20000"])
        assert rc == 0
        metrics = json.loads(out.read_text())
        assert metrics["table"]["count"] == 6
        assert metrics["table"]["5deg_2cm"] == pytest.approx(100 * 4 / 6, abs=0.01)
        assert "iou_0.5" in table.read_text()

    def test_missing_prediction_is_validation_error(self, tmp_path):
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        (gt_dir / "x.json").write_text(json.dumps(
            {"R": list(np.eye(3).ravel()), "T": [0, 0, 0], "s": 1.0}))
        rc = main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                   "--out", str(tmp_path / "m.json")])
        assert rc == 2
