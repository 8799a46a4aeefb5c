import csv
import json
import math
import sys

import pytest
import torch
from typer.testing import CliRunner

from hypervoltran import cli
from hypervoltran.cli import app, ground_truth_mesh
from hypervoltran.config import load_run_config
from hypervoltran.file_ops import FileOperations, read_dataset, write_mesh_obj
from hypervoltran.train import LossParts, Trainer, read_checkpoint

runner = CliRunner()


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def _read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def dataset_root(tmp_path, small_config_file):
    root = tmp_path / "data"
    result = _invoke("gen-data", "--scenes", 2, "--config", small_config_file, "--out", root)
    assert result.exit_code == 0, result.output
    return root


@pytest.fixture
def trained_checkpoint(tmp_path, dataset_root, small_config_file):
    out = tmp_path / "train"
    result = _invoke("train", "--data", dataset_root, "--config", small_config_file, "--out", out)
    assert result.exit_code == 0, result.output
    return out / "checkpoint.pt"


def test_gen_data_writes_scene_directories(dataset_root):
    assert sorted(p.name for p in dataset_root.iterdir() if p.is_dir()) == ["scene_000", "scene_001"]
    vs = read_dataset(dataset_root / "scene_000")
    assert len(vs) == 4
    assert vs.scene is not None
    manifest = json.loads((dataset_root / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert set(manifest["outputs"]) == {"scene_000", "scene_001"}
    assert len(manifest["artifact_hash"]) == 64


def test_gen_data_is_reproducible(tmp_path, dataset_root, small_config_file):
    again = tmp_path / "again"
    assert _invoke("gen-data", "--scenes", 2, "--config", small_config_file, "--out", again).exit_code == 0
    for name in ("meta.json", "rgb_002.png", "depth_001.pfm"):
        assert (again / "scene_001" / name).read_bytes() == (dataset_root / "scene_001" / name).read_bytes()
    first = json.loads((dataset_root / "run_manifest.json").read_text())
    second = json.loads((again / "run_manifest.json").read_text())
    assert first["artifact_hash"] == second["artifact_hash"]


def test_gen_data_overrides_win_over_flags(tmp_path, small_config_file):
    out = tmp_path / "data"
    result = _invoke(
        "gen-data", "--views", 6, "--override", "data.rig.n_views=5", "--color-jitter", 0.1,
        "--config", small_config_file, "--out", out,
    )
    assert result.exit_code == 0, result.output
    vs = read_dataset(out / "scene_000")
    assert len(vs) == 5
    assert vs.corruption is not None


def test_gen_data_rejects_bad_override(tmp_path):
    result = _invoke("gen-data", "--override", "data.rig.radius=0.5", "--out", tmp_path / "data")
    assert result.exit_code == 1
    assert not (tmp_path / "data" / "scene_000").exists()


def test_train_writes_checkpoint_and_loss_trace(trained_checkpoint):
    out = trained_checkpoint.parent
    rows = _read_rows(out / "loss.csv")
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
    assert all(math.isfinite(float(r["total"])) for r in rows)
    assert (out / "loss.png").exists()
    payload = read_checkpoint(trained_checkpoint)
    assert payload["iteration"] == 3
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["outputs"]["checkpoint"] == "checkpoint.pt"


def test_train_resume_extends_the_trace(trained_checkpoint, dataset_root):
    out = trained_checkpoint.parent
    result = _invoke(
        "train", "--data", dataset_root, "--resume", trained_checkpoint,
        "--override", "train.iterations=5", "--out", out,
    )
    assert result.exit_code == 0, result.output
    rows = _read_rows(out / "loss.csv")
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3, 4]
    assert read_checkpoint(out / "checkpoint.pt")["iteration"] == 5


def test_train_resume_into_fresh_directory_keeps_the_trace(tmp_path, trained_checkpoint, dataset_root):
    earlier = _read_rows(trained_checkpoint.parent / "loss.csv")
    out = tmp_path / "resumed"
    result = _invoke(
        "train", "--data", dataset_root, "--resume", trained_checkpoint,
        "--override", "train.iterations=5", "--out", out,
    )
    assert result.exit_code == 0, result.output
    rows = _read_rows(out / "loss.csv")
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3, 4]
    assert [float(r["total"]) for r in rows[:3]] == [float(r["total"]) for r in earlier]


def test_train_numerical_failure_exits_with_two(tmp_path, dataset_root, small_config_file, monkeypatch):
    def broken(self, plan):
        nan = torch.tensor(float("nan"), requires_grad=True)
        zero = torch.tensor(0.0)
        return nan * 1.0, LossParts(rgb=nan, depth=zero, eikonal=zero, sparse=zero)

    monkeypatch.setattr(Trainer, "compute_losses", broken)
    out = tmp_path / "train"
    result = _invoke("train", "--data", dataset_root, "--config", small_config_file, "--out", out)
    assert result.exit_code == 2
    failure = json.loads((out / "numerical_failure.json").read_text())
    assert failure["iteration"] == 0
    assert "rgb" in failure["terms"]
    assert not (out / "checkpoint.pt").exists()


def test_train_without_datasets_fails(tmp_path, small_config_file):
    (tmp_path / "empty").mkdir()
    result = _invoke("train", "--data", tmp_path / "empty", "--config", small_config_file, "--out", tmp_path / "t")
    assert result.exit_code == 1


def test_reconstruct_writes_mesh_and_novel_views(tmp_path, trained_checkpoint, dataset_root):
    out = tmp_path / "rec"
    result = _invoke(
        "reconstruct", "--checkpoint", trained_checkpoint, "--data", dataset_root,
        "--novel-views", 2, "--dump-volume", "--out", out,
    )
    assert result.exit_code == 0, result.output
    for scene in ("scene_000", "scene_001"):
        scene_dir = out / scene
        assert (scene_dir / "mesh.obj").exists()
        for k in range(2):
            assert (scene_dir / f"novel_{k:03d}.png").exists()
            assert (scene_dir / f"novel_{k:03d}_depth.pfm").exists()
        assert len(list(scene_dir.glob("volume_*.pfm"))) == 2
        summary = json.loads((scene_dir / "reconstruct.json").read_text())
        assert summary["source_views"] == 3
        assert len(summary["novel_poses"]) == 2
        assert summary["timing"]["post_feature_s"] >= 0.0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert "parameter_digest" in manifest["arguments"]


def test_reconstruct_rejects_unknown_aggregator(tmp_path, trained_checkpoint, dataset_root):
    result = _invoke(
        "reconstruct", "--checkpoint", trained_checkpoint, "--data", dataset_root,
        "--aggregator", "max", "--out", tmp_path,
    )
    assert result.exit_code == 1


def test_reconstruct_accepts_aggregator_override(tmp_path, trained_checkpoint, dataset_root):
    out = tmp_path / "rec"
    result = _invoke(
        "reconstruct", "--checkpoint", trained_checkpoint, "--data", dataset_root,
        "--novel-views", 1, "--override", "model.aggregator=mean", "--out", out,
    )
    assert result.exit_code == 0, result.output
    assert (out / "scene_000" / "mesh.obj").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["model"]["aggregator"] == "mean"


def test_eval_scores_ground_truth_as_perfect(tmp_path, dataset_root, small_config_file):
    cfg = load_run_config(small_config_file)
    pred = tmp_path / "pred"
    for scene in ("scene_000", "scene_001"):
        vs = read_dataset(dataset_root / scene)
        write_mesh_obj(ground_truth_mesh(vs.scene, cfg), pred / scene / "mesh.obj")
    out = tmp_path / "eval"
    result = _invoke(
        "eval", "--pred", pred, "--gt", dataset_root, "--config", small_config_file, "--out", out, "--workers", 2
    )
    assert result.exit_code == 0, result.output
    rows = _read_rows(out / "metrics.csv")
    assert [r["scene_id"] for r in rows] == ["scene_000", "scene_001", "mean"]
    for row in rows[:2]:
        assert float(row["chamfer_l2"]) == pytest.approx(0.0, abs=1e-8)
        assert float(row["fscore"]) == 1.0
        assert float(row["iou"]) == pytest.approx(1.0, abs=0.02)
        assert row["psnr"] == ""
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["aggregate"]["psnr"] is None
    assert metrics["aggregate"]["fscore"] == 1.0
    assert "chamfer" in metrics["conventions"]


def test_eval_with_missing_reconstruction_fails(tmp_path, dataset_root):
    (tmp_path / "pred").mkdir()
    result = _invoke("eval", "--pred", tmp_path / "pred", "--gt", dataset_root, "--out", tmp_path / "eval")
    assert result.exit_code == 1
    assert not (tmp_path / "eval" / "metrics.csv").exists()


def test_ablate_views_trains_per_setting(tmp_path, dataset_root, small_config_file):
    out = tmp_path / "ablate"
    result = _invoke(
        "ablate", "views", "--data", dataset_root, "--seeds", 1, "--novel-views", 1,
        "--config", small_config_file, "--override", "train.iterations=1", "--out", out,
    )
    assert result.exit_code == 0, result.output
    rows = _read_rows(out / "ablation_views.csv")
    assert [(r["views"], r["seed"]) for r in rows] == [("4", "0")]
    assert (out / "checkpoints" / "views_4_seed0.pt").exists()
    assert (out / "ablation_views.png").exists()


def test_ablate_aggregator_from_checkpoint(tmp_path, trained_checkpoint, dataset_root):
    out = tmp_path / "ablate"
    result = _invoke(
        "ablate", "aggregator", "--data", dataset_root, "--checkpoint", trained_checkpoint,
        "--seeds", 2, "--novel-views", 1, "--out", out,
    )
    assert result.exit_code == 0, result.output
    rows = _read_rows(out / "ablation_aggregator.csv")
    assert [r["aggregator"] for r in rows] == ["voltran", "mean", "voltran", "mean"]
    assert [r["seed"] for r in rows] == ["0", "0", "1", "1"]
    assert not (out / "checkpoints").exists()


def test_main_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setattr(sys, "argv", ["hypervoltran", "frobnicate"])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 1

    monkeypatch.setattr(sys, "argv", ["hypervoltran", "ablate", "everything", "--data", str(tmp_path)])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 1

    (tmp_path / "empty").mkdir()
    monkeypatch.setattr(sys, "argv", ["hypervoltran", "eval", "--pred", str(tmp_path), "--gt", str(tmp_path / "empty")])
    monkeypatch.setenv("HYPERVOLTRAN_OUTPUT_ROOT", str(tmp_path / "runs"))
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 1


def test_default_output_directory_comes_from_environment(tmp_path, monkeypatch, small_config_file):
    monkeypatch.setenv("HYPERVOLTRAN_OUTPUT_ROOT", str(tmp_path / "runs"))
    result = _invoke("gen-data", "--config", small_config_file)
    assert result.exit_code == 0, result.output
    runs = tmp_path / "runs" / "gen-data"
    assert FileOperations(runs).find_datasets() == [runs / "scene_000"]
