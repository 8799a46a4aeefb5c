import math

import numpy as np
import pytest
import torch

from hypervoltran.config import LossWeights, ModelConfig, TrainConfig
from hypervoltran.errors import CheckpointError, NumericalError
from hypervoltran.model import HyperVolTranModel
from hypervoltran.scenes import select_views
from hypervoltran.train import (
    LOSS_COLUMNS,
    LossBreakdown,
    LossParts,
    Trainer,
    config_mismatch,
    learning_rate,
    load_checkpoint,
    loss_depth,
    loss_eikonal,
    loss_rgb,
    loss_sparse,
    read_checkpoint,
    resume_trainer,
    save_checkpoint,
    total_loss,
)


@pytest.fixture
def trainer(small_run_config, small_viewset):
    torch.manual_seed(0)
    return Trainer(HyperVolTranModel(small_run_config.model), small_run_config, [small_viewset])


def test_eikonal_loss_of_exact_sdf():
    points = torch.as_tensor(np.random.default_rng(0).normal(size=(200, 3)))
    normals = points / points.norm(dim=-1, keepdim=True)
    assert float(loss_eikonal(normals)) < 1e-10
    assert float(loss_eikonal(2.0 * normals)) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        loss_eikonal(torch.zeros(0, 3))


def test_sparse_loss_values():
    assert float(loss_sparse(torch.tensor([1.0, -1.0], dtype=torch.float64), 1.0)) == pytest.approx(math.exp(-1.0))
    assert float(loss_sparse(torch.zeros(5), 10.0)) == 1.0
    values = loss_sparse(torch.randn(100), 10.0)
    assert 0.0 < float(values) <= 1.0
    with pytest.raises(ValueError):
        loss_sparse(torch.zeros(3), -1.0)


def test_total_loss_composition():
    weights = LossWeights()
    assert weights.eikonal == 0.1
    assert weights.sparse == 0.02
    assert weights.depth == 1.0
    parts = LossParts(rgb=1.0, depth=2.0, eikonal=3.0, sparse=4.0)
    assert total_loss(parts, weights) == pytest.approx(1.0 + 2.0 + 0.1 * 3.0 + 0.02 * 4.0)
    no_depth = LossWeights(depth=0.0)
    assert total_loss(parts, no_depth) == pytest.approx(1.0 + 0.3 + 0.08)


def test_rgb_loss():
    pred = torch.tensor([[1.0, 0.0, 0.0], [0.5, 0.5, 0.5]])
    target = torch.tensor([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]])
    assert float(loss_rgb(pred, target)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        loss_rgb(torch.zeros(0, 3), torch.zeros(0, 3))
    with pytest.raises(ValueError):
        loss_rgb(torch.zeros(2, 3), torch.zeros(3, 3))


def test_depth_loss_uses_valid_pixels_only():
    pred = torch.tensor([1.0, 2.0, 3.0])
    target = torch.tensor([1.5, 0.0, 3.0])
    assert float(loss_depth(pred, target, torch.tensor([True, False, True]))) == pytest.approx(0.25)
    assert float(loss_depth(pred, target, torch.zeros(3, dtype=torch.bool))) == 0.0


def test_learning_rate_schedules():
    config = TrainConfig(lr=1e-3, iterations=100)
    assert learning_rate(0, config) == pytest.approx(1e-3)
    assert learning_rate(50, config) == pytest.approx(5e-4)
    assert learning_rate(100, config) == pytest.approx(0.0, abs=1e-15)
    assert learning_rate(150, config) == pytest.approx(0.0, abs=1e-15)
    constant = TrainConfig(lr=1e-3, iterations=100, schedule="constant")
    assert learning_rate(73, constant) == 1e-3


def test_loss_breakdown_row_order():
    record = LossBreakdown(iteration=3, lr=0.1, rgb=1.0, depth=2.0, eikonal=3.0, sparse=4.0, total=5.0)
    assert record.as_row() == [3, 0.1, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert list(LOSS_COLUMNS) == ["iteration", "lr", "rgb", "depth", "eikonal", "sparse", "total"]
    assert record.terms() == {"rgb": 1.0, "depth": 2.0, "eikonal": 3.0, "sparse": 4.0, "total": 5.0}


def test_trainer_needs_source_and_target(small_run_config, small_viewset):
    model = HyperVolTranModel(small_run_config.model)
    with pytest.raises(ValueError):
        Trainer(model, small_run_config, [select_views(small_viewset, [0])])
    with pytest.raises(ValueError):
        Trainer(model, small_run_config, [])


def test_plan_step_keeps_target_out_of_sources(trainer, small_viewset):
    cfg = trainer.train_config
    for _ in range(10):
        plan = trainer.plan_step()
        assert plan.target != 0
        assert plan.sources[0] == 0
        assert plan.target not in plan.sources
        assert len(plan.sources) == min(cfg.n_source_views, len(small_viewset) - 1)
        assert len(plan.px) == cfg.rays_per_batch
        assert plan.px.min() >= 0 and plan.px.max() < 16
        assert plan.py.min() >= 0 and plan.py.max() < 16
        background = small_viewset.masks[plan.target][plan.py, plan.px] <= 0.5
        assert background.sum() == round(cfg.background_ratio * cfg.rays_per_batch)


def test_train_step_updates_parameters(trainer):
    before = trainer.model.parameter_digest()
    record = trainer.train_step()
    assert record.iteration == 0
    assert trainer.iteration == 1
    assert all(math.isfinite(v) for v in record.terms().values())
    expected = record.rgb + record.depth + 0.1 * record.eikonal + 0.02 * record.sparse
    assert record.total == pytest.approx(expected, rel=1e-5)
    assert trainer.model.parameter_digest() != before
    assert trainer.history == [record]


def test_fit_calls_back_every_step(trainer):
    seen = []
    records = trainer.fit(3, callback=seen.append)
    assert [r.iteration for r in records] == [0, 1, 2]
    assert seen == records
    assert trainer.fit(3) == []


def test_non_finite_loss_raises(trainer, monkeypatch):
    nan = torch.tensor(float("nan"), requires_grad=True)

    def broken(plan):
        parts = LossParts(rgb=nan, depth=torch.tensor(0.0), eikonal=torch.tensor(1.0), sparse=torch.tensor(0.5))
        return nan * 1.0, parts

    monkeypatch.setattr(trainer, "compute_losses", broken)
    digest = trainer.model.parameter_digest()
    with pytest.raises(NumericalError) as exc:
        trainer.train_step()
    assert math.isnan(exc.value.terms["rgb"])
    assert exc.value.terms["eikonal"] == 1.0
    assert trainer.iteration == 0
    assert trainer.model.parameter_digest() == digest


def test_checkpoint_round_trip(trainer, tmp_path):
    trainer.fit(2)
    path = save_checkpoint(trainer, tmp_path / "ckpt" / "checkpoint.pt")
    model, payload = load_checkpoint(path)
    assert model.parameter_digest() == trainer.model.parameter_digest()
    assert payload["iteration"] == 2
    assert set(payload["param_groups"]) == {
        "featnet",
        "condition_encoder",
        "cost_regularizer",
        "hypernetwork",
        "voltran",
        "aggregation_token",
        "inv_std",
    }
    assert not model.training


def test_checkpoint_config_mismatch(trainer, tmp_path, small_model_config):
    path = save_checkpoint(trainer, tmp_path / "checkpoint.pt")
    other = ModelConfig.model_validate({**small_model_config.model_dump(), "grid_resolution": 12})
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path, other)
    assert "grid_resolution" in str(exc.value)
    load_checkpoint(path, small_model_config)


def test_checkpoint_loads_with_another_aggregator(trainer, tmp_path, small_model_config):
    path = save_checkpoint(trainer, tmp_path / "checkpoint.pt")
    mean = ModelConfig.model_validate({**small_model_config.model_dump(), "aggregator": "mean"})
    assert config_mismatch(small_model_config.model_dump(), mean) == []
    model, _ = load_checkpoint(path, mean)
    assert model.config.aggregator == "mean"
    assert model.parameter_digest() == trainer.model.parameter_digest()


def test_unreadable_checkpoints(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(garbage)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.pt")
    foreign = tmp_path / "foreign.pt"
    torch.save({"weights": torch.zeros(2)}, foreign)
    with pytest.raises(CheckpointError):
        read_checkpoint(foreign)
    future = tmp_path / "future.pt"
    torch.save({"format": "hypervoltran-checkpoint", "version": 99}, future)
    with pytest.raises(CheckpointError):
        read_checkpoint(future)


def test_resume_continues_the_run(small_run_config, small_viewset, tmp_path):
    torch.manual_seed(0)
    straight = Trainer(HyperVolTranModel(small_run_config.model), small_run_config, [small_viewset])
    reference = straight.fit(3)

    torch.manual_seed(0)
    first = Trainer(HyperVolTranModel(small_run_config.model), small_run_config, [small_viewset])
    first.fit(2)
    path = save_checkpoint(first, tmp_path / "checkpoint.pt")
    resumed = resume_trainer(path, [small_viewset])
    assert resumed.iteration == 2
    tail = resumed.fit(3)
    assert [r.iteration for r in tail] == [2]
    assert tail[0].total == pytest.approx(reference[2].total, rel=1e-5)
    assert tail[0].rgb == pytest.approx(reference[2].rgb, rel=1e-5)
