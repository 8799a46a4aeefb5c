import json

import numpy as np
import pytest
import torch

from hypervoltran.config import DataConfig, EvalConfig, ModelConfig, RigConfig, RunConfig, TrainConfig
from hypervoltran.scenes import AnalyticScene, Primitive, make_camera_ring, render_viewset


@pytest.fixture
def float64():
    """Run a test with float64 as the torch default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def sphere_scene():
    """A single centered sphere of radius 0.5."""
    return AnalyticScene((Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), (0.8, 0.3, 0.2)),), scene_id="sphere")


@pytest.fixture
def two_primitive_scene():
    return AnalyticScene(
        (
            Primitive("sphere", (0.2, 0.0, 0.0), (0.35,), (0.9, 0.2, 0.2)),
            Primitive("box", (-0.3, 0.1, 0.0), (0.2, 0.25, 0.15), (0.2, 0.6, 0.9)),
        ),
        scene_id="pair",
    )


@pytest.fixture
def small_rig():
    """Four 16x16 cameras on the default ring geometry."""
    return make_camera_ring(4, 20.0, 2.2, 16, 14.0)


@pytest.fixture
def small_viewset(two_primitive_scene, small_rig):
    return render_viewset(two_primitive_scene, small_rig, max_steps=64)


@pytest.fixture
def small_model_config():
    return ModelConfig(
        feature_channels=4,
        volume_channels=4,
        embedding_dim=8,
        hyper_hidden=8,
        sdf_hidden=[16],
        geo_feat_dim=2,
        n_heads=2,
        n_layers=1,
        grid_resolution=8,
    )


@pytest.fixture
def small_run_config(small_model_config):
    return RunConfig(
        seed=0,
        data=DataConfig(n_scenes=1, rig=RigConfig(n_views=4, img_size=16, focal_px=14.0, max_steps=64)),
        model=small_model_config,
        train=TrainConfig(
            iterations=3,
            rays_per_batch=16,
            samples_per_ray=8,
            n_source_views=3,
            log_every=1,
            checkpoint_every=2,
        ),
        eval=EvalConfig(mesh_resolution=16, iou_resolution=16, surface_samples=500, icp_iterations=5),
    )


@pytest.fixture
def small_config_file(tmp_path, small_run_config):
    """The small run configuration written as a JSON config file."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_run_config.model_dump()))
    return path


def finite_difference_errors(fn, x: torch.Tensor, n_coords: int = 40, eps: float = 1e-6, seed: int = 0) -> np.ndarray:
    """Relative errors between autograd and central differences of a scalar ``fn``.

    Checks ``n_coords`` randomly chosen input coordinates (all of them if fewer).
    """
    x = x.detach().clone().double()
    leaf = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(leaf), leaf)
    flat = x.reshape(-1)
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    errors = []
    for k in coords:
        plus, minus = flat.clone(), flat.clone()
        plus[k] += eps
        minus[k] -= eps
        with torch.no_grad():
            numeric = (float(fn(plus.reshape(x.shape))) - float(fn(minus.reshape(x.shape)))) / (2 * eps)
        analytic = float(grad.reshape(-1)[k])
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return np.asarray(errors)


def assert_gradients_match(errors: np.ndarray) -> None:
    assert np.mean(errors < 1e-4) >= 0.95, f"relative errors: {np.sort(errors)[-5:]}"
    assert np.all(errors < 1e-2), f"worst relative error {errors.max()}"


@pytest.fixture
def gradient_check():
    """Assert that autograd matches central differences for a scalar function of ``x``."""

    def check(fn, x, n_coords: int = 40, eps: float = 1e-6):
        assert_gradients_match(finite_difference_errors(fn, x, n_coords, eps))

    return check
