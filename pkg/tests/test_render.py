import numpy as np
import pytest
import torch

from hypervoltran.render import (
    PointQuery,
    RayBatch,
    RenderOutput,
    composite,
    generate_rays,
    image_pixels,
    render_pixels,
    sample_rays,
    sdf_to_alpha,
    stratified_samples,
)
from hypervoltran.scenes import intersect_unit_sphere, make_camera_ring, pixel_rays


def _sphere_query(radius: float = 0.5, color=(0.2, 0.4, 0.6)):
    def query(points: torch.Tensor) -> PointQuery:
        rgb = torch.as_tensor(color, dtype=points.dtype).expand(points.shape[0], 3)
        return PointQuery(points.norm(dim=-1) - radius, rgb)

    return query


@pytest.fixture
def front_pose():
    return make_camera_ring(1, 20.0, 2.2, 64, 56.0)[0]


def test_stratified_samples_stay_in_their_strata(front_pose):
    rays = generate_rays(front_pose, np.arange(20, 40), np.full(20, 32), torch.float64)
    gen = torch.Generator().manual_seed(0)
    t = stratified_samples(rays, 16, gen)
    assert t.shape == (20, 16)
    delta = ((rays.t_far - rays.t_near) / 16)[:, None]
    j = torch.arange(16, dtype=torch.float64)[None]
    lower = rays.t_near[:, None] + j * delta
    assert bool((t >= lower).all())
    assert bool((t <= lower + delta).all())
    assert bool((t[:, 1:] > t[:, :-1]).all())


def test_stratified_samples_are_seeded(front_pose):
    rays = generate_rays(front_pose, np.arange(4), np.arange(4))
    a = stratified_samples(rays, 8, torch.Generator().manual_seed(3))
    b = stratified_samples(rays, 8, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_midpoint_samples(front_pose):
    rays = generate_rays(front_pose, np.array([32]), np.array([32]), torch.float64)
    t = stratified_samples(rays, 4, stratified=False)
    span = rays.t_far - rays.t_near
    expected = rays.t_near + span * torch.tensor([0.125, 0.375, 0.625, 0.875], dtype=torch.float64)
    torch.testing.assert_close(t[0], expected)


def test_too_few_samples_raise(front_pose):
    rays = generate_rays(front_pose, np.array([0]), np.array([0]))
    with pytest.raises(ValueError):
        stratified_samples(rays, 1)


def test_rays_are_clipped_to_the_bounding_sphere(front_pose):
    rays, t = sample_rays(front_pose, (np.array([32, 0]), np.array([32, 0])), 8, dtype=torch.float64)
    assert rays.degenerate.tolist() == [False, True]
    torch.testing.assert_close(rays.dirs.norm(dim=-1), torch.ones(2, dtype=torch.float64))
    hit_points = rays.points(rays.t_near[:, None])[0, 0]
    assert float(hit_points.norm()) == pytest.approx(1.0)
    assert float(rays.t_near[1]) == 0.0
    assert float(rays.t_far[1]) == 1.0
    assert t.shape == (2, 8)


def test_alpha_range_and_last_sample():
    gen = torch.Generator().manual_seed(1)
    s = torch.randn(10, 12, generator=gen, dtype=torch.float64)
    t = torch.cumsum(torch.rand(10, 12, generator=gen, dtype=torch.float64) + 0.01, dim=-1)
    alpha = sdf_to_alpha(s, t, 30.0)
    assert bool(((alpha >= 0) & (alpha <= 1)).all())
    assert bool((alpha[:, -1] == 0).all())


def test_alpha_matches_logistic_cdf_formula():
    s = torch.tensor([[0.3, 0.1, -0.05, -0.2, -0.1]], dtype=torch.float64)
    k = 20.0
    alpha = sdf_to_alpha(s, None, k)
    cdf = torch.sigmoid(k * s)
    expected = ((cdf[:, :-1] - cdf[:, 1:]) / cdf[:, :-1]).clamp(0.0, 1.0)
    torch.testing.assert_close(alpha[:, :-1], expected, rtol=1e-12, atol=1e-12)
    # the sdf rises again between the last two samples
    assert float(alpha[0, 3]) == 0.0


def test_alpha_rejects_bad_input():
    s = torch.zeros(1, 3)
    with pytest.raises(ValueError):
        sdf_to_alpha(s, torch.tensor([[0.0, 0.5, 1.0]]), 0.0)
    with pytest.raises(ValueError):
        sdf_to_alpha(s, torch.tensor([[0.0, 0.5, 0.5]]), 10.0)
    with pytest.raises(ValueError):
        sdf_to_alpha(s, torch.tensor([[0.0, 0.5]]), 10.0)


def test_composite_matches_prefix_product_loop():
    rng = np.random.default_rng(2)
    alpha = rng.uniform(0.0, 0.6, size=(4, 7))
    rgb = rng.uniform(size=(4, 7, 3))
    t = np.cumsum(rng.uniform(0.05, 0.2, size=(4, 7)), axis=-1)
    out = composite(torch.as_tensor(alpha), torch.as_tensor(rgb), torch.as_tensor(t))
    for r in range(4):
        trans = 1.0
        color = np.zeros(3)
        depth = 0.0
        for j in range(7):
            w = trans * alpha[r, j]
            color += w * rgb[r, j]
            depth += w * t[r, j]
            trans *= 1.0 - alpha[r, j]
        np.testing.assert_allclose(out.color[r].numpy(), color, atol=1e-12)
        assert float(out.depth[r]) == pytest.approx(depth, abs=1e-12)
    assert float(out.transmittance[0, 0]) == 1.0


def test_weights_sum_to_accumulated_opacity():
    rng = np.random.default_rng(3)
    alpha = torch.as_tensor(rng.uniform(size=(6, 9)))
    t = torch.arange(9, dtype=torch.float64).expand(6, 9)
    out = composite(alpha, torch.zeros(6, 9, 3, dtype=torch.float64), t)
    expected = 1.0 - torch.prod(1.0 - alpha, dim=-1)
    torch.testing.assert_close(out.weights.sum(dim=-1), expected, rtol=0, atol=1e-9)
    torch.testing.assert_close(out.acc, expected, rtol=0, atol=1e-9)


def test_composite_accepts_scalar_channels():
    alpha = torch.tensor([[0.5, 0.5]])
    out = composite(alpha, torch.tensor([[2.0, 4.0]]), torch.tensor([[1.0, 2.0]]))
    assert float(out.color[0]) == pytest.approx(0.5 * 2.0 + 0.25 * 4.0)
    with pytest.raises(ValueError):
        composite(alpha, torch.zeros(1, 3, 3), torch.tensor([[1.0, 2.0]]))


def test_background_fill():
    out = RenderOutput(
        color=torch.tensor([[0.2, 0.1, 0.0]]),
        depth=torch.zeros(1),
        acc=torch.tensor([0.25]),
        transmittance=torch.ones(1, 2),
        alpha=torch.zeros(1, 2),
    )
    torch.testing.assert_close(out.with_background(), torch.tensor([[0.95, 0.85, 0.75]]))
    torch.testing.assert_close(out.with_background((0.0, 0.0, 0.0)), out.color)


def test_sphere_depth_is_recovered(front_pose):
    """A sharp logistic density puts the expected depth on the analytic surface."""
    px, py = image_pixels(front_pose)
    origins, dirs = pixel_rays(front_pose, px, py)
    _, _, inner_hit = intersect_unit_sphere(origins, dirs, 0.4)
    chosen = np.flatnonzero(inner_hit)[:100]
    assert len(chosen) == 100
    n_samples = 128
    out = render_pixels(
        _sphere_query(0.5),
        front_pose,
        (px[chosen], py[chosen]),
        n_samples,
        inv_std=200.0,
        generator=torch.Generator().manual_seed(0),
        dtype=torch.float64,
    )
    expected, _, _ = intersect_unit_sphere(origins[chosen], dirs[chosen], 0.5)
    near, far, _ = intersect_unit_sphere(origins[chosen], dirs[chosen], 1.0)
    tolerance = 2.0 * (far - near) / n_samples
    assert np.all(np.abs(out.depth.numpy() - expected) < tolerance)
    assert bool((out.acc > 0.99).all())
    np.testing.assert_allclose(out.with_background().numpy(), np.tile([0.2, 0.4, 0.6], (100, 1)), atol=0.02)


def test_degenerate_ray_renders_background(front_pose):
    out = render_pixels(_sphere_query(0.5), front_pose, (np.array([0, 32]), np.array([0, 32])), 16, 50.0)
    assert out.degenerate.tolist() == [True, False]
    assert float(out.acc[0]) == 0.0
    assert torch.equal(out.with_background()[0], torch.ones(3))
    assert float(out.acc[1]) > 0.9


def test_render_keeps_query_gradients(front_pose):
    def query(points):
        normals = points / points.norm(dim=-1, keepdim=True)
        return PointQuery(points.norm(dim=-1) - 0.5, torch.ones(points.shape[0], 3), normals)

    out = render_pixels(query, front_pose, (np.array([32]), np.array([30])), 8, 50.0)
    assert out.gradients.shape == (1, 8, 3)
    assert out.sdf.shape == (1, 8)


def test_image_pixels_are_row_major():
    pose = make_camera_ring(1, 0.0, 2.5, 5, 4.0)[0]
    px, py = image_pixels(pose)
    assert px.tolist()[:6] == [0, 1, 2, 3, 4, 0]
    assert py.tolist()[:6] == [0, 0, 0, 0, 0, 1]
    assert len(px) == 25


def test_color_gradient_wrt_sdf(float64, gradient_check):
    t = torch.linspace(0.0, 1.0, 12).expand(3, 12)
    rgb = torch.rand(3, 12, 3)
    base = torch.linspace(0.4, -0.4, 12).expand(3, 12) + 0.05 * torch.arange(3)[:, None]

    def loss(s):
        out = composite(sdf_to_alpha(s, t, 5.0), rgb, t)
        return out.color.sum() + out.depth.sum()

    gradient_check(loss, base)


def test_sample_rays_through_the_center_pixel():
    pose = make_camera_ring(1, 0.0, 2.0, 15, 14.0)[0]
    gen = torch.Generator().manual_seed(0)
    rays, t = sample_rays(pose, (np.array([7]), np.array([7])), 16, gen, dtype=torch.float64)
    assert float(rays.t_near[0]) == pytest.approx(1.0, abs=1e-9)
    assert float(rays.t_far[0]) == pytest.approx(3.0, abs=1e-9)
    assert bool((t >= 1.0 - 1e-9).all()) and bool((t <= 3.0 + 1e-9).all())
    assert bool((t[:, 1:] > t[:, :-1]).all())


def test_samples_stay_strictly_ordered_on_tiny_spans():
    n = 3
    rays = RayBatch(
        torch.zeros(n, 3),
        torch.tensor([[0.0, 0.0, 1.0]] * n),
        torch.full((n,), 1.0),
        torch.full((n,), 1.0 + 1e-6),
        torch.zeros(n, dtype=torch.bool),
    )
    for stratified in (True, False):
        t = stratified_samples(rays, 64, torch.Generator().manual_seed(0), stratified)
        assert bool((t[:, 1:] > t[:, :-1]).all())
        assert float(t.max()) < 1.0 + 1e-4
        alpha = sdf_to_alpha(torch.zeros_like(t), t, 10.0)
        assert alpha.shape == t.shape


def test_colour_gradient_wrt_inv_std(float64, gradient_check):
    torch.manual_seed(6)
    t = torch.linspace(0.0, 1.0, 16).expand(2, 16)
    s = torch.linspace(0.3, -0.3, 16).expand(2, 16) + torch.tensor([[0.0], [0.05]])
    rgb = torch.rand(2, 16, 3)

    def loss(inv_std):
        out = composite(sdf_to_alpha(s, t, inv_std), rgb, t)
        return out.color.sum() + out.depth.sum() + out.acc.sum()

    gradient_check(loss, torch.tensor(8.0))
