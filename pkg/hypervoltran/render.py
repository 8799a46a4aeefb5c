"""Differentiable SDF volume rendering: rays, stratified samples, opacity and
transmittance compositing of colour and depth."""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .scenes import CameraPose, intersect_unit_sphere, pixel_rays

WHITE = (1.0, 1.0, 1.0)


@dataclass
class RayBatch:
    origins: torch.Tensor  # (R, 3)
    dirs: torch.Tensor  # (R, 3), unit length
    t_near: torch.Tensor  # (R,)
    t_far: torch.Tensor  # (R,)
    degenerate: torch.Tensor  # (R,) bool, ray misses the bounding sphere

    def __len__(self) -> int:
        return int(self.origins.shape[0])

    def points(self, t: torch.Tensor) -> torch.Tensor:
        return self.origins[:, None, :] + t[..., None] * self.dirs[:, None, :]


@dataclass
class PointQuery:
    """What the scene representation returns for a flat batch of points."""

    sdf: torch.Tensor  # (P,)
    colors: torch.Tensor  # (P, 3)
    gradients: Optional[torch.Tensor] = None  # (P, 3)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3) premultiplied, no background
    depth: torch.Tensor  # (R,)
    acc: torch.Tensor  # (R,)
    transmittance: torch.Tensor  # (R, M)
    alpha: torch.Tensor  # (R, M)
    t: Optional[torch.Tensor] = None
    sdf: Optional[torch.Tensor] = None
    gradients: Optional[torch.Tensor] = None
    degenerate: Optional[torch.Tensor] = None

    @property
    def weights(self) -> torch.Tensor:
        return self.transmittance * self.alpha

    def with_background(self, background: Sequence[float] = WHITE) -> torch.Tensor:
        bg = torch.as_tensor(background, dtype=self.color.dtype, device=self.color.device)
        return self.color + (1.0 - self.acc)[..., None] * bg


def generate_rays(
    pose: CameraPose, px, py, dtype: torch.dtype = torch.float32, radius: float = 1.0
) -> RayBatch:
    """Rays through pixel centers, clipped to the bounding sphere."""
    origins, dirs = pixel_rays(pose, np.asarray(px).reshape(-1), np.asarray(py).reshape(-1))
    t_near, t_far, hit = intersect_unit_sphere(origins, dirs, radius)
    degenerate = ~hit | (t_far - t_near <= 1e-9)
    # placeholder span keeps samples ordered on rays that render as background
    t_near = np.where(degenerate, 0.0, t_near)
    t_far = np.where(degenerate, 1.0, t_far)
    return RayBatch(
        torch.as_tensor(origins, dtype=dtype),
        torch.as_tensor(dirs, dtype=dtype),
        torch.as_tensor(t_near, dtype=dtype),
        torch.as_tensor(t_far, dtype=dtype),
        torch.as_tensor(degenerate),
    )


def stratified_samples(
    rays: RayBatch, n_samples: int, generator: Optional[torch.Generator] = None, stratified: bool = True
) -> torch.Tensor:
    """t_j = near + (j + u_j) * (far - near) / M, one uniform draw per stratum."""
    if n_samples < 2:
        raise ValueError(f"Need at least 2 samples per ray, got {n_samples}")
    shape = (len(rays), n_samples)
    if stratified:
        u = torch.rand(shape, generator=generator, dtype=rays.t_near.dtype)
    else:
        u = torch.full(shape, 0.5, dtype=rays.t_near.dtype)
    j = torch.arange(n_samples, dtype=rays.t_near.dtype)
    delta = (rays.t_far - rays.t_near) / n_samples
    return _strictly_increasing(rays.t_near[:, None] + (j[None, :] + u) * delta[:, None])


def _strictly_increasing(t: torch.Tensor) -> torch.Tensor:
    """Move each sample at least one ulp past its predecessor; ordered rows are unchanged."""
    cols = list(t.unbind(dim=-1))
    for k in range(1, len(cols)):
        cols[k] = torch.maximum(cols[k], torch.nextafter(cols[k - 1], torch.full_like(cols[k - 1], float("inf"))))
    return torch.stack(cols, dim=-1)


def sample_rays(
    pose: CameraPose,
    pixels: Tuple[Sequence[int], Sequence[int]],
    n_samples: int,
    generator: Optional[torch.Generator] = None,
    stratified: bool = True,
    dtype: torch.dtype = torch.float32,
) -> Tuple[RayBatch, torch.Tensor]:
    """Rays for (px, py) pixel index arrays and their sample parameters (R x M)."""
    px, py = pixels
    rays = generate_rays(pose, px, py, dtype)
    return rays, stratified_samples(rays, n_samples, generator, stratified)


def sdf_to_alpha(s: torch.Tensor, t: Optional[torch.Tensor], inv_std) -> torch.Tensor:
    """Discrete opacity between consecutive samples from the logistic CDF of k*s.

    alpha_j = clamp((Phi(k s_j) - Phi(k s_{j+1})) / Phi(k s_j), 0, 1), evaluated in
    log space; the last sample has no successor and gets alpha 0.
    """
    inv_std = torch.as_tensor(inv_std, dtype=s.dtype)
    if bool((inv_std <= 0).any()):
        raise ValueError(f"inv_std must be positive, got {inv_std}")
    if t is not None:
        if t.shape != s.shape:
            raise ValueError(f"SDF shape {tuple(s.shape)} does not match sample shape {tuple(t.shape)}")
        if bool((t[..., 1:] <= t[..., :-1]).any()):
            raise ValueError("Sample parameters must be strictly increasing along each ray")
    log_cdf = F.logsigmoid(inv_std * s)
    alpha = 1.0 - torch.exp(log_cdf[..., 1:] - log_cdf[..., :-1])
    alpha = alpha.clamp(0.0, 1.0)
    return torch.cat([alpha, torch.zeros_like(alpha[..., :1])], dim=-1)


def composite(alpha: torch.Tensor, rgb: torch.Tensor, t: torch.Tensor) -> RenderOutput:
    """Front-to-back compositing with T_j = prod_{k<j} (1 - alpha_k)."""
    if alpha.shape != t.shape or rgb.shape[: alpha.ndim] != alpha.shape:
        raise ValueError(
            f"Mismatched shapes: alpha {tuple(alpha.shape)}, rgb {tuple(rgb.shape)}, t {tuple(t.shape)}"
        )
    ones = torch.ones_like(alpha[..., :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    weights = transmittance * alpha
    if rgb.ndim == alpha.ndim:
        color = (weights * rgb).sum(dim=-1)
    else:
        color = (weights[..., None] * rgb).sum(dim=-2)
    return RenderOutput(
        color=color,
        depth=(weights * t).sum(dim=-1),
        acc=weights.sum(dim=-1),
        transmittance=transmittance,
        alpha=alpha,
        t=t,
    )


def render_pixels(
    query: Callable[[torch.Tensor], PointQuery],
    pose: CameraPose,
    pixels: Tuple[Sequence[int], Sequence[int]],
    n_samples: int,
    inv_std,
    generator: Optional[torch.Generator] = None,
    stratified: bool = True,
    dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    """Render pixels of ``pose`` through a point query (SDF + blended radiance)."""
    rays, t = sample_rays(pose, pixels, n_samples, generator, stratified, dtype)
    n_rays = len(rays)
    points = rays.points(t).reshape(-1, 3)
    result = query(points)
    sdf = result.sdf.reshape(n_rays, n_samples)
    alpha = sdf_to_alpha(sdf, t, inv_std)
    alpha = alpha * (~rays.degenerate)[:, None].to(alpha.dtype)
    out = composite(alpha, result.colors.reshape(n_rays, n_samples, 3), t)
    out.sdf = sdf
    out.degenerate = rays.degenerate
    if result.gradients is not None:
        out.gradients = result.gradients.reshape(n_rays, n_samples, 3)
    return out


def image_pixels(pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major (px, py) index arrays covering the whole image."""
    py, px = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    return px.ravel(), py.ravel()
