"""Neural encoding volume: projection, feature warping, variance fusion,
3D regularization and trilinear sampling."""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import debug_print
from .featnet import FeatureMap, stack_feature_maps
from .scenes import CameraPose

if TYPE_CHECKING:
    from .file_ops import FileOperations

DOWNSAMPLE_FACTOR = 4


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned lattice of vertices; vertex order is x-major (x, then y, then z)."""

    resolution: Tuple[int, int, int] = (32, 32, 32)
    bounds: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        resolution = tuple(int(r) for r in self.resolution)
        if len(resolution) != 3 or min(resolution) < 2:
            raise ValueError(f"Grid resolution must be >= 2 on each of 3 axes, got {self.resolution}")
        lo, hi = (tuple(float(v) for v in b) for b in self.bounds)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"Degenerate grid bounds {self.bounds}")
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "bounds", (lo, hi))

    @classmethod
    def cube(cls, resolution: int, bound: float = 1.0) -> "VoxelGrid":
        return cls((resolution,) * 3, ((-bound,) * 3, (bound,) * 3))

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.resolution))

    def bounds_numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.bounds[0]), np.asarray(self.bounds[1])

    def spacing(self) -> np.ndarray:
        lo, hi = self.bounds_numpy()
        return (hi - lo) / (np.asarray(self.resolution) - 1.0)

    def vertices_numpy(self) -> np.ndarray:
        lo, hi = self.bounds_numpy()
        axes = [np.linspace(lo[i], hi[i], self.resolution[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def vertices(self, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.vertices_numpy(), dtype=dtype, device=device)


@dataclass
class EncodingVolume:
    """Regularized feature volume G stored channel-first (C_vol x Rx x Ry x Rz)."""

    grid: VoxelGrid
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or tuple(self.data.shape[1:]) != self.grid.resolution:
            raise ValueError(f"Volume data {tuple(self.data.shape)} does not match grid {self.grid.resolution}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


@dataclass
class WarpedSamples:
    features: torch.Tensor  # (N, V, C), zero where invalid
    validity: torch.Tensor  # (N, V) bool


def _pose_tensors(pose: CameraPose, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    kw = {"dtype": like.dtype, "device": like.device}
    return torch.as_tensor(pose.K, **kw), torch.as_tensor(pose.R, **kw), torch.as_tensor(pose.t, **kw)


def project_point(
    pose: CameraPose, points: Union[np.ndarray, torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pixel coordinates (u, w), camera depth and in-frustum flag of world points.

    Accepts a single 3-vector or any (..., 3) batch.
    """
    p = torch.as_tensor(points)
    if not torch.is_floating_point(p):
        p = p.double()
    if p.shape[-1] != 3:
        raise ValueError(f"Points must have 3 coordinates, got shape {tuple(p.shape)}")
    K, R, t = _pose_tensors(pose, p)
    cam = p @ R.T + t
    depth = cam[..., 2]
    pix = cam @ K.T
    safe = torch.where(depth.abs() > 1e-12, pix[..., 2], torch.ones_like(depth))
    u = pix[..., 0] / safe
    w = pix[..., 1] / safe
    valid = (depth > 0) & (u >= 0) & (u < pose.width) & (w >= 0) & (w < pose.height)
    return u, w, depth, valid


def warp_points(
    maps: torch.Tensor, poses: Sequence[CameraPose], points: torch.Tensor, stride: int
) -> WarpedSamples:
    """Bilinearly sample N channel-first rasters at the projections of P points.

    ``maps`` is (N, C, H_f, W_f) at ``stride`` image pixels per cell; with stride 1
    the rasters are the images themselves.
    """
    if maps.shape[0] != len(poses):
        raise ValueError(f"Got {maps.shape[0]} rasters for {len(poses)} poses")
    n, c, hf, wf = maps.shape
    us, ws, valids = [], [], []
    for pose in poses:
        u, w, _, valid = project_point(pose, points)
        us.append(u)
        ws.append(w)
        valids.append(valid)
    u = torch.stack(us)
    w = torch.stack(ws)
    valid = torch.stack(valids)
    # cell centers sit at (k + 0.5) * stride image pixels
    gx = 2.0 * u / (stride * wf) - 1.0
    gy = 2.0 * w / (stride * hf) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(maps.dtype)
    grid = torch.where(valid[..., None], grid, torch.zeros_like(grid))
    sampled = F.grid_sample(maps, grid[:, None], mode="bilinear", padding_mode="border", align_corners=False)
    features = sampled[:, :, 0].permute(0, 2, 1)
    features = torch.where(valid[..., None], features, torch.zeros_like(features))
    return WarpedSamples(features, valid)


def warp_features(
    featmaps: Sequence[FeatureMap], poses: Sequence[CameraPose], grid: Union[VoxelGrid, torch.Tensor]
) -> WarpedSamples:
    """Warp every view's features to the grid vertices (or to explicit points)."""
    if len(featmaps) != len(poses):
        raise ValueError(f"Got {len(featmaps)} feature maps for {len(poses)} poses")
    maps = stack_feature_maps(featmaps)
    points = grid.vertices(maps.dtype, maps.device) if isinstance(grid, VoxelGrid) else grid
    return warp_points(maps, poses, points, featmaps[0].stride)


def variance_fuse(samples: WarpedSamples) -> torch.Tensor:
    """Population variance over valid views, per vertex and channel.

    Values are sorted across views before the reduction so the result does not
    depend on view order. Vertices seen by fewer than two views get zeros.
    """
    features, valid = samples.features, samples.validity
    n_views = features.shape[0]
    big = torch.finfo(features.dtype).max
    masked = torch.where(valid[..., None], features, torch.full_like(features, big))
    ordered, _ = torch.sort(masked, dim=0)
    count = valid.sum(dim=0)
    ranks = torch.arange(n_views, device=features.device)[:, None]
    in_set = (ranks < count[None, :])[..., None].expand_as(ordered)
    # shift by the smallest valid value; variance is shift invariant
    shifted = torch.where(in_set, ordered - ordered[:1], torch.zeros_like(ordered))
    denom = count.clamp(min=1).to(features.dtype)[:, None]
    mean = shifted.sum(dim=0) / denom
    centered = torch.where(in_set, shifted - mean[None], torch.zeros_like(shifted))
    var = (centered * centered).sum(dim=0) / denom
    return torch.where((count >= 2)[:, None], var, torch.zeros_like(var))


class ConvReLU3D(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1), nn.ReLU(inplace=True))


class CostRegNet(nn.Module):
    """Dense 3D encoder-decoder with additive skips; downsamples by 4."""

    def __init__(self, in_channels: int, out_channels: int, width: int = 8):
        super().__init__()
        self.out_channels = out_channels
        self.conv0 = ConvReLU3D(in_channels, width)
        self.conv1 = ConvReLU3D(width, 2 * width, stride=2)
        self.conv2 = ConvReLU3D(2 * width, 2 * width)
        self.conv3 = ConvReLU3D(2 * width, 4 * width, stride=2)
        self.conv4 = ConvReLU3D(4 * width, 4 * width)
        self.up1 = nn.Sequential(
            nn.ConvTranspose3d(4 * width, 2 * width, 3, stride=2, padding=1, output_padding=1), nn.ReLU(inplace=True)
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose3d(2 * width, width, 3, stride=2, padding=1, output_padding=1), nn.ReLU(inplace=True)
        )
        self.head = nn.Conv3d(width, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        conv0 = self.conv0(x)
        conv2 = self.conv2(self.conv1(conv0))
        x = self.conv4(self.conv3(conv2))
        x = conv2 + self.up1(x)
        x = conv0 + self.up2(x)
        return self.head(x)


def regularize(raw_cost: torch.Tensor, grid: VoxelGrid, net: CostRegNet) -> EncodingVolume:
    """Turn the raw V x C cost (or C x Rx x Ry x Rz) into the encoding volume G."""
    bad = [r for r in grid.resolution if r % DOWNSAMPLE_FACTOR]
    if bad:
        raise ValueError(f"Grid resolution {grid.resolution} must be divisible by {DOWNSAMPLE_FACTOR}")
    if raw_cost.ndim == 2:
        if raw_cost.shape[0] != grid.n_vertices:
            raise ValueError(f"Raw cost has {raw_cost.shape[0]} rows for {grid.n_vertices} vertices")
        volume = raw_cost.T.reshape(raw_cost.shape[1], *grid.resolution)
    elif raw_cost.ndim == 4 and tuple(raw_cost.shape[1:]) == grid.resolution:
        volume = raw_cost
    else:
        raise ValueError(f"Raw cost shape {tuple(raw_cost.shape)} does not match grid {grid.resolution}")
    return EncodingVolume(grid, net(volume[None])[0])


def sample_volume(G: EncodingVolume, points: Union[np.ndarray, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Trilinear features (P x C_vol) at points; out-of-bounds points are clamped and flagged."""
    p = torch.as_tensor(points, dtype=G.data.dtype, device=G.data.device)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    lo = torch.as_tensor(G.grid.bounds[0], dtype=p.dtype, device=p.device)
    hi = torch.as_tensor(G.grid.bounds[1], dtype=p.dtype, device=p.device)
    normalized = 2.0 * (p - lo) / (hi - lo) - 1.0
    in_bounds = ((normalized >= -1.0) & (normalized <= 1.0)).all(dim=-1)
    normalized = normalized.clamp(-1.0, 1.0)
    # grid_sample reads (x, y, z) as (last, middle, first) volume axes
    coords = normalized.flip(-1).reshape(1, -1, 1, 1, 3)
    sampled = F.grid_sample(G.data[None], coords, mode="bilinear", padding_mode="border", align_corners=True)
    features = sampled.reshape(G.channels, -1).T
    if single:
        return features[0], in_bounds[0]
    return features, in_bounds


def dump_volume_slices(
    ops: "FileOperations", raw_cost: torch.Tensor, G: EncodingVolume, prefix: str = "volume"
) -> Dict[str, str]:
    """Write the channel-mean central z slices of the raw cost and of G as PFM rasters."""
    res = G.grid.resolution
    raw = raw_cost.T.reshape(-1, *res) if raw_cost.ndim == 2 else raw_cost
    written = {}
    for name, vol in (("raw_cost", raw), ("encoding", G.data)):
        mid = vol.shape[-1] // 2
        plane = vol[..., mid].mean(dim=0).detach().cpu().double().numpy()
        written[name] = str(ops.write_pfm(f"{prefix}_{name}_z{mid:03d}.pfm", plane.T))
    debug_print(f"dumped volume slices: {written}")
    return written


def build_encoding_volume(
    maps: torch.Tensor,
    poses: Sequence[CameraPose],
    grid: VoxelGrid,
    net: CostRegNet,
    stride: int,
    vertices: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, EncodingVolume]:
    """Raw variance cost and regularized volume for a stack of feature maps."""
    if vertices is None:
        vertices = grid.vertices(maps.dtype, maps.device)
    samples = warp_points(maps, poses, vertices, stride)
    raw = variance_fuse(samples)
    debug_print(f"cost volume: {int(samples.validity.any(dim=0).sum())}/{grid.n_vertices} vertices seen")
    return raw, regularize(raw, grid, net)

