"""Mesh extraction and geometric evaluation: marching cubes, ICP, Chamfer-L2,
F-score, voxel IoU and PSNR."""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import mcubes
import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from .config import EvalConfig, debug_print
from .costvol import VoxelGrid

DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("Triangle indices out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("Need exactly one colour per vertex")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def signed_volume(self) -> float:
        """Enclosed volume; positive when triangles wind outward."""
        v = self.vertices[self.triangles]
        return float(np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) / 6.0)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray, scale: float = 1.0) -> "TriMesh":
        return TriMesh(scale * self.vertices @ rotation.T + translation, self.triangles.copy(), self.colors)


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class IcpResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    errors: List[float] = field(default_factory=list)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


class MetricsReport(BaseModel):
    """Per-scene geometric and photometric scores with the conventions used."""

    scene_id: str = ""
    chamfer_l2: float = Field(ge=0.0)
    fscore: float = Field(ge=0.0, le=1.0)
    iou: float = Field(ge=0.0, le=1.0)
    psnr: Optional[float] = None
    fscore_threshold: float
    iou_resolution: int
    n_pred_points: int
    n_gt_points: int
    icp_scale: float = 1.0
    conventions: Dict[str, str] = Field(
        default_factory=lambda: {
            "chamfer": "sum of the two directed mean squared nearest-neighbour distances",
            "fscore": "harmonic mean of precision/recall at threshold, in [0, 1]",
            "iou": "ray-parity voxelisation on a shared PCA-aligned grid",
            "alignment": "ICP (rigid + uniform scale) of prediction onto ground truth",
            "psnr": "10*log10(1/MSE) on [0, 1] images; inf when identical",
        }
    )


def evaluate_field(sdf_eval: Callable[[np.ndarray], np.ndarray], grid: VoxelGrid, chunk: int = 65536) -> np.ndarray:
    """Evaluate an SDF callable on every grid node, shaped (Rx, Ry, Rz)."""
    points = grid.vertices_numpy()
    values = np.concatenate(
        [np.asarray(sdf_eval(points[i : i + chunk]), dtype=np.float64).reshape(-1) for i in range(0, len(points), chunk)]
    )
    return values.reshape(grid.resolution)


def marching_cubes(sdf_eval: Callable[[np.ndarray], np.ndarray], grid: VoxelGrid, iso: float = 0.0) -> TriMesh:
    """Triangulate the iso level set of an SDF sampled on the grid nodes.

    An SDF without a sign change yields an empty mesh.
    """
    if min(grid.resolution) < 8:
        raise ValueError(f"Marching cubes needs at least 8 nodes per axis, got {grid.resolution}")
    field_values = evaluate_field(sdf_eval, grid)
    if not (field_values.min() < iso < field_values.max()):
        return TriMesh.empty()
    # mcubes treats values above the iso level as inside
    vertices, triangles = mcubes.marching_cubes(-field_values, -iso)
    lo, hi = grid.bounds_numpy()
    scale = (hi - lo) / (np.asarray(grid.resolution, dtype=np.float64) - 1.0)
    mesh = TriMesh(vertices * scale + lo, triangles.astype(np.int64))
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    debug_print(f"marching cubes: {len(mesh.vertices)} vertices, {int(keep.sum())} triangles")
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("Cannot sample the surface of an empty mesh")
    if n < 1:
        raise ValueError(f"Need at least one sample, got {n}")
    areas = mesh.triangle_areas()
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random((2, n))
    s = np.sqrt(r1)
    v = mesh.vertices[mesh.triangles[faces]]
    points = (1.0 - s)[:, None] * v[:, 0] + (s * (1.0 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]
    return PointCloud(points)


def _similarity_fit(src: np.ndarray, dst: np.ndarray, with_scale: bool) -> Tuple[np.ndarray, np.ndarray, float]:
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(xd.T @ xs / len(src))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = U @ D @ Vt
    scale = 1.0
    var_s = np.mean(np.sum(xs * xs, axis=1))
    if with_scale and var_s > 0:
        scale = float(np.trace(np.diag(S) @ D) / var_s)
    return R, mu_d - scale * R @ mu_s, scale


def _symmetric_error(points: np.ndarray, tgt: np.ndarray, tgt_tree: cKDTree) -> Tuple[float, np.ndarray]:
    d_st, idx = tgt_tree.query(points)
    d_ts, _ = cKDTree(points).query(tgt)
    return float(np.mean(d_st**2) + np.mean(d_ts**2)), idx


def icp_align(src: PointCloud, tgt: PointCloud, iters: int = 30, with_scale: bool = True) -> IcpResult:
    """Align ``src`` onto ``tgt`` with nearest-neighbour ICP.

    Each iteration matches every source point to its nearest target point and
    solves the least-squares similarity (Umeyama). A step is accepted only if the
    symmetric Chamfer error does not increase, so the error trace is
    non-increasing; the identity is returned when no step improves.
    """
    if len(src) < 3 or len(tgt) < 3:
        raise ValueError("ICP needs at least 3 points per cloud")
    tree = cKDTree(tgt.points)
    result = IcpResult(np.eye(3), np.zeros(3), 1.0)
    error, idx = _symmetric_error(src.points, tgt.points, tree)
    result.errors.append(error)
    for _ in range(iters):
        R, t, s = _similarity_fit(src.points, tgt.points[idx], with_scale)
        candidate = IcpResult(R, t, s)
        new_error, new_idx = _symmetric_error(candidate.apply(src.points), tgt.points, tree)
        if new_error > error:
            break
        improvement = error - new_error
        result = IcpResult(R, t, s, result.errors + [new_error])
        error, idx = new_error, new_idx
        if improvement <= 1e-14:
            break
    return result


def chamfer_l2(a: PointCloud, b: PointCloud) -> float:
    """Sum of the two directed mean squared nearest-neighbour distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two nonempty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def fscore(a: PointCloud, b: PointCloud, thresh: float = 0.05) -> float:
    """F-score of ``a`` (prediction) against ``b`` (reference) at ``thresh``."""
    if thresh <= 0:
        raise ValueError(f"F-score threshold must be positive, got {thresh}")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    precision = float(np.mean(d_ab <= thresh))
    recall = float(np.mean(d_ba <= thresh))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _shared_frame(meshes: List[TriMesh]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid, principal axes and symmetric half extents of all vertices."""
    pts = np.concatenate([m.vertices for m in meshes if not m.is_empty])
    center = pts.mean(axis=0)
    _, axes = np.linalg.eigh(np.cov((pts - center).T))
    axes = axes[:, ::-1]
    local = (pts - center) @ axes
    half = np.abs(local).max(axis=0) * 1.02 + 1e-9
    return center, axes, half


def _voxelize(mesh: TriMesh, centers: List[np.ndarray], chunk: int = 256) -> np.ndarray:
    """Inside test by parity of crossings along +z through every voxel column."""
    cx, cy, cz = centers
    res = (len(cx), len(cy), len(cz))
    # tiny irrational offset keeps columns off shared triangle edges
    xs, ys = np.meshgrid(cx + 1e-7 * math.pi, cy + 1e-7 * math.e, indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    counts = np.zeros((xs.size, res[2] + 1), dtype=np.int64)
    tri = mesh.vertices[mesh.triangles]
    for start in range(0, len(tri), chunk):
        t = tri[start : start + chunk]
        x0, y0, z0 = t[:, 0, 0], t[:, 0, 1], t[:, 0, 2]
        x1, y1, z1 = t[:, 1, 0], t[:, 1, 1], t[:, 1, 2]
        x2, y2, z2 = t[:, 2, 0], t[:, 2, 1], t[:, 2, 2]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        ok = np.abs(denom) > 1e-18
        denom = np.where(ok, denom, 1.0)
        dx = xs[:, None] - x2[None]
        dy = ys[:, None] - y2[None]
        l0 = ((y1 - y2)[None] * dx + (x2 - x1)[None] * dy) / denom[None]
        l1 = ((y2 - y0)[None] * dx + (x0 - x2)[None] * dy) / denom[None]
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & ok[None]
        col, tri_idx = np.nonzero(inside)
        if col.size == 0:
            continue
        z = l0[col, tri_idx] * z0[tri_idx] + l1[col, tri_idx] * z1[tri_idx] + l2[col, tri_idx] * z2[tri_idx]
        np.add.at(counts, (col, np.searchsorted(cz, z)), 1)
    above = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1]
    return (above[:, 1:] % 2 == 1).reshape(res)


def iou_voxels(mesh_a: TriMesh, mesh_b: TriMesh, resolution: int = 64) -> float:
    """Volumetric intersection-over-union of two closed meshes.

    Both meshes are voxelised on one grid aligned with the principal axes of their
    joint vertex set, so the score does not depend on a shared rigid motion.
    """
    if resolution < 16:
        raise ValueError(f"IoU resolution must be >= 16, got {resolution}")
    meshes = [m for m in (mesh_a, mesh_b) if not m.is_empty]
    if not meshes:
        return 0.0
    center, axes, half = _shared_frame(meshes)
    centers = [np.linspace(-h, h, resolution + 1)[:-1] + h / resolution for h in half]
    occ = []
    for mesh in (mesh_a, mesh_b):
        if mesh.is_empty:
            occ.append(np.zeros((resolution,) * 3, dtype=bool))
            continue
        local = TriMesh((mesh.vertices - center) @ axes, mesh.triangles)
        occ.append(_voxelize(local, centers))
    union = np.logical_or(*occ).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(*occ).sum() / union)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"Shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def evaluate_meshes(
    pred: TriMesh,
    gt: TriMesh,
    config: EvalConfig,
    scene_id: str = "",
    psnr_value: Optional[float] = None,
) -> MetricsReport:
    """ICP-align the prediction onto the ground truth, then score it."""
    gt_cloud = sample_surface(gt, config.surface_samples, config.sample_seed)
    if pred.is_empty:
        return MetricsReport(
            scene_id=scene_id,
            chamfer_l2=float("inf"),
            fscore=0.0,
            iou=0.0,
            psnr=psnr_value,
            fscore_threshold=config.fscore_threshold,
            iou_resolution=config.iou_resolution,
            n_pred_points=0,
            n_gt_points=len(gt_cloud),
        )
    pred_cloud = sample_surface(pred, config.surface_samples, config.sample_seed)
    icp = icp_align(pred_cloud, gt_cloud, config.icp_iterations, config.icp_with_scale)
    aligned = PointCloud(icp.apply(pred_cloud.points))
    return MetricsReport(
        scene_id=scene_id,
        chamfer_l2=chamfer_l2(aligned, gt_cloud),
        fscore=fscore(aligned, gt_cloud, config.fscore_threshold),
        iou=iou_voxels(pred.transformed(icp.rotation, icp.translation, icp.scale), gt, config.iou_resolution),
        psnr=psnr_value,
        fscore_threshold=config.fscore_threshold,
        iou_resolution=config.iou_resolution,
        n_pred_points=len(aligned),
        n_gt_points=len(gt_cloud),
        icp_scale=icp.scale,
    )
