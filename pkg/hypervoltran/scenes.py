"""Procedural analytic-SDF scenes, camera rigs and ground-truth RGB-D rendering.

Camera convention (shared by every module): pinhole, the camera looks down +z in its
own frame, x points right and y points down in pixel space. A world point p maps to
pixel coordinates through ``K @ (R @ p + t)`` followed by the perspective divide.
Pixel (row i, column j) has its center at ``(u, w) = (j + 0.5, i + 0.5)``.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .config import CorruptionSpec, debug_print

PRIMITIVE_KINDS = ("sphere", "box", "torus")
WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera P = [K, R, t] mapping world points into one view."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("Camera rotation must be orthonormal with determinant +1")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError(f"Principal point ({cx}, {cy}) outside {self.width}x{self.height} image")

    @property
    def center(self) -> np.ndarray:
        """Camera focal point in world coordinates."""
        return -self.R.T @ self.t

    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix K [R | t]."""
        return self.K @ np.concatenate([self.R, self.t[:, None]], axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraPose":
        return cls(
            K=np.array(data["K"], dtype=np.float64),
            R=np.array(data["R"], dtype=np.float64),
            t=np.array(data["t"], dtype=np.float64),
            width=int(data["width"]),
            height=int(data["height"]),
        )


def look_at(eye: np.ndarray, target: np.ndarray, K: np.ndarray, width: int, height: int) -> CameraPose:
    """Build a pose at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, WORLD_UP)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("Viewing direction is parallel to the world up axis")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    return CameraPose(K=K, R=R, t=-R @ eye, width=width, height=height)


def ring_eye(azimuth_deg: float, elevation_deg: float, radius: float) -> np.ndarray:
    """Camera position on the viewing sphere; azimuth 0 sits on the -z axis."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return radius * np.array([math.cos(el) * math.sin(az), math.sin(el), -math.cos(el) * math.cos(az)])


def make_camera_ring(
    n_views: int,
    elevation_deg: float,
    radius: float,
    img_size: int,
    focal_px: float,
    azimuth_offset_deg: float = 0.0,
) -> List[CameraPose]:
    """Cameras uniformly spaced in azimuth on [0, 360), all looking at the origin.

    Args:
        n_views: Number of cameras (>= 1)
        elevation_deg: Shared elevation above the xz-plane
        radius: Distance from the origin, must exceed the unit bounding sphere
        img_size: Square image size in pixels
        focal_px: Focal length in pixels
        azimuth_offset_deg: Azimuth of view 0

    Returns:
        Poses in azimuth order
    """
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    if radius <= 1.0:
        raise ValueError(f"Camera radius {radius} places the camera inside the scene bound")
    if focal_px <= 0:
        raise ValueError(f"focal_px must be positive, got {focal_px}")
    K = np.array([[focal_px, 0.0, img_size / 2.0], [0.0, focal_px, img_size / 2.0], [0.0, 0.0, 1.0]])
    step = 360.0 / n_views
    return [
        look_at(ring_eye(azimuth_offset_deg + i * step, elevation_deg, radius), np.zeros(3), K, img_size, img_size)
        for i in range(n_views)
    ]


def pixel_rays(pose: CameraPose, px: np.ndarray, py: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions of rays through pixel centers."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    pix = np.stack([px + 0.5, py + 0.5, np.ones_like(px)], axis=-1)
    dirs_cam = pix @ np.linalg.inv(pose.K).T
    dirs = dirs_cam @ pose.R
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


@dataclass(frozen=True)
class Primitive:
    """One analytic shape. ``rotation`` maps the local frame to the world frame.

    Size parameters: sphere (radius,), box (half extents x, y, z),
    torus (major radius, minor radius) with the ring in the local xz-plane.
    """

    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]
    albedo: Tuple[float, float, float]
    rotation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"Unknown primitive kind {self.kind!r}")
        expected = {"sphere": 1, "box": 3, "torus": 2}[self.kind]
        if len(self.size) != expected or any(s <= 0 for s in self.size):
            raise ValueError(f"{self.kind} needs {expected} positive size parameters, got {self.size}")
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError(f"Albedo must lie in [0, 1], got {self.albedo}")

    @property
    def circumradius(self) -> float:
        if self.kind == "sphere":
            return float(self.size[0])
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        return float(self.size[0] + self.size[1])

    def sdf(self, points: np.ndarray) -> np.ndarray:
        local = (points - np.asarray(self.center)) @ np.asarray(self.rotation)
        if self.kind == "sphere":
            return np.linalg.norm(local, axis=-1) - self.size[0]
        if self.kind == "box":
            q = np.abs(local) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        ring = np.linalg.norm(local[..., [0, 2]], axis=-1) - self.size[0]
        return np.sqrt(ring**2 + local[..., 1] ** 2) - self.size[1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "size": list(self.size),
            "albedo": list(self.albedo),
            "rotation": [list(row) for row in self.rotation],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Primitive":
        return cls(
            kind=data["kind"],
            center=tuple(data["center"]),
            size=tuple(data["size"]),
            albedo=tuple(data["albedo"]),
            rotation=tuple(tuple(row) for row in data["rotation"]),
        )


@dataclass(frozen=True)
class AnalyticScene:
    """Min-union of exact primitive SDFs inside the unit bounding sphere."""

    primitives: Tuple[Primitive, ...] = ()
    scene_id: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        for prim in self.primitives:
            if np.linalg.norm(prim.center) + prim.circumradius > 1.0 + 1e-9:
                raise ValueError(f"Primitive {prim.kind} at {prim.center} leaves the unit bounding sphere")

    def to_dict(self) -> Dict[str, Any]:
        return {"scene_id": self.scene_id, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnalyticScene":
        return cls(
            primitives=tuple(Primitive.from_dict(p) for p in data["primitives"]),
            scene_id=data.get("scene_id", "scene"),
        )


def eval_scene(scene: AnalyticScene, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Signed distance and albedo of the nearest primitive at each point.

    Args:
        scene: The analytic scene
        points: Array of shape (..., 3)

    Returns:
        (sdf of shape (...,), albedo of shape (..., 3)); an empty scene is +inf everywhere
    """
    points = np.asarray(points, dtype=np.float64)
    batch = points.shape[:-1]
    if not scene.primitives:
        return np.full(batch, np.inf), np.zeros(batch + (3,))
    dists = np.stack([p.sdf(points) for p in scene.primitives], axis=0)
    nearest = np.argmin(dists, axis=0)
    albedos = np.array([p.albedo for p in scene.primitives], dtype=np.float64)
    return np.take_along_axis(dists, nearest[None], axis=0)[0], albedos[nearest]


def scene_normals(scene: AnalyticScene, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Unit SDF gradients by central differences of the exact field."""
    grads = np.zeros_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        grads[..., axis] = (eval_scene(scene, points + offset)[0] - eval_scene(scene, points - offset)[0]) / (2 * h)
    norm = np.linalg.norm(grads, axis=-1, keepdims=True)
    return grads / np.maximum(norm, 1e-12)


def random_scene(
    rng: np.random.Generator, n_primitives: int, scene_id: str = "scene"
) -> AnalyticScene:
    """Sample a scene of random spheres, boxes and tori inside the unit sphere."""
    prims = []
    for _ in range(n_primitives):
        kind = PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))]
        if kind == "sphere":
            size = (float(rng.uniform(0.2, 0.45)),)
        elif kind == "box":
            size = tuple(float(s) for s in rng.uniform(0.12, 0.3, size=3))
        else:
            minor = float(rng.uniform(0.06, 0.12))
            size = (float(rng.uniform(0.2, 0.35)), minor)
        circ = Primitive(kind, (0.0, 0.0, 0.0), size, (0.5, 0.5, 0.5)).circumradius
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        reach = max(0.0, 1.0 - circ - 1e-6)
        center = direction * rng.uniform(0.0, min(reach, 0.45))
        rotation = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        albedo = rng.uniform(0.2, 0.9, size=3)
        prims.append(
            Primitive(
                kind=kind,
                center=tuple(float(c) for c in center),
                size=size,
                albedo=tuple(float(a) for a in albedo),
                rotation=tuple(tuple(float(v) for v in row) for row in rotation),
            )
        )
    return AnalyticScene(primitives=tuple(prims), scene_id=scene_id)


def rotate_scene(scene: AnalyticScene, angle_deg: float) -> AnalyticScene:
    """Rotate every primitive about the world y axis."""
    a = math.radians(angle_deg)
    Ry = np.array([[math.cos(a), 0.0, math.sin(a)], [0.0, 1.0, 0.0], [-math.sin(a), 0.0, math.cos(a)]])
    prims = []
    for p in scene.primitives:
        center = Ry @ np.asarray(p.center)
        rotation = Ry @ np.asarray(p.rotation)
        prims.append(
            replace(
                p,
                center=tuple(float(c) for c in center),
                rotation=tuple(tuple(float(v) for v in row) for row in rotation),
            )
        )
    return AnalyticScene(primitives=tuple(prims), scene_id=scene.scene_id)


def intersect_unit_sphere(
    origins: np.ndarray, dirs: np.ndarray, radius: float = 1.0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray parameters where unit-direction rays enter and leave a centered sphere."""
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius**2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    return np.maximum(-b - root, 0.0), -b + root, hit


def sphere_trace_render(
    scene: AnalyticScene,
    pose: CameraPose,
    max_steps: int = 128,
    hit_eps: float = 1e-4,
    background: Sequence[float] = (1.0, 1.0, 1.0),
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth RGB, ray-distance depth and hit mask by sphere tracing.

    Shading is albedo times a Lambertian term lit by a headlight at the camera.
    Background pixels get ``background`` colour, depth 0 and mask 0.
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    if hit_eps <= 0:
        raise ValueError(f"hit_eps must be positive, got {hit_eps}")
    H, W = pose.height, pose.width
    py, px = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    origins, dirs = pixel_rays(pose, px.ravel(), py.ravel())
    t_near, t_far, in_bound = intersect_unit_sphere(origins, dirs)

    t = t_near.copy()
    active = in_bound.copy()
    hit = np.zeros_like(active)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d, _ = eval_scene(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d < hit_eps
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > t_far[idx]
        active[idx[done | escaped]] = False

    # polish hits with guarded Newton steps along the ray
    idx = np.nonzero(hit)[0]
    if idx.size:
        h = 1e-6
        for _ in range(4):
            p = origins[idx] + t[idx, None] * dirs[idx]
            f, _ = eval_scene(scene, p)
            fp = (eval_scene(scene, p + h * dirs[idx])[0] - eval_scene(scene, p - h * dirs[idx])[0]) / (2 * h)
            ok = np.abs(fp) > 1e-3
            t_new = np.where(ok, t[idx] - f / np.where(ok, fp, 1.0), t[idx])
            f_new, _ = eval_scene(scene, origins[idx] + t_new[:, None] * dirs[idx])
            better = np.abs(f_new) < np.abs(f)
            t[idx] = np.where(better, t_new, t[idx])

    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (H * W, 3)).copy()
    depth = np.zeros(H * W)
    if idx.size:
        p = origins[idx] + t[idx, None] * dirs[idx]
        _, albedo = eval_scene(scene, p)
        normals = scene_normals(scene, p)
        lambert = np.clip(np.sum(normals * -dirs[idx], axis=-1), 0.0, 1.0)
        rgb[idx] = albedo * lambert[:, None]
        depth[idx] = t[idx]
    debug_print(f"sphere traced {H}x{W} view: {int(hit.sum())} foreground pixels")
    return rgb.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W).astype(np.float64)


@dataclass
class ViewSet:
    """N RGB images, depth maps, masks and nominal poses of one object."""

    images: np.ndarray
    depths: np.ndarray
    masks: np.ndarray
    poses: List[CameraPose]
    scene_id: str = "scene"
    scene: Optional[AnalyticScene] = None
    corruption: Optional[CorruptionSpec] = None
    corruption_log: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.poses)
        if n < 1:
            raise ValueError("A view set needs at least one view")
        if not (len(self.images) == len(self.depths) == len(self.masks) == n):
            raise ValueError(
                f"Mismatched view counts: {len(self.images)} images, {len(self.depths)} depths, "
                f"{len(self.masks)} masks, {n} poses"
            )
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"Images must be N x H x W x 3, got {self.images.shape}")
        if np.any((self.depths > 0) != (self.masks > 0.5)):
            raise ValueError("Depth must be positive exactly on foreground pixels")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])


def render_viewset(scene: AnalyticScene, poses: Sequence[CameraPose], max_steps: int = 128, hit_eps: float = 1e-4) -> ViewSet:
    """Render every pose of a rig into a ground-truth view set."""
    renders = [sphere_trace_render(scene, pose, max_steps, hit_eps) for pose in poses]
    return ViewSet(
        images=np.stack([r[0] for r in renders]).astype(np.float32),
        depths=np.stack([r[1] for r in renders]).astype(np.float32),
        masks=np.stack([r[2] for r in renders]).astype(np.float32),
        poses=list(poses),
        scene_id=scene.scene_id,
        scene=scene,
    )


def evenly_spaced_indices(n_total: int, k: int) -> List[int]:
    """k indices spread over range(n_total), always starting at view 0."""
    if not 1 <= k <= n_total:
        raise ValueError(f"Cannot pick {k} of {n_total} views")
    return sorted({int(round(i * n_total / k)) % n_total for i in range(k)})


def select_views(vs: ViewSet, indices: Sequence[int]) -> ViewSet:
    """Subset of a view set, preserving order of ``indices``."""
    indices = list(indices)
    return ViewSet(
        images=vs.images[indices],
        depths=vs.depths[indices],
        masks=vs.masks[indices],
        poses=[vs.poses[i] for i in indices],
        scene_id=vs.scene_id,
        scene=vs.scene,
        corruption=vs.corruption,
        corruption_log=[entry for entry in vs.corruption_log if entry.get("view") in indices],
    )


def _rotation_homography_sample(pose: CameraPose, delta: np.ndarray, raster: np.ndarray, order: int, fill: float) -> np.ndarray:
    """Resample a raster as seen by the camera rotated in place by ``delta``."""
    H, W = raster.shape[:2]
    py, px = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pix = np.stack([px + 0.5, py + 0.5, np.ones_like(px, dtype=np.float64)], axis=-1).reshape(-1, 3)
    homography = pose.K @ delta.T @ np.linalg.inv(pose.K)
    src = pix @ homography.T
    src = src[:, :2] / src[:, 2:3]
    coords = [src[:, 1] - 0.5, src[:, 0] - 0.5]
    if raster.ndim == 2:
        out = ndimage.map_coordinates(raster, coords, order=order, mode="constant", cval=fill)
        return out.reshape(H, W)
    channels = [
        ndimage.map_coordinates(raster[..., c], coords, order=order, mode="constant", cval=fill)
        for c in range(raster.shape[-1])
    ]
    return np.stack(channels, axis=-1).reshape(H, W, -1)


def corrupt_views(vs: ViewSet, spec: CorruptionSpec) -> ViewSet:
    """Degrade views 1..N-1 while keeping the nominal poses.

    Stages, each skipped at zero magnitude: per-channel gain noise, an in-place
    camera rotation (resampled by the rotation homography), and rectangular
    occluders filled with a random colour. The applied parameters are recorded in
    ``corruption_log``.
    """
    images = vs.images.copy()
    depths = vs.depths.copy()
    masks = vs.masks.copy()
    log: List[Dict[str, Any]] = []
    rng = np.random.default_rng(spec.seed)
    H, W = vs.image_size
    for i in range(1, len(vs)):
        entry: Dict[str, Any] = {"view": i}
        if spec.color_jitter_sigma > 0:
            gain = 1.0 + rng.normal(0.0, spec.color_jitter_sigma, size=3)
            images[i] = np.clip(images[i] * gain, 0.0, 1.0)
            entry["gain"] = gain.tolist()
        if spec.pose_jitter_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.normal(0.0, spec.pose_jitter_deg)
            delta = Rotation.from_rotvec(math.radians(angle) * axis).as_matrix()
            images[i] = _rotation_homography_sample(vs.poses[i], delta, images[i], order=1, fill=1.0)
            depths[i] = _rotation_homography_sample(vs.poses[i], delta, depths[i], order=0, fill=0.0)
            masks[i] = (depths[i] > 0).astype(masks.dtype)
            entry["rotation_deg"] = float(angle)
            entry["rotation_axis"] = axis.tolist()
        rects = []
        for _ in range(spec.occluder_count):
            rh = int(rng.integers(max(1, H // 10), max(2, H * 3 // 10) + 1))
            rw = int(rng.integers(max(1, W // 10), max(2, W * 3 // 10) + 1))
            y0 = int(rng.integers(0, H - rh + 1))
            x0 = int(rng.integers(0, W - rw + 1))
            color = rng.uniform(0.0, 1.0, size=3)
            images[i, y0 : y0 + rh, x0 : x0 + rw] = color
            rects.append({"x0": x0, "y0": y0, "x1": x0 + rw, "y1": y0 + rh, "color": color.tolist()})
        if rects:
            entry["occluders"] = rects
        if len(entry) > 1:
            log.append(entry)
    return ViewSet(
        images=images,
        depths=depths,
        masks=masks,
        poses=list(vs.poses),
        scene_id=vs.scene_id,
        scene=vs.scene,
        corruption=None if spec.is_identity else spec,
        corruption_log=log,
    )
