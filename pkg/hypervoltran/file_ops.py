import json
import os
import csv
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import trimesh
from PIL import Image

from .config import CorruptionSpec, debug_print
from .errors import DatasetLoadError
from .meshmetrics import TriMesh
from .scenes import AnalyticScene, CameraPose, ViewSet

MANIFEST_NAME = "meta.json"
LOCK_NAME = ".hypervoltran.lock"
DATASET_FORMAT = 1


class FileOperations:
    def __init__(self, root_path):
        """Initialize file operations with a root path.

        Args:
            root_path: The directory every relative path is resolved against
        """
        self.root_path = Path(os.path.abspath(root_path))
        debug_print(f"📁 FileOperations initialized with root path: {self.root_path}")

    def resolve(self, file_path) -> Path:
        path = Path(file_path)
        if not path.is_absolute():
            path = self.root_path / path
        return path

    def _ensure_parent(self, file_path) -> Path:
        path = self.resolve(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_png(self, file_path, rgb: np.ndarray) -> Path:
        """Write an H x W x 3 image in [0, 1] as 8-bit lossless PNG."""
        path = self._ensure_parent(file_path)
        data = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data).save(path, format="PNG")
        return path

    def read_png(self, file_path) -> np.ndarray:
        path = self.resolve(file_path)
        try:
            with Image.open(path) as img:
                data = np.asarray(img.convert("RGB"), dtype=np.float32)
        except (OSError, ValueError) as e:
            raise DatasetLoadError(path, str(e)) from e
        return data / 255.0

    def write_pfm(self, file_path, raster: np.ndarray) -> Path:
        """Write a float raster (H x W or H x W x 3) as little-endian PFM."""
        path = self._ensure_parent(file_path)
        data = np.asarray(raster, dtype="<f4")
        if data.ndim == 2:
            header = "Pf"
        elif data.ndim == 3 and data.shape[2] == 3:
            header = "PF"
        else:
            raise ValueError(f"PFM rasters must be H x W or H x W x 3, got {data.shape}")
        with open(path, "wb") as f:
            f.write(f"{header}\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode("ascii"))
            f.write(np.ascontiguousarray(np.flipud(data)).tobytes())
        return path

    def read_pfm(self, file_path) -> np.ndarray:
        path = self.resolve(file_path)
        try:
            with open(path, "rb") as f:
                header = f.readline().decode("ascii").strip()
                if header not in ("PF", "Pf"):
                    raise ValueError(f"bad PFM header {header!r}")
                width, height = (int(v) for v in f.readline().decode("ascii").split())
                scale = float(f.readline().decode("ascii").strip())
                dtype = "<f4" if scale < 0 else ">f4"
                channels = 3 if header == "PF" else 1
                data = np.frombuffer(f.read(), dtype=dtype)
            expected = width * height * channels
            if data.size != expected:
                raise ValueError(f"expected {expected} floats, found {data.size}")
        except (OSError, ValueError, UnicodeDecodeError) as e:
            raise DatasetLoadError(path, str(e)) from e
        shape = (height, width) if channels == 1 else (height, width, 3)
        return np.flipud(data.reshape(shape)).astype(np.float32)

    def write_json(self, file_path, payload: Any) -> Path:
        path = self._ensure_parent(file_path)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def read_json(self, file_path) -> Any:
        path = self.resolve(file_path)
        try:
            with open(path, "r") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetLoadError(path, str(e)) from e

    def write_csv(self, file_path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        path = self._ensure_parent(file_path)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    def read_csv(self, file_path) -> List[Dict[str, str]]:
        path = self.resolve(file_path)
        try:
            with open(path, "r", newline="") as f:
                return list(csv.DictReader(f))
        except OSError as e:
            raise DatasetLoadError(path, str(e)) from e

    def find_datasets(self) -> List[Path]:
        """Directories below the root that hold a dataset manifest, sorted."""
        return sorted(p.parent for p in self.root_path.rglob(MANIFEST_NAME))

    @contextmanager
    def lock(self) -> Iterator[Path]:
        """Exclusive lock on the root directory for the duration of a write."""
        self.root_path.mkdir(parents=True, exist_ok=True)
        lock_path = self.root_path / LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise RuntimeError(f"Output directory {self.root_path} is locked by another run ({lock_path})") from e
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield lock_path
        finally:
            lock_path.unlink(missing_ok=True)


def write_dataset(vs: ViewSet, directory) -> Path:
    """Write a view set: meta.json, rgb_XXX.png, depth_XXX.pfm, mask_XXX.pfm."""
    ops = FileOperations(directory)
    views = []
    for i, pose in enumerate(vs.poses):
        names = {"rgb": f"rgb_{i:03d}.png", "depth": f"depth_{i:03d}.pfm", "mask": f"mask_{i:03d}.pfm"}
        ops.write_png(names["rgb"], vs.images[i])
        ops.write_pfm(names["depth"], vs.depths[i])
        ops.write_pfm(names["mask"], vs.masks[i])
        views.append({"index": i, "pose": pose.to_dict(), "files": names})
    height, width = vs.image_size
    manifest = {
        "format": DATASET_FORMAT,
        "scene_id": vs.scene_id,
        "image_size": [height, width],
        "n_views": len(vs),
        "views": views,
        "scene": vs.scene.to_dict() if vs.scene is not None else None,
        "corruption": vs.corruption.model_dump() if vs.corruption is not None else None,
        "corruption_log": vs.corruption_log,
    }
    return ops.write_json(MANIFEST_NAME, manifest)


def read_dataset(directory) -> ViewSet:
    """Load a view set written by ``write_dataset``."""
    ops = FileOperations(directory)
    manifest = ops.read_json(MANIFEST_NAME)
    manifest_path = ops.resolve(MANIFEST_NAME)
    try:
        if manifest.get("format") != DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
        views = sorted(manifest["views"], key=lambda v: v["index"])
        poses = [CameraPose.from_dict(v["pose"]) for v in views]
        scene = AnalyticScene.from_dict(manifest["scene"]) if manifest.get("scene") else None
        corruption = CorruptionSpec(**manifest["corruption"]) if manifest.get("corruption") else None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetLoadError(manifest_path, f"invalid manifest: {e}") from e
    images = np.stack([ops.read_png(v["files"]["rgb"]) for v in views])
    depths = np.stack([ops.read_pfm(v["files"]["depth"]) for v in views])
    masks = np.stack([ops.read_pfm(v["files"]["mask"]) for v in views])
    try:
        return ViewSet(
            images=images,
            depths=depths,
            masks=masks,
            poses=poses,
            scene_id=manifest.get("scene_id", "scene"),
            scene=scene,
            corruption=corruption,
            corruption_log=list(manifest.get("corruption_log") or []),
        )
    except ValueError as e:
        raise DatasetLoadError(manifest_path, str(e)) from e


def write_mesh_obj(mesh: TriMesh, path) -> Path:
    """Write a mesh (with optional per-vertex colours) as ASCII OBJ."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(mesh.triangles) == 0:
        with open(path, "w") as f:
            f.write("# empty mesh\n")
        return path
    colors = None
    if mesh.colors is not None:
        colors = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, vertex_colors=colors, process=False)
    text = trimesh.exchange.obj.export_obj(tm, include_normals=False, include_color=colors is not None, digits=17)
    with open(path, "w") as f:
        f.write(text)
    return path


def read_mesh_obj(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(path, "file not found")
    with open(path, "r") as f:
        if not any(line.startswith("f ") for line in f):
            return TriMesh.empty()
    try:
        loaded = trimesh.load(path, file_type="obj", process=False, maintain_order=True, force="mesh")
    except Exception as e:
        raise DatasetLoadError(path, str(e)) from e
    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    faces = np.asarray(loaded.faces, dtype=np.int64).reshape(-1, 3)
    colors = None
    if getattr(loaded.visual, "kind", None) == "vertex" and len(vertices):
        colors = np.asarray(loaded.visual.vertex_colors[:, :3], dtype=np.float64) / 255.0
    return TriMesh(vertices=vertices, triangles=faces, colors=colors)


def write_raster_outputs(ops: FileOperations, stem: str, rgb: np.ndarray, depth: Optional[np.ndarray] = None) -> Dict[str, str]:
    """Rendered images use the dataset raster formats."""
    written = {"rgb": str(ops.write_png(f"{stem}.png", rgb))}
    if depth is not None:
        written["depth"] = str(ops.write_pfm(f"{stem}_depth.pfm", depth))
    return written
