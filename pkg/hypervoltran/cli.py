import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np
import torch
import typer
from dotenv import load_dotenv
from pydantic import BaseModel
from rich.markup import escape
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .config import RunConfig, apply_overrides, console, debug_print, default_output_root, load_run_config, set_debug
from .costvol import VoxelGrid, dump_volume_slices
from .errors import NumericalError
from .file_ops import FileOperations, read_dataset, read_mesh_obj, write_dataset, write_mesh_obj, write_raster_outputs
from .meshmetrics import MetricsReport, TriMesh, evaluate_meshes, marching_cubes, psnr
from .model import HyperVolTranModel
from .plotting import plot_ablation, plot_loss_curves
from .scenes import (
    AnalyticScene,
    CameraPose,
    ViewSet,
    corrupt_views,
    eval_scene,
    evenly_spaced_indices,
    make_camera_ring,
    random_scene,
    render_viewset,
    select_views,
    sphere_trace_render,
)
from .train import LOSS_COLUMNS, LossBreakdown, Trainer, load_checkpoint, read_checkpoint, resume_trainer, save_checkpoint

app = typer.Typer(add_completion=False, help="Hyper-VolTran: feed-forward SDF reconstruction from a set of views.")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NUMERIC = 2

RUN_MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_NAME = "checkpoint.pt"
LOSS_TRACE_NAME = "loss.csv"
VIEW_COUNTS = (4, 8, 16, 32)
LOSS_VARIANTS = {
    "full": {},
    "no_depth": {"train.loss.depth": 0.0},
    "no_eikonal": {"train.loss.eikonal": 0.0},
    "no_sparse": {"train.loss.sparse": 0.0},
}
METRIC_COLUMNS = ("chamfer_l2", "fscore", "iou", "psnr")


class AblationKind(str, Enum):
    views = "views"
    aggregator = "aggregator"
    losses = "losses"


class RunManifest(BaseModel):
    """Provenance record written beside the outputs of every command."""

    command: str
    version: str
    seed: int
    config: Dict[str, Any]
    arguments: Dict[str, Any]
    started_at: str
    finished_at: str
    outputs: Dict[str, str]
    artifact_hash: str


@dataclass
class Reconstruction:
    scene_id: str
    mesh: TriMesh
    novel_poses: List[CameraPose]
    renders: List[Tuple[np.ndarray, np.ndarray]]
    timing: Dict[str, float] = field(default_factory=dict)
    psnr: Optional[float] = None


# Shared options

def _config_option():
    return typer.Option(None, "--config", help="JSON config file (nested key/value)")


def _seed_option():
    return typer.Option(None, "--seed", help="Seed for every random draw of the run")


def _out_option():
    return typer.Option(None, "--out", help="Output directory (default: $HYPERVOLTRAN_OUTPUT_ROOT/<command>)")


def _override_option():
    return typer.Option(None, "--override", help="Config override key.path=value (repeatable)")


@app.callback()
def cli(debug: bool = typer.Option(False, "--debug", help="Enable debug output")):
    """Hyper-VolTran command line."""
    load_dotenv()
    set_debug(debug or os.getenv("HYPERVOLTRAN_DEBUG", "") not in ("", "0"))


@contextmanager
def _reported_errors():
    try:
        yield
    except click.exceptions.Exit:
        raise
    except NumericalError as e:
        console.print(f"[red]❌ Numerical failure: {escape(str(e))}[/red]")
        raise typer.Exit(EXIT_NUMERIC)
    except (ValueError, OSError, RuntimeError) as e:
        console.print(f"[red]❌ Error: {escape(str(e))}[/red]")
        raise typer.Exit(EXIT_ERROR)


def _prepare(
    command: str,
    config_path: Optional[Path],
    seed: Optional[int],
    overrides: Optional[Sequence[str]],
    out: Optional[Path],
    base: Optional[Dict[str, Any]] = None,
) -> Tuple[RunConfig, FileOperations]:
    cfg = load_run_config(config_path, overrides or (), seed, base)
    out_dir = out if out is not None else default_output_root() / command
    debug_print(f"{command}: output directory {out_dir}")
    return cfg, FileOperations(out_dir)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _variant(cfg: RunConfig, changes: Dict[str, Any]) -> RunConfig:
    data = apply_overrides(cfg.model_dump(), [f"{key}={json.dumps(value)}" for key, value in changes.items()])
    return RunConfig.model_validate(data)


def artifact_hash(paths: Iterable[Path], root: Path) -> str:
    """sha256 over git-style blob hashes of every output file, keyed by relative path."""
    root = Path(root)
    files = set()
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.update(f for f in p.rglob("*") if f.is_file())
        elif p.is_file():
            files.add(p)
    digest = hashlib.sha256()
    for f in sorted(files, key=lambda f: f.relative_to(root).as_posix()):
        data = f.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        digest.update(f"{blob} {f.relative_to(root).as_posix()}\n".encode("utf-8"))
    return digest.hexdigest()


def write_run_manifest(
    ops: FileOperations,
    command: str,
    cfg: RunConfig,
    arguments: Dict[str, Any],
    started_at: str,
    outputs: Dict[str, Path],
) -> RunManifest:
    root = ops.root_path.resolve()
    manifest = RunManifest(
        command=command,
        version=__version__,
        seed=cfg.seed,
        config=cfg.model_dump(mode="json"),
        arguments={k: (str(v) if isinstance(v, Path) else v) for k, v in arguments.items()},
        started_at=started_at,
        finished_at=_now(),
        outputs={name: Path(path).resolve().relative_to(root).as_posix() for name, path in outputs.items()},
        artifact_hash=artifact_hash([Path(p).resolve() for p in outputs.values()], root),
    )
    ops.write_json(RUN_MANIFEST_NAME, manifest.model_dump(mode="json"))
    return manifest


def _load_viewsets(data: Path) -> List[ViewSet]:
    dirs = FileOperations(data).find_datasets()
    if not dirs:
        raise ValueError(f"No datasets found under {data}")
    return [read_dataset(d) for d in dirs]


# Pipeline steps shared by the commands

def generate_scene(cfg: RunConfig, index: int) -> ViewSet:
    """Scene ``index`` of a run: random primitives, rendered ring, optional corruption."""
    rng = np.random.default_rng([cfg.seed, index])
    n_primitives = int(rng.integers(cfg.data.min_primitives, cfg.data.max_primitives + 1))
    scene = random_scene(rng, n_primitives, scene_id=f"scene_{index:03d}")
    rig = cfg.data.rig
    poses = make_camera_ring(rig.n_views, rig.elevation_deg, rig.radius, rig.img_size, rig.focal_px, rig.azimuth_offset_deg)
    vs = render_viewset(scene, poses, rig.max_steps, rig.hit_eps)
    spec = cfg.data.corruption
    if not spec.is_identity:
        vs = corrupt_views(vs, spec.model_copy(update={"seed": spec.seed + index}))
    return vs


def source_subset(vs: ViewSet, n_source_views: int) -> ViewSet:
    return select_views(vs, evenly_spaced_indices(len(vs), min(len(vs), n_source_views)))


def novel_poses(vs: ViewSet, n_views: int) -> List[CameraPose]:
    """Ring of unseen cameras, offset half a source step from view 0."""
    if n_views <= 0:
        return []
    ref = vs.poses[0]
    center = ref.center
    radius = float(np.linalg.norm(center))
    elevation = math.degrees(math.asin(center[1] / radius))
    azimuth = math.degrees(math.atan2(center[0], -center[2]))
    return make_camera_ring(n_views, elevation, radius, ref.width, float(ref.K[0, 0]), azimuth + 180.0 / len(vs))


def ground_truth_mesh(scene: AnalyticScene, cfg: RunConfig) -> TriMesh:
    grid = VoxelGrid.cube(cfg.eval.mesh_resolution, cfg.model.grid_bound)
    mesh = marching_cubes(lambda p: eval_scene(scene, p)[0], grid)
    if mesh.is_empty:
        raise ValueError(f"Scene {scene.scene_id} has no surface inside the grid")
    return mesh


def reconstruct_scene(
    model: HyperVolTranModel,
    vs: ViewSet,
    cfg: RunConfig,
    n_novel: int,
    aggregator: Optional[str] = None,
    dump_ops: Optional[FileOperations] = None,
) -> Reconstruction:
    """One feed-forward pass over the views of ``vs``: mesh plus novel renders."""
    model.eval()
    start = time.perf_counter()
    with torch.no_grad():
        ctx = model.encode_views(vs.images, vs.poses)
    encoded = time.perf_counter()
    if dump_ops is not None:
        dump_volume_slices(dump_ops, ctx.raw_cost, ctx.volume)
    grid = VoxelGrid.cube(cfg.eval.mesh_resolution, cfg.model.grid_bound)
    mesh = marching_cubes(partial(model.sdf_at, ctx), grid)
    if not mesh.is_empty:
        colors = model.point_colors(ctx, mesh.vertices, aggregator=aggregator)
        mesh = TriMesh(mesh.vertices, mesh.triangles, colors)
    meshed = time.perf_counter()
    poses = novel_poses(vs, n_novel)
    renders = [
        model.render_image(ctx, pose, cfg.train.samples_per_ray, cfg.eval.render_chunk, aggregator) for pose in poses
    ]
    finished = time.perf_counter()
    result = Reconstruction(
        scene_id=vs.scene_id,
        mesh=mesh,
        novel_poses=poses,
        renders=renders,
        timing={
            "encode_s": encoded - start,
            "mesh_s": meshed - encoded,
            "render_s": finished - meshed,
            "post_feature_s": finished - start,
        },
    )
    if vs.scene is not None and poses:
        rig = cfg.data.rig
        truth = np.stack([sphere_trace_render(vs.scene, pose, rig.max_steps, rig.hit_eps)[0] for pose in poses])
        result.psnr = psnr(np.stack([rgb for rgb, _ in renders]), truth)
    return result


def score_reconstruction(rec: Reconstruction, scene: AnalyticScene, cfg: RunConfig) -> MetricsReport:
    return evaluate_meshes(rec.mesh, ground_truth_mesh(scene, cfg), cfg.eval, rec.scene_id, rec.psnr)


def _training_progress():
    return Progress(
        SpinnerColumn(),
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TextColumn("{task.fields[loss]}"),
        console=console,
        transient=True,
    )


def run_training(trainer: Trainer, label: str, checkpoint_path: Optional[Path] = None) -> List[LossBreakdown]:
    """Fit to the configured iteration count, saving a checkpoint every ``checkpoint_every`` steps."""
    cfg = trainer.train_config
    with _training_progress() as progress:
        task = progress.add_task(label, total=cfg.iterations, completed=trainer.iteration, loss="")

        def on_step(record: LossBreakdown) -> None:
            progress.update(task, completed=trainer.iteration, loss=f"loss {record.total:.4f}")
            if record.iteration % cfg.log_every == 0:
                console.print(
                    f"[dim]iter {record.iteration:>6}  total {record.total:.5f}  rgb {record.rgb:.5f}  "
                    f"depth {record.depth:.5f}  eik {record.eikonal:.5f}  lr {record.lr:.2e}[/dim]"
                )
            if checkpoint_path is not None and trainer.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(trainer, checkpoint_path)

        return trainer.fit(callback=on_step)


def _metrics_table(title: str, rows: List[Dict[str, Any]], key: str) -> Table:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column(key, style="cyan")
    for name in METRIC_COLUMNS:
        table.add_column(name, justify="right", style="green")
    for row in rows:
        cells = []
        for name in METRIC_COLUMNS:
            value = row.get(name)
            cells.append("-" if value is None else f"{float(value):.4f}")
        table.add_row(str(row[key]), *cells)
    return table


def _mean_metrics(reports: Sequence[MetricsReport]) -> Dict[str, Optional[float]]:
    summary: Dict[str, Optional[float]] = {}
    for name in METRIC_COLUMNS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        summary[name] = float(np.mean(values)) if values else None
    return summary


# Commands

@app.command("gen-data")
def gen_data(
    scenes: Optional[int] = typer.Option(None, "--scenes", help="Number of scenes (data.n_scenes)"),
    views: Optional[int] = typer.Option(None, "--views", help="Views per scene, e.g. 8 key views or the extended 32"),
    color_jitter: Optional[float] = typer.Option(None, "--color-jitter", help="Per-channel gain noise sigma"),
    pose_jitter: Optional[float] = typer.Option(None, "--pose-jitter", help="Camera rotation noise in degrees"),
    occluders: Optional[int] = typer.Option(None, "--occluders", help="Random occluding rectangles per view"),
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Optional[Path] = _out_option(),
    override: Optional[List[str]] = _override_option(),
):
    """Render procedural scenes into dataset directories."""
    with _reported_errors():
        started = _now()
        flags = {
            "data.n_scenes": scenes,
            "data.rig.n_views": views,
            "data.corruption.color_jitter_sigma": color_jitter,
            "data.corruption.pose_jitter_deg": pose_jitter,
            "data.corruption.occluder_count": occluders,
        }
        flag_overrides = [f"{key}={json.dumps(value)}" for key, value in flags.items() if value is not None]
        cfg, ops = _prepare("gen-data", config, seed, flag_overrides + list(override or []), out)
        with ops.lock():
            outputs: Dict[str, Path] = {}
            for index in range(cfg.data.n_scenes):
                vs = generate_scene(cfg, index)
                write_dataset(vs, ops.resolve(vs.scene_id))
                outputs[vs.scene_id] = ops.resolve(vs.scene_id)
                flagged = " (corrupted)" if vs.corruption is not None else ""
                console.print(f"[green]✅ {vs.scene_id}: {len(vs)} views{flagged}[/green]")
            write_run_manifest(ops, "gen-data", cfg, {"scenes": scenes, "views": views}, started, outputs)
        console.print(Panel.fit(f"{cfg.data.n_scenes} scene(s) written to {ops.root_path}", border_style="blue"))


@app.command("train")
def train(
    data: Path = typer.Option(..., "--data", help="Dataset directory or a root holding several"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Optional[Path] = _out_option(),
    override: Optional[List[str]] = _override_option(),
):
    """Optimize every sub-network on the datasets; writes a checkpoint and the loss trace."""
    with _reported_errors():
        started = _now()
        base = read_checkpoint(resume)["run_config"] if resume is not None and config is None else None
        cfg, ops = _prepare("train", config, seed, override, out, base)
        viewsets = _load_viewsets(data)
        checkpoint_path = ops.resolve(CHECKPOINT_NAME)
        loss_path = ops.resolve(LOSS_TRACE_NAME)
        with ops.lock():
            if resume is not None:
                trainer = resume_trainer(resume, viewsets, cfg)
                console.print(f"[blue]📌 Resuming from {resume} at iteration {trainer.iteration}[/blue]")
            else:
                torch.manual_seed(cfg.seed)
                trainer = Trainer(HyperVolTranModel(cfg.model), cfg, viewsets)
            previous = []
            # the earlier trace sits next to the checkpoint, not in the new output directory
            previous_trace = Path(resume).parent / LOSS_TRACE_NAME if resume is not None else None
            if previous_trace is not None and previous_trace.exists():
                previous = [
                    [float(row[c]) if c != "iteration" else int(row[c]) for c in LOSS_COLUMNS]
                    for row in ops.read_csv(previous_trace)
                    if int(row["iteration"]) < trainer.iteration
                ]
            try:
                run_training(trainer, f"training {len(viewsets)} scene(s)", checkpoint_path)
            except NumericalError as e:
                ops.write_csv(LOSS_TRACE_NAME, LOSS_COLUMNS, previous + [r.as_row() for r in trainer.history])
                ops.write_json("numerical_failure.json", {"iteration": trainer.iteration, "terms": e.terms, "message": str(e)})
                raise
            save_checkpoint(trainer, checkpoint_path)
            rows = previous + [r.as_row() for r in trainer.history]
            ops.write_csv(LOSS_TRACE_NAME, LOSS_COLUMNS, rows)
            outputs = {"checkpoint": checkpoint_path, "loss_trace": loss_path}
            if rows:
                outputs["loss_plot"] = plot_loss_curves(
                    [dict(zip(LOSS_COLUMNS, row)) for row in rows], ops.resolve("loss.png")
                )
            write_run_manifest(ops, "train", cfg, {"data": data, "resume": resume}, started, outputs)
        final = trainer.history[-1].total if trainer.history else float("nan")
        console.print(
            Panel.fit(
                f"iterations: {trainer.iteration}\nfinal loss: {final:.5f}\ncheckpoint: {checkpoint_path}",
                title="🏁 Training finished",
                border_style="green",
            )
        )


@app.command("reconstruct")
def reconstruct(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained checkpoint"),
    data: Path = typer.Option(..., "--data", help="Dataset directory or a root holding several"),
    novel_views: int = typer.Option(4, "--novel-views", min=0, help="Novel ring views to render per scene"),
    aggregator: Optional[str] = typer.Option(None, "--aggregator", help="voltran or mean (default: checkpoint config)"),
    dump_volume: bool = typer.Option(False, "--dump-volume", help="Write central slices of the cost volume"),
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Optional[Path] = _out_option(),
    override: Optional[List[str]] = _override_option(),
):
    """Feed-forward reconstruction: mesh and novel views without any optimization."""
    with _reported_errors():
        started = _now()
        if aggregator not in (None, "voltran", "mean"):
            raise ValueError(f"Unknown aggregator {aggregator!r}; expected voltran or mean")
        base = read_checkpoint(checkpoint)["run_config"] if config is None else None
        cfg, ops = _prepare("reconstruct", config, seed, override, out, base)
        model, _ = load_checkpoint(checkpoint, cfg.model)
        viewsets = _load_viewsets(data)
        digest_before = model.parameter_digest()
        outputs: Dict[str, Path] = {}
        with ops.lock():
            for vs in viewsets:
                scene_ops = FileOperations(ops.resolve(vs.scene_id))
                sources = source_subset(vs, cfg.train.n_source_views)
                rec = reconstruct_scene(model, sources, cfg, novel_views, aggregator, scene_ops if dump_volume else None)
                write_mesh_obj(rec.mesh, scene_ops.resolve("mesh.obj"))
                renders = {
                    f"novel_{k:03d}": {
                        name: Path(p).name for name, p in write_raster_outputs(scene_ops, f"novel_{k:03d}", rgb, depth).items()
                    }
                    for k, (rgb, depth) in enumerate(rec.renders)
                }
                scene_ops.write_json(
                    "reconstruct.json",
                    {
                        "scene_id": rec.scene_id,
                        "source_views": len(sources),
                        "vertices": int(len(rec.mesh.vertices)),
                        "triangles": int(len(rec.mesh.triangles)),
                        "timing": rec.timing,
                        "psnr": rec.psnr,
                        "novel_poses": [pose.to_dict() for pose in rec.novel_poses],
                        "renders": renders,
                    },
                )
                outputs[vs.scene_id] = scene_ops.root_path
                psnr_text = "" if rec.psnr is None else f", novel-view PSNR {rec.psnr:.2f} dB"
                console.print(
                    f"[green]✅ {rec.scene_id}: {len(rec.mesh.triangles)} triangles in "
                    f"{rec.timing['post_feature_s']:.2f}s{psnr_text}[/green]"
                )
            digest_after = model.parameter_digest()
            if digest_after != digest_before:
                raise RuntimeError("Model parameters changed during feed-forward reconstruction")
            write_run_manifest(
                ops,
                "reconstruct",
                cfg,
                {"checkpoint": checkpoint, "data": data, "novel_views": novel_views, "parameter_digest": digest_after},
                started,
                outputs,
            )


def _evaluate_scene(pred: Path, cfg: RunConfig, dataset_dir: Path) -> MetricsReport:
    vs = read_dataset(dataset_dir)
    if vs.scene is None:
        raise ValueError(f"Dataset {dataset_dir} carries no analytic scene to evaluate against")
    scene_dir = FileOperations(pred).resolve(vs.scene_id)
    mesh_path = scene_dir / "mesh.obj"
    if not mesh_path.exists():
        raise ValueError(f"No reconstruction for scene {vs.scene_id} under {pred}")
    psnr_value = None
    if (scene_dir / "reconstruct.json").exists():
        psnr_value = FileOperations(scene_dir).read_json("reconstruct.json").get("psnr")
    report = evaluate_meshes(read_mesh_obj(mesh_path), ground_truth_mesh(vs.scene, cfg), cfg.eval, vs.scene_id, psnr_value)
    debug_print(f"evaluated {vs.scene_id}: chamfer {report.chamfer_l2:.6f}")
    return report


@app.command("eval")
def evaluate(
    pred: Path = typer.Option(..., "--pred", help="Reconstruction output directory (one subdirectory per scene)"),
    gt: Path = typer.Option(..., "--gt", help="Ground-truth dataset root"),
    workers: int = typer.Option(1, "--workers", min=1, help="Scenes evaluated in parallel"),
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Optional[Path] = _out_option(),
    override: Optional[List[str]] = _override_option(),
):
    """ICP-aligned Chamfer-L2, F-score, IoU and PSNR per scene plus the aggregate."""
    with _reported_errors():
        started = _now()
        cfg, ops = _prepare("eval", config, seed, override, out)
        dirs = FileOperations(gt).find_datasets()
        if not dirs:
            raise ValueError(f"No datasets found under {gt}")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(partial(_evaluate_scene, pred, cfg), dirs))
        aggregate = _mean_metrics(reports)
        header = ("scene_id",) + METRIC_COLUMNS + ("icp_scale", "n_pred_points", "n_gt_points")
        rows = [[r.scene_id] + [getattr(r, c) for c in header[1:]] for r in reports]
        rows.append(["mean"] + [aggregate[c] for c in METRIC_COLUMNS] + ["", "", ""])
        with ops.lock():
            csv_path = ops.write_csv("metrics.csv", header, rows)
            json_path = ops.write_json(
                "metrics.json",
                {
                    "scenes": [r.model_dump() for r in reports],
                    "aggregate": aggregate,
                    "eval_config": cfg.eval.model_dump(),
                    "conventions": reports[0].conventions,
                },
            )
            write_run_manifest(
                ops, "eval", cfg, {"pred": pred, "gt": gt}, started, {"metrics_csv": csv_path, "metrics_json": json_path}
            )
        table_rows = [r.model_dump() for r in reports] + [{"scene_id": "mean", **aggregate}]
        console.print(_metrics_table("📊 Reconstruction metrics", table_rows, "scene_id"))


def _fit_setting(
    cfg: RunConfig, viewsets: Sequence[ViewSet], label: str, init: Optional[Path] = None
) -> Trainer:
    torch.manual_seed(cfg.seed)
    model = load_checkpoint(init, cfg.model)[0] if init is not None else HyperVolTranModel(cfg.model)
    trainer = Trainer(model, cfg, viewsets)
    run_training(trainer, label)
    model.eval()
    return trainer


def _score_setting(
    model: HyperVolTranModel,
    viewsets: Sequence[ViewSet],
    cfg: RunConfig,
    n_novel: int,
    aggregator: Optional[str] = None,
) -> Dict[str, Optional[float]]:
    reports = []
    for vs in viewsets:
        if vs.scene is None:
            raise ValueError(f"Scene {vs.scene_id} has no analytic ground truth")
        rec = reconstruct_scene(model, source_subset(vs, cfg.train.n_source_views), cfg, n_novel, aggregator)
        reports.append(score_reconstruction(rec, vs.scene, cfg))
    return _mean_metrics(reports)


@app.command("ablate")
def ablate(
    kind: AblationKind = typer.Argument(..., help="views, aggregator or losses"),
    data: Path = typer.Option(..., "--data", help="Dataset root"),
    checkpoint: Optional[Path] = typer.Option(
        None, "--checkpoint", help="Evaluate this checkpoint instead of training per seed (losses: fine-tune from it)"
    ),
    seeds: int = typer.Option(5, "--seeds", min=1, help="Seeds per setting"),
    novel_views: int = typer.Option(4, "--novel-views", min=1, help="Held-out ring views scored per scene"),
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Optional[Path] = _out_option(),
    override: Optional[List[str]] = _override_option(),
):
    """Sweep view count, aggregator or loss terms; writes a table and a plot."""
    with _reported_errors():
        started = _now()
        base = read_checkpoint(checkpoint)["run_config"] if checkpoint is not None and config is None else None
        cfg, ops = _prepare(f"ablate-{kind.value}", config, seed, override, out, base)
        viewsets = _load_viewsets(data)
        key = {"views": "views", "aggregator": "aggregator", "losses": "variant"}[kind.value]
        loaded = load_checkpoint(checkpoint, cfg.model)[0] if checkpoint is not None else None

        table: List[Dict[str, Any]] = []
        outputs: Dict[str, Path] = {}
        with ops.lock():
            for offset in range(seeds):
                run_seed = cfg.seed + offset
                seeded = _variant(cfg, {"seed": run_seed, "train.seed": run_seed, "eval.sample_seed": run_seed})
                if kind is AblationKind.views:
                    counts = [k for k in VIEW_COUNTS if k <= min(len(vs) for vs in viewsets)]
                    if not counts:
                        raise ValueError(f"View sweep needs at least {VIEW_COUNTS[0]} views per scene")
                    for k in counts:
                        run_cfg = _variant(seeded, {"train.n_source_views": k})
                        subsets = [select_views(vs, evenly_spaced_indices(len(vs), k)) for vs in viewsets]
                        model = loaded
                        if model is None:
                            trainer = _fit_setting(run_cfg, subsets, f"{k} views, seed {run_seed}")
                            model = trainer.model
                            path = save_checkpoint(trainer, ops.resolve(f"checkpoints/views_{k}_seed{run_seed}.pt"))
                            outputs[path.stem] = path
                        table.append({key: k, "seed": run_seed, **_score_setting(model, subsets, run_cfg, novel_views)})
                elif kind is AblationKind.aggregator:
                    for name in ("voltran", "mean"):
                        run_cfg = _variant(seeded, {"model.aggregator": name})
                        model = loaded
                        if model is None:
                            trainer = _fit_setting(run_cfg, viewsets, f"{name}, seed {run_seed}")
                            model = trainer.model
                            path = save_checkpoint(trainer, ops.resolve(f"checkpoints/{name}_seed{run_seed}.pt"))
                            outputs[path.stem] = path
                        row = _score_setting(model, viewsets, run_cfg, novel_views, aggregator=name)
                        table.append({key: name, "seed": run_seed, **row})
                else:
                    for name, changes in LOSS_VARIANTS.items():
                        run_cfg = _variant(seeded, changes)
                        trainer = _fit_setting(run_cfg, viewsets, f"{name}, seed {run_seed}", init=checkpoint)
                        path = save_checkpoint(trainer, ops.resolve(f"checkpoints/{name}_seed{run_seed}.pt"))
                        outputs[path.stem] = path
                        table.append({key: name, "seed": run_seed, **_score_setting(trainer.model, viewsets, run_cfg, novel_views)})

            header = (key, "seed") + METRIC_COLUMNS
            outputs["table"] = ops.write_csv(f"ablation_{kind.value}.csv", header, [[row[c] for c in header] for row in table])
            plot_metrics = [m for m in ("chamfer_l2", "fscore", "psnr") if all(row[m] is not None for row in table)]
            outputs["plot"] = plot_ablation(
                table, key, plot_metrics, ops.resolve(f"ablation_{kind.value}.png"), title=f"{kind.value} ablation"
            )
            write_run_manifest(
                ops,
                f"ablate-{kind.value}",
                cfg,
                {"kind": kind.value, "data": data, "checkpoint": checkpoint, "seeds": seeds},
                started,
                outputs,
            )

        medians = []
        for setting in dict.fromkeys(row[key] for row in table):
            subset = [row for row in table if row[key] == setting]
            medians.append(
                {
                    key: setting,
                    **{
                        m: (float(np.median([r[m] for r in subset])) if all(r[m] is not None for r in subset) else None)
                        for m in METRIC_COLUMNS
                    },
                }
            )
        console.print(_metrics_table(f"🧪 {kind.value} ablation (median over {seeds} seed(s))", medians, key))


def main() -> None:
    """Console entry point with the documented exit codes."""
    try:
        code = app(standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        sys.exit(EXIT_ERROR)
    except click.exceptions.Abort:
        console.print("[yellow]↩️ Aborted[/yellow]")
        sys.exit(EXIT_ERROR)
    except NumericalError as e:
        console.print(f"[red]❌ Numerical failure: {escape(str(e))}[/red]")
        sys.exit(EXIT_NUMERIC)
    except (ValueError, OSError, RuntimeError) as e:
        console.print(f"[red]❌ Error: {escape(str(e))}[/red]")
        sys.exit(EXIT_ERROR)
    sys.exit(code if isinstance(code, int) else EXIT_OK)


if __name__ == "__main__":
    main()
