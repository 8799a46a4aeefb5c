"""Losses, learning-rate schedule, the training loop and checkpoints."""

import math
import pickle
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import LossWeights, ModelConfig, RunConfig, TrainConfig, debug_print
from .errors import CheckpointError, NumericalError
from .model import HyperVolTranModel
from .render import WHITE
from .scenes import ViewSet

CHECKPOINT_FORMAT = "hypervoltran-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("iteration", "lr", "rgb", "depth", "eikonal", "sparse", "total")
RENDER_TIME_FIELDS = ("aggregator",)


def loss_rgb(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared L2 colour error."""
    if pred.shape != target.shape:
        raise ValueError(f"Shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[0] == 0:
        raise ValueError("Colour loss needs at least one pixel")
    return ((pred - target) ** 2).sum(dim=-1).mean()


def loss_depth(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error over valid pixels; 0 when none are valid."""
    valid = valid.bool()
    if not bool(valid.any()):
        return pred.sum() * 0.0
    return (pred[valid] - target[valid]).abs().mean()


def loss_eikonal(grads: torch.Tensor) -> torch.Tensor:
    """Mean of (|grad| - 1)^2 over the sampled points."""
    grads = grads.reshape(-1, 3)
    if grads.shape[0] == 0:
        raise ValueError("Eikonal loss needs at least one point")
    return ((grads.norm(dim=-1) - 1.0) ** 2).mean()


def loss_sparse(s: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean of exp(-tau |s|); penalizes near-zero SDF away from the surface."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    s = s.reshape(-1)
    if s.shape[0] == 0:
        raise ValueError("Sparse loss needs at least one point")
    return torch.exp(-tau * s.abs()).mean()


@dataclass
class LossParts:
    rgb: Any
    depth: Any
    eikonal: Any
    sparse: Any


def total_loss(parts: LossParts, weights: LossWeights) -> Any:
    return parts.rgb + weights.depth * parts.depth + weights.eikonal * parts.eikonal + weights.sparse * parts.sparse


@dataclass
class LossBreakdown:
    iteration: int
    lr: float
    rgb: float
    depth: float
    eikonal: float
    sparse: float
    total: float

    def as_row(self) -> List[Any]:
        return [getattr(self, name) for name in LOSS_COLUMNS]

    def terms(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if k not in ("iteration", "lr")}


def learning_rate(iteration: int, config: TrainConfig) -> float:
    """Cosine decay from ``config.lr`` at 0 to 0 at ``config.iterations``."""
    if config.schedule == "constant":
        return config.lr
    progress = min(max(iteration / config.iterations, 0.0), 1.0)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepPlan:
    """Views and pixels drawn for one step; the target is never a source."""

    scene_index: int
    target: int
    sources: List[int]
    px: np.ndarray
    py: np.ndarray


class Trainer:
    def __init__(self, model: HyperVolTranModel, config: RunConfig, viewsets: Sequence[ViewSet]):
        """Initialize the training loop.

        Args:
            model: The model to optimize in place
            config: Run configuration (train section drives the loop)
            viewsets: Ground-truth view sets, one per scene, each with >= 2 views
        """
        if not viewsets:
            raise ValueError("Training needs at least one view set")
        for vs in viewsets:
            if len(vs) < 2:
                raise ValueError(f"Scene {vs.scene_id} has {len(vs)} view(s); need a source and a target")
        self.model = model
        self.config = config
        self.train_config = config.train
        self.viewsets = list(viewsets)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.train_config.lr)
        self.iteration = 0
        self.generator = torch.Generator().manual_seed(self.train_config.seed)
        self.history: List[LossBreakdown] = []

    def _randint(self, high: int, size: int = 1) -> torch.Tensor:
        return torch.randint(high, (size,), generator=self.generator)

    def plan_step(self) -> StepPlan:
        cfg = self.train_config
        scene_index = int(self._randint(len(self.viewsets))) if len(self.viewsets) > 1 else 0
        vs = self.viewsets[scene_index]
        n = len(vs)
        # view 0 conditions the HyperNetwork, so it always stays a source
        target = 1 + int(self._randint(n - 1))
        others = [i for i in range(1, n) if i != target]
        sources = [0] + others[: max(cfg.n_source_views - 1, 0)]

        mask = vs.masks[target].reshape(-1) > 0.5
        fg = np.nonzero(mask)[0]
        bg = np.nonzero(~mask)[0]
        n_bg = int(round(cfg.background_ratio * cfg.rays_per_batch))
        if len(fg) == 0:
            n_bg = cfg.rays_per_batch
        elif len(bg) == 0:
            n_bg = 0
        picks = []
        if n_bg:
            picks.append(bg[self._randint(len(bg), n_bg).numpy()])
        if cfg.rays_per_batch - n_bg:
            picks.append(fg[self._randint(len(fg), cfg.rays_per_batch - n_bg).numpy()])
        flat = np.concatenate(picks)
        width = vs.images.shape[2]
        return StepPlan(scene_index, target, sources, flat % width, flat // width)

    def _box_points(self, n: int) -> torch.Tensor:
        lo, hi = (torch.as_tensor(b, dtype=self.model.dtype) for b in self.model.grid.bounds)
        return lo + (hi - lo) * torch.rand((n, 3), generator=self.generator, dtype=self.model.dtype)

    def compute_losses(self, plan: StepPlan) -> Tuple[torch.Tensor, LossParts]:
        cfg = self.train_config
        model = self.model
        vs = self.viewsets[plan.scene_index]
        ctx = model.encode_views(vs.images[plan.sources], [vs.poses[i] for i in plan.sources])
        pose = vs.poses[plan.target]
        out = model.render(
            ctx, pose, (plan.px, plan.py), cfg.samples_per_ray, generator=self.generator, with_gradients=True
        )
        dtype = model.dtype
        target_rgb = torch.as_tensor(vs.images[plan.target][plan.py, plan.px], dtype=dtype)
        target_depth = torch.as_tensor(vs.depths[plan.target][plan.py, plan.px], dtype=dtype)
        depth_valid = torch.as_tensor(vs.masks[plan.target][plan.py, plan.px] > 0.5) & ~out.degenerate

        ray_sdf = out.sdf.reshape(-1)
        ray_grad = out.gradients.reshape(-1, 3)
        fraction = cfg.eikonal_box_fraction
        if fraction >= 1.0:
            box_sdf, box_grad = model.sdf_and_gradient(ctx, self._box_points(ray_sdf.shape[0]))
            eik_sdf, eik_grad = box_sdf, box_grad
        elif fraction > 0.0:
            n_box = max(1, int(round(ray_sdf.shape[0] * fraction / (1.0 - fraction))))
            box_sdf, box_grad = model.sdf_and_gradient(ctx, self._box_points(n_box))
            eik_sdf, eik_grad = torch.cat([ray_sdf, box_sdf]), torch.cat([ray_grad, box_grad])
        else:
            eik_sdf, eik_grad = ray_sdf, ray_grad

        parts = LossParts(
            rgb=loss_rgb(out.with_background(WHITE), target_rgb),
            depth=loss_depth(out.depth, target_depth, depth_valid),
            eikonal=loss_eikonal(eik_grad),
            sparse=loss_sparse(eik_sdf, cfg.loss.tau),
        )
        return total_loss(parts, cfg.loss), parts

    def train_step(self) -> LossBreakdown:
        """One optimization step on one scene with one held-out target view."""
        self.model.train()
        lr = learning_rate(self.iteration, self.train_config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        plan = self.plan_step()
        total, parts = self.compute_losses(plan)
        terms = {f.name: float(getattr(parts, f.name)) for f in fields(parts)}
        if not math.isfinite(float(total)) or not all(math.isfinite(v) for v in terms.values()):
            raise NumericalError(f"Non-finite loss at iteration {self.iteration}", terms)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        record = LossBreakdown(iteration=self.iteration, lr=lr, total=float(total), **terms)
        self.history.append(record)
        self.iteration += 1
        return record

    def fit(
        self, iterations: Optional[int] = None, callback: Optional[Callable[[LossBreakdown], None]] = None
    ) -> List[LossBreakdown]:
        """Run until ``iterations`` total steps (default: the configured count)."""
        end = self.train_config.iterations if iterations is None else iterations
        records = []
        while self.iteration < end:
            record = self.train_step()
            records.append(record)
            if record.iteration % self.train_config.log_every == 0:
                debug_print(f"iter {record.iteration}: total={record.total:.5f} rgb={record.rgb:.5f} lr={record.lr:.2e}")
            if callback is not None:
                callback(record)
        return records

    def state_dict(self) -> Dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model.config.model_dump(),
            "run_config": self.config.model_dump(),
            "model": self.model.state_dict(),
            "param_groups": self.model.param_groups(),
            "optimizer": self.optimizer.state_dict(),
            "iteration": self.iteration,
            "rng_state": self.generator.get_state(),
        }

    def load_state(self, payload: Dict[str, Any]) -> None:
        load_model_state(self.model, payload)
        self.optimizer.load_state_dict(payload["optimizer"])
        self.iteration = int(payload["iteration"])
        self.generator.set_state(payload["rng_state"])


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Write the model, optimizer, counters, RNG and configs into one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(trainer.state_dict(), path)
    debug_print(f"checkpoint saved: {path} (iteration {trainer.iteration})")
    return path


def read_checkpoint(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, ValueError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a hypervoltran checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint version {payload.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    return payload


def config_mismatch(saved: Dict[str, Any], requested: ModelConfig) -> List[str]:
    """Model fields that differ between a checkpoint and a requested config.

    Fields in ``RENDER_TIME_FIELDS`` leave the parameters untouched and may differ.
    """
    wanted = requested.model_dump()
    return [
        f"{key}: checkpoint {saved.get(key)!r}, requested {wanted[key]!r}"
        for key in wanted
        if key not in RENDER_TIME_FIELDS and saved.get(key) != wanted[key]
    ]


def load_model_state(model: HyperVolTranModel, payload: Dict[str, Any]) -> None:
    problems = config_mismatch(payload["model_config"], model.config)
    if problems:
        raise CheckpointError("Model config mismatch: " + "; ".join(problems))
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointError(f"Parameter shape mismatch: {e}") from e


def load_checkpoint(path, model_config: Optional[ModelConfig] = None) -> Tuple[HyperVolTranModel, Dict[str, Any]]:
    """Rebuild a model from a checkpoint.

    With ``model_config`` given, the checkpoint must match it apart from render-time fields.
    """
    payload = read_checkpoint(path)
    config = model_config or ModelConfig.model_validate(payload["model_config"])
    model = HyperVolTranModel(config)
    load_model_state(model, payload)
    model.eval()
    return model, payload


def resume_trainer(path, viewsets: Sequence[ViewSet], config: Optional[RunConfig] = None) -> Trainer:
    """Trainer restored from a checkpoint, continuing its iteration counter and RNG."""
    payload = read_checkpoint(path)
    run_config = config or RunConfig.model_validate(payload["run_config"])
    model = HyperVolTranModel(run_config.model)
    trainer = Trainer(model, run_config, viewsets)
    trainer.load_state(payload)
    return trainer
