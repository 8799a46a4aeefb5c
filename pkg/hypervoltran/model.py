"""The full reconstruction model and its single-scene context."""

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, debug_print
from .costvol import CostRegNet, EncodingVolume, VoxelGrid, build_encoding_volume, sample_volume, warp_points
from .featnet import ConditionEncoder, Embedding, FeatureNet, to_image_batch
from .hypersdf import DirectSDFWeights, GeneratedWeights, HyperNetwork, SDFArchitecture, sdf_forward, sdf_with_gradient
from .render import WHITE, PointQuery, RenderOutput, image_pixels, render_pixels
from .scenes import CameraPose
from .voltran import VolTran, blend_colors, blend_weights, mean_pool_baseline

SdfOverride = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class SceneContext:
    """Everything one feed-forward pass derives from a set of source views."""

    images: torch.Tensor  # (N, 3, H, W)
    featmaps: torch.Tensor  # (N, C, H_f, W_f)
    poses: List[CameraPose]
    stride: int
    raw_cost: torch.Tensor  # (V, C)
    volume: EncodingVolume
    embedding: Embedding
    weights: GeneratedWeights

    @property
    def n_views(self) -> int:
        return len(self.poses)


class HyperVolTranModel(nn.Module):
    """Feature net, conditioning encoder, cost regularizer, HyperNetwork, VolTran
    and the learned rendering sharpness."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.grid = VoxelGrid.cube(config.grid_resolution, config.grid_bound)
        self.arch = SDFArchitecture.from_config(config)
        self.feature_net = FeatureNet(config.feature_channels, config.feature_stride)
        self.cond_encoder = ConditionEncoder(config.embedding_dim)
        self.cost_reg = CostRegNet(config.feature_channels, config.volume_channels)
        if config.use_hypernetwork:
            self.hypernet = HyperNetwork(self.arch, config.embedding_dim, config.hyper_hidden, config.init_radius)
        else:
            self.hypernet = DirectSDFWeights(self.arch, config.init_radius)
        self.voltran = VolTran(
            config.token_dim, config.n_heads, config.n_layers, config.mlp_ratio, context_dim=config.geo_feat_dim
        )
        self.log_inv_std = nn.Parameter(torch.tensor(math.log(config.inv_std_init)))
        self.register_buffer("grid_vertices", self.grid.vertices(torch.float32))

    @property
    def inv_std(self) -> torch.Tensor:
        return torch.exp(self.log_inv_std)

    @property
    def dtype(self) -> torch.dtype:
        return self.log_inv_std.dtype

    def param_groups(self) -> Dict[str, List[str]]:
        """Names of the trainable parameters, grouped by sub-network."""
        groups = {
            "featnet": "feature_net.",
            "condition_encoder": "cond_encoder.",
            "cost_regularizer": "cost_reg.",
            "hypernetwork": "hypernet.",
            "voltran": "voltran.",
        }
        manifest = {name: [] for name in groups}
        manifest["aggregation_token"] = []
        manifest["inv_std"] = []
        for name, _ in self.named_parameters():
            if name == "voltran.agg_token":
                manifest["aggregation_token"].append(name)
            elif name == "log_inv_std":
                manifest["inv_std"].append(name)
            else:
                group = next(g for g, prefix in groups.items() if name.startswith(prefix))
                manifest[group].append(name)
        return manifest

    def encode_views(self, images, poses: Sequence[CameraPose]) -> SceneContext:
        """Features, encoding volume G and SDF weights from N source views.

        View 0 is the conditioning input of the HyperNetwork.
        """
        x = to_image_batch(images, self.dtype)
        if x.shape[0] != len(poses):
            raise ValueError(f"Got {x.shape[0]} images for {len(poses)} poses")
        featmaps = self.feature_net(x)
        raw, volume = build_encoding_volume(
            featmaps, poses, self.grid, self.cost_reg, self.config.feature_stride, self.grid_vertices.to(x.dtype)
        )
        embedding = Embedding(self.cond_encoder(x[:1])[0])
        weights = self.hypernet(embedding)
        return SceneContext(x, featmaps, list(poses), self.config.feature_stride, raw, volume, embedding, weights)

    def _view_samples(self, ctx: SceneContext, points: torch.Tensor):
        feats = warp_points(ctx.featmaps, ctx.poses, points, ctx.stride)
        colors = warp_points(ctx.images, ctx.poses, points, 1)
        valid = feats.validity.T  # (P, N)
        volume_feats, _ = sample_volume(ctx.volume, points)
        return feats.features.transpose(0, 1), colors.features.transpose(0, 1), valid, volume_feats

    def _sdf_inputs(self, points, image_feats, colors, valid, volume_feats) -> torch.Tensor:
        weight = valid[..., None].to(image_feats.dtype)
        count = weight.sum(dim=1).clamp(min=1.0)
        mean_feat = (image_feats * weight).sum(dim=1) / count
        mean_color = (colors * weight).sum(dim=1) / count
        return torch.cat([points, volume_feats, mean_feat, mean_color], dim=-1)

    def blend(
        self,
        image_feats,
        colors,
        valid,
        volume_feats,
        aggregator: Optional[str] = None,
        geo_feat: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Per-point radiance from the source-view colours.

        ``geo_feat`` is the SDF geometry feature of each point; VolTran reads it
        next to the aggregation-token output when scoring views.
        """
        # points seen by no view fall back to all views; their colours are zero
        unseen = ~valid.any(dim=1, keepdim=True)
        valid = valid | unseen
        tokens = self.voltran.build_tokens(colors, image_feats, volume_feats, valid)
        if (aggregator or self.config.aggregator) == "mean":
            logits = mean_pool_baseline(tokens)
        else:
            logits, _ = self.voltran(tokens, geo_feat)
        return blend_colors(blend_weights(logits), colors)

    def query(
        self,
        ctx: SceneContext,
        points: torch.Tensor,
        aggregator: Optional[str] = None,
        with_gradients: bool = False,
        sdf_fn: Optional[SdfOverride] = None,
    ) -> PointQuery:
        image_feats, colors, valid, volume_feats = self._view_samples(ctx, points)
        x = self._sdf_inputs(points, image_feats, colors, valid, volume_feats)
        gradients = None
        if with_gradients:
            sdf, geo_feat, gradients = sdf_with_gradient(ctx.weights, x)
        else:
            sdf, geo_feat = sdf_forward(ctx.weights, x)
        if sdf_fn is not None:
            sdf = sdf_fn(points)
            gradients = None
        radiance = self.blend(image_feats, colors, valid, volume_feats, aggregator, geo_feat)
        return PointQuery(sdf=sdf, colors=radiance, gradients=gradients)

    def sdf_and_gradient(self, ctx: SceneContext, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """SDF and spatial gradient without the radiance path."""
        image_feats, colors, valid, volume_feats = self._view_samples(ctx, points)
        x = self._sdf_inputs(points, image_feats, colors, valid, volume_feats)
        sdf, _, grad = sdf_with_gradient(ctx.weights, x)
        return sdf, grad

    def render(
        self,
        ctx: SceneContext,
        pose: CameraPose,
        pixels: Tuple[Sequence[int], Sequence[int]],
        n_samples: int,
        generator: Optional[torch.Generator] = None,
        stratified: bool = True,
        aggregator: Optional[str] = None,
        with_gradients: bool = False,
        sdf_fn: Optional[SdfOverride] = None,
        inv_std=None,
    ) -> RenderOutput:
        return render_pixels(
            lambda points: self.query(ctx, points, aggregator, with_gradients, sdf_fn),
            pose,
            pixels,
            n_samples,
            self.inv_std if inv_std is None else inv_std,
            generator,
            stratified,
            self.dtype,
        )

    @torch.no_grad()
    def render_image(
        self,
        ctx: SceneContext,
        pose: CameraPose,
        n_samples: int,
        chunk: int = 2048,
        aggregator: Optional[str] = None,
        background: Sequence[float] = WHITE,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Full H x W x 3 image over ``background`` and its depth map (midpoint samples)."""
        px, py = image_pixels(pose)
        colors, depths = [], []
        for start in range(0, len(px), chunk):
            sl = slice(start, start + chunk)
            out = self.render(ctx, pose, (px[sl], py[sl]), n_samples, stratified=False, aggregator=aggregator)
            colors.append(out.with_background(background))
            depths.append(out.depth)
        rgb = torch.cat(colors).clamp(0.0, 1.0).reshape(pose.height, pose.width, 3)
        depth = torch.cat(depths).reshape(pose.height, pose.width)
        debug_print(f"rendered {pose.width}x{pose.height} view in {len(range(0, len(px), chunk))} chunks")
        return rgb.double().cpu().numpy(), depth.double().cpu().numpy()

    @torch.no_grad()
    def sdf_at(self, ctx: SceneContext, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        out = []
        for start in range(0, len(points), chunk):
            p = torch.as_tensor(points[start : start + chunk], dtype=self.dtype)
            image_feats, colors, valid, volume_feats = self._view_samples(ctx, p)
            sdf, _ = sdf_forward(ctx.weights, self._sdf_inputs(p, image_feats, colors, valid, volume_feats))
            out.append(sdf.double().cpu().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    @torch.no_grad()
    def point_colors(
        self, ctx: SceneContext, points: np.ndarray, chunk: int = 16384, aggregator: Optional[str] = None
    ) -> np.ndarray:
        """View-blended radiance at points, used to colour mesh vertices."""
        out = []
        for start in range(0, len(points), chunk):
            p = torch.as_tensor(points[start : start + chunk], dtype=self.dtype)
            image_feats, colors, valid, volume_feats = self._view_samples(ctx, p)
            _, geo_feat = sdf_forward(ctx.weights, self._sdf_inputs(p, image_feats, colors, valid, volume_feats))
            rgb = self.blend(image_feats, colors, valid, volume_feats, aggregator, geo_feat)
            out.append(rgb.clamp(0.0, 1.0).double().cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, 3))

    def parameter_digest(self) -> str:
        """sha256 over every parameter tensor, in name order."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()
