"""HyperNetwork-generated SDF network: weight generation, forward pass and
spatial gradient."""

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .featnet import Embedding

SOFTPLUS_BETA = 100.0
FINAL_GENERATOR_SCALE = 1e-3


@dataclass(frozen=True)
class SDFArchitecture:
    """Layer widths of the SDF MLP: d inputs, hidden layers, 1 + g outputs."""

    input_dim: int
    hidden_dims: Tuple[int, ...] = (64, 64)
    geo_feat_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 3:
            raise ValueError(f"SDF input must hold at least the 3 point coordinates, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"Hidden widths must be >= 1, got {self.hidden_dims}")
        if self.geo_feat_dim < 0:
            raise ValueError(f"geo_feat_dim must be >= 0, got {self.geo_feat_dim}")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "SDFArchitecture":
        return cls(config.sdf_input_dim, tuple(config.sdf_hidden), config.geo_feat_dim)

    @property
    def output_dim(self) -> int:
        return 1 + self.geo_feat_dim

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(out, in) of every linear layer."""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass(frozen=True)
class GeneratedWeights:
    layers: Tuple[Tuple[torch.Tensor, torch.Tensor], ...]

    def check(self, arch: SDFArchitecture) -> "GeneratedWeights":
        shapes = [(tuple(w.shape), tuple(b.shape)) for w, b in self.layers]
        expected = [((o, i), (o,)) for o, i in arch.layer_shapes]
        if shapes != expected:
            raise ValueError(f"Generated weight shapes {shapes} do not match architecture {expected}")
        return self

    @classmethod
    def zeros(cls, arch: SDFArchitecture, dtype: torch.dtype = torch.float64) -> "GeneratedWeights":
        return cls(tuple((torch.zeros(o, i, dtype=dtype), torch.zeros(o, dtype=dtype)) for o, i in arch.layer_shapes))

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(w).all() and torch.isfinite(b).all()) for w, b in self.layers)


def geometric_init(arch: SDFArchitecture, radius: float = 0.5) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Layer weights whose SDF starts close to a sphere of ``radius``.

    Only the point coordinates feed the first layer; the feature columns start at zero.
    """
    layers = []
    shapes = arch.layer_shapes
    for index, (out_dim, in_dim) in enumerate(shapes):
        if index == len(shapes) - 1:
            weight = torch.zeros(out_dim, in_dim)
            weight[0] = math.sqrt(math.pi) / math.sqrt(in_dim) + 1e-4 * torch.randn(in_dim)
            bias = torch.zeros(out_dim)
            bias[0] = -radius
            if index == 0:
                weight[0, 3:] = 0.0
        else:
            weight = torch.randn(out_dim, in_dim) * math.sqrt(2.0) / math.sqrt(out_dim)
            bias = torch.zeros(out_dim)
            if index == 0:
                weight[:, 3:] = 0.0
        layers.append((weight, bias))
    return layers


class LayerGenerator(nn.Sequential):
    """Three fully connected layers mapping the embedding to one flattened layer."""

    def __init__(self, embedding_dim: int, hidden: int, out_dim: int, in_dim: int):
        super().__init__(
            nn.Linear(embedding_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim * (in_dim + 1)),
        )
        self.out_dim = out_dim
        self.in_dim = in_dim

    def unpack(self, flat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        n = self.out_dim * self.in_dim
        weight = flat[:n].reshape(self.out_dim, self.in_dim) / math.sqrt(self.in_dim)
        return weight, flat[n:]


class HyperNetwork(nn.Module):
    """One generator per SDF layer, all conditioned on the same embedding."""

    def __init__(self, arch: SDFArchitecture, embedding_dim: int, hidden: int = 32, init_radius: float = 0.5):
        super().__init__()
        self.arch = arch
        self.embedding_dim = embedding_dim
        self.generators = nn.ModuleList(LayerGenerator(embedding_dim, hidden, o, i) for o, i in arch.layer_shapes)
        with torch.no_grad():
            for generator, (weight, bias) in zip(self.generators, geometric_init(arch, init_radius)):
                final = generator[-1]
                final.weight.uniform_(-FINAL_GENERATOR_SCALE, FINAL_GENERATOR_SCALE)
                final.bias.copy_(torch.cat([(weight * math.sqrt(generator.in_dim)).reshape(-1), bias]))

    def forward(self, embedding: Embedding) -> GeneratedWeights:
        return generate_weights(embedding, self.arch, self)


class DirectSDFWeights(nn.Module):
    """Plain learned SDF weights, ignoring the embedding."""

    def __init__(self, arch: SDFArchitecture, init_radius: float = 0.5):
        super().__init__()
        self.arch = arch
        init = geometric_init(arch, init_radius)
        self.weights = nn.ParameterList(nn.Parameter(w) for w, _ in init)
        self.biases = nn.ParameterList(nn.Parameter(b) for _, b in init)

    def forward(self, embedding: Embedding = None) -> GeneratedWeights:
        return GeneratedWeights(tuple(zip(self.weights, self.biases)))


def generate_weights(e: Embedding, arch: SDFArchitecture, hp: HyperNetwork) -> GeneratedWeights:
    """Per-layer SDF weights from the conditioning embedding."""
    if e.dim != hp.embedding_dim:
        raise ValueError(f"Embedding has {e.dim} dimensions, HyperNetwork expects {hp.embedding_dim}")
    if arch != hp.arch:
        raise ValueError(f"HyperNetwork was built for {hp.arch}, not {arch}")
    return GeneratedWeights(tuple(gen.unpack(gen(e.vector)) for gen in hp.generators)).check(arch)


def sdf_forward(w: GeneratedWeights, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Signed distance and geometry features for a batch of composed inputs (P x d)."""
    single = x.ndim == 1
    h = x[None] if single else x
    layers = w.layers
    for weight, bias in layers[:-1]:
        h = F.softplus(F.linear(h, weight, bias), beta=SOFTPLUS_BETA)
    weight, bias = layers[-1]
    out = F.linear(h, weight, bias)
    if single:
        out = out[0]
    return out[..., 0], out[..., 1:]


def sdf_with_gradient(w: GeneratedWeights, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """SDF, geometry features and the gradient w.r.t. the 3 point coordinates.

    The remaining input columns are held fixed. The gradient keeps its graph so
    losses on it train the weights.
    """
    with torch.enable_grad():
        points = x[..., :3].detach().requires_grad_(True)
        s, geo = sdf_forward(w, torch.cat([points, x[..., 3:]], dim=-1))
        (grad,) = torch.autograd.grad(s.sum(), points, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(points)
    return s, geo, grad


def sdf_spatial_gradient(w: GeneratedWeights, x: torch.Tensor) -> torch.Tensor:
    return sdf_with_gradient(w, x)[2]

