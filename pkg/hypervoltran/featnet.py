"""2D feature extractor and the conditioning encoder."""

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np
import torch
from torch import nn

ImageLike = Union[np.ndarray, torch.Tensor]


@dataclass
class FeatureMap:
    """Channel-first feature raster (C x H_f x W_f) of one source view."""

    data: torch.Tensor
    stride: int
    source_view: int = 0

    def __post_init__(self):
        if self.stride not in (1, 2, 4):
            raise ValueError(f"Feature stride must be 1, 2 or 4, got {self.stride}")
        if self.data.ndim != 3:
            raise ValueError(f"Feature data must be C x H x W, got shape {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


@dataclass
class Embedding:
    vector: torch.Tensor

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValueError(f"Embedding must be a vector, got shape {tuple(self.vector.shape)}")

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def to_image_batch(images: ImageLike, dtype: torch.dtype = None) -> torch.Tensor:
    """Convert H x W x 3 or N x H x W x 3 images to an N x 3 x H x W tensor."""
    x = torch.as_tensor(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"Expected RGB images (... x H x W x 3), got shape {tuple(x.shape)}")
    if dtype is not None:
        x = x.to(dtype)
    elif not torch.is_floating_point(x):
        x = x.float()
    return x.permute(0, 3, 1, 2).contiguous()


class ConvReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2),
            nn.ReLU(inplace=True),
        )


class FeatureNet(nn.Module):
    """Three-level convolutional pyramid; the finest level kept is ``stride``."""

    def __init__(self, out_channels: int = 16, stride: int = 4):
        super().__init__()
        if stride not in (1, 2, 4):
            raise ValueError(f"Feature stride must be 1, 2 or 4, got {stride}")
        self.stride = stride
        self.out_channels = out_channels
        levels = [nn.Sequential(ConvReLU(3, 8), ConvReLU(8, 8))]
        width = 8
        if stride >= 2:
            levels.append(nn.Sequential(ConvReLU(8, 16, 5, 2), ConvReLU(16, 16), ConvReLU(16, 16)))
            width = 16
        if stride >= 4:
            levels.append(nn.Sequential(ConvReLU(16, 32, 5, 2), ConvReLU(32, 32), ConvReLU(32, 32)))
            width = 32
        self.levels = nn.Sequential(*levels)
        self.toplayer = nn.Conv2d(width, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, 3, H, W) -> (N, C, ceil(H/stride), ceil(W/stride))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"FeatureNet expects N x 3 x H x W input, got {tuple(x.shape)}")
        return self.toplayer(self.levels(x))


class ConditionEncoder(nn.Module):
    """Small trainable image encoder pooled globally into one embedding."""

    def __init__(self, embedding_dim: int = 64, width: int = 32):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.body = nn.Sequential(
            ConvReLU(3, 16, 3, 2),
            ConvReLU(16, width, 3, 2),
            ConvReLU(width, width),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.proj = nn.Linear(width, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"ConditionEncoder expects N x 3 x H x W input, got {tuple(x.shape)}")
        return self.proj(self.body(x))


def _module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def extract_features(image: ImageLike, net: FeatureNet, source_view: int = 0) -> FeatureMap:
    """Feature map of one H x W x 3 image."""
    x = to_image_batch(image, _module_dtype(net))
    if x.shape[0] != 1:
        raise ValueError("extract_features takes a single image; use extract_feature_batch for stacks")
    return FeatureMap(net(x)[0], net.stride, source_view)


def extract_feature_batch(images: ImageLike, net: FeatureNet) -> List[FeatureMap]:
    x = to_image_batch(images, _module_dtype(net))
    return [FeatureMap(f, net.stride, i) for i, f in enumerate(net(x))]


def stack_feature_maps(featmaps: Sequence[FeatureMap]) -> torch.Tensor:
    if not featmaps:
        raise ValueError("Need at least one feature map")
    strides = {f.stride for f in featmaps}
    if len(strides) != 1:
        raise ValueError(f"Feature maps mix strides {sorted(strides)}")
    return torch.stack([f.data for f in featmaps])


def encode_condition(image: ImageLike, encoder: ConditionEncoder) -> Embedding:
    """Embedding of the conditioning view."""
    x = to_image_batch(image, _module_dtype(encoder))
    if x.shape[0] != 1:
        raise ValueError("encode_condition takes exactly one image")
    return Embedding(encoder(x)[0])
