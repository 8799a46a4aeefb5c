"""VolTran: transformer aggregation over per-view tokens with a learned
aggregation token, producing per-sample blending weights."""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class TokenMatrix:
    """Tokens of B samples: row 0 is the aggregation token, rows 1..N the views."""

    X: torch.Tensor  # (B, N + 1, d_model)
    validity: torch.Tensor  # (B, N) bool

    def __post_init__(self):
        if self.X.ndim == 2:
            self.X = self.X[None]
        if self.validity.ndim == 1:
            self.validity = self.validity[None]
        if self.X.shape[:2] != (self.validity.shape[0], self.validity.shape[1] + 1):
            raise ValueError(
                f"Token rows {tuple(self.X.shape[:2])} do not match validity {tuple(self.validity.shape)} + 1"
            )

    @property
    def n_views(self) -> int:
        return int(self.validity.shape[1])

    def key_mask(self) -> torch.Tensor:
        """Key validity including the always-valid aggregation token."""
        agg = torch.ones_like(self.validity[:, :1])
        return torch.cat([agg, self.validity], dim=1)

    def permuted(self, order) -> "TokenMatrix":
        order = torch.as_tensor(order, dtype=torch.long)
        rows = torch.cat([torch.zeros(1, dtype=torch.long), order + 1])
        return TokenMatrix(self.X[:, rows], self.validity[:, order])


def padded_width(token_dim: int, n_heads: int) -> int:
    return int(math.ceil(token_dim / n_heads) * n_heads)


def _check_views(validity: torch.Tensor) -> None:
    if validity.shape[1] == 0 or not bool(validity.any(dim=1).all()):
        raise ValueError("Every sample needs at least one valid view")


class VolTranLayer(nn.Module):
    """Pre-norm block: LayerNorm, multi-head attention, skip; LayerNorm, MLP, skip."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 2):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"Model width {d_model} is not a multiple of {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.f_q = nn.Linear(d_model, d_model, bias=False)
        self.f_k = nn.Linear(d_model, d_model, bias=False)
        self.f_v = nn.Linear(d_model, d_model, bias=False)
        self.w_h = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, mlp_ratio * d_model), nn.GELU(), nn.Linear(mlp_ratio * d_model, d_model))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def attention_probs(self, x: torch.Tensor, key_valid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Row-stochastic attention (B, heads, T, T) and the value heads."""
        q, k, v = self._heads(self.f_q(x)), self._heads(self.f_k(x)), self._heads(self.f_v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1), v

    def self_attention(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        """Concatenated heads Softmax(A) f_V(X), before the W_H merge."""
        probs, v = self.attention_probs(x, key_valid)
        out = probs @ v
        return out.transpose(1, 2).reshape(x.shape)

    def multi_head_attention(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        return self.w_h(self.self_attention(x, key_valid))

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        x = x + self.multi_head_attention(self.norm1(x), key_valid)
        return x + self.mlp(self.norm2(x))


class VolTran(nn.Module):
    """Transformer over view tokens.

    The logit head reads each view token's output next to the aggregation-token
    output and an optional per-sample context such as the SDF geometry feature.
    """

    def __init__(self, token_dim: int, n_heads: int = 5, n_layers: int = 2, mlp_ratio: int = 2, context_dim: int = 0):
        super().__init__()
        if n_heads < 1 or n_layers < 1:
            raise ValueError(f"Need at least one head and one layer, got {n_heads} heads, {n_layers} layers")
        if context_dim < 0:
            raise ValueError(f"context_dim must be >= 0, got {context_dim}")
        self.token_dim = token_dim
        self.context_dim = context_dim
        self.d_model = padded_width(token_dim, n_heads)
        self.agg_token = nn.Parameter(0.02 * torch.randn(self.d_model))
        self.layers = nn.ModuleList(VolTranLayer(self.d_model, n_heads, mlp_ratio) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(self.d_model)
        head_in = 2 * self.d_model + context_dim
        self.head = nn.Sequential(nn.Linear(head_in, self.d_model), nn.GELU(), nn.Linear(self.d_model, 1))

    def build_tokens(
        self,
        colors: torch.Tensor,
        image_feats: torch.Tensor,
        volume_feats: torch.Tensor,
        validity: torch.Tensor,
    ) -> TokenMatrix:
        """Assemble [c_i | F_i | G] view tokens (B, N, .) under the aggregation token."""
        b, n = validity.shape
        vol = volume_feats[:, None, :].expand(b, n, volume_feats.shape[-1])
        views = torch.cat([colors, image_feats, vol], dim=-1)
        if views.shape[-1] != self.token_dim:
            raise ValueError(f"Token width {views.shape[-1]} does not match {self.token_dim}")
        views = F.pad(views, (0, self.d_model - self.token_dim))
        views = views * validity[..., None].to(views.dtype)
        agg = self.agg_token.to(views.dtype)[None, None, :].expand(b, 1, self.d_model)
        return TokenMatrix(torch.cat([agg, views], dim=1), validity)

    def forward(self, tokens: TokenMatrix, context: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        return voltran_forward(tokens, self, context)


def self_attention(X: TokenMatrix, layer: VolTranLayer) -> torch.Tensor:
    """Masked scaled dot-product attention of one layer, heads concatenated."""
    _check_views(X.validity)
    return layer.self_attention(X.X, X.key_mask())


def voltran_forward(
    X: TokenMatrix, params: VolTran, context: Optional[torch.Tensor] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Blending logits (B, N), -inf on invalid views, and the aggregation-token output.

    ``context`` is a (B, context_dim) per-sample feature; missing context reads as zeros.
    """
    _check_views(X.validity)
    key_valid = X.key_mask()
    h = X.X
    for layer in params.layers:
        h = layer(h, key_valid)
    h = params.final_norm(h)
    b, n = X.validity.shape
    if context is None:
        context = h.new_zeros(b, params.context_dim)
    elif context.shape != (b, params.context_dim):
        raise ValueError(f"Context shape {tuple(context.shape)} does not match ({b}, {params.context_dim})")
    shared = torch.cat([h[:, 0], context.to(h.dtype)], dim=-1)
    views = torch.cat([h[:, 1:], shared[:, None, :].expand(b, n, shared.shape[-1])], dim=-1)
    logits = params.head(views).squeeze(-1)
    logits = logits.masked_fill(~X.validity, float("-inf"))
    return logits, h[:, 0]


def mean_pool_baseline(X: TokenMatrix) -> torch.Tensor:
    """Uniform logits over valid views."""
    zeros = torch.zeros(X.validity.shape, dtype=X.X.dtype, device=X.X.device)
    return zeros.masked_fill(~X.validity, float("-inf"))


def blend_weights(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over views; invalid views (logit -inf) get weight 0."""
    if not bool(torch.isfinite(logits).any(dim=-1).all()):
        raise ValueError("Every sample needs at least one valid view")
    return torch.softmax(logits, dim=-1)


def blend_colors(weights: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Radiance sum_i w_i c_i for weights (B, N) and colours (B, N, 3)."""
    return (weights[..., None] * colors).sum(dim=-2)
