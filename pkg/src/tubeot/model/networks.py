"""The video model and the projection network.

The video model is an asymmetric masked encoder-decoder: the encoder sees only
visible tubes, the narrower decoder sees the encoded tubes plus one shared mask
token per hidden tube, and a linear head maps each decoded mask token into the
clustering space. The projection network embeds every tube independently into
the same space and supplies the targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from tubeot.config import ProjectionConfig, TransformerConfig
from tubeot.data.store import FeatureStore
from tubeot.errors import DegenerateMaskError, NumericError, ShapeError
from tubeot.model.tokenizer import (
    MaskPartition,
    TubeEmbedding,
    inverse_mask_select,
    standardize_tubes,
)


@dataclass(frozen=True)
class VideoModelOutput:
    #: ``[..., N_M, d_feat]``; row ``i`` belongs to ``masked_positions[i]``.
    x_psi: torch.Tensor
    pixel_pred: torch.Tensor | None = None


@dataclass(frozen=True)
class ProjectionOutput:
    x_phi: torch.Tensor


def sincos_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encoding factorized over the ``(t, y, x)`` axes.

    Each axis gets ``2 * (dim // 6)`` channels; leftover channels stay zero.
    """
    per_axis = 2 * (dim // 6)
    out = torch.zeros((*positions.shape[:-1], dim))
    if per_axis == 0:
        return out
    half = per_axis // 2
    omega = 1.0 / 10000 ** (torch.arange(half, dtype=torch.float64) / half)
    parts = []
    for axis in range(3):
        angles = positions[..., axis : axis + 1].to(torch.float64) * omega
        parts.extend([torch.sin(angles), torch.cos(angles)])
    encoded = torch.cat(parts, dim=-1).to(torch.float32)
    out[..., : encoded.shape[-1]] = encoded
    return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0) -> None:
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (
            rearrange(part, "b n (h d) -> b h n d", h=self.heads)
            for part in self.to_qkv(x).chunk(3, dim=-1)
        )
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = torch.matmul(self.dropout(attn), v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float = 0.0) -> None:
        super().__init__()
        hidden = max(1, int(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VideoModel(nn.Module):
    """Masked encoder-decoder over tube tokens.

    ``pixel_head`` adds the raw-pixel regression head used by the pixel
    baseline; the feature head is always present.
    """

    def __init__(
        self, config: TransformerConfig, tube_dim: int, *, pixel_head: bool = False
    ) -> None:
        super().__init__()
        self.config = config
        d_model, d_dec = config.d_model, config.decoder_dim
        self.embed = TubeEmbedding(tube_dim, d_model)
        self.encoder = nn.ModuleList(
            Block(d_model, config.heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        )
        self.encoder_norm = nn.LayerNorm(d_model)
        self.to_decoder = nn.Linear(d_model, d_dec)
        self.mask_token = nn.Parameter(torch.zeros(d_dec))
        self.decoder = nn.ModuleList(
            Block(d_dec, config.heads, config.mlp_ratio, config.dropout)
            for _ in range(config.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(d_dec)
        self.feature_head = nn.Linear(d_dec, config.d_feat)
        self.pixel_head = nn.Linear(d_dec, tube_dim) if pixel_head else None
        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def encode(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encoder over ``[B, n, d_model]`` tokens at ``[B, n, 3]`` positions."""
        x = tokens + sincos_encoding(positions, self.config.d_model).to(tokens.dtype)
        for block in self.encoder:
            x = block(x)
        return self.encoder_norm(x)

    def forward(
        self,
        visible_tokens: torch.Tensor,
        visible_positions: torch.Tensor,
        masked_positions: torch.Tensor,
    ) -> VideoModelOutput:
        unbatched = visible_tokens.dim() == 2
        if unbatched:
            visible_tokens = visible_tokens.unsqueeze(0)
            visible_positions = visible_positions.unsqueeze(0)
            masked_positions = masked_positions.unsqueeze(0)
        if visible_tokens.shape[1] == 0:
            raise DegenerateMaskError("the video model needs at least one visible tube")
        if visible_positions.shape[:2] != visible_tokens.shape[:2]:
            raise ShapeError("visible tokens and positions disagree in count")

        encoded = self.to_decoder(self.encode(visible_tokens, visible_positions))
        d_dec = encoded.shape[-1]
        batch, n_masked = masked_positions.shape[:2]
        queries = self.mask_token.expand(batch, n_masked, d_dec)
        x = torch.cat(
            [
                encoded + sincos_encoding(visible_positions, d_dec).to(encoded.dtype),
                queries + sincos_encoding(masked_positions, d_dec).to(encoded.dtype),
            ],
            dim=1,
        )
        for block in self.decoder:
            x = block(x)
        decoded = self.decoder_norm(x[:, -n_masked:]) if n_masked else x[:, :0]

        x_psi = self.feature_head(decoded)
        pixel_pred = self.pixel_head(decoded) if self.pixel_head is not None else None
        if not torch.isfinite(x_psi).all():
            raise NumericError("non-finite activations in the video model")
        if unbatched:
            x_psi = x_psi.squeeze(0)
            pixel_pred = pixel_pred.squeeze(0) if pixel_pred is not None else None
        return VideoModelOutput(x_psi=x_psi, pixel_pred=pixel_pred)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def psi_forward(
    visible_tokens: torch.Tensor,
    visible_positions: torch.Tensor,
    masked_positions: torch.Tensor,
    model: VideoModel,
) -> VideoModelOutput:
    return model(visible_tokens, visible_positions, masked_positions)


class ProjectionMLP(nn.Module):
    """Per-tube MLP: linear layers with GELU between them, no cross-tube mixing."""

    def __init__(
        self, tube_dim: int, d_feat: int, widths: list[int], *, normalize_inputs: bool = True
    ) -> None:
        super().__init__()
        self.normalize_inputs = normalize_inputs
        layers: list[nn.Module] = []
        previous = tube_dim
        for width in widths:
            layers += [nn.Linear(previous, width), nn.GELU()]
            previous = width
        layers.append(nn.Linear(previous, d_feat))
        self.net = nn.Sequential(*layers)
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5))
                nn.init.zeros_(layer.bias)

    @classmethod
    def from_config(cls, config: ProjectionConfig, tube_dim: int, d_feat: int) -> ProjectionMLP:
        return cls(tube_dim, d_feat, config.hidden_widths, normalize_inputs=config.normalize_inputs)

    @property
    def depth(self) -> int:
        """Number of linear layers."""
        return sum(isinstance(layer, nn.Linear) for layer in self.net)

    def forward(self, raw_tubes: torch.Tensor) -> torch.Tensor:
        x = standardize_tubes(raw_tubes) if self.normalize_inputs else raw_tubes
        return self.net(x)


def phi_forward_mlp(raw_tubes_masked: torch.Tensor, projector: ProjectionMLP) -> ProjectionOutput:
    x_phi = projector(raw_tubes_masked)
    if not torch.isfinite(x_phi).all():
        raise NumericError("non-finite activations in the projection network")
    return ProjectionOutput(x_phi=x_phi)


def phi_forward_external(
    clip_id: str, mask: MaskPartition, store: FeatureStore, *, d_feat: int | None = None
) -> ProjectionOutput:
    """Frozen target rows for the masked tubes of ``clip_id``."""
    features = store.get(clip_id)
    if d_feat is not None and features.shape[1] != d_feat:
        raise ShapeError(f"stored features have width {features.shape[1]}, expected {d_feat}")
    return ProjectionOutput(x_phi=inverse_mask_select(features, mask).detach())
