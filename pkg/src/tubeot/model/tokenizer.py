"""Space-time tubes, their token embeddings, and random tube masking.

Tubes are non-overlapping ``tubelet x patch x patch`` blocks enumerated in
row-major ``(t, y, x)`` grid order. A tube's flattened pixels are ordered
``(frame, row, column, channel)``; :func:`unpatchify` inverts the tiling
exactly, which is what makes the pixel targets lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from einops import rearrange
from torch import nn

from tubeot.config import TubeGeometry, round_half_up
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, DegenerateMaskError, ShapeError

_TILE = "... (nt tk) c (nh ph) (nw pw) -> ... (nt nh nw) (tk ph pw c)"
_UNTILE = "(nt nh nw) (tk ph pw c) -> (nt tk) c (nh ph) (nw pw)"


@dataclass(frozen=True)
class MaskPartition:
    """Masked and visible tube indices of one clip; both sorted ascending."""

    masked_idx: torch.Tensor
    visible_idx: torch.Tensor
    ratio: float

    @property
    def n_tokens(self) -> int:
        return int(self.masked_idx.numel() + self.visible_idx.numel())

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.numel())

    @property
    def n_visible(self) -> int:
        return int(self.visible_idx.numel())


@dataclass(frozen=True)
class TokenizedClip:
    tokens: torch.Tensor
    #: ``[N_T, 3]`` integer ``(t, y, x)`` grid coordinates.
    positions: torch.Tensor
    raw_tubes: torch.Tensor
    mask: MaskPartition | None = None

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def with_mask(self, mask: MaskPartition) -> TokenizedClip:
        if mask.n_tokens != self.n_tokens:
            raise ShapeError(f"mask covers {mask.n_tokens} tubes, clip has {self.n_tokens}")
        return replace(self, mask=mask)


class TubeEmbedding(nn.Module):
    """Linear map from flattened tube pixels to ``d_model``.

    Equivalent to a 3-D convolution whose kernel and stride are the tube size.
    """

    def __init__(self, tube_dim: int, d_model: int) -> None:
        super().__init__()
        self.proj = nn.Linear(tube_dim, d_model)

    def forward(self, raw_tubes: torch.Tensor) -> torch.Tensor:
        return self.proj(raw_tubes)


def masked_count(n_tokens: int, ratio: float) -> int:
    return round_half_up(ratio * n_tokens)


def patchify(frames: torch.Tensor, geom: TubeGeometry) -> torch.Tensor:
    """``[..., T, C, H, W]`` frames to ``[..., N_T, tube_dim]`` tube pixels."""
    t, _, h, w = frames.shape[-4:]
    geom.grid(t, h, w)
    return rearrange(frames, _TILE, tk=geom.tubelet, ph=geom.patch, pw=geom.patch)


def unpatchify(
    raw_tubes: torch.Tensor, geom: TubeGeometry, frames: int, height: int, width: int
) -> torch.Tensor:
    nt, nh, nw = geom.grid(frames, height, width)
    if raw_tubes.shape[0] != nt * nh * nw:
        raise ShapeError(f"{raw_tubes.shape[0]} tubes do not tile a {frames}x{height}x{width} clip")
    return rearrange(
        raw_tubes, _UNTILE, nt=nt, nh=nh, nw=nw, tk=geom.tubelet, ph=geom.patch, pw=geom.patch
    )


def grid_positions(geom: TubeGeometry, frames: int, height: int, width: int) -> torch.Tensor:
    nt, nh, nw = geom.grid(frames, height, width)
    axes = torch.meshgrid(torch.arange(nt), torch.arange(nh), torch.arange(nw), indexing="ij")
    return torch.stack(axes, dim=-1).reshape(-1, 3)


def standardize_tubes(raw_tubes: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-tube zero mean and unit variance over the last dimension."""
    mean = raw_tubes.mean(dim=-1, keepdim=True)
    var = raw_tubes.var(dim=-1, keepdim=True, unbiased=False)
    return (raw_tubes - mean) / (var + eps).sqrt()


def clip_tensor(clip: VideoClip) -> torch.Tensor:
    return torch.from_numpy(clip.frames)


def tubify(clip: VideoClip, geom: TubeGeometry, embed: TubeEmbedding) -> TokenizedClip:
    t, c, h, w = clip.shape
    geom.grid(t, h, w)
    expected = geom.tube_dim(c)
    if embed.proj.in_features != expected:
        raise ShapeError(
            f"embedding expects {embed.proj.in_features} inputs, tubes have {expected}"
        )
    raw = patchify(clip_tensor(clip), geom)
    return TokenizedClip(
        tokens=embed(raw),
        positions=grid_positions(geom, t, h, w),
        raw_tubes=raw,
    )


def sample_mask(n_tokens: int, ratio: float, generator: torch.Generator) -> MaskPartition:
    """Uniformly random masked subset of ``round(ratio * n_tokens)`` tubes."""
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_masked = masked_count(n_tokens, ratio)
    if n_masked in (0, n_tokens):
        raise DegenerateMaskError(
            f"ratio {ratio} masks {n_masked} of {n_tokens} tubes, leaving one side empty"
        )
    order = torch.randperm(n_tokens, generator=generator)
    return MaskPartition(
        masked_idx=order[:n_masked].sort().values,
        visible_idx=order[n_masked:].sort().values,
        ratio=ratio,
    )


def _select(features: torch.Tensor, index: torch.Tensor, n_tokens: int) -> torch.Tensor:
    if features.shape[0] != n_tokens:
        raise ShapeError(f"features have {features.shape[0]} rows, the mask covers {n_tokens}")
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= n_tokens):
        raise ShapeError(f"mask index out of range for {n_tokens} rows")
    return features[index]


def inverse_mask_select(features: torch.Tensor, mask: MaskPartition) -> torch.Tensor:
    """Rows of ``features`` at the masked tubes, in ``masked_idx`` order."""
    return _select(features, mask.masked_idx, mask.n_tokens)


def visible_select(features: torch.Tensor, mask: MaskPartition) -> torch.Tensor:
    return _select(features, mask.visible_idx, mask.n_tokens)


def reassemble(masked: torch.Tensor, visible: torch.Tensor, mask: MaskPartition) -> torch.Tensor:
    """Inverse of the two selections: scatter both row sets back into place."""
    out = masked.new_empty((mask.n_tokens, *masked.shape[1:]))
    out[mask.masked_idx] = masked
    out[mask.visible_idx] = visible
    return out


def gather_rows(features: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Batched row selection: ``[B, N, d]`` at ``[B, n]`` indices to ``[B, n, d]``."""
    return torch.gather(features, 1, index.unsqueeze(-1).expand(-1, -1, features.shape[-1]))
