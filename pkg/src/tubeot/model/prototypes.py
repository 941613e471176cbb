"""Learnable prototypes and prototype scores."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from tubeot.config import PrototypeConfig
from tubeot.errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class ScoreMatrix:
    #: ``[B, K]`` similarity of every sample to every prototype.
    x_tilde: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        b, k = self.x_tilde.shape
        return b, k


class PrototypeBank(nn.Module):
    """``K`` prototype rows in the clustering space.

    Rows start uniformly distributed on the unit sphere. With ``normalize`` set,
    the trainer calls :meth:`renormalize_` after every optimizer step so rows
    stay unit length.
    """

    def __init__(self, count: int, d_feat: int, *, normalize: bool = True, seed: int = 0) -> None:
        super().__init__()
        if count < 2:
            raise ConfigError(f"a prototype bank needs at least two rows, got {count}")
        generator = torch.Generator().manual_seed(seed)
        weight = torch.randn(count, d_feat, generator=generator)
        self.weight = nn.Parameter(F.normalize(weight, dim=1))
        self.normalize = normalize

    @classmethod
    def from_config(cls, config: PrototypeConfig, d_feat: int) -> PrototypeBank:
        return cls(config.count, d_feat, normalize=config.normalize, seed=config.init_seed)

    @property
    def count(self) -> int:
        return int(self.weight.shape[0])

    @property
    def d_feat(self) -> int:
        return int(self.weight.shape[1])

    @torch.no_grad()
    def renormalize_(self) -> None:
        if self.normalize:
            self.weight.copy_(F.normalize(self.weight, dim=1))


def scores(features: torch.Tensor, bank: PrototypeBank) -> ScoreMatrix:
    """``x_tilde[b, k]``: cosine similarity, or the raw dot product for an unnormalized bank."""
    if features.dim() != 2 or features.shape[1] != bank.d_feat:
        raise ShapeError(
            f"features of shape {tuple(features.shape)} do not match a bank of width {bank.d_feat}"
        )
    prototypes = bank.weight
    if bank.normalize:
        norms = features.norm(dim=1, keepdim=True)
        if bool((norms == 0).any()):
            raise NumericError("cannot normalize a zero feature row")
        features = features / norms
        prototypes = F.normalize(prototypes, dim=1)
    x_tilde = features @ prototypes.T
    if not torch.isfinite(x_tilde).all():
        raise NumericError("non-finite prototype scores")
    return ScoreMatrix(x_tilde=x_tilde)


def softmax_probs(x_tilde: ScoreMatrix | torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise softmax of ``x_tilde / tau``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = x_tilde.x_tilde if isinstance(x_tilde, ScoreMatrix) else x_tilde
    # softmax subtracts the row max internally.
    return torch.softmax(logits / tau, dim=1)
