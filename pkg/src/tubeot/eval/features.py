"""Frozen encoder features over every tube of a clip."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from einops import rearrange

from tubeot.config import RunConfig
from tubeot.data.store import FeatureManifest, FeatureStore
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, NumericError, ShapeError
from tubeot.model.networks import phi_forward_mlp
from tubeot.model.tokenizer import clip_tensor, grid_positions, patchify
from tubeot.train.state import TrainState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenseFeatures:
    clip_id: str
    #: ``[T / tubelet, d, H / patch, W / patch]``.
    grid: torch.Tensor

    @property
    def tokens(self) -> torch.Tensor:
        """``[N_T, d]`` in tube order."""
        return rearrange(self.grid, "nt d nh nw -> (nt nh nw) d")

    def pooled(self) -> torch.Tensor:
        return self.tokens.mean(dim=0)


FeatureExtractor = Callable[[VideoClip], DenseFeatures]


def _check_clip(clip: VideoClip, config: RunConfig) -> None:
    gen = config.data.generator
    expected = (gen.frames, gen.channels, gen.height, gen.width)
    if clip.shape != expected:
        raise ShapeError(
            f"{clip.clip_id} has shape {clip.shape}, the checkpoint expects {expected}"
        )


@torch.no_grad()
def extract_dense_features(clip: VideoClip, train_state: TrainState) -> DenseFeatures:
    """Run the encoder over all tubes, nothing masked."""
    config = train_state.config
    _check_clip(clip, config)
    t, _, h, w = clip.shape
    nt, nh, nw = config.tubes.grid(t, h, w)

    model = train_state.model
    was_training = model.training
    model.eval()
    try:
        raw = patchify(clip_tensor(clip), config.tubes)
        positions = grid_positions(config.tubes, t, h, w)
        encoded = model.encode(model.embed(raw)[None], positions[None])[0]
    finally:
        model.train(was_training)
    if not torch.isfinite(encoded).all():
        raise NumericError(f"non-finite encoder features for {clip.clip_id}")
    grid = rearrange(encoded, "(nt nh nw) d -> nt d nh nw", nt=nt, nh=nh, nw=nw)
    return DenseFeatures(clip_id=clip.clip_id, grid=grid)


def extractor_for(train_state: TrainState) -> FeatureExtractor:
    return lambda clip: extract_dense_features(clip, train_state)


def as_extractor(source: TrainState | FeatureExtractor) -> FeatureExtractor:
    """Accept either a trained state or a ready-made extractor."""
    return extractor_for(source) if isinstance(source, TrainState) else source


@torch.no_grad()
def projection_features(clip: VideoClip, train_state: TrainState) -> torch.Tensor:
    """``[N_T, d_feat]`` projection-network features for every tube of ``clip``."""
    projector = train_state.projector
    if projector is None:
        raise ConfigError("this run has no projection network to export")
    config = train_state.config
    _check_clip(clip, config)
    was_training = projector.training
    projector.eval()
    try:
        raw = patchify(clip_tensor(clip), config.tubes)
        return phi_forward_mlp(raw, projector).x_phi
    finally:
        projector.train(was_training)


def export_projection_features(
    clips: Sequence[VideoClip], train_state: TrainState, out: Path
) -> FeatureManifest:
    """Write a feature store that ``projection.source = "external"`` runs can train against."""
    features = {clip.clip_id: projection_features(clip, train_state) for clip in clips}
    manifest = FeatureStore(out).write(features)
    logger.info(
        "exported %d x %d features for %d clips to %s",
        manifest.n_tokens,
        manifest.d_feat,
        len(features),
        out,
    )
    return manifest
