"""Dense feature extraction from a frozen encoder."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
import torch

from tests.fakes import tiny_config
from tubeot.config import RunConfig
from tubeot.data.store import FeatureStore
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, ShapeError
from tubeot.eval.features import (
    as_extractor,
    export_projection_features,
    extract_dense_features,
    extractor_for,
)
from tubeot.model.networks import phi_forward_external
from tubeot.model.tokenizer import clip_tensor, grid_positions, patchify, sample_mask
from tubeot.train.state import build_state
from tubeot.train.trainer import train


def test_grid_layout(clips: list[VideoClip], config: RunConfig) -> None:
    state = build_state(config)
    features = extract_dense_features(clips[0], state)
    assert features.clip_id == clips[0].clip_id
    assert features.grid.shape == (2, config.model.d_model, 4, 4)
    assert features.tokens.shape == (32, config.model.d_model)
    assert features.pooled().shape == (config.model.d_model,)


def test_tokens_follow_tube_order(clips: list[VideoClip], config: RunConfig) -> None:
    state = build_state(config)
    state.model.eval()
    raw = patchify(clip_tensor(clips[1]), config.tubes)
    positions = grid_positions(config.tubes, 4, 16, 16)
    with torch.no_grad():
        expected = state.model.encode(state.model.embed(raw)[None], positions[None])[0]
    torch.testing.assert_close(extract_dense_features(clips[1], state).tokens, expected)


def test_training_mode_is_restored(clips: list[VideoClip], config: RunConfig) -> None:
    state = build_state(config)
    state.model.train()
    extract_dense_features(clips[0], state)
    assert state.model.training


def test_extraction_is_repeatable(clips: list[VideoClip], config: RunConfig) -> None:
    extract = extractor_for(build_state(config))
    assert torch.equal(extract(clips[2]).grid, extract(clips[2]).grid)


def test_clip_shape_must_match_the_checkpoint(config: RunConfig) -> None:
    state = build_state(config)
    wide = VideoClip(clip_id="wide", frames=np.zeros((4, 3, 16, 32), dtype=np.float32))
    with pytest.raises(ShapeError, match="expects"):
        extract_dense_features(wide, state)


def test_as_extractor_passes_callables_through(config: RunConfig) -> None:
    def fake(clip: VideoClip) -> object:
        return clip

    assert as_extractor(fake) is fake  # type: ignore[arg-type]
    assert callable(as_extractor(build_state(config)))


def test_exported_store_holds_projection_rows(
    tmp_path: Path, clips: list[VideoClip], config: RunConfig
) -> None:
    state = train(clips, config).state
    manifest = export_projection_features(clips, state, tmp_path / "features")
    assert manifest.n_tokens == 32
    assert manifest.d_feat == config.model.d_feat

    assert state.projector is not None
    store = FeatureStore(tmp_path / "features")
    raw = patchify(clip_tensor(clips[2]), config.tubes)
    with torch.no_grad():
        expected = state.projector(raw)
    torch.testing.assert_close(store.get(clips[2].clip_id), expected)

    mask = sample_mask(32, config.train.mask_ratio, torch.Generator().manual_seed(0))
    rows = phi_forward_external(clips[2].clip_id, mask, store).x_phi
    torch.testing.assert_close(rows, expected[mask.masked_idx])


def test_external_run_trains_on_exported_features(
    tmp_path: Path, clips: list[VideoClip], config: RunConfig
) -> None:
    export_projection_features(clips, train(clips, config).state, tmp_path / "features")
    frozen = tiny_config(
        projection={"source": "external", "feature_store": str(tmp_path / "features")}
    )
    result = train(clips, frozen)
    assert result.state.projector is None
    assert len(result.metrics) == 8
    assert all(math.isfinite(row.loss) for row in result.metrics)


def test_export_needs_a_projection_network(tmp_path: Path, clips: list[VideoClip]) -> None:
    state = build_state(tiny_config(train={"objective": "pixel_l2"}))
    with pytest.raises(ConfigError, match="no projection network"):
        export_projection_features(clips, state, tmp_path / "features")
    assert not (tmp_path / "features").exists()
