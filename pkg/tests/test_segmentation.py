"""Cluster-to-object matching and the segmentation benchmark."""

from __future__ import annotations

import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.fakes import OracleFeatures
from tubeot.config import RunConfig, SegmentationConfig, TubeGeometry
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, ShapeError
from tubeot.eval.segmentation import (
    REGIMES,
    downsample_gt,
    match_and_score,
    overcluster_k,
    segmentation_benchmark,
    upsample_labels,
)
from tubeot.train.trainer import train

GEOM = TubeGeometry(tubelet=2, patch=4)


def _block_clip(clip_id: str = "blocks") -> VideoClip:
    """Two tube-aligned squares on a background, 4 frames of 16x16."""
    masks = np.zeros((4, 16, 16), dtype=np.uint16)
    masks[:, :8, :8] = 1
    masks[:, 8:, 8:] = 2
    frames = np.zeros((4, 3, 16, 16), dtype=np.float32)
    return VideoClip(clip_id=clip_id, frames=frames, instance_masks=masks, label=0)


def _iou_matrix(clusters: np.ndarray, gt: np.ndarray, k: int, c: int) -> np.ndarray:
    iou = np.zeros((k, c))
    for i in range(k):
        for j in range(c):
            a, b = clusters == i, gt == j
            union = np.logical_or(a, b).sum()
            iou[i, j] = np.logical_and(a, b).sum() / union if union else 0.0
    return iou


def test_worked_example() -> None:
    gt = np.array([[[0, 0, 1, 1, 2, 2]]])
    clusters = np.array([[[0, 0, 0, 1, 1, 1]]])
    result = match_and_score(clusters, gt, "hungarian")
    assert result.mapping == {0: 0, 1: 2}
    assert result.matched_iou == pytest.approx(4 / 3)
    assert result.per_class_iou == {1: 0.0, 2: pytest.approx(2 / 3)}
    assert result.miou == pytest.approx(1 / 3)
    assert match_and_score(clusters, gt, "precision").miou == pytest.approx(1 / 3)


def test_relabelled_prediction_scores_one() -> None:
    gt = np.array([[[0, 1, 1], [2, 2, 0]]])
    clusters = np.array([[[7, 3, 3], [9, 9, 7]]])
    for method in ("hungarian", "precision"):
        assert match_and_score(clusters, gt, method).miou == 1.0  # type: ignore[arg-type]


def test_surplus_clusters_fall_to_background_under_hungarian() -> None:
    gt = np.array([[[0, 0, 1, 1]]])
    clusters = np.array([[[0, 1, 2, 3]]])
    hungarian = match_and_score(clusters, gt, "hungarian", regime="overclustering")
    precision = match_and_score(clusters, gt, "precision", regime="overclustering")
    assert hungarian.miou == pytest.approx(0.5)
    assert precision.miou == 1.0
    assert sorted(hungarian.mapping.values()).count(0) == 3
    assert hungarian.k == 4


@settings(max_examples=60, deadline=None)
@given(
    k=st.integers(min_value=1, max_value=5),
    c=st.integers(min_value=2, max_value=4),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_hungarian_matching_is_optimal(k: int, c: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, c, size=(2, 4, 5))
    gt[0, 0, 0] = 1
    clusters = rng.integers(0, k, size=(2, 4, 5))
    result = match_and_score(clusters, gt, "hungarian")

    ids = np.unique(clusters)
    dense = np.searchsorted(ids, clusters)
    n_classes = int(gt.max()) + 1
    iou = _iou_matrix(dense, gt, len(ids), n_classes)
    if len(ids) <= n_classes:
        best = max(
            sum(iou[i, p] for i, p in enumerate(perm))
            for perm in itertools.permutations(range(n_classes), len(ids))
        )
    else:
        best = max(
            sum(iou[p, j] for j, p in enumerate(perm))
            for perm in itertools.permutations(range(len(ids)), n_classes)
        )
    assert result.matched_iou == pytest.approx(best)
    assert 0.0 <= result.miou <= 1.0


def test_per_frame_matching() -> None:
    gt = np.zeros((2, 2, 2), dtype=np.int64)
    gt[:, 0, :] = 1
    clusters = np.zeros((2, 2, 2), dtype=np.int64)
    clusters[0, 0, :] = 1
    clusters[1, 1, :] = 1  # the ids swap roles in the second frame
    per_frame = match_and_score(clusters, gt, "hungarian", per_frame=True)
    per_clip = match_and_score(clusters, gt, "hungarian")
    assert per_frame.miou == 1.0
    assert per_frame.mapping == {}
    assert per_clip.miou < 1.0


def test_matching_errors() -> None:
    gt = np.array([[[0, 1]]])
    with pytest.raises(ShapeError):
        match_and_score(np.zeros((1, 1, 3), dtype=np.int64), gt)
    with pytest.raises(ConfigError, match="foreground"):
        match_and_score(np.zeros((1, 1, 2), dtype=np.int64), np.zeros((1, 1, 2), dtype=np.int64))
    with pytest.raises(ConfigError):
        match_and_score(np.zeros((1, 1, 2), dtype=np.int64), gt, "greedy")  # type: ignore[arg-type]


def test_resizing() -> None:
    grid = np.arange(2 * 4 * 4).reshape(2, 4, 4)
    up = upsample_labels(grid, GEOM)
    assert up.shape == (4, 16, 16)
    assert up[1, 5, 14] == grid[0, 1, 3]
    gt = np.zeros((4, 16, 16), dtype=np.uint16)
    gt[2:, 4:8, 0:4] = 3
    down = downsample_gt(gt, GEOM)
    assert down.shape == (2, 4, 4)
    assert down[1, 1, 0] == 3
    assert down.sum() == 3


def test_overcluster_k() -> None:
    clips = [_block_clip("a"), _block_clip("b")]
    # Three classes per clip including background, times three.
    assert overcluster_k(clips, 3.0) == 9
    with pytest.raises(ConfigError):
        overcluster_k([VideoClip(clip_id="bare", frames=clips[0].frames)], 3.0)


@pytest.mark.parametrize("resize", ["upsample_features", "downsample_gt"])
def test_oracle_features_score_perfectly(resize: str) -> None:
    oracle = OracleFeatures(tubelet=2, patch=4)
    config = SegmentationConfig(resize=resize)  # type: ignore[arg-type]
    result = segmentation_benchmark([_block_clip()], oracle, GEOM, "clustering", config)
    assert result.mean_miou("hungarian") == 1.0
    assert result.mean_miou("precision") == 1.0
    assert result.mean_k() == 3
    assert oracle.calls == 1


def test_oracle_features_under_overclustering() -> None:
    result = segmentation_benchmark(
        [_block_clip()], OracleFeatures(tubelet=2, patch=4), GEOM, "overclustering"
    )
    assert result.mean_k() == 9
    assert result.mean_miou("precision") == 1.0
    assert result.mean_miou("hungarian") <= 1.0


def test_overclustering_never_scores_below_clustering() -> None:
    masks = np.zeros((4, 16, 16), dtype=np.uint16)
    masks[:, 2:10, 3:11] = 1
    masks[:, 9:15, 6:14] = 2
    clip = VideoClip(
        clip_id="offset", frames=np.zeros((4, 3, 16, 16), dtype=np.float32), instance_masks=masks
    )
    oracle = OracleFeatures(tubelet=2, patch=4)
    clustered = segmentation_benchmark([clip], oracle, GEOM, "clustering")
    overclustered = segmentation_benchmark([clip], oracle, GEOM, "overclustering")
    # The objects straddle tube borders, so neither regime is perfect.
    assert clustered.mean_miou("precision") < 1.0
    assert overclustered.mean_miou("precision") >= clustered.mean_miou("precision")


def test_clips_without_masks_are_skipped(caplog: pytest.LogCaptureFixture) -> None:
    bare = VideoClip(clip_id="bare", frames=_block_clip().frames)
    with caplog.at_level(logging.WARNING, logger="tubeot.eval.segmentation"):
        result = segmentation_benchmark(
            [_block_clip(), bare], OracleFeatures(2, 4), GEOM, "clustering"
        )
    assert result.skipped == 1
    assert result.n_clips == 1
    assert "skipped 1 clips" in caplog.text


def test_unknown_regime() -> None:
    with pytest.raises(ConfigError):
        segmentation_benchmark(
            [_block_clip()], OracleFeatures(2, 4), GEOM, "soft"  # type: ignore[arg-type]
        )


def test_benchmark_on_a_trained_encoder(
    clips: list[VideoClip], eval_clips: list[VideoClip], config: RunConfig
) -> None:
    state = train(clips, config).state
    for regime in REGIMES:
        result = segmentation_benchmark(
            eval_clips, state, config.tubes, regime, config.eval.segmentation
        )
        assert result.n_clips == len(eval_clips)
        assert len(result.scores) == 2 * len(eval_clips)
        assert all(0.0 <= score.miou <= 1.0 for score in result.scores)
