"""Unsupervised object segmentation: cluster dense features, match clusters to objects, score mIoU.

Ground-truth maps use 0 for background and ``1..M`` for objects. Background is
one of the classes clusters can be matched to; mIoU averages over the
foreground classes only.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from einops import rearrange
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from tubeot.config import SegmentationConfig, TubeGeometry, round_half_up
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, ShapeError
from tubeot.eval.features import FeatureExtractor, as_extractor
from tubeot.eval.kmeans import kmeans
from tubeot.train.state import TrainState

logger = logging.getLogger(__name__)

Method = Literal["hungarian", "precision"]
Regime = Literal["clustering", "overclustering"]
METHODS: tuple[Method, ...] = ("hungarian", "precision")
REGIMES: tuple[Regime, ...] = ("clustering", "overclustering")


@dataclass(frozen=True)
class SegmentationResult:
    miou: float
    regime: Regime
    k: int
    method: Method
    #: IoU of every foreground class present in the ground truth.
    per_class_iou: dict[int, float] = field(default_factory=dict)
    #: Cluster id to class id; empty for per-frame matching.
    mapping: dict[int, int] = field(default_factory=dict)
    #: Summed IoU of the matched (cluster, class) pairs.
    matched_iou: float = 0.0


@dataclass(frozen=True)
class ClipScore:
    clip_id: str
    regime: Regime
    method: Method
    k: int
    miou: float


@dataclass
class BenchmarkResult:
    regime: Regime
    scores: list[ClipScore] = field(default_factory=list)
    skipped: int = 0

    def mean_miou(self, method: Method) -> float:
        values = [s.miou for s in self.scores if s.method == method]
        return float(np.mean(values)) if values else float("nan")

    def mean_k(self) -> float:
        values = [s.k for s in self.scores if s.method == METHODS[0]]
        return float(np.mean(values)) if values else float("nan")

    @property
    def n_clips(self) -> int:
        return len({s.clip_id for s in self.scores})


def upsample_labels(grid_labels: NDArray[np.integer], geom: TubeGeometry) -> NDArray[np.int64]:
    """Nearest-neighbour upsampling of a ``[nt, nh, nw]`` map to frame resolution."""
    out = np.repeat(grid_labels, geom.tubelet, axis=0)
    out = np.repeat(out, geom.patch, axis=1)
    return np.repeat(out, geom.patch, axis=2).astype(np.int64)


def downsample_gt(gt_map: NDArray[np.integer], geom: TubeGeometry) -> NDArray[np.int64]:
    """Nearest-neighbour downsampling: the pixel at each tube's centre."""
    t, h, w = gt_map.shape
    geom.grid(t, h, w)
    return gt_map[
        geom.tubelet // 2 :: geom.tubelet,
        geom.patch // 2 :: geom.patch,
        geom.patch // 2 :: geom.patch,
    ].astype(np.int64)


def _confusion(
    clusters: NDArray[np.int64], classes: NDArray[np.int64], n_clusters: int, n_classes: int
) -> NDArray[np.int64]:
    flat = clusters.ravel() * n_classes + classes.ravel()
    return np.bincount(flat, minlength=n_clusters * n_classes).reshape(n_clusters, n_classes)


def _iou(confusion: NDArray[np.int64]) -> NDArray[np.float64]:
    union = confusion.sum(axis=1, keepdims=True) + confusion.sum(axis=0, keepdims=True) - confusion
    return np.divide(confusion, union, out=np.zeros(confusion.shape), where=union > 0)


def _mapping(confusion: NDArray[np.int64], method: Method) -> tuple[NDArray[np.int64], float]:
    """Class for every cluster, plus the summed IoU of the matched pairs."""
    iou = _iou(confusion)
    if method == "precision":
        mapping = confusion.argmax(axis=1)
        return mapping, float(iou[np.arange(len(mapping)), mapping].sum())
    rows, cols = linear_sum_assignment(-iou)
    # Clusters left over after the one-to-one matching fall to background.
    mapping = np.zeros(confusion.shape[0], dtype=np.int64)
    mapping[rows] = cols
    return mapping, float(iou[rows, cols].sum())


def _relabel(cluster_map: NDArray[np.int64]) -> tuple[NDArray[np.int64], int]:
    ids, inverse = np.unique(cluster_map, return_inverse=True)
    return inverse.reshape(cluster_map.shape), len(ids)


def match_and_score(
    cluster_map: NDArray[np.integer],
    gt_map: NDArray[np.integer],
    method: Method = "hungarian",
    *,
    regime: Regime = "clustering",
    per_frame: bool = False,
) -> SegmentationResult:
    """Map clusters to ground-truth classes and score the mapped prediction.

    ``cluster_map`` and ``gt_map`` share one ``[T, H, W]`` shape. With
    ``per_frame`` the mapping is solved independently in every frame.
    """
    clusters = np.asarray(cluster_map)
    gt = np.asarray(gt_map).astype(np.int64)
    if clusters.shape != gt.shape:
        raise ShapeError(f"cluster map {clusters.shape} and ground truth {gt.shape} differ")
    if method not in METHODS:
        raise ConfigError(f"unknown matching method {method!r}")
    if gt.min() < 0:
        raise ConfigError("ground-truth ids must be non-negative")
    foreground = [int(c) for c in np.unique(gt) if c > 0]
    if not foreground:
        raise ConfigError("ground truth contains no foreground object")

    dense, n_clusters = _relabel(clusters.astype(np.int64))
    n_classes = int(gt.max()) + 1
    frames = [slice(t, t + 1) for t in range(gt.shape[0])] if per_frame else [slice(None)]
    predicted = np.zeros_like(gt)
    matched = 0.0
    mapping: NDArray[np.int64] = np.zeros(0, dtype=np.int64)
    for window in frames:
        confusion = _confusion(dense[window], gt[window], n_clusters, n_classes)
        mapping, total = _mapping(confusion, method)
        predicted[window] = mapping[dense[window]]
        matched += total

    final = _confusion(predicted, gt, n_classes, n_classes)
    iou = _iou(final)
    per_class = {c: float(iou[c, c]) for c in foreground}
    k = n_clusters
    ids = np.unique(clusters)
    return SegmentationResult(
        miou=float(np.mean(list(per_class.values()))),
        regime=regime,
        k=k,
        method=method,
        per_class_iou=per_class,
        mapping={} if per_frame else {int(ids[i]): int(c) for i, c in enumerate(mapping)},
        matched_iou=matched,
    )


def overcluster_k(clips: Sequence[VideoClip], factor: float) -> int:
    """``factor`` times the average number of ground-truth classes per clip, background included."""
    counts = [clip.num_objects + 1 for clip in clips if clip.instance_masks is not None]
    if not counts:
        raise ConfigError("no clip carries ground-truth masks")
    return max(2, round_half_up(factor * float(np.mean(counts))))


def segmentation_benchmark(
    clips: Sequence[VideoClip],
    train_state: TrainState | FeatureExtractor,
    geom: TubeGeometry,
    regime: Regime,
    config: SegmentationConfig | None = None,
) -> BenchmarkResult:
    """Score every clip with ground truth under both matching methods.

    ``train_state`` may also be any callable returning dense features, which is
    how oracle features are scored.
    """
    config = config or SegmentationConfig()
    extractor = as_extractor(train_state)
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    labelled = [clip for clip in clips if clip.instance_masks is not None]
    result = BenchmarkResult(regime=regime, skipped=len(clips) - len(labelled))
    if result.skipped:
        logger.warning("skipped %d clips without ground-truth masks", result.skipped)
    if not labelled:
        return result
    over_k = overcluster_k(labelled, config.overcluster_factor) if regime == "overclustering" else 0

    for clip in labelled:
        assert clip.instance_masks is not None
        features = extractor(clip)
        nt, _, nh, nw = features.grid.shape
        points = features.tokens.detach().cpu().numpy()
        k = clip.num_objects + 1 if regime == "clustering" else over_k
        k = min(k, points.shape[0])
        labels = kmeans(points, k, seed=config.seed, max_iters=config.kmeans_iters)
        grid_labels = rearrange(labels, "(nt nh nw) -> nt nh nw", nt=nt, nh=nh, nw=nw)

        if config.resize == "upsample_features":
            cluster_map, gt_map = upsample_labels(grid_labels, geom), clip.instance_masks
        else:
            cluster_map, gt_map = grid_labels, downsample_gt(clip.instance_masks, geom)
        if not np.any(gt_map > 0):
            result.skipped += 1
            logger.warning("skipped %s: no foreground at evaluation resolution", clip.clip_id)
            continue
        for method in METHODS:
            scored = match_and_score(
                cluster_map, gt_map, method, regime=regime, per_frame=config.per_frame
            )
            result.scores.append(
                ClipScore(clip_id=clip.clip_id, regime=regime, method=method, k=k, miou=scored.miou)
            )
    return result
