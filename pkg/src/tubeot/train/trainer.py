"""Pretraining loop.

One epoch visits every clip once in a shuffled order, with a fresh random mask
per clip. The order and the masks are drawn from a generator seeded by
``(train.seed, epoch)``; its state at the start of the epoch is kept on
:class:`TrainState`, so a run stopped after any step and resumed from its
checkpoint takes exactly the steps the uninterrupted run would have taken.
Dropout is reseeded from ``train.seed + step`` before every step.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from tubeot.config import RunConfig
from tubeot.data.store import FeatureStore
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, NumericError, ShapeError
from tubeot.model.networks import phi_forward_external, phi_forward_mlp, psi_forward
from tubeot.model.tokenizer import (
    MaskPartition,
    gather_rows,
    grid_positions,
    patchify,
    sample_mask,
    standardize_tubes,
)
from tubeot.objectives import LossReport, feature_l2_loss, pixel_l2_loss, sigma_loss
from tubeot.sinkhorn import assign
from tubeot.train.checkpoint import save_checkpoint
from tubeot.train.state import TrainState, build_state

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"


@dataclass(frozen=True)
class CollapseMetrics:
    #: Mean over feature dimensions of the per-dimension batch variance.
    feat_variance: float
    #: Entropy of the mean pseudo-label row divided by ``log K``.
    usage_entropy: float


@dataclass(frozen=True)
class MetricsRow:
    step: int
    epoch: int
    lr: float
    loss: float
    ce_psi: float
    ce_phi: float
    feat_variance: float
    usage_entropy: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[MetricsRow] = field(default_factory=list)
    checkpoint: Path | None = None
    metrics_path: Path | None = None

    @property
    def final_variance(self) -> float:
        return self.metrics[-1].feat_variance if self.metrics else math.nan

    @property
    def final_usage_entropy(self) -> float:
        return self.metrics[-1].usage_entropy if self.metrics else math.nan

    def collapsed(self, threshold: float) -> bool:
        return bool(self.metrics) and self.final_variance < threshold


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base: float) -> float:
    """Linear warmup from 0 to ``base``, then half a cosine down to 0 at the last step."""
    if step < warmup_steps:
        return base * step / warmup_steps
    span = max(1, total_steps - warmup_steps - 1)
    progress = min(1.0, (step - warmup_steps) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(state: TrainState, lr: float) -> None:
    """One AdamW update at ``lr``, then re-project the prototype rows."""
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.bank.renormalize_()


def collapse_metrics(x_psi_batch: torch.Tensor, pseudo_label_rows: torch.Tensor) -> CollapseMetrics:
    if x_psi_batch.shape[0] == 0 or pseudo_label_rows.shape[0] == 0:
        raise ShapeError("collapse metrics need a non-empty batch")
    x = x_psi_batch.detach().to(torch.float64)
    variance = float(x.var(dim=0, unbiased=False).mean())
    usage = pseudo_label_rows.detach().to(torch.float64).mean(dim=0)
    n_prototypes = usage.shape[0]
    entropy = float(-(usage * torch.log(usage.clamp_min(1e-300))).sum())
    return CollapseMetrics(
        feat_variance=max(0.0, variance),
        usage_entropy=min(1.0, max(0.0, entropy / math.log(n_prototypes))),
    )


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def _epoch_plan(
    state: TrainState, epoch: int, n_clips: int, n_tokens: int
) -> tuple[torch.Tensor, list[MaskPartition]]:
    generator = torch.Generator()
    if state.epoch == epoch and state.epoch_generator is not None:
        generator.set_state(state.epoch_generator)
    else:
        generator.manual_seed(_epoch_seed(state.config.train.seed, epoch))
        state.epoch = epoch
        state.epoch_generator = generator.get_state()
    order = torch.randperm(n_clips, generator=generator)
    ratio = state.config.train.mask_ratio
    masks = [sample_mask(n_tokens, ratio, generator) for _ in range(n_clips)]
    state.epoch_order = order
    return order, masks


def _targets(
    state: TrainState,
    raw_masked: torch.Tensor,
    masks: Sequence[MaskPartition],
    clip_ids: Sequence[str],
    store: FeatureStore | None,
) -> torch.Tensor:
    if state.projector is not None:
        return phi_forward_mlp(raw_masked, state.projector).x_phi
    if store is None:
        raise ConfigError("external projection targets need a feature store")
    d_feat = state.config.model.d_feat
    return torch.stack(
        [
            phi_forward_external(clip_id, mask, store, d_feat=d_feat).x_phi
            for clip_id, mask in zip(clip_ids, masks, strict=True)
        ]
    )


def _diagnostic_labels(x_psi: torch.Tensor, state: TrainState) -> torch.Tensor:
    # Regression objectives never solve for assignments; do it here for the usage metric.
    with torch.no_grad():
        x_tilde = F.normalize(x_psi, dim=1) @ F.normalize(state.bank.weight, dim=1).T
        return assign(x_tilde, state.config.sinkhorn)


def batch_loss(
    state: TrainState,
    raw: torch.Tensor,
    positions: torch.Tensor,
    masks: Sequence[MaskPartition],
    clip_ids: Sequence[str],
    store: FeatureStore | None = None,
) -> tuple[LossReport, torch.Tensor, torch.Tensor]:
    """Loss for one batch of ``[B, N_T, P]`` raw tubes.

    Also returns the flattened ``[B * N_M, d_feat]`` video-model features and
    their pseudo-labels, both detached, for the collapse metrics.
    """
    config = state.config
    batch = raw.shape[0]
    masked_idx = torch.stack([m.masked_idx for m in masks])
    visible_idx = torch.stack([m.visible_idx for m in masks])
    grid = positions.expand(batch, -1, -1)

    tokens = state.model.embed(raw)
    out = psi_forward(
        gather_rows(tokens, visible_idx),
        gather_rows(grid, visible_idx),
        gather_rows(grid, masked_idx),
        state.model,
    )
    raw_masked = gather_rows(raw, masked_idx)
    d_feat = config.model.d_feat

    objective = config.train.objective
    if objective == "pixel_l2":
        assert out.pixel_pred is not None
        target = standardize_tubes(raw_masked) if config.tubes.normalize_targets else raw_masked
        report = pixel_l2_loss(out.pixel_pred, target)
    else:
        x_phi = _targets(state, raw_masked, masks, clip_ids, store)
        if objective == "feature_l2":
            report = feature_l2_loss(x_phi, out.x_psi)
        else:
            report = sigma_loss(
                x_phi.reshape(-1, d_feat),
                out.x_psi.reshape(-1, d_feat),
                state.bank,
                config.prototypes.tau,
                config.sinkhorn,
                feasibility_ratio=config.prototypes.feasibility_ratio,
            )

    flat_psi = out.x_psi.detach().reshape(-1, d_feat)
    q_psi = report.q_psi if report.q_psi is not None else _diagnostic_labels(flat_psi, state)
    return report, flat_psi, q_psi


def clip_batch(clips: Sequence[VideoClip], config: RunConfig) -> torch.Tensor:
    """Stack clips into ``[n, T, C, H, W]`` after checking them against the config."""
    gen = config.data.generator
    expected = (gen.frames, gen.channels, gen.height, gen.width)
    for clip in clips:
        if clip.shape != expected:
            raise ShapeError(
                f"{clip.clip_id} has shape {clip.shape}, the config expects {expected}"
            )
    return torch.from_numpy(np.stack([clip.frames for clip in clips]))


class _MetricsWriter:
    """Appends rows to the metrics CSV, writing the header only for a new file."""

    def __init__(self, path: Path | None) -> None:
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerow(METRIC_COLUMNS)

    def write(self, rows: Sequence[MetricsRow]) -> None:
        if self.path is None or not rows:
            return
        with self.path.open("a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            for row in rows:
                writer.writerow(astuple(row))


def train(
    clips: Sequence[VideoClip],
    config: RunConfig,
    *,
    out_dir: Path | None = None,
    state: TrainState | None = None,
    stop_after: int | None = None,
    feature_store: FeatureStore | None = None,
) -> TrainResult:
    """Pretrain under ``config.train.objective``.

    ``state`` resumes an earlier run; ``stop_after`` ends this call after that
    many steps. With ``out_dir`` set, every step is appended to ``metrics.csv``
    and ``checkpoint.bin`` is written when the call returns.
    """
    if not clips:
        raise ConfigError("cannot train on an empty dataset")
    tc = config.train
    steps_per_epoch = len(clips) // tc.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"{len(clips)} clips do not fill one batch of {tc.batch_size}")
    if state is None:
        state = build_state(config)
    elif state.config != config:
        raise ConfigError("the resumed state was trained with a different config")
    external = config.projection.source == "external" and tc.objective != "pixel_l2"
    if feature_store is None and external:
        feature_store = FeatureStore(Path(config.projection.feature_store or ""))

    torch.set_num_threads(tc.threads)
    frames = clip_batch(clips, config)
    raw_all = patchify(frames, config.tubes)
    gen = config.data.generator
    positions = grid_positions(config.tubes, gen.frames, gen.height, gen.width)
    n_tokens = positions.shape[0]
    total_steps = tc.epochs * steps_per_epoch
    warmup_steps = tc.warmup_epochs * steps_per_epoch

    writer = _MetricsWriter(out_dir / METRICS_NAME if out_dir is not None else None)
    result = TrainResult(state=state, metrics_path=writer.path)
    state.train()
    taken = 0
    epoch_rows: list[MetricsRow] = []
    order: torch.Tensor | None = None
    masks: list[MaskPartition] = []

    while state.step < total_steps and (stop_after is None or taken < stop_after):
        epoch, slot = divmod(state.step, steps_per_epoch)
        if order is None or slot == 0:
            order, masks = _epoch_plan(state, epoch, len(clips), n_tokens)
            epoch_rows = []
        batch_idx = order[slot * tc.batch_size : (slot + 1) * tc.batch_size]
        batch_masks = [masks[i] for i in range(slot * tc.batch_size, (slot + 1) * tc.batch_size)]
        lr = cosine_lr(state.step, total_steps, warmup_steps, tc.lr)

        torch.manual_seed(tc.seed + state.step)
        try:
            report, flat_psi, q_psi = batch_loss(
                state,
                raw_all[batch_idx],
                positions,
                batch_masks,
                [clips[int(i)].clip_id for i in batch_idx],
                feature_store,
            )
            if not torch.isfinite(report.loss):
                raise NumericError("loss is not finite")
            report.loss.backward()
            optimizer_step(state, lr)
        except NumericError as exc:
            if exc.step is not None:
                raise
            raise type(exc)(str(exc), step=state.step) from exc

        diagnostics = collapse_metrics(flat_psi, q_psi)
        row = MetricsRow(
            step=state.step,
            epoch=epoch,
            lr=lr,
            loss=report.item(),
            ce_psi=report.term("ce_psi"),
            ce_phi=report.term("ce_phi"),
            feat_variance=diagnostics.feat_variance,
            usage_entropy=diagnostics.usage_entropy,
        )
        logger.debug("step %d lr %.3g loss %.4f", row.step, row.lr, row.loss)
        writer.write([row])
        result.metrics.append(row)
        epoch_rows.append(row)
        state.step += 1
        taken += 1
        if state.step % steps_per_epoch == 0:
            _log_epoch(epoch, epoch_rows, tc.collapse_variance)

    state.eval()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(state, out_dir / CHECKPOINT_NAME)
    return result


def _log_epoch(epoch: int, rows: Sequence[MetricsRow], collapse_variance: float) -> None:
    if not rows:
        return
    loss = sum(row.loss for row in rows) / len(rows)
    last = rows[-1]
    logger.info(
        "epoch %d loss %.4f lr %.3g variance %.3g usage %.3f",
        epoch,
        loss,
        last.lr,
        last.feat_variance,
        last.usage_entropy,
    )
    if last.feat_variance < collapse_variance:
        logger.warning(
            "feature variance %.3g fell below %.3g in epoch %d: the features have collapsed",
            last.feat_variance,
            collapse_variance,
            epoch,
        )
