"""Pretraining loop, metrics and resumption."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Any

import pytest
import torch
import torch.nn.functional as F

from tests.fakes import tiny_config
from tubeot.config import RunConfig
from tubeot.data.store import FeatureStore
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, NumericError, ShapeError
from tubeot.train import trainer as trainer_module
from tubeot.train.checkpoint import load_checkpoint
from tubeot.train.state import TrainState, build_state
from tubeot.train.trainer import (
    CHECKPOINT_NAME,
    METRIC_COLUMNS,
    METRICS_NAME,
    collapse_metrics,
    cosine_lr,
    optimizer_step,
    train,
)


def test_cosine_schedule_shape() -> None:
    total, warmup, base = 20, 4, 1e-3
    lrs = [cosine_lr(step, total, warmup, base) for step in range(total)]
    assert lrs[0] == 0.0
    assert lrs[2] == pytest.approx(base / 2)
    assert lrs[warmup] == pytest.approx(base)
    assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
    after = lrs[warmup:]
    assert all(a >= b for a, b in zip(after, after[1:], strict=False))


def test_cosine_schedule_without_warmup_starts_at_base() -> None:
    assert cosine_lr(0, 10, 0, 0.5) == pytest.approx(0.5)
    assert cosine_lr(100, 10, 0, 0.5) == pytest.approx(0.0, abs=1e-12)


def test_collapse_metrics() -> None:
    constant = torch.ones(10, 4)
    uniform = torch.full((10, 8), 1 / 8)
    metrics = collapse_metrics(constant, uniform)
    assert metrics.feat_variance == 0.0
    assert metrics.usage_entropy == pytest.approx(1.0)

    one_prototype = torch.zeros(10, 8)
    one_prototype[:, 3] = 1.0
    assert collapse_metrics(torch.randn(10, 4), one_prototype).usage_entropy == pytest.approx(0.0)


def test_collapse_metrics_need_rows() -> None:
    with pytest.raises(ShapeError):
        collapse_metrics(torch.zeros(0, 4), torch.zeros(0, 8))


def _adamw_state(lr: float = 0.1, weight_decay: float = 0.05) -> TrainState:
    return build_state(tiny_config(train={"lr": lr, "weight_decay": weight_decay}))


def _snapshot(state: TrainState) -> dict[str, torch.Tensor]:
    return {name: param.detach().clone() for name, param in state.named_parameters()}


def test_zero_gradients_only_apply_the_decoupled_decay() -> None:
    state = _adamw_state()
    for _, param in state.named_parameters():
        param.grad = torch.zeros_like(param)
    before = _snapshot(state)
    optimizer_step(state, 0.1)
    decay = 1 - 0.1 * 0.05
    for name, param in state.named_parameters():
        if name.startswith("bank."):
            # Decay shrinks every row by the same factor; renormalizing undoes it.
            torch.testing.assert_close(param.detach(), before[name])
        else:
            torch.testing.assert_close(param.detach(), before[name] * decay, msg=name)
    assert decay == pytest.approx(0.995)


def test_first_step_matches_the_closed_form() -> None:
    lr, weight_decay = 0.1, 0.05
    state = _adamw_state(lr, weight_decay)
    eps = state.config.train.eps
    generator = torch.Generator().manual_seed(0)
    grads = {
        name: torch.randn(param.shape, generator=generator)
        for name, param in state.named_parameters()
    }
    for name, param in state.named_parameters():
        param.grad = grads[name].clone()
    before = _snapshot(state)
    optimizer_step(state, lr)

    # After one step both moments are unbiased to g and g**2.
    for name, param in state.named_parameters():
        g = grads[name]
        expected = before[name] * (1 - lr * weight_decay) - lr * g / (g.abs() + eps)
        if name.startswith("bank."):
            expected = F.normalize(expected, dim=1)
        torch.testing.assert_close(param.detach(), expected, msg=name)


def test_step_sets_the_rate_and_clears_gradients() -> None:
    state = _adamw_state()
    for _, param in state.named_parameters():
        param.grad = torch.ones_like(param)
    optimizer_step(state, 0.02)
    assert all(group["lr"] == 0.02 for group in state.optimizer.param_groups)
    assert all(param.grad is None for _, param in state.named_parameters())


def test_bank_rows_are_unit_norm_after_a_step() -> None:
    state = _adamw_state()
    generator = torch.Generator().manual_seed(1)
    for _, param in state.named_parameters():
        param.grad = 10 * torch.randn(param.shape, generator=generator)
    optimizer_step(state, 0.5)
    norms = state.bank.weight.detach().norm(dim=1)
    torch.testing.assert_close(norms, torch.ones_like(norms))


def test_train_writes_metrics_and_checkpoint(
    tmp_path: Path, clips: list[VideoClip], config: RunConfig
) -> None:
    result = train(clips, config, out_dir=tmp_path / "run")
    # 8 clips in batches of 2 for 2 epochs.
    assert len(result.metrics) == 8
    assert result.state.step == 8
    assert result.checkpoint == tmp_path / "run" / CHECKPOINT_NAME
    assert result.checkpoint.is_file()

    with (tmp_path / "run" / METRICS_NAME).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert len(rows) == 9
    assert [int(row[0]) for row in rows[1:]] == list(range(8))
    for row in result.metrics:
        assert math.isfinite(row.loss)
        assert math.isfinite(row.ce_phi) and math.isfinite(row.ce_psi)
        assert 0.0 <= row.usage_entropy <= 1.0
        assert row.feat_variance >= 0.0


def test_schedule_is_recorded(clips: list[VideoClip], config: RunConfig) -> None:
    result = train(clips, config)
    lrs = [row.lr for row in result.metrics]
    # One warmup epoch of 4 steps.
    assert lrs[0] == 0.0
    assert lrs[4] == pytest.approx(config.train.lr)
    assert [row.epoch for row in result.metrics] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_training_is_deterministic(clips: list[VideoClip], config: RunConfig) -> None:
    first = train(clips, config)
    second = train(clips, config)
    assert [r.loss for r in first.metrics] == [r.loss for r in second.metrics]
    for (name, a), (_, b) in zip(
        first.state.named_parameters(), second.state.named_parameters(), strict=True
    ):
        assert torch.equal(a, b), name


def test_resume_reproduces_the_uninterrupted_run(
    tmp_path: Path, clips: list[VideoClip], config: RunConfig
) -> None:
    full = train(clips, config)

    partial = train(clips, config, out_dir=tmp_path / "run", stop_after=3)
    assert partial.state.step == 3
    assert partial.checkpoint is not None
    resumed_state = load_checkpoint(partial.checkpoint)
    resumed = train(clips, config, out_dir=tmp_path / "run", state=resumed_state)

    assert resumed.state.step == 8
    assert [row.loss for row in resumed.metrics] == [row.loss for row in full.metrics[3:]]
    for (name, a), (_, b) in zip(
        full.state.named_parameters(), resumed.state.named_parameters(), strict=True
    ):
        assert torch.equal(a, b), name

    with (tmp_path / "run" / METRICS_NAME).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert len(rows) == 9, "one header and one row per step across both calls"


def test_resume_across_an_epoch_boundary(
    tmp_path: Path, clips: list[VideoClip], config: RunConfig
) -> None:
    full = train(clips, config)
    partial = train(clips, config, out_dir=tmp_path / "run", stop_after=4)
    assert partial.checkpoint is not None
    resumed = train(clips, config, state=load_checkpoint(partial.checkpoint))
    assert [row.loss for row in resumed.metrics] == [row.loss for row in full.metrics[4:]]
    for (name, a), (_, b) in zip(
        full.state.named_parameters(), resumed.state.named_parameters(), strict=True
    ):
        assert torch.equal(a, b), name


def test_resume_with_another_config_is_refused(clips: list[VideoClip], config: RunConfig) -> None:
    state = build_state(config)
    other = tiny_config(train={"epochs": 3})
    with pytest.raises(ConfigError, match="different config"):
        train(clips, other, state=state)


@pytest.mark.parametrize("objective", ["pixel_l2", "feature_l2"])
def test_regression_objectives(
    objective: str, clips: list[VideoClip], config: RunConfig
) -> None:
    run = tiny_config(train={"objective": objective})
    result = train(clips, run)
    assert len(result.metrics) == 8
    assert all(math.isnan(row.ce_phi) for row in result.metrics)
    assert all(0.0 <= row.usage_entropy <= 1.0 for row in result.metrics)
    # The bank only feeds the usage diagnostic here.
    assert not result.state.bank.weight.requires_grad


def test_pixel_objective_has_no_projection(clips: list[VideoClip]) -> None:
    state = build_state(tiny_config(train={"objective": "pixel_l2"}))
    assert state.projector is None
    assert state.model.pixel_head is not None


def test_swapped_objective_trains_the_bank(clips: list[VideoClip], config: RunConfig) -> None:
    state = build_state(config)
    before = state.bank.weight.detach().clone()
    result = train(clips, config, state=state, stop_after=2)
    after = result.state.bank.weight.detach()
    assert not torch.equal(before, after)
    torch.testing.assert_close(after.norm(dim=1), torch.ones(after.shape[0]))


def test_external_targets(tmp_path: Path, clips: list[VideoClip]) -> None:
    generator = torch.Generator().manual_seed(0)
    store_dir = tmp_path / "features"
    FeatureStore(store_dir).write(
        {clip.clip_id: torch.randn(32, 16, generator=generator) for clip in clips}
    )
    run = tiny_config(projection={"source": "external", "feature_store": str(store_dir)})
    result = train(clips, run)
    assert result.state.projector is None
    assert len(result.metrics) == 8
    assert all(math.isfinite(row.loss) for row in result.metrics)


def test_collapse_is_logged(
    clips: list[VideoClip], caplog: pytest.LogCaptureFixture
) -> None:
    run = tiny_config(train={"collapse_variance": 1e9})
    with caplog.at_level(logging.INFO, logger="tubeot.train.trainer"):
        result = train(clips, run)
    assert result.collapsed(run.train.collapse_variance)
    assert "epoch 0 loss" in caplog.text
    assert "collapsed" in caplog.text


def test_empty_and_short_datasets(clips: list[VideoClip], config: RunConfig) -> None:
    with pytest.raises(ConfigError):
        train([], config)
    with pytest.raises(ConfigError, match="batch"):
        train(clips[:1], config)


def test_clip_shape_must_match_the_config(clips: list[VideoClip]) -> None:
    run = tiny_config(data={"generator": {"height": 32, "width": 32}})
    with pytest.raises(ShapeError):
        train(clips, run)


def test_numeric_failure_reports_the_step(
    monkeypatch: pytest.MonkeyPatch, clips: list[VideoClip], config: RunConfig
) -> None:
    real = trainer_module.batch_loss
    calls = {"n": 0}

    def flaky(*args: Any, **kwargs: Any) -> Any:
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("non-finite prototype scores")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "batch_loss", flaky)
    with pytest.raises(NumericError, match=r"\(step 2\)") as info:
        train(clips, config)
    assert info.value.step == 2
    assert info.value.exit_code == 4
