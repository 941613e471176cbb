"""Ablation sweeps: vary one config axis, pretrain each cell, score it with the linear probe.

Every cell is a pure function of the resolved config, so cells can run in
separate processes in any order and still produce the same table.
"""

from __future__ import annotations

import logging
import multiprocessing
import statistics
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Literal

from tubeot.config import RunConfig, parse_run_config
from tubeot.data.synthetic import generate_dataset
from tubeot.errors import ConfigError
from tubeot.eval.probe import linear_probe
from tubeot.train.trainer import train

logger = logging.getLogger(__name__)

Axis = Literal["prototypes", "phi_arch", "loss"]
AXES: tuple[Axis, ...] = ("prototypes", "phi_arch", "loss")

# Where each axis lives in the config document.
_AXIS_FIELDS: dict[Axis, tuple[str, str]] = {
    "prototypes": ("prototypes", "count"),
    "phi_arch": ("projection", "arch"),
    "loss": ("train", "objective"),
}


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: str
    accuracy_mean: float
    accuracy_std: float
    n_seeds: int
    feat_variance_mean: float
    usage_entropy_mean: float


@dataclass(frozen=True)
class CellRun:
    seed: int
    accuracy: float
    feat_variance: float
    usage_entropy: float


def grid_values(config: RunConfig, axis: Axis) -> list[Any]:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose one of {', '.join(AXES)}")
    return list(getattr(config.sweep, axis))


def cell_config(config: RunConfig, axis: Axis, value: Any, seed: int) -> RunConfig:
    """``config`` with one axis set to ``value`` and the training seed set to ``seed``."""
    section, name = _AXIS_FIELDS[axis]
    raw = config.model_dump(mode="json")
    raw[section][name] = value
    raw["train"]["seed"] = seed
    return parse_run_config(raw)


def run_cell_seed(config: RunConfig) -> CellRun:
    """Pretrain on the training split, probe on the evaluation split."""
    train_gen, n_train = config.data.split("train")
    eval_gen, n_eval = config.data.split("eval")
    train_clips = generate_dataset(train_gen, n_train)
    eval_clips = generate_dataset(eval_gen, n_eval)
    result = train(train_clips, config)
    probe = linear_probe(train_clips, eval_clips, result.state, config.eval.probe)
    return CellRun(
        seed=config.train.seed,
        accuracy=probe.accuracy,
        feat_variance=result.final_variance,
        usage_entropy=result.final_usage_entropy,
    )


def _run_cell(payload: tuple[str, str, str]) -> SweepRow:
    config_json, axis, value_json = payload
    config = RunConfig.model_validate_json(config_json)
    value = _decode(axis, value_json)
    runs = [
        run_cell_seed(cell_config(config, axis, value, seed))  # type: ignore[arg-type]
        for seed in config.sweep.seeds
    ]
    accuracies = [run.accuracy for run in runs]
    return SweepRow(
        axis=axis,
        value=str(value),
        accuracy_mean=statistics.fmean(accuracies),
        accuracy_std=statistics.pstdev(accuracies),
        n_seeds=len(runs),
        feat_variance_mean=statistics.fmean(run.feat_variance for run in runs),
        usage_entropy_mean=statistics.fmean(run.usage_entropy for run in runs),
    )


def _decode(axis: str, value: str) -> Any:
    return int(value) if axis == "prototypes" else value


def run_sweep(
    config: RunConfig,
    axis: Axis,
    *,
    on_row: Callable[[SweepRow], None] | None = None,
) -> list[SweepRow]:
    """One row per grid value, in grid order.

    With ``sweep.workers > 1`` cells run in spawned worker processes.
    """
    values = grid_values(config, axis)
    # Validate every cell up front so a bad value fails before any training.
    for value in values:
        cell_config(config, axis, value, config.sweep.seeds[0])
    payloads = [(config.model_dump_json(), axis, str(value)) for value in values]
    workers = min(config.sweep.workers, len(payloads))
    logger.info("sweeping %s over %d cells with %d worker(s)", axis, len(payloads), workers)

    rows: list[SweepRow] = []
    if workers <= 1:
        for payload in payloads:
            rows.append(_run_cell(payload))
            if on_row is not None:
                on_row(rows[-1])
        return rows

    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
        for row in pool.map(_run_cell, payloads):
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def rows_as_dicts(rows: list[SweepRow]) -> list[dict[str, Any]]:
    return [asdict(row) for row in rows]
