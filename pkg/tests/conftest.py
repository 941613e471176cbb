"""Shared fixtures.

Every fixture that touches disk is rooted in a tmp_path. Clips are generated,
never loaded from the repository, so the suite has no data files.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from pathlib import Path

import pytest
import torch

from tests.fakes import RecordingConsole, tiny_config
from tubeot.config import RunConfig, save_run_config
from tubeot.data.store import DatasetStore
from tubeot.data.synthetic import VideoClip, generate_dataset


@pytest.fixture(autouse=True)
def _isolated_logging() -> Iterator[None]:
    """Undo configure_logging between tests so caplog sees package records."""
    yield
    logger = logging.getLogger("tubeot")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture(autouse=True)
def _one_thread() -> None:
    torch.set_num_threads(1)


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def clips(config: RunConfig) -> list[VideoClip]:
    generator, count = config.data.split("train")
    return generate_dataset(generator, count)


@pytest.fixture
def eval_clips(config: RunConfig) -> list[VideoClip]:
    generator, count = config.data.split("eval")
    return generate_dataset(generator, count)


@pytest.fixture
def dataset_dir(tmp_path: Path, config: RunConfig, clips: list[VideoClip]) -> Path:
    root = tmp_path / "data" / "train"
    DatasetStore(root).write(clips, generator=config.data.generator)
    return root


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    return save_run_config(tiny_config(), tmp_path / "tiny.toml")


@pytest.fixture
def ui() -> RecordingConsole:
    return RecordingConsole()
