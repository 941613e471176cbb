"""Test doubles and builders.

:func:`tiny_config` is the keystone of the suite: a run small enough that a
full pretrain-and-evaluate cycle takes about a second on one CPU thread, while
keeping every code path of the desk-scale configuration reachable.
"""

from __future__ import annotations

import copy
from collections.abc import Sequence
from typing import Any

import numpy as np
import torch

from tubeot.config import RunConfig, parse_run_config
from tubeot.eval.features import DenseFeatures
from tubeot.ui.console import QuietConsole, Tone

#: 4 frames of 16x16 pixels, 2x4x4 tubes: a 2x4x4 grid of 32 tubes, 24 of them masked.
TINY: dict[str, Any] = {
    "name": "tiny",
    "data": {
        "generator": {
            "frames": 4,
            "height": 16,
            "width": 16,
            "min_objects": 1,
            "max_objects": 2,
            "min_size": 2.0,
            "max_size": 4.0,
            "min_speed": 1.0,
            "max_speed": 2.0,
        },
        "train_clips": 8,
        "eval_clips": 8,
    },
    "tubes": {"tubelet": 2, "patch": 4},
    "model": {"d_model": 24, "depth": 1, "decoder_depth": 1, "heads": 2, "d_feat": 16},
    "projection": {"hidden": 32},
    "prototypes": {"count": 8},
    "train": {"batch_size": 2, "epochs": 2, "warmup_epochs": 1, "mask_ratio": 0.75},
    "eval": {"probe": {"max_iters": 50}, "segmentation": {"kmeans_iters": 20}},
    "sweep": {"prototypes": [4, 8], "seeds": [0]},
}


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def tiny_config(**overrides: Any) -> RunConfig:
    """The tiny run with section-wise overrides, e.g. ``train={"objective": "pixel_l2"}``."""
    return parse_run_config(_merge(TINY, overrides))


def tiny_raw(**overrides: Any) -> dict[str, Any]:
    return _merge(TINY, overrides)


class OracleFeatures:
    """Dense features that encode each tube's ground-truth object as a one-hot row.

    The tube's object is read at its centre pixel, so clustering these features
    recovers the ground truth up to the tube resolution.
    """

    def __init__(self, tubelet: int, patch: int, width: int = 8) -> None:
        self.tubelet = tubelet
        self.patch = patch
        self.width = width
        self.calls = 0

    def __call__(self, clip: Any) -> DenseFeatures:
        self.calls += 1
        masks = clip.instance_masks
        centre = masks[
            self.tubelet // 2 :: self.tubelet,
            self.patch // 2 :: self.patch,
            self.patch // 2 :: self.patch,
        ].astype(np.int64)
        onehot = np.eye(self.width)[centre]  # [nt, nh, nw, width]
        grid = torch.from_numpy(np.ascontiguousarray(onehot.transpose(0, 3, 1, 2)))
        return DenseFeatures(clip_id=clip.clip_id, grid=grid.to(torch.float32))


class RecordingConsole(QuietConsole):
    """Keeps what a command shows as ``"<tone>: <message>"`` lines and raw tables."""

    def __init__(self) -> None:
        super().__init__()
        self.lines: list[str] = []
        self.tables: list[tuple[list[str], list[list[Any]]]] = []

    def print(self, *args: Any, **kwargs: Any) -> None:
        self.lines.append(" ".join(map(str, args)))

    def status(self, tone: Tone, message: str) -> None:
        self.lines.append(f"{tone.name.lower()}: {message}")

    def rule(self, title: str = "") -> None:
        self.lines.append(f"== {title}")

    def table(self, headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
        kept = [list(row) for row in rows]
        self.tables.append((list(headers), kept))
        self.lines.extend(" | ".join(str(cell) for cell in row) for row in kept)

    @property
    def text(self) -> str:
        return "\n".join(self.lines)
