"""Run configuration.

A run is described by one TOML (or JSON) document that mirrors :class:`RunConfig`.
Everything that can change a number in a result lives here; command-line flags
only ever carry paths and verbosity. Reports and checkpoints embed the resolved
document, so any figure can be traced back to its settings.

Loading is strict: unknown keys and invalid values raise :class:`ConfigError`
instead of falling back to defaults, because an experiment silently run with
different settings is worse than one that refuses to start.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Any, Literal

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tubeot.errors import ConfigError, DataIOError, ShapeError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

LOG_LEVEL_ENV = "TUBEOT_LOG_LEVEL"

Objective = Literal["pixel_l2", "feature_l2", "sigma"]
ProjectionArch = Literal["base", "shallower", "deeper", "wider"]
Shape = Literal["rectangle", "disk"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorConfig(_Section):
    frames: int = Field(default=16, ge=2)
    height: int = Field(default=32, ge=4)
    width: int = Field(default=32, ge=4)
    channels: int = Field(default=3, ge=1)
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=3, ge=1)
    shapes: list[Shape] = Field(default_factory=lambda: ["rectangle", "disk"], min_length=1)
    #: Disk radius or rectangle half-extent, in pixels.
    min_size: float = Field(default=4.0, gt=0)
    max_size: float = Field(default=8.0, gt=0)
    #: Pixels per frame.
    min_speed: float = Field(default=1.0, gt=0)
    max_speed: float = Field(default=2.5, gt=0)
    noise_std: float = Field(default=0.02, ge=0)
    #: Objects leaving one edge re-enter at the opposite one, keeping their area constant.
    #: Without wrapping, every path stays inside the frame and speeds are capped to fit.
    wrap: bool = True
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> GeneratorConfig:
        if self.frames % 2:
            raise ValueError(f"frames must be even, got {self.frames}")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if self.min_size > self.max_size:
            raise ValueError("min_size exceeds max_size")
        if self.min_speed > self.max_speed:
            raise ValueError("min_speed exceeds max_speed")
        extent = min(self.height, self.width)
        if self.max_size >= extent / 2:
            raise ValueError(f"max_size must stay below half the frame ({extent / 2})")
        # A per-frame displacement of half the frame or more is ambiguous once
        # positions wrap around.
        if self.max_speed >= extent / 2:
            raise ValueError(f"max_speed must stay below half the frame ({extent / 2})")
        return self


class DataConfig(_Section):
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    train_clips: int = Field(default=64, ge=1)
    eval_clips: int = Field(default=32, ge=1)
    #: The evaluation split is generated with ``generator.seed + eval_seed_offset``.
    eval_seed_offset: int = Field(default=1000, ge=1)

    def split(self, name: Literal["train", "eval"]) -> tuple[GeneratorConfig, int]:
        """Generator settings and clip count for one split."""
        if name == "train":
            return self.generator, self.train_clips
        seeded = self.generator.model_copy(
            update={"seed": self.generator.seed + self.eval_seed_offset}
        )
        return seeded, self.eval_clips


class TubeGeometry(_Section):
    """Space-time tube size: ``tubelet`` frames by ``patch`` x ``patch`` pixels."""

    tubelet: int = Field(default=2, ge=1)
    patch: int = Field(default=8, ge=1)
    #: Standardize each pixel-target tube before the pixel regression loss.
    normalize_targets: bool = False

    def grid(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        if frames % self.tubelet or height % self.patch or width % self.patch:
            raise ShapeError(
                f"clip {frames}x{height}x{width} is not divisible into "
                f"{self.tubelet}x{self.patch}x{self.patch} tubes"
            )
        return frames // self.tubelet, height // self.patch, width // self.patch

    def n_tokens(self, frames: int, height: int, width: int) -> int:
        nt, nh, nw = self.grid(frames, height, width)
        return nt * nh * nw

    def tube_dim(self, channels: int) -> int:
        return self.tubelet * self.patch * self.patch * channels


class TransformerConfig(_Section):
    d_model: int = Field(default=64, ge=1)
    depth: int = Field(default=2, ge=0)
    decoder_depth: int = Field(default=1, ge=0)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    #: Output width of the feature head, the shared clustering space.
    d_feat: int = Field(default=64, ge=1)
    #: Empty means ``d_model // 2``.
    decoder_width: int | None = Field(default=None, ge=1)
    dropout: float = Field(default=0.0, ge=0, lt=1)

    @property
    def decoder_dim(self) -> int:
        return self.decoder_width or max(1, self.d_model // 2)

    @model_validator(mode="after")
    def _check(self) -> TransformerConfig:
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.decoder_dim % self.heads:
            raise ValueError(
                f"decoder width {self.decoder_dim} is not divisible by heads {self.heads}"
            )
        return self


class ProjectionConfig(_Section):
    source: Literal["mlp", "external"] = "mlp"
    arch: ProjectionArch = "base"
    hidden: int = Field(default=1024, ge=1)
    #: Standardize each input tube before the MLP.
    normalize_inputs: bool = True
    #: Directory written by ``FeatureStore``; required when ``source = "external"``.
    feature_store: str | None = None

    @property
    def hidden_widths(self) -> list[int]:
        return {
            "base": [self.hidden, self.hidden],
            "shallower": [self.hidden],
            "deeper": [self.hidden, self.hidden, self.hidden],
            "wider": [2 * self.hidden, 2 * self.hidden],
        }[self.arch]

    @model_validator(mode="after")
    def _check(self) -> ProjectionConfig:
        if self.source == "external" and not self.feature_store:
            raise ValueError("projection.source = 'external' needs projection.feature_store")
        return self


class PrototypeConfig(_Section):
    count: int = Field(default=64, ge=2)
    #: Cosine scores: features and prototype rows are L2-normalized.
    normalize: bool = True
    tau: float = Field(default=0.1, gt=0)
    init_seed: int = Field(default=0, ge=0)
    #: Sinkhorn batches must satisfy ``B >= count / feasibility_ratio``.
    feasibility_ratio: float = Field(default=16.0, gt=0)


class SinkhornConfig(_Section):
    #: Entropy regularization strength; the Gibbs kernel is ``exp(lam * scores)``.
    lam: float = Field(default=20.0, gt=0)
    n_iters: int = Field(default=3, ge=1)
    #: Set to run until the row marginals are within ``tol``, capped at ``max_iters``.
    tol: float | None = Field(default=None, gt=0)
    max_iters: int = Field(default=1000, ge=1)


class TrainConfig(_Section):
    objective: Objective = "sigma"
    #: Clips per batch.
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=30, ge=1)
    #: Used as-is; no batch-size scaling at this scale.
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = Field(default=1e-8, gt=0)
    warmup_epochs: int = Field(default=2, ge=0)
    mask_ratio: float = Field(default=0.9, gt=0, lt=1)
    seed: int = Field(default=0, ge=0)
    #: Torch intra-op threads. One keeps runs bit-reproducible.
    threads: int = Field(default=1, ge=1)
    #: Batch feature variance below this is reported as collapse.
    collapse_variance: float = Field(default=1e-4, gt=0)

    @model_validator(mode="after")
    def _check(self) -> TrainConfig:
        if self.warmup_epochs >= self.epochs and self.warmup_epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not all(0 <= beta < 1 for beta in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class ProbeConfig(_Section):
    max_iters: int = Field(default=500, ge=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    lr: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)


class SegmentationConfig(_Section):
    overcluster_factor: float = Field(default=3.0, gt=1)
    resize: Literal["upsample_features", "downsample_gt"] = "upsample_features"
    #: Match clusters to objects frame by frame instead of once per clip.
    per_frame: bool = False
    kmeans_iters: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)


class EvalConfig(_Section):
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)


class SweepConfig(_Section):
    prototypes: list[int] = Field(default_factory=lambda: [16, 32, 64, 128], min_length=1)
    phi_arch: list[ProjectionArch] = Field(
        default_factory=lambda: ["base", "shallower", "deeper", "wider"], min_length=1
    )
    loss: list[Objective] = Field(
        default_factory=lambda: ["sigma", "pixel_l2", "feature_l2"], min_length=1
    )
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    workers: int = Field(default=1, ge=1)


class RunConfig(_Section):
    name: str = "desk"
    data: DataConfig = Field(default_factory=DataConfig)
    tubes: TubeGeometry = Field(default_factory=TubeGeometry)
    model: TransformerConfig = Field(default_factory=TransformerConfig)
    projection: ProjectionConfig = Field(default_factory=ProjectionConfig)
    prototypes: PrototypeConfig = Field(default_factory=PrototypeConfig)
    sinkhorn: SinkhornConfig = Field(default_factory=SinkhornConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @property
    def n_tokens(self) -> int:
        gen = self.data.generator
        return self.tubes.n_tokens(gen.frames, gen.height, gen.width)

    @property
    def tube_dim(self) -> int:
        return self.tubes.tube_dim(self.data.generator.channels)

    @property
    def n_masked(self) -> int:
        return round_half_up(self.train.mask_ratio * self.n_tokens)

    @model_validator(mode="after")
    def _check(self) -> RunConfig:
        gen = self.data.generator
        try:
            self.tubes.grid(gen.frames, gen.height, gen.width)
        except ShapeError as exc:
            raise ValueError(str(exc)) from exc
        if self.n_masked in (0, self.n_tokens):
            raise ValueError(
                f"mask_ratio {self.train.mask_ratio} leaves an empty side for "
                f"{self.n_tokens} tubes"
            )
        if self.train.objective == "sigma":
            batch = self.train.batch_size * self.n_masked
            needed = self.prototypes.count / self.prototypes.feasibility_ratio
            if batch < needed:
                raise ValueError(
                    f"{batch} masked tubes per batch cannot spread over "
                    f"{self.prototypes.count} prototypes (need at least {needed:g})"
                )
        return self


def round_half_up(value: float) -> int:
    """Round to the nearest integer, halves away from zero for positive values."""
    return int(value + 0.5)


# --------------------------------------------------------------------------
# Load / save
# --------------------------------------------------------------------------


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def parse_run_config(raw: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid run config: {_describe(exc)}") from exc


def load_run_config(path: Path) -> RunConfig:
    """Read a TOML or JSON run config. Missing sections take their defaults."""
    if not path.is_file():
        raise DataIOError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text(encoding="utf-8"))
        else:
            with path.open("rb") as handle:
                raw = tomllib.load(handle)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} does not hold a table")
    return parse_run_config(raw)


def dump_run_config(config: RunConfig) -> str:
    """TOML text for ``config``. ``None`` fields are omitted and reload as ``None``."""
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def save_run_config(config: RunConfig, path: Path) -> Path:
    if path.suffix == ".json":
        text = config.model_dump_json(indent=2, exclude_none=True) + "\n"
    else:
        text = dump_run_config(config)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
