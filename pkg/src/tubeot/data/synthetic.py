"""Deterministic clips of geometric objects moving at constant velocity.

Each clip is a pure function of ``(config.seed, index)``. Object 1 is the
dominant object: it has the largest size, is drawn last so nothing occludes it,
and its direction of travel sets the clip label. Labels follow a round-robin
schedule over the eight compass octants, so any ``n`` consecutive clips are
balanced to within one clip per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from tubeot.config import GeneratorConfig
from tubeot.errors import ConfigError

#: Class ids in counter-clockwise order starting at east. Image rows grow
#: downward, so "north" means decreasing row index.
OCTANTS = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
NUM_CLASSES = len(OCTANTS)

#: The dominant object's heading stays this fraction of a half-octant away from
#: the class boundary, so the label is unambiguous from the trajectory.
_HEADING_JITTER = 0.5
#: Secondary objects are at most this fraction of the dominant object's size.
_SECONDARY_SCALE = 0.8


@dataclass(frozen=True)
class VideoClip:
    """Frames ``[T, C, H, W]`` in ``[0, 1]``, plus optional ground truth.

    ``instance_masks`` is ``[T, H, W]`` with 0 for background and ``k`` for
    object ``k``; ids present form the contiguous range ``0..M``.
    """

    clip_id: str
    frames: NDArray[np.float32]
    instance_masks: NDArray[np.uint16] | None = None
    label: int | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        t, c, h, w = self.frames.shape
        return t, c, h, w

    @property
    def num_objects(self) -> int:
        """Foreground objects, background excluded."""
        if self.instance_masks is None:
            return 0
        return int(self.instance_masks.max())


@dataclass(frozen=True)
class _Track:
    shape: str
    size: float
    color: NDArray[np.float64]
    start: tuple[float, float]
    velocity: tuple[float, float]


def motion_class(vx: float, vy: float) -> int:
    """Octant id of a velocity given in (column, row) pixels per frame."""
    angle = math.atan2(-vy, vx)
    return round(angle / (math.pi / 4)) % NUM_CLASSES


def _validated(config: GeneratorConfig) -> GeneratorConfig:
    # Revalidate so configs built with model_construct cannot slip through.
    try:
        return GeneratorConfig.model_validate(config.model_dump())
    except ValidationError as exc:
        raise ConfigError(f"invalid generator config: {exc.errors()[0]['msg']}") from exc


def _random_track(
    rng: np.random.Generator,
    config: GeneratorConfig,
    *,
    size: float,
    heading: float,
) -> _Track:
    speed = rng.uniform(config.min_speed, config.max_speed)
    shape = str(rng.choice(config.shapes))
    color = rng.uniform(0.45, 1.0, size=config.channels)
    if config.wrap:
        start = (rng.uniform(0, config.height), rng.uniform(0, config.width))
        velocity = (-speed * math.sin(heading), speed * math.cos(heading))
    else:
        start, velocity = _contained_path(rng, config, size, speed, heading)
    return _Track(shape=shape, size=size, color=color, start=start, velocity=velocity)


def _contained_path(
    rng: np.random.Generator,
    config: GeneratorConfig,
    size: float,
    speed: float,
    heading: float,
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Start and velocity whose whole trajectory keeps the shape inside the frame.

    The speed is capped at what the frame allows along the heading, and the
    start is drawn from the box the path can begin in.
    """
    span = config.frames - 1
    direction = (-math.sin(heading), math.cos(heading))
    for extent, component in zip((config.height, config.width), direction, strict=True):
        room = extent - 2 * size
        if abs(component) * span > 0:
            speed = min(speed, room / (abs(component) * span))
    velocity = (speed * direction[0], speed * direction[1])
    start: list[float] = []
    for extent, v in zip((config.height, config.width), velocity, strict=True):
        travel = v * span
        low = size + max(0.0, -travel)
        high = extent - size - max(0.0, travel)
        start.append(rng.uniform(low, max(low, high)))
    return (start[0], start[1]), velocity


def _footprint(
    track: _Track,
    t: int,
    config: GeneratorConfig,
    rows: NDArray[np.float64],
    cols: NDArray[np.float64],
) -> NDArray[np.bool_]:
    cy = track.start[0] + track.velocity[0] * t
    cx = track.start[1] + track.velocity[1] * t
    dy = rows - cy
    dx = cols - cx
    if config.wrap:
        dy = (dy + config.height / 2) % config.height - config.height / 2
        dx = (dx + config.width / 2) % config.width - config.width / 2
    if track.shape == "disk":
        return np.asarray(dy**2 + dx**2 <= track.size**2)
    return np.asarray((np.abs(dy) <= track.size) & (np.abs(dx) <= track.size))


def generate_clip(config: GeneratorConfig, index: int) -> VideoClip:
    if index < 0:
        raise ConfigError(f"clip index must be non-negative, got {index}")
    config = _validated(config)
    rng = np.random.default_rng([config.seed, index])

    label = index % NUM_CLASSES
    half_octant = math.pi / NUM_CLASSES
    heading = label * 2 * half_octant + rng.uniform(-1, 1) * half_octant * _HEADING_JITTER
    dominant = _random_track(rng, config, size=config.max_size, heading=heading)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    upper = max(config.min_size, config.max_size * _SECONDARY_SCALE)
    others = [
        _random_track(
            rng,
            config,
            size=rng.uniform(config.min_size, upper),
            heading=rng.uniform(0, 2 * math.pi),
        )
        for _ in range(n_objects - 1)
    ]

    background = rng.uniform(0.0, 0.15, size=config.channels)
    shape = (config.frames, config.channels, config.height, config.width)
    frames = np.broadcast_to(background[None, :, None, None], shape).copy()
    masks = np.zeros((config.frames, config.height, config.width), dtype=np.uint16)

    rows = (np.arange(config.height, dtype=np.float64) + 0.5)[:, None]
    cols = (np.arange(config.width, dtype=np.float64) + 0.5)[None, :]
    # Highest id first so the dominant object (id 1) lands on top.
    order = [(len(others) + 1 - i, track) for i, track in enumerate(reversed(others))]
    order.append((1, dominant))
    for t in range(config.frames):
        for object_id, track in order:
            footprint = _footprint(track, t, config, rows, cols)
            frames[t][:, footprint] = track.color[:, None]
            masks[t][footprint] = object_id

    if config.noise_std > 0:
        frames = frames + rng.normal(0.0, config.noise_std, size=shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    return VideoClip(
        clip_id=f"clip-{config.seed}-{index:05d}",
        frames=frames,
        instance_masks=_compact_ids(masks),
        label=label,
    )


def _compact_ids(masks: NDArray[np.uint16]) -> NDArray[np.uint16]:
    """Renumber ids to ``0..M`` when an object was hidden for the whole clip."""
    present = np.unique(masks)
    if present[-1] == len(present) - 1:
        return masks
    lookup = np.zeros(int(present[-1]) + 1, dtype=np.uint16)
    lookup[present] = np.arange(len(present), dtype=np.uint16)
    return lookup[masks]


def generate_dataset(config: GeneratorConfig, n: int) -> list[VideoClip]:
    if n < 1:
        raise ConfigError(f"a dataset needs at least one clip, got n={n}")
    return [generate_clip(config, index) for index in range(n)]
