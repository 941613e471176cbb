"""On-disk layouts for datasets and frozen feature targets.

A dataset directory::

    data/
    ├── manifest.json          <- DatasetManifest; shape, seed, labels
    ├── clip-0-00000.bin       <- frames then masks, little-endian, no header
    └── ...

Each clip file holds ``T*C*H*W`` float32 frame values in ``[T, C, H, W]`` order,
followed, when ``has_masks`` is set, by ``T*H*W`` uint16 instance ids in
``[T, H, W]`` order. A feature store uses the same float layout for one
``[N_T, d_feat]`` matrix per clip. Manifests are indented JSON in field order,
so regenerating from the same config gives identical bytes.
"""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from tubeot.config import GeneratorConfig
from tubeot.data.synthetic import VideoClip
from tubeot.errors import DataIOError, FeatureLookupError, ShapeError

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1

_FRAME_DTYPE = np.dtype("<f4")
_MASK_DTYPE = np.dtype("<u2")


class ClipShape(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frames: int
    channels: int
    height: int
    width: int


class ClipEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    clip_id: str
    file: str
    label: int | None = None
    has_masks: bool = True


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["tubeot-dataset"] = "tubeot-dataset"
    schema_version: int = SCHEMA_VERSION
    shape: ClipShape
    frames_dtype: str = _FRAME_DTYPE.str
    masks_dtype: str = _MASK_DTYPE.str
    #: Present when the clips came from the synthetic generator.
    generator: GeneratorConfig | None = None
    clips: list[ClipEntry] = Field(default_factory=list)

    @property
    def labels(self) -> list[int | None]:
        return [entry.label for entry in self.clips]


class FeatureManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["tubeot-features"] = "tubeot-features"
    schema_version: int = SCHEMA_VERSION
    n_tokens: int
    d_feat: int
    dtype: str = _FRAME_DTYPE.str
    entries: dict[str, str] = Field(default_factory=dict)


def _write_manifest(path: Path, manifest: BaseModel) -> None:
    text = manifest.model_dump_json(indent=2) + "\n"
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _read_manifest(path: Path, model: type[BaseModel]) -> BaseModel:
    if not path.is_file():
        raise DataIOError(f"no manifest at {path}")
    try:
        return model.model_validate_json(path.read_bytes())
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except ValidationError as exc:
        raise DataIOError(f"malformed manifest {path}: {exc.errors()[0]['msg']}") from exc


def _read_blob(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


class DatasetStore:
    """Read and write a directory of clips."""

    def __init__(self, root: Path) -> None:
        self.root = root

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    def write(
        self, clips: list[VideoClip], *, generator: GeneratorConfig | None = None
    ) -> DatasetManifest:
        if not clips:
            raise DataIOError("refusing to write an empty dataset")
        t, c, h, w = clips[0].shape
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create {self.root}: {exc}") from exc

        entries: list[ClipEntry] = []
        for clip in clips:
            if clip.shape != (t, c, h, w):
                raise ShapeError(f"{clip.clip_id} has shape {clip.shape}, expected {(t, c, h, w)}")
            payload = clip.frames.astype(_FRAME_DTYPE, copy=False).tobytes()
            if clip.instance_masks is not None:
                payload += clip.instance_masks.astype(_MASK_DTYPE, copy=False).tobytes()
            name = f"{clip.clip_id}.bin"
            try:
                (self.root / name).write_bytes(payload)
            except OSError as exc:
                raise DataIOError(f"cannot write {self.root / name}: {exc}") from exc
            entries.append(
                ClipEntry(
                    clip_id=clip.clip_id,
                    file=name,
                    label=clip.label,
                    has_masks=clip.instance_masks is not None,
                )
            )

        manifest = DatasetManifest(
            shape=ClipShape(frames=t, channels=c, height=h, width=w),
            generator=generator,
            clips=entries,
        )
        _write_manifest(self.manifest_path, manifest)
        return manifest

    def manifest(self) -> DatasetManifest:
        manifest = _read_manifest(self.manifest_path, DatasetManifest)
        assert isinstance(manifest, DatasetManifest)
        return manifest

    def load(self) -> list[VideoClip]:
        manifest = self.manifest()
        shape = manifest.shape
        frame_shape = (shape.frames, shape.channels, shape.height, shape.width)
        mask_shape = (shape.frames, shape.height, shape.width)
        frame_bytes = int(np.prod(frame_shape)) * _FRAME_DTYPE.itemsize
        mask_bytes = int(np.prod(mask_shape)) * _MASK_DTYPE.itemsize

        clips: list[VideoClip] = []
        for entry in manifest.clips:
            blob = _read_blob(self.root / entry.file)
            expected = frame_bytes + (mask_bytes if entry.has_masks else 0)
            if len(blob) != expected:
                raise DataIOError(
                    f"{entry.file} holds {len(blob)} bytes, expected {expected}"
                )
            frames = np.frombuffer(blob, dtype=_FRAME_DTYPE, count=int(np.prod(frame_shape)))
            masks = None
            if entry.has_masks:
                masks = np.frombuffer(blob, dtype=_MASK_DTYPE, offset=frame_bytes)
                masks = masks.reshape(mask_shape).astype(np.uint16)
            clips.append(
                VideoClip(
                    clip_id=entry.clip_id,
                    frames=frames.reshape(frame_shape).astype(np.float32),
                    instance_masks=masks,
                    label=entry.label,
                )
            )
        return clips


class FeatureStore:
    """Frozen per-tube target features, one ``[N_T, d_feat]`` matrix per clip."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self._manifest: FeatureManifest | None = None
        self._cache: dict[str, torch.Tensor] = {}

    @property
    def manifest(self) -> FeatureManifest:
        if self._manifest is None:
            manifest = _read_manifest(self.root / MANIFEST, FeatureManifest)
            assert isinstance(manifest, FeatureManifest)
            self._manifest = manifest
        return self._manifest

    @property
    def d_feat(self) -> int:
        return self.manifest.d_feat

    def __contains__(self, clip_id: object) -> bool:
        return clip_id in self.manifest.entries

    def write(self, features: Mapping[str, torch.Tensor | np.ndarray]) -> FeatureManifest:
        if not features:
            raise DataIOError("refusing to write an empty feature store")
        arrays = {
            clip_id: (
                value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value
            )
            for clip_id, value in features.items()
        }
        n_tokens, d_feat = next(iter(arrays.values())).shape
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create {self.root}: {exc}") from exc

        entries: dict[str, str] = {}
        for clip_id, array in sorted(arrays.items()):
            if array.shape != (n_tokens, d_feat):
                raise ShapeError(
                    f"features for {clip_id} have shape {array.shape}, "
                    f"expected {(n_tokens, d_feat)}"
                )
            name = f"{clip_id}.f32"
            try:
                (self.root / name).write_bytes(array.astype(_FRAME_DTYPE, copy=False).tobytes())
            except OSError as exc:
                raise DataIOError(f"cannot write {self.root / name}: {exc}") from exc
            entries[clip_id] = name

        manifest = FeatureManifest(n_tokens=n_tokens, d_feat=d_feat, entries=entries)
        _write_manifest(self.root / MANIFEST, manifest)
        self._manifest = manifest
        self._cache.clear()
        return manifest

    def get(self, clip_id: str) -> torch.Tensor:
        if clip_id in self._cache:
            return self._cache[clip_id]
        manifest = self.manifest
        name = manifest.entries.get(clip_id)
        if name is None:
            raise FeatureLookupError(f"no stored features for clip {clip_id!r} in {self.root}")
        blob = _read_blob(self.root / name)
        expected = manifest.n_tokens * manifest.d_feat * _FRAME_DTYPE.itemsize
        if len(blob) != expected:
            raise DataIOError(f"{name} holds {len(blob)} bytes, expected {expected}")
        array = np.frombuffer(blob, dtype=_FRAME_DTYPE).reshape(manifest.n_tokens, manifest.d_feat)
        tensor = torch.from_numpy(array.astype(np.float32))
        self._cache[clip_id] = tensor
        return tensor
