"""Single-file binary checkpoints.

Layout, all integers little-endian::

    magic        8 bytes  b"TOBTCKPT"
    version      u32
    header_len   u64
    header       JSON: {"config": <RunConfig>, "step": int, "epoch": int}
    3 sections   parameters, optimizer moments, RNG state; each is
                 count u32 followed by ``count`` tensor records

    tensor record:
    name_len u16 | name utf-8 | dtype tag u8 | rank u8 | rank x u64 dims | payload

Parameters are named ``<module>.<parameter>`` with modules ``psi``, ``phi`` and
``bank``. Moments are named ``<slot>/<parameter>``, for example
``exp_avg/psi.feature_head.weight``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from tubeot.config import parse_run_config
from tubeot.errors import DataIOError
from tubeot.train.state import TrainState, build_state

MAGIC = b"TOBTCKPT"
VERSION = 1

_DTYPES: dict[int, tuple[torch.dtype, str]] = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.int32, "<i4"),
    4: (torch.uint8, "|u1"),
}
_TAGS = {torch_dtype: tag for tag, (torch_dtype, _) in _DTYPES.items()}


@dataclass(frozen=True)
class CheckpointContents:
    header: dict[str, object]
    params: dict[str, torch.Tensor]
    moments: dict[str, torch.Tensor]
    rng: dict[str, torch.Tensor]


def _write_tensor(buffer: io.BytesIO, name: str, tensor: torch.Tensor) -> None:
    tensor = tensor.detach().cpu().contiguous()
    tag = _TAGS.get(tensor.dtype)
    if tag is None:
        raise DataIOError(f"cannot store {name} with dtype {tensor.dtype}")
    encoded = name.encode("utf-8")
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)
    buffer.write(struct.pack("<BB", tag, tensor.dim()))
    buffer.write(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
    buffer.write(tensor.numpy().astype(_DTYPES[tag][1], copy=False).tobytes())


def _write_section(buffer: io.BytesIO, tensors: dict[str, torch.Tensor]) -> None:
    buffer.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        _write_tensor(buffer, name, tensor)


def _moments(state: TrainState) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for name, param in state.named_parameters():
        for slot, value in state.optimizer.state.get(param, {}).items():
            out[f"{slot}/{name}"] = torch.as_tensor(value)
    return out


def save_checkpoint(state: TrainState, path: Path) -> Path:
    header = {
        "config": state.config.model_dump(mode="json"),
        "step": state.step,
        "epoch": state.epoch,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    rng: dict[str, torch.Tensor] = {}
    if state.epoch_generator is not None:
        rng["epoch_generator"] = state.epoch_generator
    if state.epoch_order is not None:
        rng["epoch_order"] = state.epoch_order

    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<IQ", VERSION, len(header_bytes)))
    buffer.write(header_bytes)
    _write_section(buffer, dict(state.named_parameters()))
    _write_section(buffer, _moments(state))
    _write_section(buffer, rng)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buffer.getvalue())
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = memoryview(data)
        self.offset = 0
        self.path = path

    def take(self, size: int) -> memoryview:
        if self.offset + size > len(self.data):
            raise DataIOError(f"checkpoint {self.path} is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, torch.Tensor]:
        (name_len,) = self.unpack("<H")
        name = bytes(self.take(name_len)).decode("utf-8")
        tag, rank = self.unpack("<BB")
        if tag not in _DTYPES:
            raise DataIOError(f"checkpoint {self.path}: unknown dtype tag {tag} for {name}")
        dims = self.unpack(f"<{rank}Q")
        torch_dtype, np_dtype = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        payload = self.take(count * np.dtype(np_dtype).itemsize)
        array = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()
        return name, torch.from_numpy(array).to(torch_dtype)

    def section(self) -> dict[str, torch.Tensor]:
        (count,) = self.unpack("<I")
        return dict(self.tensor() for _ in range(count))


def read_checkpoint(path: Path) -> CheckpointContents:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(data, path)
    if bytes(reader.take(len(MAGIC))) != MAGIC:
        raise DataIOError(f"{path} is not a checkpoint")
    version, header_len = reader.unpack("<IQ")
    if version != VERSION:
        raise DataIOError(f"checkpoint {path} has version {version}, expected {VERSION}")
    try:
        header = json.loads(bytes(reader.take(header_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"checkpoint {path} has a corrupt header") from exc
    params, moments, rng = reader.section(), reader.section(), reader.section()
    if reader.offset != len(reader.data):
        raise DataIOError(f"checkpoint {path} has trailing bytes")
    return CheckpointContents(header=header, params=params, moments=moments, rng=rng)


def load_checkpoint(path: Path) -> TrainState:
    """Rebuild the networks and optimizer exactly as they were saved."""
    contents = read_checkpoint(path)
    config = parse_run_config(contents.header["config"])  # type: ignore[arg-type]
    state = build_state(config)

    named = dict(state.named_parameters())
    missing = named.keys() - contents.params.keys()
    extra = contents.params.keys() - named.keys()
    if missing or extra:
        raise DataIOError(
            f"checkpoint {path} does not match its config "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    with torch.no_grad():
        for name, param in named.items():
            stored = contents.params[name]
            if stored.shape != param.shape:
                raise DataIOError(
                    f"checkpoint {path}: {name} has shape {tuple(stored.shape)}, "
                    f"expected {tuple(param.shape)}"
                )
            param.copy_(stored)

    for key, value in contents.moments.items():
        slot, _, name = key.partition("/")
        param = named.get(name)
        if param is None:
            raise DataIOError(f"checkpoint {path}: moment {key} has no parameter")
        state.optimizer.state[param][slot] = value

    state.step = int(contents.header["step"])  # type: ignore[call-overload]
    state.epoch = int(contents.header["epoch"])  # type: ignore[call-overload]
    state.epoch_generator = contents.rng.get("epoch_generator")
    state.epoch_order = contents.rng.get("epoch_order")
    return state
