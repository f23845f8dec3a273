"""Little-endian binary checkpoint format.

Layout::

    magic      4 bytes   b"VDLF"
    version    u32       1
    count      u32       number of tensors
    then per tensor, in state_dict order:
      name_len u32, name (utf-8, name_len bytes)
      dtype    u8        0 = float32, 1 = float64, 2 = int64
      rank     u32
      dims     rank x u64
      data     raw little-endian values, C order
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ProtocolError

MAGIC = b"VDLF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


class ShapeMismatchError(ProtocolError):
    pass


def encode_state(state: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, t in state.items():
        if t.dtype not in _TAGS:
            raise DataError(f"cannot checkpoint {name}: dtype {t.dtype}")
        tag = _TAGS[t.dtype]
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_state(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    if data[:4] != MAGIC:
        raise DataError("not a VDLF checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 12
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode()
        pos += n
        tag, rank = struct.unpack_from("<BI", data, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype=dt, count=size, offset=pos).reshape(dims)
        pos += size * dt.itemsize
        out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if pos != len(data):
        raise DataError("trailing bytes after last tensor")
    return out


def save_checkpoint(model: torch.nn.Module, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_state(model.state_dict()))


def load_checkpoint(model: torch.nn.Module, path: str | os.PathLike) -> None:
    """Load into ``model``; any missing, extra or mis-shaped tensor is fatal and listed."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    state = decode_state(path.read_bytes())
    own = model.state_dict()
    problems = sorted(
        [f"{k}: missing from checkpoint" for k in own if k not in state]
        + [f"{k}: not in model" for k in state if k not in own]
        + [f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(own[k].shape)}"
           for k in own if k in state and state[k].shape != own[k].shape])
    if problems:
        raise ShapeMismatchError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
