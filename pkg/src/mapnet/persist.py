"""Binary parameter files.

Layout: the 8-byte magic ``MAPNET01`` followed by one record per array:
``uint32`` name length, UTF-8 name, ``uint64`` rows, ``uint64`` cols, then
``rows * cols`` little-endian float64 values in row-major order. Bias
vectors are stored as ``(1, n)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .model import ModelParams

MAGIC = b"MAPNET01"


def save_params(params: ModelParams, path) -> None:
    chunks = [MAGIC]
    for name, arr in params.named().items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise InvalidInputError(f"parameter '{name}' is not 2-D")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<QQ", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise FormatError("not a parameter file (bad magic)", path)
    pos, arrays = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated at byte {pos}", path)
        out = data[pos:pos + n]
        pos += n
        return out

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"bad parameter name at byte {pos - n}", path) from None
        rows, cols = struct.unpack("<QQ", take(16))
        arr = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        if name in arrays:
            raise FormatError(f"duplicate parameter '{name}'", path)
        arrays[name] = arr.astype(np.float64)
    try:
        return ModelParams.from_named(arrays)
    except InvalidInputError as exc:
        raise FormatError(str(exc), path) from None
