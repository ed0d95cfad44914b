"""Binary complex-tensor files.

Layout (little-endian): 4-byte magic ``LSET``, ``u32`` version (1), ``u32``
number of dimensions ``D``, ``D`` x ``u32`` sizes, then the samples as
interleaved ``float32`` real/imaginary pairs in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = b"LSET"
VERSION = 1


def write_tensor(path, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=np.complex64)
    header = MAGIC + struct.pack(f"<II{y.ndim}I", VERSION, y.ndim, *y.shape)
    body = np.ascontiguousarray(y).view(np.float32).astype("<f4", copy=False)
    Path(path).write_bytes(header + body.tobytes())


def read_tensor(path) -> np.ndarray:
    """Load a tensor as ``complex128``; malformed files raise :class:`ConfigError`."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a tensor file (bad magic)")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported version {version}")
    if ndim < 1 or len(raw) < 12 + 4 * ndim:
        raise ConfigError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    n = int(np.prod(dims))
    offset = 12 + 4 * ndim
    if len(raw) != offset + 8 * n or n == 0:
        raise ConfigError(f"{path}: expected {n} samples, payload has {(len(raw) - offset) / 8:g}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64)
    return (data[0::2] + 1j * data[1::2]).reshape(dims)
