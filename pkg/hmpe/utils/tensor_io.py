"""
Readers and writers for the files hmpe exchanges between subcommands.

HMPT tensor files:
    magic b"HMPT", u8 rank, rank x u32 little-endian dims,
    then prod(dims) x f32 little-endian payload.

Sidecar files are flat `key=value` text, parsed with python-dotenv.
"""
import os
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
from dotenv import dotenv_values

from hmpe.utils.errors import FormatError
from hmpe.utils.numerics import ArrayLike, Tensor, as_tensor

PathLike = Union[str, os.PathLike]

MAGIC = b"HMPT"
_DIM_DTYPE = np.dtype("<u4")
_DATA_DTYPE = np.dtype("<f4")


def encode_hmpt(tensor: ArrayLike) -> bytes:
    """Serialise a tensor to HMPT bytes.

    Args:
        tensor (ArrayLike): Array of rank 1 to 255 with positive dims.

    Returns:
        bytes: The encoded file content.
    """
    arr = as_tensor(tensor)
    if not 1 <= arr.ndim <= 255:
        raise FormatError(f"HMPT supports ranks 1..255, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise FormatError(f"HMPT dims must be positive, got {arr.shape}")
    header = MAGIC + bytes([arr.ndim]) + np.asarray(arr.shape, dtype=_DIM_DTYPE).tobytes()
    return header + np.ascontiguousarray(arr, dtype=_DATA_DTYPE).tobytes()


def decode_hmpt(blob: bytes) -> Tensor:
    """Parse HMPT bytes back into a float32 tensor."""
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise FormatError("missing HMPT magic")
    rank = blob[4]
    if rank == 0:
        raise FormatError("HMPT rank must be at least 1")
    dims_end = 5 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError("truncated HMPT header")
    dims = tuple(int(d) for d in np.frombuffer(blob[5:dims_end], dtype=_DIM_DTYPE))
    if any(d == 0 for d in dims):
        raise FormatError(f"HMPT dims must be positive, got {dims}")
    count = int(np.prod(dims))
    payload = blob[dims_end:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"HMPT payload holds {len(payload)} bytes, dims {dims} need {4 * count}"
        )
    return as_tensor(np.frombuffer(payload, dtype=_DATA_DTYPE).reshape(dims), "HMPT payload")


def write_tensor(path: PathLike, tensor: ArrayLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_hmpt(tensor))
    return path


def read_tensor(path: PathLike) -> Tensor:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"tensor file {path} not found")
    return decode_hmpt(path.read_bytes())


def write_sidecar(path: PathLike, values: Mapping[str, object]) -> Path:
    """Write `key=value` lines, keys sorted so the bytes are reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={format_value(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_sidecar(path: PathLike) -> Dict[str, str]:
    """Read a `key=value` file into a dict of strings."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"sidecar file {path} not found")
    values = dotenv_values(path)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise FormatError(f"sidecar {path} has keys without values: {missing}")
    return dict(values)


def format_value(value: object) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)
