"""Binary tensor files: ``b"BGLT"``, u32 ndim, ndim x u32 dims, f32 payload.

All integers are little-endian and the payload is row-major.  Values are
stored as float32, so a round trip through disk is exact only for values that
are representable in single precision.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import ParameterVector, Tensor

MAGIC = b"BGLT"


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorFormatError("missing BGLT magic")
    if len(blob) < 8:
        raise TensorFormatError("truncated header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * ndim
    if len(blob) < head:
        raise TensorFormatError("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8) if ndim else ()
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) != head + 4 * count:
        raise TensorFormatError(f"payload holds {(len(blob) - head) // 4} values, header promises {count}")
    return np.frombuffer(blob, dtype="<f4", offset=head, count=count).astype(np.float64).reshape(dims)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_parameters(directory, params: ParameterVector, manifest: dict | None = None) -> Path:
    """Write each segment as ``<name>.bglt`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, t in params.items():
        write_tensor(directory / f"{name}.bglt", t.data)
    body = dict(manifest or {})
    # a list keeps segment order stable under sort_keys
    body["segments"] = [[name, list(t.shape)] for name, t in params.items()]
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return directory


def load_parameters(directory) -> tuple[ParameterVector, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    segments = []
    for name, shape in manifest["segments"]:
        arr = read_tensor(directory / f"{name}.bglt")
        if list(arr.shape) != list(shape):
            raise TensorFormatError(f"segment {name}: file shape {arr.shape} != manifest {shape}")
        segments.append((name, Tensor(arr)))
    return ParameterVector(segments), manifest
