"""Binary tensor file format and checkpoint helpers.

Format: magic bytes ``EMAD``, one unsigned 8-bit rank, ``rank`` unsigned
32-bit little-endian extents, then row-major (last axis fastest) IEEE-754
little-endian 32-bit floats. Arrays are held in float64 in memory and
serialized at single precision.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimMismatchError, ValidationError

MAGIC = b"EMAD"


def assert_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite entries")


def assert_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def save_tensor(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    assert_finite(x)
    if x.ndim < 1 or x.ndim > 255:
        raise ValidationError(f"rank {x.ndim} outside [1, 255]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic bytes {magic!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        if any(d <= 0 for d in dims):
            raise ValidationError(f"{path}: non-positive extent in {dims}")
        n = int(np.prod(dims))
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise ValidationError(f"{path}: truncated payload")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    x = data.reshape(dims)
    assert_finite(x, str(path))
    return x


def save_params(directory: str | Path, params: dict[str, np.ndarray], meta: dict) -> None:
    """Write one .emad file per named parameter plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        save_tensor(directory / f"{name}.emad", params[name])
    manifest = dict(meta)
    manifest["params"] = names
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_params(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        from .errors import MissingCheckpointError

        raise MissingCheckpointError(f"no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        meta = json.load(fh)
    params = {name: load_tensor(directory / f"{name}.emad") for name in meta.pop("params")}
    return params, meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
