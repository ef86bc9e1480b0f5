"""Grid fields, named tensor bundles and the ``.lpnb`` container format.

File layout (all integers little-endian)::

    b"LPNB1\\0" | u32 header_length | UTF-8 JSON header | payloads

The header is ``{"tensors": [{"name", "dtype", "shape"}, ...], "metadata": {...}}``.
Each payload is raw row-major little-endian data starting at a 64-byte
aligned file offset; gaps are zero-filled.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError, LengthMismatchError, RangeError, ValidationError

MAGIC = b"LPNB1\0"
ALIGN = 64
EXTENSION = ".lpnb"

_NAME_RE = re.compile(r"^[A-Za-z0-9_./-]+$")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


@dataclass(frozen=True, eq=False)
class ScalarField2D:
    """A scalar function sampled on a regular 2D grid.

    ``values[i, j]`` lives at physical ``(origin_x + j*dx, origin_z + i*dz)``;
    rows run along depth ``z`` and columns along ``x``.
    """

    values: np.ndarray
    dx: float
    dz: float
    origin_x: float = 0.0
    origin_z: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise ValidationError(f"field values must be 2D, got shape {values.shape}")
        nz, nx = values.shape
        if nx < 2 or nz < 2:
            raise ValidationError(f"field needs at least 2x2 nodes, got {nz}x{nx}")
        if not (self.dx > 0 and self.dz > 0):
            raise ValidationError(f"grid spacing must be positive, got dx={self.dx}, dz={self.dz}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("field values contain NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dz", float(self.dz))
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_z", float(self.origin_z))

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def nz(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def x(self) -> np.ndarray:
        return self.origin_x + self.dx * np.arange(self.nx)

    @property
    def z(self) -> np.ndarray:
        return self.origin_z + self.dz * np.arange(self.nz)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(x_min, x_max, z_min, z_max)`` in physical units."""
        return (
            self.origin_x,
            self.origin_x + (self.nx - 1) * self.dx,
            self.origin_z,
            self.origin_z + (self.nz - 1) * self.dz,
        )

    def coordinate(self, i: int, j: int) -> tuple[float, float]:
        return self.origin_x + j * self.dx, self.origin_z + i * self.dz

    def nearest_node(self, x: float, z: float) -> tuple[int, int]:
        j = int(round((x - self.origin_x) / self.dx))
        i = int(round((z - self.origin_z) / self.dz))
        return min(max(i, 0), self.nz - 1), min(max(j, 0), self.nx - 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``(X, Z)`` with the field's shape."""
        return np.meshgrid(self.x, self.z)

    def contains(self, x: float, z: float, tol: float = 1e-12) -> bool:
        x0, x1, z0, z1 = self.extent
        return (x0 - tol <= x <= x1 + tol) and (z0 - tol <= z <= z1 + tol)

    def same_grid(self, other: "ScalarField2D") -> bool:
        return (
            self.shape == other.shape
            and math.isclose(self.dx, other.dx, rel_tol=1e-12)
            and math.isclose(self.dz, other.dz, rel_tol=1e-12)
            and math.isclose(self.origin_x, other.origin_x, abs_tol=1e-12)
            and math.isclose(self.origin_z, other.origin_z, abs_tol=1e-12)
        )

    def with_values(self, values: np.ndarray) -> "ScalarField2D":
        """A field on the same grid holding ``values``."""
        return ScalarField2D(values, self.dx, self.dz, self.origin_x, self.origin_z)

    def grid_metadata(self) -> dict[str, float]:
        return {"dx": self.dx, "dz": self.dz, "origin_x": self.origin_x, "origin_z": self.origin_z}


@dataclass
class TensorBundle:
    """Ordered named tensors plus flat metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = dict(self.entries)
        self.metadata = {
            k: list(v) if isinstance(v, tuple) else v for k, v in dict(self.metadata).items()
        }
        for name in self.entries:
            _check_name(name)
        _check_metadata(self.metadata)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value) -> None:
        _check_name(name)
        self.entries[name] = np.asarray(value)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        if list(self.entries) != list(other.entries) or self.metadata != other.metadata:
            return False
        for name, a in self.entries.items():
            b = other.entries[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.entries.items() if k.startswith(prefix)}


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise ValidationError(f"invalid tensor name {name!r}")


def _check_metadata(metadata: Mapping[str, Any]) -> None:
    for key, value in metadata.items():
        if not isinstance(key, str) or not key:
            raise ValidationError(f"metadata keys must be non-empty strings, got {key!r}")
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if not isinstance(item, (str, int, float, bool)):
                raise ValidationError(f"metadata {key!r} holds unsupported value {value!r}")


def _pad(offset: int) -> int:
    return (-offset) % ALIGN


def _encode_tensor(name: str, arr: np.ndarray) -> tuple[dict, bytes]:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValidationError(f"tensor {name!r} has dtype {arr.dtype}; only float32/float64 are stored")
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return {"name": name, "dtype": code, "shape": list(arr.shape)}, data


def save_bundle(bundle: TensorBundle, path) -> None:
    """Write ``bundle`` to ``path`` and fsync before returning."""
    path = Path(path)
    allow_nonfinite = bundle.metadata.get("allow_nonfinite") is True
    specs, payloads = [], []
    for name, arr in bundle.entries.items():
        _check_name(name)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name!r} holds non-finite values (set allow_nonfinite)")
        spec, data = _encode_tensor(name, arr)
        specs.append(spec)
        payloads.append(data)
    _check_metadata(bundle.metadata)
    header = json.dumps({"tensors": specs, "metadata": bundle.metadata}, separators=(",", ":"))
    header_bytes = header.encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    offset = sum(len(c) for c in chunks)
    for data in payloads:
        gap = _pad(offset)
        chunks.append(b"\0" * gap)
        chunks.append(data)
        offset += gap + len(data)
    try:
        with open(path, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise OSError(exc.errno, f"failed to write bundle: {exc.strerror}", str(path)) from exc


def load_bundle(path) -> TensorBundle:
    """Read a bundle written by :func:`save_bundle`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"failed to read bundle: {exc.strerror}", str(path)) from exc

    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: magic: expected {MAGIC!r}, found {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise FormatError(f"{path}: header_length: file truncated")
    (header_len,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if len(raw) < pos + header_len:
        raise FormatError(f"{path}: header: declared {header_len} bytes, file too short")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header: invalid JSON ({exc})") from exc
    pos += header_len

    if not isinstance(header, dict):
        raise FormatError(f"{path}: header: expected a JSON object")
    tensors = header.get("tensors")
    if not isinstance(tensors, list):
        raise FormatError(f"{path}: tensors: missing or not a list")
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict):
        raise FormatError(f"{path}: metadata: not an object")

    entries: dict[str, np.ndarray] = {}
    for k, spec in enumerate(tensors):
        if not isinstance(spec, dict):
            raise FormatError(f"{path}: tensors[{k}]: not an object")
        name = spec.get("name")
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise FormatError(f"{path}: tensors[{k}].name: invalid {name!r}")
        if name in entries:
            raise FormatError(f"{path}: tensors[{k}].name: duplicate {name!r}")
        dtype = _DTYPES.get(spec.get("dtype"))
        if dtype is None:
            raise FormatError(f"{path}: tensors[{k}].dtype: unsupported {spec.get('dtype')!r}")
        shape = spec.get("shape")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise FormatError(f"{path}: tensors[{k}].shape: invalid {shape!r}")
        pos += _pad(pos)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(raw):
            raise LengthMismatchError(
                f"{path}: tensor {name!r} needs {nbytes} bytes at offset {pos}, "
                f"only {max(len(raw) - pos, 0)} available"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        entries[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(raw):
        raise LengthMismatchError(f"{path}: {len(raw) - pos} trailing bytes after last payload")
    return TensorBundle(entries, metadata)


def bilinear_sample(fld: ScalarField2D, x: float, z: float) -> float:
    """Bilinear interpolation of ``fld`` at physical point ``(x, z)``."""
    if not fld.contains(x, z):
        raise RangeError(f"point (x={x}, z={z}) outside field extent {fld.extent}")
    u = (x - fld.origin_x) / fld.dx
    w = (z - fld.origin_z) / fld.dz
    j = min(max(int(math.floor(u)), 0), fld.nx - 2)
    i = min(max(int(math.floor(w)), 0), fld.nz - 2)
    fu, fw = u - j, w - i
    v = fld.values
    return float(
        (1 - fw) * ((1 - fu) * v[i, j] + fu * v[i, j + 1])
        + fw * ((1 - fu) * v[i + 1, j] + fu * v[i + 1, j + 1])
    )


def field_to_bundle(fld: ScalarField2D, name: str = "v", **metadata) -> TensorBundle:
    meta = fld.grid_metadata()
    meta.update(metadata)
    return TensorBundle({name: fld.values.astype(np.float32)}, meta)


def field_from_bundle(bundle: TensorBundle, name: str = "v") -> ScalarField2D:
    meta = bundle.metadata
    try:
        return ScalarField2D(
            bundle[name].astype(np.float64),
            meta["dx"],
            meta["dz"],
            meta.get("origin_x", 0.0),
            meta.get("origin_z", 0.0),
        )
    except KeyError as exc:
        raise FormatError(f"bundle lacks field component {exc}") from exc


def save_field(fld: ScalarField2D, path, name: str = "v", **metadata) -> None:
    save_bundle(field_to_bundle(fld, name, **metadata), path)


def load_field(path, name: str = "v") -> ScalarField2D:
    return field_from_bundle(load_bundle(path), name)
