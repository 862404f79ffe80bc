"""Volumetric data model and the JSON + raw float32 file pair.

Axis convention: x = patient left, y = patient posterior, z = patient superior.
Axial slices are fixed-z planes. ``Volume.data`` has numpy shape (nz, ny, nx),
so its C-order flattening is x-fastest, z-slowest.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class VolumeError(ValueError):
    """Malformed volume, header or payload."""


class BoundsError(IndexError):
    pass


@dataclass(frozen=True)
class VolumeMeta:
    patient_id: str = "anon"
    n_coils: int = 1
    snr_tag: float | None = None
    provenance: str = ""

    def __post_init__(self):
        if int(self.n_coils) < 1:
            raise VolumeError(f"n_coils must be >= 1, got {self.n_coils}")


@dataclass(frozen=True)
class PhysicalPoint:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise ValueError("PhysicalPoint components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PhysicalPoint":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class BoxRoi:
    """Voxel box, inclusive ``lo`` and exclusive ``hi``, both (x, y, z)."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(int(c) for c in self.hi))
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("BoxRoi corners must be triples")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty or inverted ROI {self.lo}..{self.hi}")
        if any(a < 0 for a in self.lo):
            raise ValueError(f"negative ROI corner {self.lo}")

    def check_within(self, dims) -> None:
        if any(h > d for h, d in zip(self.hi, dims)):
            raise BoundsError(f"ROI {self.lo}..{self.hi} exceeds dims {tuple(dims)}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        """Index expression for a (nz, ny, nx) array."""
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        return slice(z0, z1), slice(y0, y1), slice(x0, x1)

    @property
    def shape_xyz(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def overlaps(self, other: "BoxRoi") -> bool:
        return all(a0 < b1 and b0 < a1 for a0, a1, b0, b1 in zip(self.lo, self.hi, other.lo, other.hi))

    def to_list(self) -> list[int]:
        return [*self.lo, *self.hi]

    @classmethod
    def from_list(cls, vals) -> "BoxRoi":
        vals = [int(v) for v in vals]
        if len(vals) != 6:
            raise ValueError("ROI needs six integers x0,y0,z0,x1,y1,z1")
        return cls(tuple(vals[:3]), tuple(vals[3:]))


@dataclass(frozen=True, eq=False)
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    meta: VolumeMeta = field(default_factory=VolumeMeta)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise VolumeError(f"bad dims {self.dims}")
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        data = np.asarray(self.data, dtype=np.float32)
        nx, ny, nz = dims
        if data.size != nx * ny * nz:
            raise VolumeError(f"data length {data.size} != {nx}*{ny}*{nz}")
        data = np.ascontiguousarray(data.reshape(nz, ny, nx))
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr_zyx, spacing, meta: VolumeMeta | None = None) -> "Volume":
        arr = np.asarray(arr_zyx)
        if arr.ndim != 3:
            raise VolumeError("expected a 3D (nz, ny, nx) array")
        nz, ny, nx = arr.shape
        return cls((nx, ny, nz), spacing, arr, meta or VolumeMeta())

    def with_data(self, arr_zyx, **meta_changes) -> "Volume":
        return Volume(self.dims, self.spacing, arr_zyx, replace(self.meta, **meta_changes))

    def with_meta(self, **meta_changes) -> "Volume":
        return Volume(self.dims, self.spacing, self.data, replace(self.meta, **meta_changes))

    def axial_slice(self, z: int) -> np.ndarray:
        """(ny, nx) view of slice ``z``."""
        if not 0 <= z < self.dims[2]:
            raise BoundsError(f"slice {z} outside 0..{self.dims[2] - 1}")
        return self.data[z]

    def contains_index(self, i) -> bool:
        return all(0 <= int(c) < d for c, d in zip(i, self.dims))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.meta == other.meta
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def world_from_index(v: Volume, i) -> PhysicalPoint:
    if len(i) != 3 or not v.contains_index(i):
        raise BoundsError(f"index {tuple(i)} outside dims {v.dims}")
    return PhysicalPoint(*(float(c) * s for c, s in zip(i, v.spacing)))


def index_from_world(v: Volume, p: PhysicalPoint) -> tuple[int, int, int]:
    idx = tuple(int(np.rint(c / s)) for c, s in zip((p.x, p.y, p.z), v.spacing))
    if not v.contains_index(idx):
        raise BoundsError(f"point {p} maps outside dims {v.dims}")
    return idx


def roi_stats(v: Volume, r: BoxRoi) -> tuple[float, float]:
    """Mean and population standard deviation of the voxels inside ``r``."""
    r.check_within(v.dims)
    vals = v.data[r.slices].astype(np.float64)
    if vals.size == 0:
        raise ValueError("empty ROI")
    return float(vals.mean()), float(vals.std())


# -- file pair I/O ----------------------------------------------------------

def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".f32")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode())


def save_volume(v: Volume, path) -> Path:
    """Write ``<name>.json`` + ``<name>.f32``; returns the header path."""
    hdr_path, raw_path = _pair_paths(path)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "dtype": "f32le",
        "data_file": raw_path.name,
        "patient_id": v.meta.patient_id,
        "n_coils": v.meta.n_coils,
        "snr_tag": v.meta.snr_tag,
        "provenance": v.meta.provenance,
    }
    atomic_write_bytes(raw_path, v.data.astype("<f4").tobytes())
    atomic_write_json(hdr_path, header)
    return hdr_path


def load_volume(path) -> Volume:
    hdr_path, raw_path = _pair_paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed header {hdr_path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype", "patient_id", "n_coils"):
        if key not in header:
            raise VolumeError(f"header {hdr_path} missing '{key}'")
    if header["dtype"] != "f32le":
        raise VolumeError(f"unsupported dtype {header['dtype']!r}")
    raw_path = hdr_path.with_name(header.get("data_file", raw_path.name))
    payload = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    nx, ny, nz = (int(d) for d in header["dims"])
    if payload.size != nx * ny * nz:
        raise VolumeError(
            f"payload has {payload.size} values, header dims {nx}x{ny}x{nz} need {nx * ny * nz}"
        )
    snr = header.get("snr_tag")
    meta = VolumeMeta(
        patient_id=str(header["patient_id"]),
        n_coils=int(header["n_coils"]),
        snr_tag=None if snr is None else float(snr),
        provenance=str(header.get("provenance", "")),
    )
    return Volume((nx, ny, nz), tuple(header["spacing_mm"]), payload.astype(np.float32), meta)
