"""3D volume container, resampling, intensity scaling, cropping and MVOL file IO."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
_HEADER = struct.Struct("<4sIB3I3d3d")

# Intensity windows used to scale network inputs to [0, 1].
PET_RANGE = (0.0, 30.0)
CT_RANGE = (-150.0, 250.0)


class VolumeError(ValueError):
    pass


class Kind(enum.IntEnum):
    SUV = 0
    HU = 1
    LABEL = 2
    PROB = 3


Triple = tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar grid indexed ``values[i, j, k]`` with voxel centers at ``origin + spacing * index``.

    Values are held as float32, the on-disk precision, so a file round trip is
    bit-exact. Metric code casts to float64 before accumulating.
    """

    values: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    kind: Kind = Kind.SUV

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32, copy=True)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise VolumeError(f"values must be a non-empty 3D array, got shape {vals.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise VolumeError("spacing and origin must be triples")
        if min(spacing) <= 0:
            raise VolumeError(f"spacing must be positive, got {spacing}")
        kind = Kind(self.kind)
        if kind == Kind.LABEL:
            if vals.min() < 0 or not np.array_equal(vals, np.round(vals)) or vals.max() >= 2**24:
                raise VolumeError("LABEL volumes hold non-negative integers below 2**24")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def same_grid(self, other: "Volume3D", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
        )

    def with_values(self, values: np.ndarray, kind: Kind | None = None) -> "Volume3D":
        return Volume3D(values, self.spacing, self.origin, self.kind if kind is None else kind)

    def index_to_mm(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def mm_to_index(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def center_mm(self) -> np.ndarray:
        return self.index_to_mm((np.asarray(self.dims) - 1) / 2.0)

    def labels(self) -> np.ndarray:
        return self.values.astype(np.int64)

    def mask(self) -> np.ndarray:
        return self.values > 0

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class BoundingBox:
    min_voxel: tuple[int, int, int]
    max_voxel: tuple[int, int, int]

    def __post_init__(self):
        if any(a > b for a, b in zip(self.min_voxel, self.max_voxel)):
            raise VolumeError(f"box min {self.min_voxel} exceeds max {self.max_voxel}")

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(n) - 1 for n in dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min_voxel, self.max_voxel))

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            tuple(min(a, b) for a, b in zip(self.min_voxel, other.min_voxel)),
            tuple(max(a, b) for a, b in zip(self.max_voxel, other.max_voxel)),
        )

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_voxel, self.max_voxel))


def _output_grid(v: Volume3D, target_spacing: Sequence[float]):
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise VolumeError(f"target spacing must be three positive values, got {target_spacing}")
    spacing = np.asarray(v.spacing)
    extent = np.asarray(v.dims) * spacing
    # round before ceil so 2*6/3 does not become 4.0000000001 -> 5
    dims = np.ceil(np.round(extent / target, 9)).astype(int)
    dims = np.maximum(dims, 1)
    # align the outer voxel corners of both grids
    origin = np.asarray(v.origin) - spacing / 2.0 + target / 2.0
    return dims, target, origin


def resample(v: Volume3D, target_spacing: Sequence[float], mode: str = "trilinear") -> Volume3D:
    """Resample onto an isotropic-or-not grid with the same outer corner.

    Voxel values sit at voxel centers; samples falling outside the input's
    center lattice are clamped to the edge voxels.
    """
    if mode not in ("trilinear", "nearest"):
        raise VolumeError(f"unknown resampling mode {mode!r}")
    if v.kind == Kind.LABEL and mode != "nearest":
        raise VolumeError("label volumes must be resampled with mode='nearest'")
    dims, target, origin = _output_grid(v, target_spacing)
    if tuple(dims) == v.dims and np.allclose(target, v.spacing, rtol=0, atol=1e-12):
        return v
    axes = [
        (origin[a] + target[a] * np.arange(dims[a]) - v.origin[a]) / v.spacing[a] for a in range(3)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = ndimage.map_coordinates(
        v.values.astype(np.float64), coords, order=1 if mode == "trilinear" else 0, mode="nearest"
    )
    return Volume3D(out, tuple(target), tuple(origin), v.kind)


def normalize(v: Volume3D, lo: float, hi: float) -> Volume3D:
    if not hi > lo:
        raise VolumeError(f"normalize needs hi > lo, got lo={lo}, hi={hi}")
    out = np.clip((v.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return v.with_values(out, Kind.PROB)


def foreground_bbox(pet: Volume3D, suv_threshold: float = 0.2) -> BoundingBox:
    """Tightest box around voxels with SUV above the threshold; the whole grid if none are."""
    if pet.kind != Kind.SUV:
        raise VolumeError("foreground_bbox expects an SUV volume")
    idx = np.nonzero(pet.values > suv_threshold)
    if idx[0].size == 0:
        return BoundingBox.full(pet.dims)
    return BoundingBox(
        tuple(int(a.min()) for a in idx),
        tuple(int(a.max()) for a in idx),
    )


def crop(v: Volume3D, box: BoundingBox) -> Volume3D:
    if any(a < 0 for a in box.min_voxel) or any(b >= n for b, n in zip(box.max_voxel, v.dims)):
        raise VolumeError(f"box {box} lies outside volume dims {v.dims}")
    origin = tuple(v.index_to_mm(box.min_voxel))
    return Volume3D(v.values[box.slices()], v.spacing, origin, v.kind)


def pad_to(v: Volume3D, dims: Sequence[int], value: float = 0.0) -> Volume3D:
    """Pad at the high-index end so the volume reaches ``dims``; origin is unchanged."""
    pad = [(0, int(n) - m) for n, m in zip(dims, v.dims)]
    if any(p[1] < 0 for p in pad):
        raise VolumeError(f"cannot pad {v.dims} down to {tuple(dims)}")
    return v.with_values(np.pad(v.values, pad, constant_values=value))


def write_mvol(v: Volume3D, path: str | Path) -> None:
    header = _HEADER.pack(MVOL_MAGIC, MVOL_VERSION, int(v.kind), *v.dims, *v.spacing, *v.origin)
    data = np.asarray(v.values, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + data)


def read_mvol(path: str | Path) -> Volume3D:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeError(f"{path}: file too short for an MVOL header")
    magic, version, kind, nx, ny, nz, *rest = _HEADER.unpack_from(raw)
    if magic != MVOL_MAGIC:
        raise VolumeError(f"{path}: bad magic {magic!r}")
    if version != MVOL_VERSION:
        raise VolumeError(f"{path}: unsupported MVOL version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise VolumeError(f"{path}: unknown volume kind {kind}") from None
    n = nx * ny * nz
    if n == 0 or len(raw) != _HEADER.size + 4 * n:
        raise VolumeError(f"{path}: payload size does not match dims {(nx, ny, nz)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n).reshape((nx, ny, nz), order="F")
    return Volume3D(values, tuple(rest[:3]), tuple(rest[3:]), kind)


def mvol_header(path: str | Path) -> dict:
    v = read_mvol(path)
    return {
        "kind": v.kind.name,
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "min": float(v.values.min()),
        "max": float(v.values.max()),
        "mean": float(v.values.astype(np.float64).mean()),
    }
