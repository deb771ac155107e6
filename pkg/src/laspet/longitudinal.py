"""Rigid registration between time points, transform application, and MPDR filtering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from laspet.lesions import compact_labels, connected_components
from laspet.volgrid import CT_RANGE, PET_RANGE, Kind, Volume3D, VolumeError


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps a point in the fixed frame to the moving frame: ``y = rotation @ x + translation`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise RegistrationError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def about_center(cls, rotation: np.ndarray, shift: np.ndarray, center: np.ndarray) -> "RigidTransform":
        """``y = R (x - c) + c + shift``."""
        r = np.asarray(rotation, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return cls(r, c - r @ c + np.asarray(shift, dtype=np.float64))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_list(self) -> list[float]:
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    @classmethod
    def from_list(cls, values) -> "RigidTransform":
        values = list(values)
        if len(values) != 12:
            raise RegistrationError(f"expected 12 numbers, got {len(values)}")
        return cls(np.reshape(values[:9], (3, 3)), values[9:])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"schema_version": 1, "transform": self.to_list()}, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RigidTransform":
        data = json.loads(Path(path).read_text())
        return cls.from_list(data["transform"] if isinstance(data, dict) else data)


def euler_matrix(angles_rad) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` for angles about x, y and z."""
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _euler_derivatives(angles_rad) -> list[np.ndarray]:
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


def apply_transform(v: Volume3D, t: RigidTransform, mode: str = "trilinear",
                    reference: Volume3D | None = None) -> Volume3D:
    """Resample ``v`` onto the reference (fixed) grid: ``out(x) = v(t(x))``."""
    if mode not in ("trilinear", "nearest"):
        raise RegistrationError(f"unknown interpolation mode {mode!r}")
    if v.kind == Kind.LABEL and mode != "nearest":
        raise RegistrationError("label volumes must use nearest interpolation")
    ref = v if reference is None else reference
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in ref.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    idx = v.mm_to_index(t.apply(ref.index_to_mm(grid)))
    if mode == "trilinear":
        out = ndimage.map_coordinates(v.values.astype(np.float64), idx.T, order=1, mode="nearest")
    else:
        # explicit round-half-up keeps integer shifts exact and invertible
        r = np.floor(idx + 0.5 + 1e-9).astype(np.int64)
        inside = np.all((r >= 0) & (r < np.asarray(v.dims)), axis=1)
        out = np.zeros(len(r))
        out[inside] = v.values[tuple(r[inside].T)]
    return Volume3D(out.reshape(ref.dims), ref.spacing, ref.origin, v.kind)


@dataclass(frozen=True)
class RegistrationConfig:
    levels: tuple[int, ...] = (4, 2, 1)
    iterations: tuple[int, ...] = (80, 60, 40)
    grid_radius_mm: float = 12.0
    grid_step_mm: float | None = None  # defaults to half the coarsest voxel size
    rotation_scale_mm: float = 50.0  # converts radians into comparable mm for step lengths
    min_step_mm: float = 0.01


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    converged: bool
    cost: float
    iterations: int


def _scaled_intensities(v: Volume3D) -> np.ndarray:
    vals = v.values.astype(np.float64)
    if v.kind == Kind.SUV:
        lo, hi = PET_RANGE
    elif v.kind == Kind.HU:
        lo, hi = CT_RANGE
    else:
        return vals
    return np.clip((vals - lo) / (hi - lo), 0.0, 1.0)


def _pyramid_level(v: Volume3D, vals: np.ndarray, factor: int):
    if factor > 1:
        vals = ndimage.gaussian_filter(vals, sigma=factor / 2.0, mode="nearest")[::factor, ::factor, ::factor]
    spacing = np.asarray(v.spacing) * factor
    return vals, spacing, np.asarray(v.origin)


class _LevelCost:
    """MSE between fixed samples and the moving image warped by ``(angles, shift)`` about ``center``."""

    def __init__(self, moving, m_spacing, m_origin, fixed, f_spacing, f_origin, center):
        self.moving = moving
        self.m_spacing, self.m_origin = m_spacing, m_origin
        grid = np.argwhere(np.ones(fixed.shape, dtype=bool))
        self.points = f_origin + grid * f_spacing - center
        self.fixed = fixed.ravel()
        self.center = center
        self.grads = [g / s for g, s in zip(np.gradient(moving), m_spacing)]

    def _sample(self, img, idx):
        return ndimage.map_coordinates(img, idx.T, order=1, mode="nearest")

    def _index(self, params):
        rot = euler_matrix(params[:3])
        y = self.points @ rot.T + self.center + params[3:]
        return (y - self.m_origin) / self.m_spacing

    def cost(self, params) -> float:
        r = self._sample(self.moving, self._index(params)) - self.fixed
        return float(np.mean(r * r))

    def cost_grad(self, params):
        idx = self._index(params)
        r = self._sample(self.moving, idx) - self.fixed
        g = np.stack([self._sample(gi, idx) for gi in self.grads], axis=1)
        grad = np.empty(6)
        grad[3:] = 2.0 * (r[:, None] * g).mean(axis=0)
        for k, dr in enumerate(_euler_derivatives(params[:3])):
            grad[k] = 2.0 * np.mean(r * np.einsum("ij,ij->i", g, self.points @ dr.T))
        return float(np.mean(r * r)), grad


def register_rigid(moving: Volume3D, fixed: Volume3D, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the rigid transform taking fixed-frame points to the matching moving-frame points.

    Coarse-to-fine regular-step gradient descent over three Euler angles and a
    translation, seeded at the coarsest level by an exhaustive translation grid.
    """
    cfg = cfg or RegistrationConfig()
    if moving.kind != fixed.kind:
        raise RegistrationError("moving and fixed volumes must have the same kind")
    if len(cfg.levels) != len(cfg.iterations):
        raise RegistrationError("levels and iterations must have equal length")
    lo_m, hi_m = moving.index_to_mm(np.zeros(3)), moving.index_to_mm(np.asarray(moving.dims) - 1)
    lo_f, hi_f = fixed.index_to_mm(np.zeros(3)), fixed.index_to_mm(np.asarray(fixed.dims) - 1)
    if np.any(np.minimum(hi_m, hi_f) < np.maximum(lo_m, lo_f)):
        raise RegistrationError("moving and fixed volumes do not overlap physically")

    center = fixed.center_mm()
    m_vals, f_vals = _scaled_intensities(moving), _scaled_intensities(fixed)
    params = np.zeros(6)
    scale = np.array([cfg.rotation_scale_mm] * 3 + [1.0] * 3)
    converged = False
    total_iters = 0
    cost = np.inf
    for level, (factor, n_iter) in enumerate(zip(cfg.levels, cfg.iterations)):
        m, ms, mo = _pyramid_level(moving, m_vals, factor)
        f, fs, fo = _pyramid_level(fixed, f_vals, factor)
        lc = _LevelCost(m, ms, mo, f, fs, fo, center)
        if level == 0:
            step = cfg.grid_step_mm or float(np.max(fs)) / 2.0
            n = int(np.floor(cfg.grid_radius_mm / step + 1e-9))
            offsets = np.arange(-n, n + 1) * step
            best = (lc.cost(params), 0.0, 0.0, 0.0)
            for tx in offsets:
                for ty in offsets:
                    for tz in offsets:
                        c = lc.cost(np.array([0, 0, 0, tx, ty, tz], dtype=np.float64))
                        if c < best[0] - 1e-15:
                            best = (c, tx, ty, tz)
            params[3:] = best[1:]

        step_len = float(np.max(fs)) / 2.0
        min_step = cfg.min_step_mm * factor
        prev_dir = None
        cost, grad = lc.cost_grad(params)
        converged = False
        for _ in range(n_iter):
            total_iters += 1
            g = grad / scale  # gradient with respect to scaled (mm-like) parameters
            norm = np.linalg.norm(g)
            if norm == 0:
                converged = True
                break
            direction = -g / norm
            if prev_dir is not None and direction @ prev_dir < 0:
                step_len *= 0.5
            if step_len < min_step:
                converged = True
                break
            trial = params + step_len * direction / scale
            new_cost, new_grad = lc.cost_grad(trial)
            if new_cost <= cost:
                params, cost, grad = trial, new_cost, new_grad
                prev_dir = direction
            else:
                step_len *= 0.5
    rot = euler_matrix(params[:3])
    return RegistrationResult(RigidTransform.about_center(rot, params[3:], center), converged, float(cost), total_iters)


def mpdr(pred1_in_pet2, pred2_labels, connectivity: int = 26) -> np.ndarray:
    """Keep only PET2 components that share at least one voxel with the propagated PET1 mask."""
    if isinstance(pred1_in_pet2, Volume3D) and isinstance(pred2_labels, Volume3D):
        if not pred1_in_pet2.same_grid(pred2_labels):
            raise VolumeError("MPDR inputs must share the PET2 grid")
    m1 = pred1_in_pet2.values > 0 if isinstance(pred1_in_pet2, Volume3D) else np.asarray(pred1_in_pet2) > 0
    lab2 = pred2_labels.values.astype(np.int64) if isinstance(pred2_labels, Volume3D) else np.asarray(pred2_labels)
    if m1.shape != lab2.shape:
        raise VolumeError(f"MPDR grid mismatch: {m1.shape} vs {lab2.shape}")
    if lab2.dtype == bool:
        lab2 = connected_components(lab2, connectivity)
    lab2 = lab2.astype(np.int64)
    keep = np.zeros(int(lab2.max(initial=0)) + 1, dtype=bool)
    keep[np.unique(lab2[m1])] = True
    keep[0] = False
    return compact_labels(np.where(keep[lab2], lab2, 0))
