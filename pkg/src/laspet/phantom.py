"""Deterministic synthetic baseline/interim PET/CT studies with known lesion ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from laspet.evaluation import QpetThresholds, qpet_to_ds
from laspet.lesions import LesionSet, extract_lesions
from laspet.longitudinal import RigidTransform, apply_transform, euler_matrix
from laspet.volgrid import Kind, Volume3D, read_mvol, write_mvol

SOFT_TISSUE_HU = 40.0
AIR_HU = -1000.0
LUNG_SUV = 0.3
ORGAN_LABELS = {"liver": 1, "spleen": 2, "mediastinum": 3}


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    n_baseline_lesions: int = 4
    residual_fraction: float = 0.5
    new_lesion_count: int = 1
    lesion_suv_range: tuple[float, float] = (4.0, 12.0)
    lesion_radius_mm: tuple[float, float] = (6.0, 12.0)
    residual_shrink: tuple[float, float] = (0.6, 0.9)
    min_lesion_ml: float = 0.5
    lesion_gap_voxels: int = 2
    superellipsoid_exponent: float = 2.5
    background_suv: float = 1.0
    liver_suv: float = 2.0
    spleen_suv: float = 1.8
    mediastinum_suv: float = 1.5
    # organ centres and the liver radius as fractions of the grid
    liver_center: tuple[float, float, float] = (0.35, 0.5, 0.36)
    liver_radius_frac: float = 0.12
    spleen_center: tuple[float, float, float] = (0.68, 0.58, 0.38)
    mediastinum_center: tuple[float, float, float] = (0.5, 0.5, 0.66)
    noise_sigma: float = 0.1
    equivocal_fraction: float = 0.0
    qpet_thresholds: tuple[float, float, float, float] = QpetThresholds().as_tuple()
    max_retries: int = 500

    def __post_init__(self):
        if self.n_baseline_lesions < 0 or self.new_lesion_count < 0:
            raise PhantomError("lesion counts must be non-negative")
        if not 0.0 <= self.residual_fraction <= 1.0:
            raise PhantomError("residual_fraction must lie in [0, 1]")
        lo, hi = self.lesion_suv_range
        if not 0 < lo <= hi:
            raise PhantomError("lesion SUV range must be positive and ordered")
        if lo - self.background_suv <= 12.0 * self.noise_sigma:
            raise PhantomError("lesion contrast too low to stay above background + 3 sigma")
        if not 0 <= self.equivocal_fraction <= 1:
            raise PhantomError("equivocal_fraction must lie in [0, 1]")
        if min(self.dims) < 8 or min(self.spacing) <= 0:
            raise PhantomError("phantom grid too small")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PhantomError(f"unknown phantom config keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**conv)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class PatientStudy:
    patient_id: str
    pet1: Volume3D
    ct1: Volume3D
    pet2: Volume3D
    ct2: Volume3D
    gt1: LesionSet
    gt2: LesionSet
    organs1: Volume3D  # LABEL: 1 liver, 2 spleen, 3 mediastinum, in the PET1 frame
    organs2: Volume3D
    attributes: dict = field(default_factory=dict)
    parents: dict = field(default_factory=dict)  # gt2 lesion id -> gt1 parent id (None for new lesions)
    # continuous superellipsoid volumes, {"pet1": {id: ml}, "pet2": {id: ml}}; informational only
    analytic_volume_ml: dict = field(default_factory=dict)

    def organ_mask(self, organ: str, timepoint: int) -> Volume3D:
        org = self.organs1 if timepoint == 1 else self.organs2
        m = (org.values == ORGAN_LABELS[organ]).astype(np.float32)
        return org.with_values(m, Kind.LABEL)

    @property
    def liver_mask(self) -> Volume3D:
        return self.organ_mask("liver", 2)

    @property
    def spleen_mask(self) -> Volume3D:
        return self.organ_mask("spleen", 1)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grid = np.ogrid[tuple(slice(0, n) for n in shape)]
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _superellipsoid_rho(shape, center, radii, p) -> np.ndarray:
    """Normalized radius ``rho`` (``rho <= 1`` inside) of a superellipsoid."""
    grid = np.ogrid[tuple(slice(0, n) for n in shape)]
    s = sum(np.abs((g - c) / r) ** p for g, c, r in zip(grid, center, radii))
    return s ** (1.0 / p)


def _voxelized(shape, center, radii, spacing, p: float) -> "_Shape":
    """Superellipsoid whose voxel count equals its analytic volume, rounded.

    The ``n`` most interior voxel centres are kept and ``rho`` is rescaled so
    that exactly those satisfy ``rho <= 1``.
    """
    rho = _superellipsoid_rho(shape, center, radii, p)
    out = _Shape(np.asarray(center), np.asarray(radii), rho)
    n = int(round(out.analytic_volume_ml(spacing, p) * 1000.0 / float(np.prod(spacing))))
    n = min(max(n, 1), rho.size - 1)
    lo, hi = np.partition(rho.ravel(), (n - 1, n))[n - 1:n + 1]
    out.rho = rho / (0.5 * (lo + hi))
    return out


def _profile(rho: np.ndarray) -> np.ndarray:
    # smooth dome: 1 at the centre, 0.5 at the boundary
    return np.where(rho <= 1.0, 1.0 - 0.5 * np.minimum(rho, 1.0) ** 2, 0.0)


@dataclass
class _Shape:
    center: np.ndarray
    radii: np.ndarray
    rho: np.ndarray = field(repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.rho <= 1.0

    def analytic_volume_ml(self, spacing, p: float) -> float:
        g = math.gamma(1.0 + 1.0 / p) ** 3 / math.gamma(1.0 + 3.0 / p)
        return float(8.0 * np.prod(self.radii * np.asarray(spacing)) * g / 1000.0)


def _anatomy(cfg: PhantomConfig):
    dims = np.asarray(cfg.dims, dtype=np.float64)
    c = (dims - 1) / 2.0
    body = _ellipsoid(cfg.dims, c, dims * np.array([0.45, 0.36, 0.47]))
    lung_l = _ellipsoid(cfg.dims, dims * np.array([0.30, 0.48, 0.70]), dims * np.array([0.11, 0.13, 0.15]))
    lung_r = _ellipsoid(cfg.dims, dims * np.array([0.69, 0.50, 0.72]), dims * np.array([0.08, 0.10, 0.11]))
    lungs = (lung_l | lung_r) & body
    organs = np.zeros(cfg.dims, dtype=np.int64)
    liver = _ellipsoid(cfg.dims, dims * np.asarray(cfg.liver_center), dims * cfg.liver_radius_frac) & body & ~lungs
    spleen = _ellipsoid(cfg.dims, dims * np.asarray(cfg.spleen_center), np.maximum(dims * 0.06, 1.5)) & body & ~lungs
    med = _ellipsoid(cfg.dims, dims * np.asarray(cfg.mediastinum_center), np.maximum(dims * 0.045, 1.2)) & body & ~lungs
    organs[liver] = ORGAN_LABELS["liver"]
    organs[spleen & ~liver] = ORGAN_LABELS["spleen"]
    organs[med & ~liver & ~spleen] = ORGAN_LABELS["mediastinum"]
    for name, lab in ORGAN_LABELS.items():
        if not (organs == lab).any():
            raise PhantomError(f"{name} ROI is empty on a {cfg.dims} grid")
    return body, lungs, organs


def _background_pet(cfg, body, lungs, organs) -> np.ndarray:
    pet = np.zeros(cfg.dims)
    pet[body] = cfg.background_suv
    pet[lungs] = LUNG_SUV
    pet[organs == ORGAN_LABELS["liver"]] = cfg.liver_suv
    pet[organs == ORGAN_LABELS["spleen"]] = cfg.spleen_suv
    pet[organs == ORGAN_LABELS["mediastinum"]] = cfg.mediastinum_suv
    return pet


def _ct(cfg, body, lungs) -> np.ndarray:
    ct = np.full(cfg.dims, AIR_HU)
    ct[body & ~lungs] = SOFT_TISSUE_HU
    return ct


def _place(cfg, rng, allowed: np.ndarray, occupied: np.ndarray) -> _Shape:
    voxel_ml = float(np.prod(cfg.spacing)) / 1000.0
    struct = ndimage.generate_binary_structure(3, 3)
    candidates = np.argwhere(allowed)
    if len(candidates) == 0:
        raise PhantomError("no free tissue left for lesion placement")
    for _ in range(cfg.max_retries):
        radii = rng.uniform(*cfg.lesion_radius_mm, size=3) / np.asarray(cfg.spacing)
        center = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, size=3)
        shape = _voxelized(cfg.dims, center, radii, cfg.spacing, cfg.superellipsoid_exponent)
        mask = shape.mask
        if mask.sum() * voxel_ml < cfg.min_lesion_ml:
            continue
        grown = ndimage.binary_dilation(mask, struct, iterations=cfg.lesion_gap_voxels)
        if np.any(mask & ~allowed) or np.any(grown & occupied):
            continue
        return shape
    raise PhantomError(f"could not place a lesion without overlap after {cfg.max_retries} tries")


def _target_ratio(rng, lds: int, th: QpetThresholds) -> float:
    bounds = (0.0,) + th.as_tuple() + (th.t45 * 4.0 / 3.0,)
    lo, hi = bounds[lds - 1], bounds[lds]
    return float(rng.uniform(lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)))


def _peak_factor(shape: _Shape, spacing) -> float:
    """Mean profile value in the 1 ml sphere around the lesion's hottest voxel."""
    prof = _profile(shape.rho)
    vox = np.argwhere(shape.mask)
    vals = prof[shape.mask]
    hottest = vox[np.argmax(vals)]
    radius = (3.0 * 1000.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    d = (vox - hottest) * np.asarray(spacing)
    return float(vals[(d * d).sum(axis=1) <= radius**2 + 1e-9].mean())


def _add_noise(cfg, rng, pet, body) -> np.ndarray:
    if cfg.noise_sigma <= 0:
        return pet
    noise = np.clip(rng.normal(0.0, cfg.noise_sigma, size=pet.shape), -3 * cfg.noise_sigma, 3 * cfg.noise_sigma)
    return np.where(body, np.maximum(pet + noise, 0.0), pet)


def _attributes(rng) -> dict:
    age = int(rng.integers(2, 22))
    weight = float(round(rng.uniform(12.0, 30.0) + 2.6 * age, 1))
    return {
        "age": age,
        "sex": str(rng.choice(["F", "M"])),
        "weight": weight,
        "dose": float(round(rng.uniform(3.0, 8.0), 2)),
        "scanner": str(rng.choice(["GE", "Siemens"])),
    }


def generate(cfg: PhantomConfig, patient_id: str | None = None) -> PatientStudy:
    """Build a paired PET1/PET2 study; identical configs give bit-identical studies."""
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    th = QpetThresholds(*cfg.qpet_thresholds)
    body, lungs, organs = _anatomy(cfg)
    struct = ndimage.generate_binary_structure(3, 3)
    allowed = ndimage.binary_erosion(body & ~lungs & (organs == 0), struct, iterations=1)
    bg = cfg.background_suv

    # baseline lesions
    baseline: list[_Shape] = []
    occupied = np.zeros(cfg.dims, dtype=bool)
    for _ in range(cfg.n_baseline_lesions):
        s = _place(cfg, rng, allowed, occupied)
        baseline.append(s)
        occupied |= s.mask
    pet1 = _background_pet(cfg, body, lungs, organs)
    labels1 = np.zeros(cfg.dims, dtype=np.int64)
    for lid, s in enumerate(baseline, start=1):
        amp = rng.uniform(*cfg.lesion_suv_range) - bg
        pet1 = np.where(s.mask, bg + amp * _profile(s.rho), pet1)
        labels1[s.mask] = lid

    # interim: shrunken survivors plus new lesions away from every baseline lesion
    n_keep = int(round(cfg.residual_fraction * len(baseline)))
    survivors = sorted(rng.permutation(len(baseline))[:n_keep].tolist())
    residual: list[tuple[int, _Shape, int | None]] = []
    for idx in survivors:
        parent = baseline[idx]
        f = rng.uniform(*cfg.residual_shrink)
        radii = parent.radii * f
        shape = _voxelized(cfg.dims, parent.center, radii, cfg.spacing, cfg.superellipsoid_exponent)
        if shape.mask.sum() * np.prod(cfg.spacing) / 1000.0 < cfg.min_lesion_ml:
            shape = parent
        residual.append((idx + 1, shape, idx + 1))
    occupied2 = occupied.copy()
    for k in range(cfg.new_lesion_count):
        s = _place(cfg, rng, allowed, occupied2)
        occupied2 |= s.mask
        residual.append((len(baseline) + k + 1, s, None))

    pet2 = _background_pet(cfg, body, lungs, organs)
    labels2 = np.zeros(cfg.dims, dtype=np.int64)
    target_lds = {}
    for lid, s, _ in residual:
        lds = int(rng.integers(3, 6))
        ratio = _target_ratio(rng, lds, th)
        amp = (ratio * cfg.liver_suv - bg) / _peak_factor(s, cfg.spacing)
        pet2 = np.where(s.mask, bg + amp * _profile(s.rho), pet2)
        labels2[s.mask] = lid
        target_lds[lid] = lds
    equivocal = {lid: bool(rng.random() < cfg.equivocal_fraction) for lid, _, _ in residual}

    pet1 = _add_noise(cfg, rng, pet1, body)
    pet2 = _add_noise(cfg, rng, pet2, body)
    attributes = _attributes(rng)

    spacing = tuple(float(s) for s in cfg.spacing)
    origin = (0.0, 0.0, 0.0)
    v = lambda a, kind: Volume3D(a, spacing, origin, kind)  # noqa: E731
    pet1_v, pet2_v = v(pet1, Kind.SUV), v(pet2, Kind.SUV)
    ct_v = v(_ct(cfg, body, lungs), Kind.HU)
    organs_v = v(organs, Kind.LABEL)

    liver_vals = pet2_v.values[organs == ORGAN_LABELS["liver"]].astype(np.float64)
    liver_mean = float(liver_vals.mean())
    gt1 = extract_lesions(v(labels1, Kind.LABEL), pet1_v)
    provisional = extract_lesions(v(labels2, Kind.LABEL), pet2_v)
    lds = {}
    for les in provisional:
        measured = qpet_to_ds(les.suvpeak / liver_mean, th)
        if measured < 3:
            raise PhantomError(f"lesion {les.id} fell below the contouring threshold (qPET {les.suvpeak / liver_mean:.3f})")
        lds[les.id] = measured
    gt2 = extract_lesions(v(labels2, Kind.LABEL), pet2_v, equivocal=equivocal, lds=lds)
    return PatientStudy(
        patient_id=patient_id or f"phantom-{cfg.seed}",
        pet1=pet1_v,
        ct1=ct_v,
        pet2=pet2_v,
        ct2=ct_v,
        gt1=gt1,
        gt2=gt2,
        organs1=organs_v,
        organs2=organs_v,
        attributes=attributes,
        parents={lid: parent for lid, _, parent in residual},
        analytic_volume_ml={
            "pet1": {i: s.analytic_volume_ml(spacing, cfg.superellipsoid_exponent) for i, s in enumerate(baseline, 1)},
            "pet2": {i: s.analytic_volume_ml(spacing, cfg.superellipsoid_exponent) for i, s, _ in residual},
        },
    )


def misregistration_transform(dims_center_mm, shift_mm, rotation_deg) -> RigidTransform:
    """Sampling transform that moves content by ``shift_mm`` and rotates it about the grid centre."""
    angles = np.radians(np.broadcast_to(np.asarray(rotation_deg, dtype=np.float64), (3,)))
    if np.ndim(rotation_deg) == 0:
        angles = np.array([0.0, 0.0, np.radians(float(rotation_deg))])
    q = euler_matrix(angles)
    c = np.asarray(dims_center_mm, dtype=np.float64)
    s = np.asarray(shift_mm, dtype=np.float64)
    # content at p moves to q (p - c) + c + s, so sample at q^T (x - c - s) + c
    return RigidTransform(q.T, c - q.T @ (c + s))


def inject_misregistration(s: PatientStudy, shift_mm=(0.0, 0.0, 0.0), rotation_deg=0.0) -> PatientStudy:
    """Rigidly move the PET1 time point (PET, CT, reference lesions and organ ROIs)."""
    if np.allclose(shift_mm, 0) and np.allclose(rotation_deg, 0):
        return s
    t = misregistration_transform(s.pet1.center_mm(), shift_mm, rotation_deg)
    pet1 = apply_transform(s.pet1, t, "trilinear")
    ct1 = apply_transform(s.ct1, t, "trilinear")
    labels1 = apply_transform(s.gt1.to_volume(), t, "nearest")
    organs1 = apply_transform(s.organs1, t, "nearest")
    meta = s.gt1.by_id()
    gt1 = extract_lesions(
        labels1, pet1,
        equivocal={i: les.equivocal for i, les in meta.items()},
        lds={i: les.lds for i, les in meta.items() if les.lds is not None},
    )
    return replace(s, pet1=pet1, ct1=ct1, gt1=gt1, organs1=organs1)


def lesion_table(ls: LesionSet, analytic: dict | None = None) -> list[dict]:
    analytic = analytic or {}
    return [
        {
            "id": les.id,
            "centroid_mm": [round(c, 6) for c in les.centroid_mm],
            "volume_ml": les.volume_ml,
            "analytic_volume_ml": analytic.get(les.id),
            "n_voxels": les.n_voxels,
            "suvmax": les.suvmax,
            "lds": les.lds,
            "equivocal": les.equivocal,
        }
        for les in ls
    ]


STUDY_FILES = ("pet1", "ct1", "pet2", "ct2", "organs1", "organs2")


def write_study(study: PatientStudy, out_dir: str | Path, config: PhantomConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in STUDY_FILES:
        write_mvol(getattr(study, name), out / f"{name}.mvol")
    write_mvol(study.gt1.to_volume(), out / "gt1.mvol")
    write_mvol(study.gt2.to_volume(), out / "gt2.mvol")
    manifest = {
        "schema_version": 1,
        "patient_id": study.patient_id,
        "attributes": study.attributes,
        "config": config.to_dict() if config else None,
        "lesions": {
            "pet1": lesion_table(study.gt1, study.analytic_volume_ml.get("pet1")),
            "pet2": [dict(row, parent=study.parents.get(row["id"]))
                     for row in lesion_table(study.gt2, study.analytic_volume_ml.get("pet2"))],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def read_study(path: str | Path) -> PatientStudy:
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    vols = {name: read_mvol(d / f"{name}.mvol") for name in STUDY_FILES}

    def lesions(tp):
        rows = manifest["lesions"][f"pet{tp}"]
        return extract_lesions(
            read_mvol(d / f"gt{tp}.mvol"), vols[f"pet{tp}"],
            equivocal={r["id"]: r["equivocal"] for r in rows},
            lds={r["id"]: r["lds"] for r in rows if r["lds"] is not None},
        )

    return PatientStudy(
        patient_id=manifest["patient_id"],
        gt1=lesions(1),
        gt2=lesions(2),
        attributes=manifest.get("attributes", {}),
        parents={r["id"]: r.get("parent") for r in manifest["lesions"]["pet2"]},
        analytic_volume_ml={
            tp: {r["id"]: r.get("analytic_volume_ml") for r in manifest["lesions"][tp]} for tp in ("pet1", "pet2")
        },
        **vols,
    )
