"""Baseline (PET1) and interim (PET2) quantitative PET metrics."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from laspet.lesions import Lesion, LesionSet, suvpeak_of
from laspet.volgrid import Volume3D


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineMetrics:
    mtv_ml: float
    tlg_ml_suv: float
    suvmax: float
    dmax_mm: float | None
    dspleen_mm: float | None
    n_lesions: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InterimMetrics:
    suvmax: float
    delta_suvmax_pct: float | None
    qpet: float | None
    n_residual: int

    def to_dict(self) -> dict:
        return asdict(self)


def mtv(ls: LesionSet) -> float:
    return float(sum(les.volume_ml for les in ls))


def tlg(ls: LesionSet) -> float:
    total = 0.0
    for les in ls:
        if les.suvmean is None:
            raise MetricError(f"lesion {les.id} has no SUV statistics")
        total += les.volume_ml * les.suvmean
    return total


def suvmax(ls: LesionSet) -> float:
    """Hottest voxel over all lesions, 0.0 for an empty set."""
    return max((les.suvmax for les in ls), default=0.0)


def _voxel_points(ls: LesionSet) -> np.ndarray:
    vox = np.concatenate([les.voxels for les in ls])
    return np.asarray(ls.origin) + vox * np.asarray(ls.spacing)


def _max_pairwise(pts: np.ndarray) -> float:
    if len(pts) > 4:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # degenerate (coplanar) sets fall through to brute force
    best = 0.0
    for i in range(len(pts) - 1):
        best = max(best, float(np.sqrt(((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)).max()))
    return best


def dmax(ls: LesionSet, mode: str = "centroid") -> float | None:
    """Largest distance between lesions; None when fewer than two lesions exist.

    ``mode='centroid'`` uses lesion centroids, ``mode='voxel'`` any pair of lesion voxels.
    """
    if len(ls) < 2:
        return None
    if mode == "centroid":
        c = np.array([les.centroid_mm for les in ls])
        return max(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(c, 2))
    if mode == "voxel":
        return _max_pairwise(_voxel_points(ls))
    raise MetricError(f"unknown dmax mode {mode!r}")


def mask_centroid_mm(mask: Volume3D) -> np.ndarray:
    idx = np.argwhere(mask.values > 0)
    if len(idx) == 0:
        raise MetricError("mask is empty")
    return mask.index_to_mm(idx.mean(axis=0))


def dspleen(ls: LesionSet, spleen_mask: Volume3D) -> float | None:
    centre = mask_centroid_mm(spleen_mask)
    if len(ls) == 0:
        return None
    return max(float(np.linalg.norm(np.asarray(les.centroid_mm) - centre)) for les in ls)


def delta_suvmax(suvmax1: float, suvmax2: float) -> float:
    """Percentage reduction from baseline to interim SUVmax (positive means the uptake fell)."""
    if not suvmax1 > 0:
        raise MetricError("baseline SUVmax must be positive")
    return 100.0 * (suvmax1 - suvmax2) / suvmax1


def suvpeak(lesion: Lesion, pet: Volume3D, peak_volume_ml: float = 1.0) -> float:
    return suvpeak_of(lesion.voxels, pet.values, pet.spacing, peak_volume_ml)


def liver_mean(liver_mask: Volume3D, pet: Volume3D) -> float:
    m = liver_mask.values > 0
    if not m.any():
        raise MetricError("liver mask is empty")
    return float(pet.values[m].astype(np.float64).mean())


def qpet(residual: LesionSet, liver_mask: Volume3D, pet2: Volume3D, peak_volume_ml: float = 1.0) -> float | None:
    """SUVpeak of the hottest residual lesion over mean liver uptake; None when nothing remains."""
    ref = liver_mean(liver_mask, pet2)
    if len(residual) == 0:
        return None
    peaks = [suvpeak(les, pet2, peak_volume_ml) for les in residual]
    return max(peaks) / ref


def baseline_metrics(ls: LesionSet, spleen_mask: Volume3D, dmax_mode: str = "centroid") -> BaselineMetrics:
    return BaselineMetrics(
        mtv_ml=mtv(ls),
        tlg_ml_suv=tlg(ls) if len(ls) else 0.0,
        suvmax=suvmax(ls),
        dmax_mm=dmax(ls, dmax_mode),
        dspleen_mm=dspleen(ls, spleen_mask),
        n_lesions=len(ls),
    )


def interim_metrics(residual: LesionSet, liver_mask: Volume3D, pet2: Volume3D,
                    baseline_suvmax: float | None) -> InterimMetrics:
    """PET2 metrics over the residual set; callers drop equivocal lesions beforehand."""
    s2 = suvmax(residual)
    delta = delta_suvmax(baseline_suvmax, s2) if baseline_suvmax else None
    return InterimMetrics(
        suvmax=s2,
        delta_suvmax_pct=delta,
        qpet=qpet(residual, liver_mask, pet2),
        n_residual=len(residual),
    )
