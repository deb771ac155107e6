"""Lesion masks: rule-based segmentation, component labeling, and overlap metrics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy import ndimage

from laspet.volgrid import Kind, Volume3D, VolumeError

SUV_ABSOLUTE_CUTOFF = 2.5
SUV_RELATIVE_CUTOFF = 0.4
MIN_COMPONENT_ML = 0.2
PROB_THRESHOLD = 0.5


class LesionError(ValueError):
    pass


@dataclass(frozen=True)
class Lesion:
    id: int
    voxels: np.ndarray = field(repr=False)  # (N, 3) integer indices
    volume_ml: float
    centroid_mm: tuple[float, float, float]
    suvmax: float | None = None
    suvmean: float | None = None
    suvpeak: float | None = None
    equivocal: bool = False
    lds: int | None = None

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class LesionSet:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    lesions: tuple[Lesion, ...] = ()

    def __len__(self):
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0

    def label_array(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=np.int64)
        for les in self.lesions:
            out[tuple(les.voxels.T)] = les.id
        return out

    def mask(self) -> np.ndarray:
        return self.label_array() > 0

    def to_volume(self) -> Volume3D:
        return Volume3D(self.label_array(), self.spacing, self.origin, Kind.LABEL)

    def subset(self, keep) -> "LesionSet":
        return replace(self, lesions=tuple(les for les in self.lesions if keep(les)))

    def non_equivocal(self) -> "LesionSet":
        return self.subset(lambda les: not les.equivocal)

    def by_id(self) -> dict[int, Lesion]:
        return {les.id: les for les in self.lesions}


def _as_mask(m) -> np.ndarray:
    if isinstance(m, Volume3D):
        return m.values > 0
    return np.asarray(m).astype(bool)


def _as_labels(lab) -> np.ndarray:
    if isinstance(lab, Volume3D):
        return lab.values.astype(np.int64)
    return np.asarray(lab).astype(np.int64)


def threshold_union(pet: Volume3D, roi) -> np.ndarray:
    """Voxels in the ROI with SUV > 2.5 or SUV > 40% of the ROI's SUVmax."""
    if pet.kind != Kind.SUV:
        raise LesionError("threshold_union expects an SUV volume")
    roi = _as_mask(roi)
    if roi.shape != pet.dims:
        raise LesionError(f"roi shape {roi.shape} does not match PET dims {pet.dims}")
    if not roi.any():
        raise LesionError("roi is empty")
    suv = pet.values.astype(np.float64)
    peak = suv[roi].max()
    return roi & ((suv > SUV_ABSOLUTE_CUTOFF) | (suv > SUV_RELATIVE_CUTOFF * peak))


def threshold_union_labels(pet: Volume3D, rois) -> np.ndarray:
    """Apply :func:`threshold_union` separately inside each labeled ROI and take the union."""
    rois = _as_labels(rois)
    out = np.zeros(pet.dims, dtype=bool)
    for lab in np.unique(rois):
        if lab == 0:
            continue
        out |= threshold_union(pet, rois == lab)
    return out


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise LesionError(f"connectivity must be 6 or 26, got {connectivity}")


def _scan_order_relabel(labels: np.ndarray, n: int) -> np.ndarray:
    # order components by their first voxel in x-fastest (file) order
    if n == 0:
        return labels
    linear = np.arange(labels.size).reshape(labels.shape, order="F")
    first = ndimage.minimum(linear, labels, index=np.arange(1, n + 1))
    order = np.argsort(first, kind="stable")
    lut = np.zeros(n + 1, dtype=np.int64)
    lut[order + 1] = np.arange(1, n + 1)
    return lut[labels]


def connected_components(mask, connectivity: int = 26) -> np.ndarray:
    """Label 6- or 26-connected components as 1..K in scan order of their first voxel."""
    m = _as_mask(mask)
    labels, n = ndimage.label(m, structure=_structure(connectivity))
    return _scan_order_relabel(labels.astype(np.int64), n)


def component_sizes(labels: np.ndarray) -> np.ndarray:
    """Voxel counts per label, indexed by label (entry 0 is background)."""
    return np.bincount(labels.ravel())


def compact_labels(labels: np.ndarray) -> np.ndarray:
    present = np.unique(labels)
    present = present[present > 0]
    lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=np.int64)
    lut[present] = np.arange(1, len(present) + 1)
    return lut[labels]


def remove_small(labels, spacing, min_ml: float = MIN_COMPONENT_ML) -> np.ndarray:
    """Drop labeled components whose volume is below ``min_ml`` and compact the rest."""
    labels = _as_labels(labels)
    voxel_ml = float(np.prod(spacing)) / 1000.0
    sizes = component_sizes(labels)
    # 1e-12 guards the exact-threshold case against float noise
    small = sizes * voxel_ml < min_ml - 1e-12
    small[0] = False
    out = labels.copy()
    out[small[labels]] = 0
    return compact_labels(out)


def binarize(prob, threshold: float = PROB_THRESHOLD) -> np.ndarray:
    vals = prob.values if isinstance(prob, Volume3D) else np.asarray(prob)
    return vals > threshold


def postprocess(prob, spacing, threshold: float = PROB_THRESHOLD, min_ml: float = MIN_COMPONENT_ML,
                connectivity: int = 26) -> np.ndarray:
    """Threshold a probability map, label components and remove those below ``min_ml``."""
    return remove_small(connected_components(binarize(prob, threshold), connectivity), spacing, min_ml)


def suvpeak_of(voxels: np.ndarray, suv: np.ndarray, spacing, peak_volume_ml: float = 1.0) -> float:
    """Mean SUV over lesion voxels within a sphere of ``peak_volume_ml`` around the hottest voxel."""
    vals = suv[tuple(voxels.T)].astype(np.float64)
    hottest = voxels[int(np.argmax(vals))]
    radius = (3.0 * peak_volume_ml * 1000.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    d = (voxels - hottest) * np.asarray(spacing, dtype=np.float64)
    inside = np.einsum("ij,ij->i", d, d) <= radius**2 + 1e-9
    return float(vals[inside].mean())


def extract_lesions(
    labels,
    pet: Volume3D | None = None,
    *,
    spacing=None,
    origin=(0.0, 0.0, 0.0),
    equivocal: Mapping[int, bool] | None = None,
    lds: Mapping[int, int] | None = None,
    peak_volume_ml: float = 1.0,
) -> LesionSet:
    """One lesion per non-zero label value, with voxel statistics from ``pet`` when given."""
    if isinstance(labels, Volume3D):
        spacing, origin = labels.spacing, labels.origin
    elif pet is not None and spacing is None:
        spacing, origin = pet.spacing, pet.origin
    if spacing is None:
        raise LesionError("spacing is required when labels are a bare array")
    lab = _as_labels(labels)
    if pet is not None and pet.dims != lab.shape:
        raise LesionError(f"labels {lab.shape} and PET {pet.dims} differ in shape")
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    voxel_ml = float(np.prod(spacing)) / 1000.0
    suv = pet.values if pet is not None else None
    equivocal = equivocal or {}
    lds = lds or {}

    lesions = []
    ids = np.unique(lab)
    coords = np.argwhere(lab > 0)
    owners = lab[tuple(coords.T)]
    sort = np.argsort(owners, kind="stable")
    coords, owners = coords[sort], owners[sort]
    splits = np.searchsorted(owners, ids[ids > 0])
    groups = np.split(coords, splits[1:]) if len(splits) else []
    for lid, vox in zip(ids[ids > 0], groups):
        lid = int(lid)
        centroid = tuple(np.asarray(origin) + vox.mean(axis=0) * np.asarray(spacing))
        stats = {}
        if suv is not None:
            vals = suv[tuple(vox.T)].astype(np.float64)
            stats = dict(
                suvmax=float(vals.max()),
                suvmean=float(vals.mean()),
                suvpeak=suvpeak_of(vox, suv, spacing, peak_volume_ml),
            )
        lesions.append(
            Lesion(
                id=lid,
                voxels=vox,
                volume_ml=len(vox) * voxel_ml,
                centroid_mm=tuple(float(c) for c in centroid),
                equivocal=bool(equivocal.get(lid, False)),
                lds=lds.get(lid),
                **stats,
            )
        )
    return LesionSet(tuple(int(n) for n in lab.shape), spacing, origin, tuple(lesions))


def dice(a, b) -> float:
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise LesionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _unmatched_volume(src, other, spacing, connectivity: int) -> float:
    src, other = _as_mask(src), _as_mask(other)
    if src.shape != other.shape:
        raise LesionError(f"mask shapes differ: {src.shape} vs {other.shape}")
    labels = connected_components(src, connectivity)
    n = int(labels.max(initial=0))
    if n == 0:
        return 0.0
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    hit = np.bincount(labels[other].ravel(), minlength=n + 1) > 0
    missed = ~hit
    missed[0] = False
    return float(sizes[missed].sum()) * float(np.prod(spacing)) / 1000.0


def fpv(pred, gt, spacing, connectivity: int = 26) -> float:
    """Volume (ml) of predicted components that touch no ground-truth voxel."""
    return _unmatched_volume(pred, gt, spacing, connectivity)


def fnv(pred, gt, spacing, connectivity: int = 26) -> float:
    """Volume (ml) of ground-truth components that touch no predicted voxel."""
    return _unmatched_volume(gt, pred, spacing, connectivity)


def check_same_grid(a: LesionSet, b: LesionSet) -> None:
    if a.dims != b.dims or not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
        raise VolumeError("lesion sets are defined on different grids")
