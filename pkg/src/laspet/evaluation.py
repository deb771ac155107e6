"""Lesion detection scoring, Deauville response classification, agreement statistics and bootstrap."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from laspet.lesions import LesionSet, check_same_grid, dice, fnv, fpv
from laspet.quant import BaselineMetrics, InterimMetrics, baseline_metrics, interim_metrics
from laspet.volgrid import Volume3D

SCHEMA_VERSION = 1
SIGNIFICANCE_FRACTION = 0.95
SUVMAX_RTOL = 1e-6


class EvaluationError(ValueError):
    pass


class DetectionCriterion(str, enum.Enum):
    OVERLAP = "overlap"
    SUVMAX = "suvmax"
    DICE50 = "dice50"


@dataclass(frozen=True)
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return dict(tp=self.tp, fp=self.fp, fn=self.fn, precision=self.precision, recall=self.recall, f1=self.f1)


def _suvmax_matches(a: float | None, b: float | None) -> bool:
    if a is None or b is None:
        raise EvaluationError("SUVmax matching needs lesion SUV statistics")
    return abs(a - b) <= SUVMAX_RTOL * max(abs(a), abs(b))


def score_detection(pred: LesionSet, gt: LesionSet, criterion: DetectionCriterion | str = "overlap",
                    include_equivocal: bool = False) -> DetectionCounts:
    """Count TP/FP/FN between predicted and reference lesions.

    TP/FP are counted per predicted lesion, FN per reference lesion. With
    ``include_equivocal=False`` a prediction touching only equivocal
    reference lesions is left out of every count, and equivocal reference
    lesions never become FNs.
    """
    criterion = DetectionCriterion(criterion)
    check_same_grid(pred, gt)
    gt_labels = gt.label_array()
    scored = {les.id for les in gt if include_equivocal or not les.equivocal}
    gt_by_id = gt.by_id()

    candidates = []  # (pred lesion, overlapped scored gt ids)
    for p in pred:
        hit = np.unique(gt_labels[tuple(p.voxels.T)])
        hit = [int(h) for h in hit if h > 0]
        scored_hit = [h for h in hit if h in scored]
        if not scored_hit and hit:
            continue  # touches only equivocal lesions
        candidates.append((p, scored_hit))

    matched_gt: set[int] = set()
    tp = fp = 0
    if criterion == DetectionCriterion.OVERLAP:
        for p, hit in candidates:
            if hit:
                tp += 1
                matched_gt.update(hit)
            else:
                fp += 1
    elif criterion == DetectionCriterion.SUVMAX:
        for p, hit in candidates:
            ok = [h for h in hit if _suvmax_matches(p.suvmax, gt_by_id[h].suvmax)]
            if ok:
                tp += 1
                matched_gt.update(ok)
            else:
                fp += 1
    else:
        pairs = []
        for p, hit in candidates:
            inter = np.bincount(gt_labels[tuple(p.voxels.T)])
            for h in hit:
                d = 2.0 * inter[h] / (p.n_voxels + gt_by_id[h].n_voxels)
                if d > 0.5:
                    pairs.append((-d, p.id, h))
        pairs.sort()
        matched_pred: set[int] = set()
        for _, pid, gid in pairs:
            if pid not in matched_pred and gid not in matched_gt:
                matched_pred.add(pid)
                matched_gt.add(gid)
        tp = len(matched_pred)
        fp = len(candidates) - tp
    fn = len(scored - matched_gt)
    return DetectionCounts(tp, fp, fn)


@dataclass(frozen=True)
class QpetThresholds:
    """qPET boundaries between consecutive Deauville scores (lower bound of the higher score)."""

    t12: float = 0.95
    t23: float = 1.3
    t34: float = 2.0
    t45: float = 3.0

    def __post_init__(self):
        vals = (self.t12, self.t23, self.t34, self.t45)
        if vals[0] <= 0 or any(b <= a for a, b in zip(vals, vals[1:])):
            raise EvaluationError(f"qPET thresholds must be positive and strictly ascending, got {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.t12, self.t23, self.t34, self.t45)


def qpet_to_ds(q: float | None, th: QpetThresholds | None = None) -> int:
    """Deauville score for a qPET value; a boundary value belongs to the higher score."""
    th = th or QpetThresholds()
    if q is None:
        return 1
    for ds, bound in enumerate(th.as_tuple(), start=1):
        if q < bound:
            return ds
    return 5


def patient_ds(lesions: Iterable) -> int:
    return max((les.lds for les in lesions if les.lds is not None), default=1)


@dataclass(frozen=True)
class ResponseLabel:
    patient_ds: int
    binary_3plus: bool
    binary_4plus: bool

    @classmethod
    def from_ds(cls, ds: int) -> "ResponseLabel":
        if not 1 <= ds <= 5:
            raise EvaluationError(f"Deauville score out of range: {ds}")
        return cls(ds, ds >= 3, ds >= 4)


def cohen_kappa(a: Sequence, b: Sequence) -> float:
    if len(a) != len(b) or not len(a):
        raise EvaluationError("kappa needs two non-empty label lists of equal length")
    a, b = list(a), list(b)
    n = len(a)
    p_o = sum(x == y for x, y in zip(a, b)) / n
    if p_o == 1.0:
        return 1.0
    cats = set(a) | set(b)
    p_e = sum((a.count(c) / n) * (b.count(c) / n) for c in cats)
    return (p_o - p_e) / (1.0 - p_e)


def binary_f1(pred: Sequence[bool], gt: Sequence[bool]) -> float:
    """F1 of the positive class; 1.0 when neither list has a positive."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvaluationError("binary_f1 needs equal-length inputs")
    tp = int((pred & gt).sum())
    denom = 2 * tp + int((pred & ~gt).sum()) + int((~pred & gt).sum())
    return 1.0 if denom == 0 else 2.0 * tp / denom


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN when either input is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise EvaluationError("spearman needs two equal-length lists of at least two values")
    return float(_spearman_rows(x[None, :], y[None, :])[0])


# Row-wise (vectorized) statistics over bootstrap index matrices of shape (trials, n).

def _spearman_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    rx, ry = rankdata(x, axis=1), rankdata(y, axis=1)
    rx = rx - rx.mean(axis=1, keepdims=True)
    ry = ry - ry.mean(axis=1, keepdims=True)
    den = np.sqrt((rx * rx).sum(axis=1) * (ry * ry).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (rx * ry).sum(axis=1) / den
    out[den == 0] = np.nan
    return np.clip(out, -1.0, 1.0)


def _f1_rows(tp, fp, fn) -> np.ndarray:
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        return np.where(p + r > 0, 2 * p * r / (p + r), 0.0)


def _ratio_rows(num, den) -> np.ndarray:
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, 0.0)


def _binary_f1_rows(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    tp = (pred & gt).sum(axis=1)
    denom = 2 * tp + (pred & ~gt).sum(axis=1) + (~pred & gt).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom == 0, 1.0, 2.0 * tp / denom)


def _kappa_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cohen's kappa per row for integer-coded categories."""
    n = a.shape[1]
    p_o = (a == b).mean(axis=1)
    p_e = np.zeros(a.shape[0])
    for c in np.union1d(np.unique(a), np.unique(b)):
        p_e += ((a == c).sum(axis=1) / n) * ((b == c).sum(axis=1) / n)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = (p_o - p_e) / (1.0 - p_e)
    return np.where(p_o == 1.0, 1.0, k)


@dataclass(frozen=True)
class CI:
    mean: float
    lo: float
    hi: float

    def as_list(self) -> list:
        return [_clean(self.mean), _clean(self.lo), _clean(self.hi)]


def bootstrap_indices(n: int, n_trials: int = 10_000, seed: int = 0) -> np.ndarray:
    """Patient indices drawn with replacement, one row per trial (Philox counter-based RNG)."""
    if n < 1:
        raise EvaluationError("bootstrap needs at least one patient")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.integers(0, n, size=(n_trials, n))


def summarize_trials(trials: np.ndarray) -> CI:
    trials = np.asarray(trials, dtype=np.float64)
    finite = trials[np.isfinite(trials)]
    if finite.size == 0:
        return CI(math.nan, math.nan, math.nan)
    lo, hi = np.percentile(finite, [2.5, 97.5])
    return CI(float(finite.mean()), float(lo), float(hi))


def bootstrap_distribution(values_per_patient: Sequence, statistic: Callable, n_trials: int = 10_000,
                           seed: int = 0, vectorized: bool = False) -> np.ndarray:
    """Statistic evaluated on each patient-level resample.

    ``statistic`` receives the resampled per-patient values; with ``vectorized=True``
    it receives all resamples at once as an array of shape (trials, n, ...) and
    returns one value per trial.
    """
    values = np.asarray(values_per_patient)
    idx = bootstrap_indices(len(values), n_trials, seed)
    if vectorized:
        return np.asarray(statistic(values[idx]), dtype=np.float64)
    out = np.empty(n_trials)  # one slot per trial; fill order does not matter
    for t in range(n_trials):
        out[t] = statistic(values[idx[t]])
    return out


def bootstrap_ci(values_per_patient: Sequence, statistic: Callable = np.mean, n_trials: int = 10_000,
                 seed: int = 0, vectorized: bool = False) -> CI:
    """Bootstrap mean with the 2.5th and 97.5th percentiles of the resampled statistic."""
    return summarize_trials(bootstrap_distribution(values_per_patient, statistic, n_trials, seed, vectorized))


def superiority_test(metric_a_per_trial: Sequence[float], metric_b_per_trial: Sequence[float]) -> tuple[bool, float]:
    """Fraction of paired trials where ``a`` beats ``b``; significant when it reaches 0.95."""
    a = np.asarray(metric_a_per_trial, dtype=np.float64)
    b = np.asarray(metric_b_per_trial, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise EvaluationError("superiority test needs paired, non-empty trial arrays")
    fraction = float(np.mean(a > b))
    return fraction >= SIGNIFICANCE_FRACTION, fraction


# ---------------------------------------------------------------------------
# Cohort evaluation


@dataclass(frozen=True)
class EvalConfig:
    criteria: tuple[DetectionCriterion, ...] = tuple(DetectionCriterion)
    include_equivocal: bool = False
    n_trials: int = 10_000
    seed: int = 0
    thresholds: QpetThresholds = field(default_factory=QpetThresholds)
    dmax_mode: str = "centroid"


@dataclass
class PatientRecord:
    """Per-patient predictions and reference values needed for cohort statistics."""

    patient_id: str
    attributes: dict
    dice: float
    fpv_ml: float
    fnv_ml: float
    baseline_pred: BaselineMetrics
    baseline_ref: BaselineMetrics
    detection: dict  # variant -> criterion -> DetectionCounts
    interim_pred: dict  # variant -> InterimMetrics
    interim_ref: InterimMetrics
    ds_pred: dict  # variant -> int
    ds_ref: int

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "attributes": self.attributes,
            "pet1": {
                "dice": self.dice,
                "fpv_ml": self.fpv_ml,
                "fnv_ml": self.fnv_ml,
                "pred": self.baseline_pred.to_dict(),
                "ref": self.baseline_ref.to_dict(),
            },
            "pet2": {
                "ref": self.interim_ref.to_dict(),
                "ds_ref": self.ds_ref,
                "variants": {
                    v: {
                        "detection": {c.value: counts.to_dict() for c, counts in self.detection[v].items()},
                        "pred": self.interim_pred[v].to_dict(),
                        "ds_pred": self.ds_pred[v],
                    }
                    for v in self.detection
                },
            },
        }


def drop_equivocal_only(pred: LesionSet, gt: LesionSet) -> LesionSet:
    """Remove predicted lesions whose only reference overlap is with equivocal lesions."""
    gt_labels = gt.label_array()
    eq = {les.id for les in gt if les.equivocal}
    if not eq:
        return pred

    def keep(p):
        hit = {int(h) for h in np.unique(gt_labels[tuple(p.voxels.T)]) if h > 0}
        return not hit or not hit <= eq

    return pred.subset(keep)


def build_record(
    patient_id: str,
    pred1: LesionSet,
    gt1: LesionSet,
    pred2_variants: Mapping[str, LesionSet],
    gt2: LesionSet,
    pet2: Volume3D,
    liver_mask2: Volume3D,
    spleen_mask1: Volume3D,
    cfg: EvalConfig,
    attributes: dict | None = None,
) -> PatientRecord:
    """Score one patient. ``pred2_variants`` maps a variant name (e.g. ``raw``, ``mpdr``) to PET2 lesions."""
    check_same_grid(pred1, gt1)
    spacing1 = gt1.spacing
    m_pred1, m_gt1 = pred1.mask(), gt1.mask()
    base_pred = baseline_metrics(pred1, spleen_mask1, cfg.dmax_mode)
    base_ref = baseline_metrics(gt1, spleen_mask1, cfg.dmax_mode)

    ref_residual = gt2 if cfg.include_equivocal else gt2.non_equivocal()
    interim_ref = interim_metrics(ref_residual, liver_mask2, pet2, base_ref.suvmax or None)
    detection, interim_pred, ds_pred = {}, {}, {}
    for variant, pred2 in pred2_variants.items():
        detection[variant] = {
            c: score_detection(pred2, gt2, c, cfg.include_equivocal) for c in cfg.criteria
        }
        residual = pred2 if cfg.include_equivocal else drop_equivocal_only(pred2, gt2)
        interim_pred[variant] = interim_metrics(residual, liver_mask2, pet2, base_pred.suvmax or None)
        ds_pred[variant] = qpet_to_ds(interim_pred[variant].qpet, cfg.thresholds)
    return PatientRecord(
        patient_id=patient_id,
        attributes=dict(attributes or {}),
        dice=dice(m_pred1, m_gt1),
        fpv_ml=fpv(m_pred1, m_gt1, spacing1),
        fnv_ml=fnv(m_pred1, m_gt1, spacing1),
        baseline_pred=base_pred,
        baseline_ref=base_ref,
        detection=detection,
        interim_pred=interim_pred,
        interim_ref=interim_ref,
        ds_pred=ds_pred,
        ds_ref=patient_ds(ref_residual),
    )


BASELINE_CORRELATIONS = ("mtv_ml", "tlg_ml_suv", "suvmax", "dmax_mm", "dspleen_mm", "n_lesions")
INTERIM_CORRELATIONS = ("suvmax", "delta_suvmax_pct", "qpet", "n_residual")


def _metric_value(m, name) -> float:
    # absent metrics (no lesions, fewer than two lesions) enter correlations as 0
    v = getattr(m, name)
    return 0.0 if v is None else float(v)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _stat_entry(value: float, trials: np.ndarray) -> dict:
    return {"value": _clean(float(value)), "ci": summarize_trials(trials).as_list()}


class _Trials:
    """Shared patient resamples so every statistic and every variant uses the same trials."""

    def __init__(self, n: int, cfg: EvalConfig):
        self.idx = bootstrap_indices(n, cfg.n_trials, cfg.seed)

    def take(self, arr) -> np.ndarray:
        return np.asarray(arr)[self.idx]


def evaluate_cohort(records: Sequence[PatientRecord], cfg: EvalConfig) -> dict:
    """Cohort aggregates with bootstrap CIs; returns a JSON-ready report dictionary."""
    if not records:
        raise EvaluationError("cannot evaluate an empty cohort")
    n = len(records)
    tr = _Trials(n, cfg)
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "criteria": [c.value for c in cfg.criteria],
            "include_equivocal": cfg.include_equivocal,
            "n_trials": cfg.n_trials,
            "seed": cfg.seed,
            "qpet_thresholds": list(cfg.thresholds.as_tuple()),
            "dmax_mode": cfg.dmax_mode,
        },
        "n_patients": n,
        "patients": [r.to_dict() for r in records],
    }

    pet1: dict = {}
    for name, vals in (("dice", [r.dice for r in records]), ("fpv_ml", [r.fpv_ml for r in records]),
                       ("fnv_ml", [r.fnv_ml for r in records])):
        arr = np.asarray(vals, dtype=np.float64)
        pet1[name] = _stat_entry(arr.mean(), tr.take(arr).mean(axis=1))
    pet1["correlations"] = {}
    for name in BASELINE_CORRELATIONS:
        x = np.array([_metric_value(r.baseline_pred, name) for r in records])
        y = np.array([_metric_value(r.baseline_ref, name) for r in records])
        rho = spearman(x, y) if n > 1 else math.nan
        pet1["correlations"][name] = _stat_entry(rho, _spearman_rows(tr.take(x), tr.take(y)))
    report["pet1"] = pet1

    pet2: dict = {}
    variants = list(records[0].detection)
    ds_ref = np.array([r.ds_ref for r in records])
    for variant in variants:
        block: dict = {"detection": {}, "correlations": {}, "ds_agreement": {}}
        for crit in cfg.criteria:
            tp = np.array([r.detection[variant][crit].tp for r in records])
            fp = np.array([r.detection[variant][crit].fp for r in records])
            fn = np.array([r.detection[variant][crit].fn for r in records])
            total = DetectionCounts(int(tp.sum()), int(fp.sum()), int(fn.sum()))
            ttp, tfp, tfn = tr.take(tp).sum(axis=1), tr.take(fp).sum(axis=1), tr.take(fn).sum(axis=1)
            block["detection"][crit.value] = {
                "tp": total.tp,
                "fp": total.fp,
                "fn": total.fn,
                "precision": _stat_entry(total.precision, _ratio_rows(ttp, ttp + tfp)),
                "recall": _stat_entry(total.recall, _ratio_rows(ttp, ttp + tfn)),
                "f1": _stat_entry(total.f1, _f1_rows(ttp, tfp, tfn)),
            }
        for name in INTERIM_CORRELATIONS:
            x = np.array([_metric_value(r.interim_pred[variant], name) for r in records])
            y = np.array([_metric_value(r.interim_ref, name) for r in records])
            rho = spearman(x, y) if n > 1 else math.nan
            block["correlations"][name] = _stat_entry(rho, _spearman_rows(tr.take(x), tr.take(y)))
        ds_pred = np.array([r.ds_pred[variant] for r in records])
        for label, cut in (("ds3plus", 3), ("ds4plus", 4)):
            p, g = ds_pred >= cut, ds_ref >= cut
            tp_, fp_, fn_ = int((p & g).sum()), int((p & ~g).sum()), int((~p & g).sum())
            tp_t = (tr.take(p) & tr.take(g)).sum(axis=1)
            fp_t = (tr.take(p) & ~tr.take(g)).sum(axis=1)
            fn_t = (~tr.take(p) & tr.take(g)).sum(axis=1)
            block["ds_agreement"][label] = {
                "f1": _stat_entry(binary_f1(p, g), _binary_f1_rows(tr.take(p), tr.take(g))),
                "precision": _stat_entry(tp_ / (tp_ + fp_) if tp_ + fp_ else 0.0, _ratio_rows(tp_t, tp_t + fp_t)),
                "recall": _stat_entry(tp_ / (tp_ + fn_) if tp_ + fn_ else 0.0, _ratio_rows(tp_t, tp_t + fn_t)),
                "kappa": _stat_entry(cohen_kappa(list(p), list(g)), _kappa_rows(tr.take(p), tr.take(g))),
            }
        block["ds_agreement"]["ds5class"] = {
            "kappa": _stat_entry(cohen_kappa(list(ds_pred), list(ds_ref)), _kappa_rows(tr.take(ds_pred), tr.take(ds_ref)))
        }
        pet2[variant] = block
    report["pet2"] = pet2
    return report


def f1_trials(records: Sequence[PatientRecord], variant: str, criterion: DetectionCriterion | str,
              cfg: EvalConfig) -> np.ndarray:
    """Per-trial pooled detection F1, for paired superiority tests between methods."""
    crit = DetectionCriterion(criterion)
    tr = _Trials(len(records), cfg)
    cols = [np.array([getattr(r.detection[variant][crit], k) for r in records]) for k in ("tp", "fp", "fn")]
    return _f1_rows(*(tr.take(c).sum(axis=1) for c in cols))


GROUP_KEYS = ("age", "sex", "weight", "dose", "scanner")


def group_label(attributes: Mapping, key: str) -> str:
    """Subgroup label for one patient; numeric keys use the cut-points age 15 y, weight 60 kg, dose 5.5 MBq/kg."""
    if key not in GROUP_KEYS:
        raise EvaluationError(f"unknown grouping key {key!r}")
    value = attributes.get(key)
    if value is None:
        return "unknown"
    if key == "age":
        return "age<=15" if value <= 15 else "age>15"
    if key == "weight":
        return "weight<=60kg" if value <= 60 else "weight>60kg"
    if key == "dose":
        return "dose<=5.5MBq/kg" if value <= 5.5 else "dose>5.5MBq/kg"
    return str(value)


def group_by_eval(records: Sequence[PatientRecord], key: str, cfg: EvalConfig) -> dict[str, dict]:
    """Recompute the cohort report separately for each subgroup of ``key``."""
    groups: dict[str, list[PatientRecord]] = {}
    for r in records:
        groups.setdefault(group_label(r.attributes, key), []).append(r)
    return {g: evaluate_cohort(rs, cfg) for g, rs in sorted(groups.items())}


def check_report(report: Mapping) -> list[str]:
    """Return violated report invariants (empty when the report is consistent)."""
    problems = []

    def walk(node, path):
        if isinstance(node, dict):
            if "ci" in node and "value" in node:
                lo, hi = node["ci"][1], node["ci"][2]
                if lo is not None and hi is not None and lo > hi + 1e-12:
                    problems.append(f"{path}: CI lower bound exceeds upper bound")
            for k, v in node.items():
                if k in ("tp", "fp", "fn") and isinstance(v, int) and v < 0:
                    problems.append(f"{path}.{k}: negative count")
                if k in ("f1", "precision", "recall", "dice") and isinstance(v, dict):
                    val = v.get("value")
                    if val is not None and not 0.0 <= val <= 1.0:
                        problems.append(f"{path}.{k}: {val} outside [0, 1]")
                if k == "kappa" and isinstance(v, dict):
                    val = v.get("value")
                    if val is not None and val > 1.0 + 1e-12:
                        problems.append(f"{path}.{k}: kappa above 1")
                walk(v, f"{path}.{k}")
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, f"{path}[{i}]")

    walk(report, "report")
    return problems
