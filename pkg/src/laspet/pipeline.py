"""End-to-end cohort runs: phantoms -> (training) -> segmentation -> MPDR -> metrics -> report."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from laspet import __version__
from laspet.evaluation import (
    BASELINE_CORRELATIONS,
    INTERIM_CORRELATIONS,
    DetectionCriterion,
    EvalConfig,
    PatientRecord,
    QpetThresholds,
    build_record,
    check_report,
    evaluate_cohort,
)
from laspet.lesions import LesionSet, extract_lesions, postprocess, threshold_union_labels, connected_components
from laspet.longitudinal import RegistrationConfig, RigidTransform, apply_transform, mpdr, register_rigid
from laspet.phantom import PatientStudy, PhantomConfig, generate, inject_misregistration
from laspet.volgrid import Kind, Volume3D

# stage-tagged exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CODES = {
    "config": 9,
    "phantom": 10,
    "register": 11,
    "segment": 12,
    "train": 13,
    "infer": 14,
    "metrics": 15,
    "eval": 16,
    "report": 17,
}
EXIT_INVARIANT = 20

# spawn keys for per-stage seed derivation from the root seed
STAGE_KEYS = {"phantom": 0, "misregistration": 1, "train": 2, "eval": 3, "train_data": 4}

SEGMENTERS = ("oracle", "threshold-union", "model")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "run",
    "workers": None,
    "cohort": {
        "n_patients": 5,
        "lesion_count_cycle": 3,  # patient i gets n_baseline_lesions + (i mod cycle) lesions
        "phantom": {},
        "misregistration": {"max_shift_mm": 0.0, "max_rotation_deg": 0.0},
    },
    "register": True,
    "segmenter": "oracle",
    "model": {},
    "train": {"n_studies": 1, "checkpoint": None},
    "optim": {"steps": 200, "lr": 3e-3},
    "infer": {"overlap": 0.625, "threshold": 0.5, "min_ml": 0.2},
    "eval": {"n_trials": 10000, "include_equivocal": False, "dmax_mode": "centroid", "criteria": None,
             "qpet_thresholds": None},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage, 1)


class InvariantError(StageError):
    def __init__(self, message: str):
        super().__init__("invariant", message)
        self.exit_code = EXIT_INVARIANT


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    """Seed for ``stage`` (and patient ``index``): first word of SeedSequence(root, spawn_key=(stage, index))."""
    ss = np.random.SeedSequence(int(root), spawn_key=(STAGE_KEYS[stage], int(index)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """Read a YAML/JSON config, merge it over the defaults, then apply flag overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise StageError("config", f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise StageError("config", f"{path}: top level must be a mapping")
        unknown = set(data) - set(DEFAULT_CONFIG)
        if unknown:
            raise StageError("config", f"unknown config keys: {sorted(unknown)}")
        cfg = deep_merge(cfg, data)
    cfg = deep_merge(cfg, overrides or {})
    if cfg["segmenter"] not in SEGMENTERS:
        raise StageError("config", f"segmenter must be one of {SEGMENTERS}, got {cfg['segmenter']!r}")
    if int(cfg["cohort"]["n_patients"]) < 1:
        raise StageError("config", "cohort.n_patients must be at least 1")
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the effective config; output location does not change the result so it is left out."""
    material = {k: v for k, v in cfg.items() if k not in ("out_dir", "workers")}
    return hashlib.sha256(json.dumps(material, sort_keys=True).encode()).hexdigest()[:16]


def worker_count(requested: int | None) -> int:
    cap = os.environ.get("LASPET_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def eval_config(cfg: dict) -> EvalConfig:
    e = cfg["eval"]
    kwargs = dict(
        include_equivocal=bool(e.get("include_equivocal", False)),
        n_trials=int(e.get("n_trials", 10000)),
        seed=derive_seed(cfg["seed"], "eval"),
        dmax_mode=e.get("dmax_mode", "centroid"),
    )
    if e.get("criteria"):
        kwargs["criteria"] = tuple(DetectionCriterion(c) for c in e["criteria"])
    if e.get("qpet_thresholds"):
        kwargs["thresholds"] = QpetThresholds(*e["qpet_thresholds"])
    return EvalConfig(**kwargs)


# ---------------------------------------------------------------------------
# per-patient stages


def phantom_config(cfg: dict, index: int) -> PhantomConfig:
    c = cfg["cohort"]
    pc = PhantomConfig.from_dict(dict(c.get("phantom") or {}))
    cycle = max(1, int(c.get("lesion_count_cycle", 1)))
    data = pc.to_dict()
    data["seed"] = derive_seed(cfg["seed"], "phantom", index)
    data["n_baseline_lesions"] = pc.n_baseline_lesions + index % cycle
    return PhantomConfig.from_dict(data)


def make_study(cfg: dict, index: int) -> PatientStudy:
    try:
        study = generate(phantom_config(cfg, index), patient_id=f"P{index:03d}")
        mis = cfg["cohort"].get("misregistration") or {}
        smax, rmax = float(mis.get("max_shift_mm", 0)), float(mis.get("max_rotation_deg", 0))
        if smax > 0 or rmax > 0:
            rng = np.random.Generator(np.random.Philox(derive_seed(cfg["seed"], "misregistration", index)))
            d = rng.normal(size=3)
            shift = d / np.linalg.norm(d) * rng.uniform(0, smax)
            rotation = rng.uniform(-rmax, rmax)
            study = inject_misregistration(study, shift, rotation)
        return study
    except Exception as e:  # noqa: BLE001 - any generator failure is a phantom-stage failure
        raise StageError("phantom", f"patient {index}: {e}") from e


def register_study(study: PatientStudy, enabled: bool) -> RigidTransform:
    """PET2-frame -> PET1-frame transform estimated on CT (anatomy is shared across time points)."""
    if not enabled:
        return RigidTransform.identity()
    try:
        return register_rigid(study.ct1, study.ct2, RegistrationConfig()).transform
    except Exception as e:  # noqa: BLE001
        raise StageError("register", f"{study.patient_id}: {e}") from e


def to_pet2_frame(v: Volume3D, t: RigidTransform, reference: Volume3D) -> Volume3D:
    mode = "nearest" if v.kind == Kind.LABEL else "trilinear"
    return apply_transform(v, t, mode, reference=reference)


def threshold_segment(pet: Volume3D, gt: LesionSet) -> np.ndarray:
    """Rule-based contours inside reader-style ROIs (reference lesions grown by one voxel)."""
    if len(gt) == 0:
        return np.zeros(pet.dims, dtype=np.int64)
    struct = ndimage.generate_binary_structure(3, 3)
    labels = gt.label_array()
    rois = ndimage.grey_dilation(labels, footprint=struct)
    rois = np.where(labels > 0, labels, rois)
    return connected_components(threshold_union_labels(pet, rois))


@dataclass
class Segmentation:
    labels1: np.ndarray  # PET1 frame
    labels2: np.ndarray  # PET2 frame


def segment_study(study: PatientStudy, method: str, t: RigidTransform, model=None, infer_cfg: dict | None = None
                  ) -> Segmentation:
    try:
        if method == "oracle":
            return Segmentation(study.gt1.label_array(), study.gt2.label_array())
        if method == "threshold-union":
            return Segmentation(threshold_segment(study.pet1, study.gt1), threshold_segment(study.pet2, study.gt2))
    except Exception as e:  # noqa: BLE001
        raise StageError("segment", f"{study.patient_id}: {e}") from e
    if method == "model":
        try:
            return model_segment(study, t, model, infer_cfg or {})
        except Exception as e:  # noqa: BLE001
            raise StageError("infer", f"{study.patient_id}: {e}") from e
    raise StageError("segment", f"unknown segmenter {method!r}")


def model_segment(study: PatientStudy, t: RigidTransform, model, infer_cfg: dict) -> Segmentation:
    from laspet.neural.infer import model_predictor, sliding_window_infer
    from laspet.neural.train import network_input

    overlap = float(infer_cfg.get("overlap", 0.625))
    thr = float(infer_cfg.get("threshold", 0.5))
    min_ml = float(infer_cfg.get("min_ml", 0.2))
    patch = model.cfg.patch_size
    # PET1 mask on its own grid: the PET1 branch ignores the PET2 input entirely
    x1 = network_input(study.pet1, study.ct1)
    prob1, _ = sliding_window_infer(x1, np.zeros_like(x1), model_predictor(model, pet1_only=True), patch, overlap)
    # PET2 mask from the pair co-registered on the PET2 grid
    x1r = network_input(to_pet2_frame(study.pet1, t, study.pet2), to_pet2_frame(study.ct1, t, study.pet2))
    x2 = network_input(study.pet2, study.ct2)
    _, prob2 = sliding_window_infer(x1r, x2, model_predictor(model), patch, overlap)
    return Segmentation(
        postprocess(prob1, study.pet1.spacing, thr, min_ml),
        postprocess(prob2, study.pet2.spacing, thr, min_ml),
    )


def process_patient(study: PatientStudy, cfg: dict, ecfg: EvalConfig, model=None) -> PatientRecord:
    t = register_study(study, bool(cfg.get("register", True)))
    seg = segment_study(study, cfg["segmenter"], t, model, cfg.get("infer"))
    try:
        pred1 = extract_lesions(study.pet1.with_values(seg.labels1, Kind.LABEL), study.pet1)
        lab1_in_2 = to_pet2_frame(pred1.to_volume(), t, study.pet2)
        variants = {
            "raw": extract_lesions(study.pet2.with_values(seg.labels2, Kind.LABEL), study.pet2),
            "mpdr": extract_lesions(study.pet2.with_values(mpdr(lab1_in_2.values, seg.labels2), Kind.LABEL),
                                    study.pet2),
        }
        return build_record(
            study.patient_id, pred1, study.gt1, variants, study.gt2, study.pet2,
            study.liver_mask, study.organ_mask("spleen", 1), ecfg, study.attributes,
        )
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001
        raise StageError("metrics", f"{study.patient_id}: {e}") from e


def train_model(cfg: dict):
    from laspet.neural.checkpoint import load_checkpoint
    from laspet.neural.model import LasNetConfig
    from laspet.neural.train import OptConfig, train_toy

    tc = cfg.get("train") or {}
    try:
        if tc.get("checkpoint"):
            return load_checkpoint(tc["checkpoint"]), []
        studies = []
        for i in range(int(tc.get("n_studies", 1))):
            pc = phantom_config(cfg, i).to_dict()
            pc["seed"] = derive_seed(cfg["seed"], "train_data", i)
            studies.append(generate(PhantomConfig.from_dict(pc), patient_id=f"T{i:03d}"))
        opt = OptConfig.from_dict(dict(cfg.get("optim") or {}, seed=derive_seed(cfg["seed"], "train")))
        result = train_toy(studies, LasNetConfig.from_dict(cfg.get("model") or {}), opt)
        return result.model, result.losses
    except Exception as e:  # noqa: BLE001
        raise StageError("train", str(e)) from e


# ---------------------------------------------------------------------------
# report writing


def _ci_text(entry: dict | None) -> str:
    if not entry or entry.get("ci") is None:
        return "n/a"
    mean, lo, hi = entry["ci"]
    if mean is None:
        return "n/a"
    return f"{mean:.3f} [{lo:.3f}, {hi:.3f}]"


_ORDER = (*BASELINE_CORRELATIONS, *INTERIM_CORRELATIONS, *(c.value for c in DetectionCriterion),
          "raw", "mpdr", "ds3plus", "ds4plus", "ds5class")


def _items(d: dict):
    """Entries in canonical order, so a report re-read from sorted JSON renders identically."""
    rank = {k: i for i, k in enumerate(dict.fromkeys(_ORDER))}
    return sorted(d.items(), key=lambda kv: (rank.get(kv[0], len(rank)), kv[0]))


def report_tables(report: dict) -> dict[str, list[list]]:
    """Plot-ready rows with a stable column order (header row first)."""
    if not report.get("n_patients"):
        raise StageError("report", "report has no patients")
    stat = lambda e: [e.get("value"), *e["ci"]]  # noqa: E731
    tables: dict[str, list[list]] = {}
    rows = [["metric", "value", "mean", "lo", "hi"]]
    for name in ("dice", "fpv_ml", "fnv_ml"):
        rows.append([name, *stat(report["pet1"][name])])
    tables["pet1_segmentation"] = rows
    rows = [["timepoint", "variant", "metric", "rho", "mean", "lo", "hi"]]
    for name, e in _items(report["pet1"]["correlations"]):
        rows.append(["pet1", "", name, *stat(e)])
    for variant, block in _items(report["pet2"]):
        for name, e in _items(block["correlations"]):
            rows.append(["pet2", variant, name, *stat(e)])
    tables["correlations"] = rows
    rows = [["variant", "criterion", "tp", "fp", "fn", "quantity", "value", "mean", "lo", "hi"]]
    for variant, block in _items(report["pet2"]):
        for crit, d in _items(block["detection"]):
            for q in ("precision", "recall", "f1"):
                rows.append([variant, crit, d["tp"], d["fp"], d["fn"], q, *stat(d[q])])
    tables["detection"] = rows
    rows = [["variant", "task", "quantity", "value", "mean", "lo", "hi"]]
    for variant, block in _items(report["pet2"]):
        for task, d in _items(block["ds_agreement"]):
            for q in ("precision", "recall", "f1", "kappa"):
                if q in d:
                    rows.append([variant, task, q, *stat(d[q])])
    tables["ds_agreement"] = rows
    return tables


def render_report(report: dict) -> str:
    """Human-readable summary; statistics are shown as ``mean [lo, hi]``."""
    report_tables(report)  # validates the report shape
    out = io.StringIO()
    out.write(f"patients: {report['n_patients']}  bootstrap trials: {report['config']['n_trials']}\n\n")
    out.write("PET1 segmentation\n")
    for name in ("dice", "fpv_ml", "fnv_ml"):
        out.write(f"  {name:<10} {_ci_text(report['pet1'][name])}\n")
    out.write("\nPET1 metric correlations (Spearman)\n")
    for name, e in _items(report["pet1"]["correlations"]):
        out.write(f"  {name:<18} {_ci_text(e)}\n")
    for variant, block in _items(report["pet2"]):
        out.write(f"\nPET2 detection [{variant}]\n")
        out.write(f"  {'criterion':<10} {'tp':>4} {'fp':>4} {'fn':>4}  {'precision':<24} {'recall':<24} f1\n")
        for crit, d in _items(block["detection"]):
            out.write(f"  {crit:<10} {d['tp']:>4} {d['fp']:>4} {d['fn']:>4}  {_ci_text(d['precision']):<24} "
                      f"{_ci_text(d['recall']):<24} {_ci_text(d['f1'])}\n")
        out.write(f"\nPET2 metric correlations (Spearman) [{variant}]\n")
        for name, e in _items(block["correlations"]):
            out.write(f"  {name:<18} {_ci_text(e)}\n")
        out.write(f"\nDeauville agreement [{variant}]\n")
        for task, d in _items(block["ds_agreement"]):
            parts = [f"{q} {_ci_text(d[q])}" for q in ("f1", "kappa") if q in d]
            out.write(f"  {task:<9} " + "  ".join(parts) + "\n")
    return out.getvalue()


def write_tables(report: dict, out_dir: Path, manifest_ref: str) -> list[Path]:
    paths = []
    for name, rows in report_tables(report).items():
        buf = io.StringIO()
        buf.write(f"# manifest: {manifest_ref}\n")
        w = csv.writer(buf, lineterminator="\n")
        for row in rows:
            w.writerow(["" if v is None else (f"{v:.10g}" if isinstance(v, float) else v) for v in row])
        p = out_dir / f"{name}.csv"
        p.write_text(buf.getvalue())
        paths.append(p)
    return paths


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: list, outputs: list, started: float,
                   base: dict | None = None) -> Path:
    """Write ``manifest.json``; run fields are added on top of ``base`` (e.g. a study's lesion tables)."""
    manifest = dict(base or {})
    manifest.update({
        "schema_version": 1,
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    })
    path = out_dir / "manifest.json"
    dump_json(manifest, path)
    return path


# ---------------------------------------------------------------------------


def run_cohort(cfg: dict) -> tuple[dict, list]:
    """Run every stage and return the report plus the training loss trace (empty without training)."""
    ecfg = eval_config(cfg)
    n = int(cfg["cohort"]["n_patients"])
    model, losses = (train_model(cfg) if cfg["segmenter"] == "model" else (None, []))
    workers = worker_count(cfg.get("workers"))

    def one(i):
        return process_patient(make_study(cfg, i), cfg, ecfg, model)

    if workers == 1:
        records = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(n)))  # map keeps patient order
    try:
        report = evaluate_cohort(records, ecfg)
    except Exception as e:  # noqa: BLE001
        raise StageError("eval", str(e)) from e
    report["manifest"] = {"path": "manifest.json", "config_hash": config_hash(cfg)}
    report["segmenter"] = cfg["segmenter"]
    return report, losses


def cmd_pipeline(config_path: str | None, overrides: dict | None = None, command: str = "pipeline") -> int:
    started = time.perf_counter()
    cfg = load_config(config_path, overrides)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report, losses = run_cohort(cfg)
    ref = f"manifest.json config_hash={config_hash(cfg)}"
    outputs = [out_dir / "report.json"]
    dump_json(report, outputs[0])
    outputs += write_tables(report, out_dir, ref)
    if losses:
        p = out_dir / "train_losses.csv"
        p.write_text(f"# manifest: {ref}\nstep,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses)))
        outputs.append(p)
    (out_dir / "report.txt").write_text(render_report(report))
    outputs.append(out_dir / "report.txt")
    write_manifest(out_dir, command, cfg, [config_path] if config_path else [], outputs, started)
    problems = check_report(report)
    if problems:
        raise InvariantError("; ".join(problems[:5]))
    return EXIT_OK


def cmd_report(report_path: str | Path, csv_dir: str | Path | None = None) -> str:
    try:
        report = json.loads(Path(report_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise StageError("report", f"cannot read {report_path}: {e}") from e
    text = render_report(report)
    if csv_dir is not None:
        d = Path(csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        m = report.get("manifest", {})
        write_tables(report, d, f"{m.get('path', 'unknown')} config_hash={m.get('config_hash', 'unknown')}")
    return text
