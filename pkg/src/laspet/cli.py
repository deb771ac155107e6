"""``laspet`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from laspet import pipeline as pl
from laspet.pipeline import StageError


def _json_out(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_yaml(path):
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise StageError("config", f"cannot read {path}: {e}") from e
    if not isinstance(data, dict):
        raise StageError("config", f"{path}: top level must be a mapping")
    return data


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected one or three comma-separated numbers, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    from laspet.phantom import PhantomConfig, generate, inject_misregistration, write_study

    started = time.perf_counter()
    data = _read_yaml(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        cfg = PhantomConfig.from_dict(data)
        study = generate(cfg, patient_id=args.patient_id)
        if args.shift or args.rotation:
            study = inject_misregistration(study, args.shift or (0.0, 0.0, 0.0), args.rotation or 0.0)
        out = write_study(study, args.out_dir, cfg)
    except Exception as e:  # noqa: BLE001
        raise StageError("phantom", str(e)) from e
    study_manifest = json.loads((out / "manifest.json").read_text())
    pl.write_manifest(out, "phantom", cfg.to_dict(), [args.config] if args.config else [],
                      sorted(str(p) for p in out.glob("*.mvol")), started, base=study_manifest)
    print(f"wrote {study.patient_id} to {out} ({len(study.gt1)} baseline / {len(study.gt2)} interim lesions)")
    return 0


def cmd_vol(args) -> int:
    from laspet.volgrid import crop, foreground_bbox, mvol_header, read_mvol, resample, write_mvol

    if args.action == "info":
        _json_out(mvol_header(args.input))
        return 0
    v = read_mvol(args.input)
    if args.spacing:
        v = resample(v, args.spacing, args.mode)
    if args.crop_foreground:
        v = crop(v, foreground_bbox(v))
    write_mvol(v, args.output)
    print(f"wrote {args.output} dims={list(v.dims)} spacing={list(v.spacing)}")
    return 0


def cmd_segment(args) -> int:
    from laspet.phantom import read_study
    from laspet.volgrid import Kind, write_mvol

    study = read_study(args.study)
    model = None
    if args.rule == "model":
        if not args.checkpoint:
            raise StageError("segment", "--checkpoint is required for the model segmenter")
        from laspet.neural.checkpoint import load_checkpoint

        model = load_checkpoint(args.checkpoint)
    t = pl.register_study(study, args.rule == "model" and not args.no_register)
    seg = pl.segment_study(study, args.rule, t, model,
                           {"overlap": args.overlap, "threshold": args.threshold, "min_ml": args.min_ml})
    out = Path(args.out or args.study)
    out.mkdir(parents=True, exist_ok=True)
    write_mvol(study.pet1.with_values(seg.labels1, Kind.LABEL), out / "pred1.mvol")
    write_mvol(study.pet2.with_values(seg.labels2, Kind.LABEL), out / "pred2.mvol")
    print(f"wrote {out / 'pred1.mvol'} ({int(seg.labels1.max())} lesions) and "
          f"{out / 'pred2.mvol'} ({int(seg.labels2.max())} lesions)")
    return 0


def cmd_register(args) -> int:
    from laspet.longitudinal import RegistrationConfig, apply_transform, register_rigid
    from laspet.volgrid import read_mvol, write_mvol

    moving, fixed = read_mvol(args.moving), read_mvol(args.fixed)
    try:
        res = register_rigid(moving, fixed, RegistrationConfig())
    except Exception as e:  # noqa: BLE001
        raise StageError("register", str(e)) from e
    res.transform.save(args.out_transform)
    if args.resampled:
        write_mvol(apply_transform(moving, res.transform, "trilinear", reference=fixed), args.resampled)
    _json_out({"transform": res.transform.to_list(), "rotation_deg": res.transform.rotation_angle_deg(),
               "cost": res.cost, "iterations": res.iterations, "converged": res.converged})
    return 0


def cmd_mpdr(args) -> int:
    from laspet.longitudinal import RigidTransform, apply_transform, mpdr
    from laspet.volgrid import Kind, read_mvol, write_mvol

    pred1, pred2 = read_mvol(args.pred1), read_mvol(args.pred2)
    t = RigidTransform.load(args.transform) if args.transform else RigidTransform.identity()
    prop = apply_transform(pred1, t, "nearest", reference=pred2)
    kept = mpdr(prop, pred2)
    write_mvol(pred2.with_values(kept, Kind.LABEL), args.out)
    print(f"kept {int(kept.max())} of {int(len(np.unique(pred2.values)) - (pred2.values == 0).any())} PET2 components")
    return 0


def cmd_metrics(args) -> int:
    from laspet import quant
    from laspet.lesions import extract_lesions
    from laspet.volgrid import read_mvol

    labels, pet = read_mvol(args.labels), read_mvol(args.pet)
    try:
        ls = extract_lesions(labels, pet)
        if args.interim:
            if not args.liver:
                raise StageError("metrics", "--interim needs --liver")
            m = quant.interim_metrics(ls, read_mvol(args.liver), pet, args.baseline_suvmax).to_dict()
        else:
            if not args.spleen:
                raise StageError("metrics", "--baseline needs --spleen")
            m = quant.baseline_metrics(ls, read_mvol(args.spleen), args.dmax_mode).to_dict()
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001
        raise StageError("metrics", str(e)) from e
    out = {"schema_version": 1, "timepoint": "interim" if args.interim else "baseline", "metrics": m}
    if args.json:
        pl.dump_json(out, Path(args.json))
    else:
        _json_out(out)
    return 0


def cmd_eval(args) -> int:
    """Evaluate patient folders holding a study plus pred1.mvol / pred2.mvol (and optional transform.json)."""
    from laspet.evaluation import build_record, check_report, evaluate_cohort
    from laspet.lesions import extract_lesions
    from laspet.longitudinal import RigidTransform, mpdr
    from laspet.phantom import read_study
    from laspet.volgrid import Kind, read_mvol

    ev: dict = {}
    if args.bootstrap is not None:
        ev["n_trials"] = args.bootstrap
    if args.criterion:
        ev["criteria"] = args.criterion
    if args.equivocal is not None:
        ev["include_equivocal"] = args.equivocal == "include"
    overrides = {"eval": ev}
    if args.seed is not None:
        overrides["seed"] = args.seed
    ecfg = pl.eval_config(pl.load_config(args.config, overrides))
    dirs = sorted(p for p in map(Path, args.patients) if p.is_dir())
    if not dirs:
        raise StageError("eval", "no patient folders given")
    records = []
    for d in dirs:
        study = read_study(d)
        t = RigidTransform.load(d / "transform.json") if (d / "transform.json").exists() else RigidTransform.identity()
        lab1 = read_mvol(d / "pred1.mvol")
        lab2 = read_mvol(d / "pred2.mvol").values.astype(np.int64)
        pred1 = extract_lesions(lab1, study.pet1)
        prop = pl.to_pet2_frame(pred1.to_volume(), t, study.pet2)
        variants = {
            "raw": extract_lesions(study.pet2.with_values(lab2, Kind.LABEL), study.pet2),
            "mpdr": extract_lesions(study.pet2.with_values(mpdr(prop.values, lab2), Kind.LABEL), study.pet2),
        }
        records.append(build_record(study.patient_id, pred1, study.gt1, variants, study.gt2, study.pet2,
                                    study.liver_mask, study.organ_mask("spleen", 1), ecfg, study.attributes))
    report = evaluate_cohort(records, ecfg)
    pl.dump_json(report, Path(args.json))
    problems = check_report(report)
    if problems:
        raise pl.InvariantError("; ".join(problems[:5]))
    print(f"wrote {args.json} ({len(records)} patients)")
    return 0


def cmd_train_toy(args) -> int:
    from laspet.neural.checkpoint import save_checkpoint

    overrides: dict = {"optim": {}, "train": {}}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["optim"]["steps"] = args.steps
    if args.lr is not None:
        overrides["optim"]["lr"] = args.lr
    if args.n_studies is not None:
        overrides["train"]["n_studies"] = args.n_studies
    cfg = pl.load_config(args.config, overrides)
    cfg["train"]["checkpoint"] = None
    model, losses = pl.train_model(cfg)
    save_checkpoint(model, args.out)
    if args.losses:
        Path(args.losses).write_text("step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses)))
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    print(f"trained {len(losses)} steps: loss {first:.4f} -> {last:.4f}; wrote {args.out}")
    return 0


def cmd_infer(args) -> int:
    from laspet.neural.checkpoint import load_checkpoint
    from laspet.phantom import read_study
    from laspet.volgrid import Kind, write_mvol

    try:
        model = load_checkpoint(args.checkpoint)
        study = read_study(args.study)
        t = pl.register_study(study, not args.no_register)
        seg = pl.model_segment(study, t, model, {"overlap": args.overlap, "threshold": args.threshold,
                                                 "min_ml": args.min_ml})
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001
        raise StageError("infer", str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mvol(study.pet1.with_values(seg.labels1, Kind.LABEL), out / "pred1.mvol")
    write_mvol(study.pet2.with_values(seg.labels2, Kind.LABEL), out / "pred2.mvol")
    t.save(out / "transform.json")
    print(f"wrote predictions to {out}")
    return 0


def cmd_pipeline(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.segmenter is not None:
        overrides["segmenter"] = args.segmenter
    if args.patients is not None:
        overrides["cohort"] = {"n_patients": args.patients}
    if args.trials is not None:
        overrides["eval"] = {"n_trials": args.trials}
    code = pl.cmd_pipeline(args.config, overrides)
    print(Path(pl.load_config(args.config, overrides)["out_dir"]) / "report.txt")
    return code


def cmd_report(args) -> int:
    sys.stdout.write(pl.cmd_report(args.report, args.csv_dir))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laspet", description="Longitudinal PET/CT lesion quantification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic PET1/PET2 study")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="YAML/JSON phantom settings")
    s.add_argument("--patient-id")
    s.add_argument("--shift", type=_triple, help="misregistration shift in mm (x,y,z)")
    s.add_argument("--rotation", type=float, help="misregistration rotation about z in degrees")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("vol", help="inspect or convert MVOL volumes")
    s.add_argument("action", choices=("info", "convert"))
    s.add_argument("input")
    s.add_argument("output", nargs="?")
    s.add_argument("--spacing", type=_triple)
    s.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")
    s.add_argument("--crop-foreground", action="store_true")
    s.set_defaults(func=cmd_vol)

    def infer_opts(s):
        s.add_argument("--overlap", type=float, default=0.625)
        s.add_argument("--threshold", type=float, default=0.5)
        s.add_argument("--min-ml", type=float, default=0.2)
        s.add_argument("--no-register", action="store_true")

    s = sub.add_parser("segment", help="segment a study folder")
    s.add_argument("study")
    s.add_argument("--rule", choices=pl.SEGMENTERS, default="threshold-union")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    infer_opts(s)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("register", help="rigidly register a moving volume to a fixed one")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--out-transform", required=True, help="transform JSON (12 numbers)")
    s.add_argument("--resampled", help="write the moving volume resampled onto the fixed grid")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("mpdr", help="drop PET2 components without a propagated PET1 counterpart")
    s.add_argument("--pred1", required=True)
    s.add_argument("--pred2", required=True)
    s.add_argument("--transform")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mpdr)

    s = sub.add_parser("metrics", help="quantitative metrics for a label volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--pet", required=True)
    tp = s.add_mutually_exclusive_group()
    tp.add_argument("--baseline", action="store_true", help="PET1 metrics (default)")
    tp.add_argument("--interim", action="store_true", help="PET2 metrics")
    s.add_argument("--spleen", help="spleen mask, for --baseline")
    s.add_argument("--liver", help="liver mask, for --interim")
    s.add_argument("--baseline-suvmax", type=float, help="PET1 SUVmax, enables delta SUVmax")
    s.add_argument("--dmax", dest="dmax_mode", choices=("centroid", "voxel"), default="centroid")
    s.add_argument("--json", help="write JSON here instead of stdout")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("eval", help="cohort evaluation over patient folders")
    s.add_argument("patients", nargs="+", help="folders with a study plus pred1.mvol / pred2.mvol")
    s.add_argument("--json", required=True, help="report output path")
    s.add_argument("--config")
    s.add_argument("--criterion", action="append", choices=("overlap", "suvmax", "dice50"))
    s.add_argument("--equivocal", choices=("include", "exclude"))
    s.add_argument("--bootstrap", type=int, help="number of bootstrap trials")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("train-toy", help="train the network on phantoms")
    s.add_argument("--out", required=True, help="LASP checkpoint path")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--n-studies", type=int)
    s.add_argument("--losses", help="write the loss trace as CSV")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("infer", help="sliding-window inference on a study folder")
    s.add_argument("study")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    infer_opts(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("pipeline", help="run phantoms -> segmentation -> metrics -> report")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--segmenter", choices=pl.SEGMENTERS)
    s.add_argument("--patients", type=int)
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("report", help="render a report JSON as tables")
    s.add_argument("report")
    s.add_argument("--csv-dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(f"laspet {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"laspet {args.command}: {e}", file=sys.stderr)
        return pl.EXIT_CODES.get(args.command.replace("-toy", ""), 1) if args.command != "vol" else 1


if __name__ == "__main__":
    sys.exit(main())
