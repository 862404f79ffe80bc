"""Command-line entry point: ``cardioplan <command> [options]``.

Exit codes: 0 success, 1 domain failure (anatomy not found, no convergence,
bad input files), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import TARGETS, Case, load_manifest, save_manifest
from .features import AnatomyNotFound, short_axis_init, summarize_anatomy
from .geometry import FitError
from .noise import ConvergenceError, DegenerateInputError, SnrRois, SnrSpec, snr_ladder
from .phantom import PhantomError, PopulationRanges, generate, sample_population
from .pipeline import (
    CaseResult,
    PipelineError,
    cv_experiment,
    ensure_features,
    evaluate,
    fit_target,
    format_paired,
    format_report,
    load_stack,
    low_snr_angle_means,
    make_dataset,
    predict_cases,
    save_stack,
    train_stack,
    usable,
)
from .search import GaConfig
from .segmentation import SegParams, largest_components, segment_image
from .svr import ModelInvariantError, ModelSchemaError, TrainingError, save_model
from .volume import (
    BoundsError,
    BoxRoi,
    PhysicalPoint,
    VolumeError,
    atomic_write_bytes,
    atomic_write_json,
    load_volume,
    save_volume,
)

log = logging.getLogger("cardioplan")

DOMAIN_ERRORS = (
    AnatomyNotFound,
    BoundsError,
    ConvergenceError,
    DegenerateInputError,
    FileNotFoundError,
    FitError,
    ModelInvariantError,
    ModelSchemaError,
    PhantomError,
    PipelineError,
    TrainingError,
    VolumeError,
    json.JSONDecodeError,
)


class UsageError(Exception):
    pass


def _int_list(text: str, n: int | None = None) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} integers, got {len(vals)}")
    return vals


def _roi(text: str) -> BoxRoi:
    v = _int_list(text, 6)
    try:
        return BoxRoi(tuple(v[:3]), tuple(v[3:]))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _point(text: str) -> PhysicalPoint:
    v = _float_list(text)
    if len(v) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z in mm")
    return PhysicalPoint(*v)


def _write_config(out_dir: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg = json.loads(json.dumps(cfg, default=_jsonable))
    if extra:
        cfg["resolved"] = json.loads(json.dumps(extra, default=_jsonable))
    cfg["version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out_dir / f"{command}_config.json", cfg)


def _jsonable(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, BoxRoi):
        return o.to_list()
    if isinstance(o, PhysicalPoint):
        return [o.x, o.y, o.z]
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _ga_config(args) -> GaConfig:
    base = {}
    if getattr(args, "cfg", None):
        with open(args.cfg) as fh:
            base = json.load(fh)
    if not isinstance(base, dict):
        raise UsageError("GA config file must hold a JSON object")
    for key, attr in (("population_size", "pop"), ("generations", "gens"), ("k_folds", "k")):
        val = getattr(args, attr, None)
        if val is not None:
            base[key] = val
    base["seed"] = args.seed
    base["threads"] = args.threads
    try:
        return GaConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid GA config: {e}") from e


# commands -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranges = PopulationRanges()
    if args.ranges:
        with open(args.ranges) as fh:
            ranges = PopulationRanges.from_dict(json.load(fh))
    cases, rois = [], {}
    for spec, case in sample_population(args.n, ranges, seed=args.seed):
        v, truth, r = generate(spec)
        path = save_volume(v, out / spec.patient_id)
        rois[spec.patient_id] = r.to_dict()
        cases.append(Case(spec.patient_id, None, str(path), truth, rois=r.to_dict()))
    manifest = Path(args.manifest) if args.manifest else out / "manifest.json"
    save_manifest(cases, manifest)
    atomic_write_json(out / "rois.json", rois)
    _write_config(out, "phantom", args, {"ranges": ranges.to_dict()})
    log.info("wrote %d phantoms to %s", len(cases), out)
    return 0


def cmd_noise(args) -> int:
    v = load_volume(args.input)
    if args.rois:
        with open(args.rois) as fh:
            d = json.load(fh)
        d = d.get(v.meta.patient_id, d)
        rois = SnrRois.from_dict(d)
    elif args.signal_roi and args.background_roi:
        rois = SnrRois(args.signal_roi, args.background_roi)
    else:
        raise UsageError("give --rois or both --signal-roi and --background-roi")
    try:
        spec = SnrSpec(targets=tuple(args.targets), seed=args.seed, tolerance_frac=args.tolerance)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, nv in zip(spec.targets, snr_ladder(v, rois, spec)):
        save_volume(nv, out / f"{v.meta.patient_id}_snr{t:g}")
        log.info("target %g: measured SNR %.3f", t, nv.meta.snr_tag)
    _write_config(out, "noise", args, {"snr_spec": {"targets": list(spec.targets), "tolerance_frac": spec.tolerance_frac,
                                                    "seed": spec.seed}})
    return 0


def cmd_segment(args) -> int:
    v = load_volume(args.input)
    if not 0 <= args.slice < v.dims[2]:
        raise BoundsError(f"slice {args.slice} outside 0..{v.dims[2] - 1}")
    try:
        p = SegParams(args.k, args.min_size, args.sigma)
    except ValueError as e:
        raise UsageError(str(e)) from e
    seg = segment_image(v.axial_slice(args.slice), p)
    comps = largest_components(seg, n=seg.n_components)
    out = {
        "slice": args.slice,
        "shape": list(seg.labels.shape),
        "params": {"k": p.k_threshold, "min_size": p.min_size, "sigma": p.presmooth_sigma},
        "labels": seg.labels.tolist(),
        "components": [{"id": c, "size": s, "centroid_xy": list(cen)} for c, s, cen in comps],
    }
    atomic_write_json(args.out, out)
    _write_config(Path(args.out).resolve().parent, "segment", args)
    return 0


def cmd_features(args) -> int:
    v = load_volume(args.input)
    summ = summarize_anatomy(v)
    rec = {"patient_id": v.meta.patient_id, "snr_tag": v.meta.snr_tag}
    rec.update(summ.centroid_features().as_dict())
    rec.update(summ.anatomy_values())
    if args.lv_centroid is not None:
        sa = short_axis_init(v, args.lv_centroid)
        rec.update({"sa_init_azimuth_deg": sa.azimuth_deg, "sa_init_elevation_deg": sa.elevation_deg})
    atomic_write_json(args.out, rec)
    _write_config(Path(args.out).resolve().parent, "features", args)
    return 0


def _load_cases(path) -> list[Case]:
    try:
        return load_manifest(path)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, json.JSONDecodeError):
            raise
        raise PipelineError(f"malformed manifest {path}: {e}") from e


def cmd_search(args) -> int:
    cfg = _ga_config(args)
    cases = usable(ensure_features(_load_cases(args.dataset)))
    fit = fit_target(cases, args.target, cfg)
    if fit.model is None:
        raise PipelineError(f"{args.target}: no model (constant {fit.constant})")
    save_model(fit.model, args.out)
    front = {"target": args.target, "front": fit.front, "picked": {"genome": fit.genome.to_dict(),
                                                                    "objectives": fit.objectives.to_dict()}}
    atomic_write_json(args.front or str(Path(args.out).with_suffix("")) + "_front.json", front)
    _write_config(Path(args.out).resolve().parent, "search", args, {"ga": cfg.to_dict()})
    log.info("%s: cv_mad %.4f with %d features", args.target, fit.objectives.cv_mad, fit.objectives.n_features)
    return 0


def cmd_train(args) -> int:
    cfg = _ga_config(args)
    stack = train_stack(_load_cases(args.manifest), cfg)
    save_stack(stack, args.out)
    _write_config(Path(args.out).resolve().parent, "train", args, {"ga": cfg.to_dict()})
    return 0


def _write_cv_outputs(out: Path, res, meta: dict) -> None:
    (out / "fronts").mkdir(parents=True, exist_ok=True)
    for f, fold in enumerate(res.details["folds"]):
        for regime in ("original_only", "with_noise"):
            atomic_write_json(out / "fronts" / f"fold{f}_{regime}.json",
                              {"fold": f, "regime": regime, "test_patients": fold["test_patients"],
                               "targets": fold[regime]})
    atomic_write_json(out / "predictions.json", res.details["predictions"])
    low_o, low_n = low_snr_angle_means(res.original), low_snr_angle_means(res.with_noise)
    report = {
        **meta,
        "cv": {"original_only": res.original.to_dict(), "with_noise": res.with_noise.to_dict()},
        "reference": {k: {"original_only": a, "with_noise": b} for k, (a, b) in res.reference.items()},
        "low_snr_mean_angle": {"original_only": low_o, "with_noise": low_n},
    }
    atomic_write_json(out / "cv_report.json", report)
    text = "\n\n".join([
        format_paired(res.original, res.with_noise, res.reference, "Grouped cross-validation, mean error"),
        format_report(res.original, "Trained on originals only"),
        format_report(res.with_noise, "Trained on originals and noised variants"),
        "Low-SNR (15, 10) mean 3D angle, originals-only vs with-noise:\n" + "\n".join(
            f"  {k:<4} {_fmt(low_o[k]):>8} {_fmt(low_n[k]):>8}" for k in low_o),
    ])
    atomic_write_bytes(out / "cv_report.txt", (text + "\n").encode())


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.2f}"


def cmd_cv(args) -> int:
    cfg = _ga_config(args)
    out = Path(args.out)
    cases = _load_cases(args.manifest)
    res = cv_experiment(cases, cfg, k=args.folds)
    meta = {"seed": args.seed, "ga": {k: v for k, v in cfg.to_dict().items() if k != "threads"},
            "folds": args.folds, "n_cases": len(cases), "n_patients": len({c.patient_id for c in cases})}
    _write_cv_outputs(out, res, meta)
    _write_config(out, "cv", args, {"ga": cfg.to_dict()})
    print((out / "cv_report.txt").read_text(), file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    stack = load_stack(args.stack)
    cases = []
    for p in args.input:
        v = load_volume(p)
        # truth is unknown at prediction time; only identity fields matter here
        cases.append(Case(v.meta.patient_id, v.meta.snr_tag, str(p), None, extras={"volume": v}))
    results = predict_cases(stack, cases)
    atomic_write_json(args.out, [r.to_dict() for r in results])
    _write_config(Path(args.out).resolve().parent, "predict", args)
    n_fail = sum(not r.ok for r in results)
    if n_fail == len(results):
        log.error("prediction failed for every input")
        return 1
    return 0


def cmd_evaluate(args) -> int:
    cases = _load_cases(args.manifest)
    with open(args.pred) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict) and "predictions" in raw:
        raw = raw["predictions"]
    preds = {}
    for d in raw:
        r = CaseResult.from_dict(d)
        preds[(r.patient_id, None if r.snr_tag is None else round(r.snr_tag, 9))] = r
    results = []
    for c in cases:
        key = (c.patient_id, None if c.snr_tag is None else round(c.snr_tag, 9))
        results.append(preds.get(key) or CaseResult(c.patient_id, c.snr_tag, None, "no prediction"))
    for c, r in zip(cases, results):
        r.snr_tag = c.snr_tag
    rep = evaluate(cases, results)
    atomic_write_json(args.out, rep.to_dict())
    _write_config(Path(args.out).resolve().parent, "evaluate", args)
    print(format_report(rep, "Evaluation"), file=sys.stderr)
    return 0


def cmd_repro(args) -> int:
    t0 = time.perf_counter()
    cfg = _ga_config(args)
    if args.fast:
        cfg = replace(cfg, population_size=max(4, (cfg.population_size // 2) // 2 * 2),
                      generations=max(1, cfg.generations // 2))
    out = Path(args.out_dir)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    snr_spec = SnrSpec(seed=args.seed)
    specs = [s for s, _ in sample_population(args.n, seed=args.seed)]
    cases = make_dataset(specs, snr_spec, data_dir)
    save_manifest(cases, data_dir / "manifest.json")
    log.info("dataset: %d cases from %d phantoms (%.1fs)", len(cases), len(specs), time.perf_counter() - t0)
    cases = ensure_features(cases)
    log.info("features done (%.1fs)", time.perf_counter() - t0)
    res = cv_experiment(cases, cfg, k=args.folds)
    meta = {"seed": args.seed, "fast": bool(args.fast),
            "ga": {k: v for k, v in cfg.to_dict().items() if k != "threads"},
            "folds": args.folds, "n_cases": len(cases), "n_patients": len(specs),
            "snr_targets": list(snr_spec.targets)}
    _write_cv_outputs(out / "report", res, meta)
    _write_config(out, "repro", args, {"ga": cfg.to_dict()})
    log.info("repro finished in %.1fs", time.perf_counter() - t0)
    print((out / "report" / "cv_report.txt").read_text(), file=sys.stderr)
    return 0


# parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--threads", type=int, default=1, help="upper bound on worker threads")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    ap = _Parser(prog="cardioplan", description="Cardiac plane prescription from axial localizers.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom population")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="manifest path (default: <out-dir>/manifest.json)")
    p.add_argument("--ranges", help="JSON file overriding population ranges")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("noise", parents=[common], help="degrade a volume to an SNR ladder")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--targets", type=_float_list, default=[30.0, 25.0, 20.0, 15.0, 10.0])
    p.add_argument("--signal-roi", type=_roi)
    p.add_argument("--background-roi", type=_roi)
    p.add_argument("--rois", help="ROI JSON (single record or keyed by patient id)")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("segment", parents=[common], help="graph-based segmentation of one axial slice")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--k", type=float, default=300.0)
    p.add_argument("--min-size", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("features", parents=[common], help="anatomy features of one volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--lv-centroid", type=_point, help="x,y,z in mm; adds the short-axis estimate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    def ga_flags(p):
        p.add_argument("--cfg", help="GA config JSON")
        p.add_argument("--pop", type=int)
        p.add_argument("--gens", type=int)

    p = sub.add_parser("search", parents=[common], help="NSGA-II model search for one target")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", required=True, choices=TARGETS)
    ga_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--front")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", parents=[common], help="train the nine-model stack")
    p.add_argument("--manifest", required=True)
    ga_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", parents=[common], help="paired grouped cross-validation")
    p.add_argument("--manifest", required=True)
    ga_flags(p)
    p.add_argument("--folds", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[common], help="predict centroid and planes for volumes")
    p.add_argument("--stack", required=True)
    p.add_argument("--in", dest="input", required=True, nargs="+")
    p.add_argument("--out", default="predictions.json")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="evaluation.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repro", parents=[common], help="phantoms, noise ladder, features and paired CV")
    p.add_argument("--out-dir", default="repro")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--folds", type=int, default=6)
    ga_flags(p)
    p.add_argument("--fast", action="store_true", help="halve population and generations")
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads < 1:
        print("cardioplan: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return int(args.func(args) or 0)
    except UsageError as e:
        print(f"cardioplan: error: {e}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as e:
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
