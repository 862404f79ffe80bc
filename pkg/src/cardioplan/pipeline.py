"""Dataset assembly, model-stack training, the online prediction chain, and evaluation reports."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import ANGULAR_TARGETS, TARGETS, Case, GroundTruth, grouped_kfold
from .features import (
    ANATOMY_FEATURES,
    ANGULATION_FEATURES,
    CENTROID_FEATURES,
    AnatomyNotFound,
    AnatomySummary,
    short_axis_init,
    summarize_anatomy,
)
from .geometry import FitError, PlaneAngles, angle3d
from .noise import SnrSpec, snr_ladder
from .phantom import generate
from .search import GaConfig, Genome, Objectives, SearchData, pick_final, run_nsga2
from .svr import SvrModel, SvrParams, TrainingError, predict, train
from .volume import BoundsError, PhysicalPoint, Volume, atomic_write_json, load_volume, save_volume

log = logging.getLogger(__name__)

CENTROID_TARGETS = ("lv_cx", "lv_cy", "lv_cz")
ANGLE_TARGETS = tuple(t for t in TARGETS if t not in CENTROID_TARGETS)
PLANES = ("sa", "ch4", "ch2")
ROW_LABELS = {"lv": "LV Centroid", "sa": "Short Axis", "ch4": "4 Chamber", "ch2": "2 Chamber"}
UNDER_DEG = 15.0

# reference cross-validation and hold-out means from the clinical study, (original-only, with-noise)
REFERENCE_CV = {"lv": (9.64, 9.26), "sa": (8.94, 8.18), "ch4": (11.53, 10.56), "ch2": (7.33, 7.11)}
REFERENCE_HOLDOUT = {"lv": (15.38, 13.75), "sa": (12.86, 12.05), "ch4": (11.95, 11.40), "ch2": (9.15, 11.83)}

# errors that mark a single case as failed instead of aborting a run
CASE_ERRORS = (AnatomyNotFound, FitError, BoundsError, TrainingError, ValueError)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class CaseFeatures:
    """Everything the models consume for one volume, plus the truth-seeded SA estimate."""

    centroid: tuple[float, ...]
    anatomy: tuple[float, ...]
    sa_init: PlaneAngles

    def angulation(self, sa_init: PlaneAngles | None = None) -> np.ndarray:
        sa = sa_init or self.sa_init
        return np.array(self.anatomy + (sa.azimuth_deg, sa.elevation_deg))

    def to_dict(self) -> dict:
        return {"centroid": dict(zip(CENTROID_FEATURES, self.centroid)),
                "anatomy": dict(zip(ANATOMY_FEATURES, self.anatomy)),
                "sa_init": self.sa_init.to_dict()}


def summary_features(summary: AnatomySummary) -> tuple[tuple[float, ...], tuple[float, ...]]:
    cen = summary.centroid_features().as_dict()
    ana = summary.anatomy_values()
    return tuple(cen[k] for k in CENTROID_FEATURES), tuple(float(ana[k]) for k in ANATOMY_FEATURES)


def case_features(v: Volume, truth: GroundTruth, summary: AnatomySummary | None = None) -> CaseFeatures:
    """Training-time features: SA init seeded by the ground-truth LV centroid."""
    summary = summary or summarize_anatomy(v)
    cen, ana = summary_features(summary)
    return CaseFeatures(cen, ana, short_axis_init(v, truth.lv_centroid))


def attach_features(case: Case, feats: CaseFeatures, summary: AnatomySummary | None = None) -> Case:
    extras = {**case.extras, "features": feats}
    if summary is not None:
        extras["summary"] = summary
    return replace(case, centroid_features=dict(zip(CENTROID_FEATURES, feats.centroid)),
                   angulation_features=dict(zip(ANATOMY_FEATURES, feats.anatomy)), extras=extras)


def case_volume(case: Case) -> Volume:
    v = case.extras.get("volume")
    if v is not None:
        return v
    if case.volume_path is None:
        raise PipelineError(f"case {case.patient_id} has neither a volume nor a path")
    return load_volume(case.volume_path)


def ensure_features(cases: list[Case]) -> list[Case]:
    """Compute features for cases that lack them.

    A case whose anatomy cannot be extracted keeps its place with a
    ``feature_error`` note: it is left out of training and scored as a
    failure when predicted.
    """
    out = []
    for c in cases:
        if "features" in c.extras or "feature_error" in c.extras:
            out.append(c)
            continue
        try:
            v = case_volume(c)
            summ = summarize_anatomy(v)
            out.append(attach_features(c, case_features(v, c.truth, summ), summ))
        except CASE_ERRORS as e:
            log.warning("features failed for %s (snr %s): %s", c.patient_id, c.snr_tag, e)
            out.append(replace(c, extras={**c.extras, "feature_error": f"{type(e).__name__}: {e}"}))
    return out


def usable(cases: list[Case]) -> list[Case]:
    return [c for c in cases if "features" in c.extras]


def make_dataset(specs, snr_spec: SnrSpec | None = None, out_dir=None) -> list[Case]:
    """Originals plus their SNR ladders as cases; volumes are kept in memory and,
    with ``out_dir``, also written there as ``<patient>_<level>`` file pairs."""
    snr_spec = snr_spec or SnrSpec()
    cases = []
    for spec in specs:
        v, truth, rois = generate(spec)
        variants = [(None, "orig", v)]
        for target, nv in zip(snr_spec.targets, snr_ladder(v, rois, snr_spec)):
            variants.append((nv.meta.snr_tag, f"snr{target:g}", nv))
        for tag, name, vol in variants:
            path = None
            if out_dir is not None:
                path = str(save_volume(vol, Path(out_dir) / f"{spec.patient_id}_{name}"))
            cases.append(Case(spec.patient_id, tag, path, truth, rois=rois.to_dict(), extras={"volume": vol}))
    return cases


def _features_of(case: Case) -> CaseFeatures:
    f = case.extras.get("features")
    if f is None:
        raise PipelineError(f"case {case.patient_id} has no computed features")
    return f


def training_set(cases: list[Case], target: str) -> tuple[list[Case], np.ndarray, np.ndarray, tuple[str, ...]]:
    """(cases used, X, y, feature names) for one target; ch2 elevation skips axial-planned cases."""
    if target not in TARGETS:
        raise KeyError(target)
    if target == "ch2_el":
        cases = [c for c in cases if not c.truth.ch2_axial_planned]
    if target in CENTROID_TARGETS:
        x = np.array([_features_of(c).centroid for c in cases]).reshape(len(cases), len(CENTROID_FEATURES))
        names = CENTROID_FEATURES
    else:
        x = np.array([_features_of(c).angulation() for c in cases]).reshape(len(cases), len(ANGULATION_FEATURES))
        names = ANGULATION_FEATURES
    y = np.array([c.truth.target(target) for c in cases], dtype=np.float64)
    if target in ANGULAR_TARGETS and y.size:
        y = unwrap_about_mean(y)
    return cases, x, y, names


def unwrap_about_mean(deg: np.ndarray) -> np.ndarray:
    """Shift angles by multiples of 360 so they cluster around their circular mean."""
    r = np.radians(deg)
    mu = math.degrees(math.atan2(np.sin(r).mean(), np.cos(r).mean()))
    return mu + (deg - mu + 180.0) % 360.0 - 180.0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TargetFit:
    model: SvrModel | None  # None: constant prediction
    genome: Genome | None
    objectives: Objectives | None
    front: list[dict] = field(default_factory=list)
    constant: float | None = None

    def predict(self, x: np.ndarray) -> float:
        if self.model is None:
            return float(self.constant)
        return float(predict(self.model, x))

    def to_dict(self) -> dict:
        return {
            "model": None if self.model is None else self.model.to_dict(),
            "genome": None if self.genome is None else self.genome.to_dict(),
            "objectives": None if self.objectives is None else self.objectives.to_dict(),
            "front": self.front,
            "constant": self.constant,
        }

    @classmethod
    def from_dict(cls, d) -> "TargetFit":
        return cls(
            None if d.get("model") is None else SvrModel.from_dict(d["model"]),
            None if d.get("genome") is None else Genome.from_dict(d["genome"]),
            None if d.get("objectives") is None else Objectives(**d["objectives"]),
            list(d.get("front", [])),
            d.get("constant"),
        )


@dataclass
class TrainedStack:
    fits: dict[str, TargetFit]
    config: dict

    def __post_init__(self):
        missing = [t for t in TARGETS if t not in self.fits]
        if missing:
            raise PipelineError(f"stack lacks models for {missing}")

    def to_dict(self) -> dict:
        return {"config": self.config, "targets": {t: self.fits[t].to_dict() for t in TARGETS}}

    @classmethod
    def from_dict(cls, d) -> "TrainedStack":
        return cls({t: TargetFit.from_dict(d["targets"][t]) for t in TARGETS}, dict(d.get("config", {})))


def save_stack(s: TrainedStack, path) -> None:
    atomic_write_json(path, s.to_dict())


def load_stack(path) -> TrainedStack:
    with open(path) as fh:
        return TrainedStack.from_dict(json.load(fh))


def fit_target(cases: list[Case], target: str, cfg: GaConfig) -> TargetFit:
    """GA search, final-genome pick, and a final SVR on all given cases."""
    used, x, y, names = training_set(cases, target)
    if not used:
        if target == "ch2_el":
            # every case planned on the axial localizer
            return TargetFit(None, None, None, [], 90.0)
        raise PipelineError(f"no training cases for {target}")
    n_pat = len({c.patient_id for c in used})
    k = min(cfg.k_folds, n_pat)
    if k < 2:
        raise PipelineError(f"{target}: need at least two patients, have {n_pat}")
    fold_of = np.empty(len(used), np.int64)
    for f, (_, test) in enumerate(grouped_kfold(used, k, cfg.seed)):
        fold_of[test] = f
    data = SearchData(x, y, fold_of, k, names, angular=target in ANGULAR_TARGETS)
    front = run_nsga2(data, cfg)
    genome, obj = pick_final(front)
    model = train(x, y, SvrParams(genome.c_penalty, genome.gamma, cfg.epsilon), genome.feature_mask, names)
    return TargetFit(model, genome, obj, front.to_list())


def train_stack(cases: list[Case], cfg: GaConfig, targets=TARGETS) -> TrainedStack:
    cases = usable(ensure_features(cases))
    if not cases:
        raise PipelineError("no usable training cases")
    fits = {}
    for i, t in enumerate(TARGETS):
        if t not in targets:
            continue
        tcfg = replace(cfg, seed=derive_seed(cfg.seed, i))
        fits[t] = fit_target(cases, t, tcfg)
        o = fits[t].objectives
        log.info("%s: cv_mad %s with %s features", t, "-" if o is None else f"{o.cv_mad:.3f}",
                 "-" if o is None else o.n_features)
    return TrainedStack(fits, {"ga": cfg.to_dict(), "n_cases": len(cases),
                               "n_patients": len({c.patient_id for c in cases})})


@dataclass(frozen=True)
class Prediction:
    lv_centroid: PhysicalPoint
    sa: PlaneAngles
    ch4: PlaneAngles
    ch2: PlaneAngles
    sa_init: PlaneAngles | None = None

    def to_dict(self) -> dict:
        c = self.lv_centroid
        d = {"lv_centroid_mm": [c.x, c.y, c.z], "sa": self.sa.to_dict(), "ch4": self.ch4.to_dict(),
             "ch2": self.ch2.to_dict()}
        if self.sa_init is not None:
            d["sa_init"] = self.sa_init.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "Prediction":
        return cls(PhysicalPoint.from_array(d["lv_centroid_mm"]), PlaneAngles.from_dict(d["sa"]),
                   PlaneAngles.from_dict(d["ch4"]), PlaneAngles.from_dict(d["ch2"]),
                   PlaneAngles.from_dict(d["sa_init"]) if d.get("sa_init") else None)


def predict_case(stack: TrainedStack, v: Volume, summary: AnatomySummary | None = None) -> Prediction:
    """Online chain: anatomy, centroid models, pool and SA init at the prediction, angle models."""
    summary = summary or summarize_anatomy(v)
    cen, ana = summary_features(summary)
    xc = np.array(cen)
    lv = PhysicalPoint(*(stack.fits[t].predict(xc) for t in CENTROID_TARGETS))
    sa0 = short_axis_init(v, lv)
    xa = np.array(ana + (sa0.azimuth_deg, sa0.elevation_deg))
    planes = {p: PlaneAngles.canonical(stack.fits[f"{p}_az"].predict(xa), stack.fits[f"{p}_el"].predict(xa))
              for p in PLANES}
    return Prediction(lv, planes["sa"], planes["ch4"], planes["ch2"], sa0)


@dataclass
class CaseResult:
    patient_id: str
    snr_tag: float | None
    prediction: Prediction | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.prediction is not None

    def to_dict(self) -> dict:
        d = {"patient_id": self.patient_id, "snr_tag": self.snr_tag, "status": "ok" if self.ok else "failed"}
        if self.ok:
            d.update(self.prediction.to_dict())
        else:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d) -> "CaseResult":
        pred = Prediction.from_dict(d) if d.get("status", "ok") == "ok" else None
        snr = d.get("snr_tag")
        return cls(str(d["patient_id"]), None if snr is None else float(snr), pred, d.get("error"))


def predict_cases(stack: TrainedStack, cases: list[Case]) -> list[CaseResult]:
    out = []
    for c in cases:
        try:
            v = case_volume(c)
            summ = c.extras.get("summary")
            out.append(CaseResult(c.patient_id, c.snr_tag, predict_case(stack, v, summ)))
        except CASE_ERRORS as e:
            log.warning("prediction failed for %s (snr %s): %s", c.patient_id, c.snr_tag, e)
            out.append(CaseResult(c.patient_id, c.snr_tag, None, f"{type(e).__name__}: {e}"))
    return out


def snr_level(tag: float | None, levels=(30, 25, 20, 15, 10)) -> str:
    """Nominal ladder level of a measured SNR tag, or 'original'."""
    if tag is None:
        return "original"
    return str(min(levels, key=lambda t: (abs(t - tag), t)))


def case_errors(truth: GroundTruth, pred: Prediction) -> dict[str, float]:
    d = truth.lv_centroid.as_array() - pred.lv_centroid.as_array()
    return {"lv": float(np.linalg.norm(d)), "sa": angle3d(truth.sa, pred.sa),
            "ch4": angle3d(truth.ch4, pred.ch4), "ch2": angle3d(truth.ch2, pred.ch2)}


def _rows(errs: list[dict[str, float]]) -> dict:
    rows = {}
    for key, label in ROW_LABELS.items():
        vals = np.array([e[key] for e in errs])
        row = {"label": label, "unit": "mm" if key == "lv" else "deg", "n": int(vals.size),
               "mean": float(vals.mean()) if vals.size else None,
               "median": float(np.median(vals)) if vals.size else None}
        if key != "lv":
            row["frac_under_15"] = float(np.mean(vals < UNDER_DEG)) if vals.size else None
        rows[key] = row
    return rows


@dataclass
class Report:
    rows: dict
    by_snr: dict
    failures: list[dict]
    n_cases: int
    angle_mad: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_cases": self.n_cases, "n_failed": len(self.failures), "rows": self.rows,
                "by_snr": self.by_snr, "angle_mad": self.angle_mad, "failures": self.failures}

    def mean(self, key: str) -> float | None:
        return self.rows[key]["mean"]


def evaluate(cases: list[Case], results: list[CaseResult]) -> Report:
    """Table-style summary; failed cases are counted and excluded from the means."""
    if len(cases) != len(results):
        raise ValueError(f"{len(cases)} cases but {len(results)} predictions")
    errs, groups, failures = [], {}, []
    az_el = {t: [] for t in ANGLE_TARGETS}
    for c, r in zip(cases, results):
        if (c.patient_id, c.snr_tag) != (r.patient_id, r.snr_tag):
            raise ValueError(f"case/prediction mismatch: {c.patient_id} vs {r.patient_id}")
        if not r.ok:
            failures.append({"patient_id": c.patient_id, "snr": snr_level(c.snr_tag), "error": r.error})
            continue
        e = case_errors(c.truth, r.prediction)
        errs.append(e)
        groups.setdefault(snr_level(c.snr_tag), []).append(e)
        for t in ANGLE_TARGETS:
            plane, comp = t.split("_")
            a = getattr(r.prediction, plane)
            pv = a.azimuth_deg if comp == "az" else a.elevation_deg
            d = pv - c.truth.target(t)
            if comp == "az":
                d = (d + 180.0) % 360.0 - 180.0
            az_el[t].append(abs(d))
    order = ["original"] + [str(t) for t in (30, 25, 20, 15, 10)]
    by_snr = {k: _rows(groups[k]) for k in order if k in groups}
    for k in sorted(set(groups) - set(order)):
        by_snr[k] = _rows(groups[k])
    mad = {t: (float(np.mean(v)) if v else None) for t, v in az_el.items()}
    return Report(_rows(errs), by_snr, failures, len(cases), mad)


def format_report(rep: Report, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'':<12} {'mean':>9} {'median':>9} {'<15deg':>8} {'n':>4}")
    for key, row in rep.rows.items():
        m = "-" if row["mean"] is None else f"{row['mean']:.2f}"
        md = "-" if row["median"] is None else f"{row['median']:.2f}"
        fr = row.get("frac_under_15")
        frs = "" if key == "lv" else ("-" if fr is None else f"{100 * fr:.1f}%")
        lines.append(f"{row['label']:<12} {m:>9} {md:>9} {frs:>8} {row['n']:>4}")
    lines.append(f"failed cases: {len(rep.failures)} of {rep.n_cases}")
    return "\n".join(lines)


def format_paired(orig: Report, noised: Report, reference: dict, title: str) -> str:
    lines = [title, f"{'':<12} {'original':>10} {'with noise':>11}   {'reference':>15}"]
    for key, label in ROW_LABELS.items():
        a, b = orig.mean(key), noised.mean(key)
        ra, rb = reference[key]
        fa = "-" if a is None else f"{a:.2f}"
        fb = "-" if b is None else f"{b:.2f}"
        lines.append(f"{label:<12} {fa:>10} {fb:>11}   {ra:>7.2f}/{rb:<7.2f}")
    return "\n".join(lines)


@dataclass
class PairedResult:
    original: Report
    with_noise: Report
    reference: dict
    details: dict

    def to_dict(self) -> dict:
        return {"original_only": self.original.to_dict(), "with_noise": self.with_noise.to_dict(),
                "reference": {k: {"original_only": v[0], "with_noise": v[1]} for k, v in self.reference.items()},
                "details": self.details}


def _fold_stacks(train_cases: list[Case], cfg: GaConfig, fold: int):
    originals = [c for c in train_cases if c.is_original]
    fcfg = replace(cfg, seed=derive_seed(cfg.seed, 1000 + fold))
    return train_stack(originals, fcfg), train_stack(train_cases, fcfg)


def _stack_summary(s: TrainedStack) -> dict:
    return {t: {"genome": None if f.genome is None else f.genome.to_dict(),
                "objectives": None if f.objectives is None else f.objectives.to_dict(),
                "front": f.front} for t, f in s.fits.items()}


def cv_experiment(cases: list[Case], cfg: GaConfig, k: int = 6, split_seed: int | None = None) -> PairedResult:
    """Grouped k-fold protocol run twice over identical test folds.

    One stack per fold trains on the originals of the training patients,
    the other on originals plus every noised variant.
    """
    cases = ensure_features(cases)
    seed = cfg.seed if split_seed is None else split_seed
    folds = grouped_kfold(cases, k, seed)
    res_o: list[CaseResult | None] = [None] * len(cases)
    res_n: list[CaseResult | None] = [None] * len(cases)
    details = {"folds": []}
    for f, (tr, te) in enumerate(folds):
        log.info("fold %d/%d: %d train cases, %d test cases", f + 1, k, len(tr), len(te))
        s_o, s_n = _fold_stacks([cases[i] for i in tr], cfg, f)
        test = [cases[i] for i in te]
        for i, r in zip(te, predict_cases(s_o, test)):
            res_o[i] = r
        for i, r in zip(te, predict_cases(s_n, test)):
            res_n[i] = r
        details["folds"].append({
            "test_patients": sorted({c.patient_id for c in test}),
            "original_only": _stack_summary(s_o),
            "with_noise": _stack_summary(s_n),
        })
    details["predictions"] = {"original_only": [r.to_dict() for r in res_o],
                              "with_noise": [r.to_dict() for r in res_n]}
    return PairedResult(evaluate(cases, res_o), evaluate(cases, res_n), REFERENCE_CV, details)


def holdout_experiment(train_cases: list[Case], test_cases: list[Case], cfg: GaConfig) -> PairedResult:
    """Train both regimes on ``train_cases`` and report on unseen ``test_cases``."""
    train_cases = ensure_features(train_cases)
    test_cases = ensure_features(test_cases)
    overlap = {c.patient_id for c in train_cases} & {c.patient_id for c in test_cases}
    if overlap:
        raise PipelineError(f"patients on both sides of the hold-out split: {sorted(overlap)}")
    s_o, s_n = _fold_stacks(train_cases, cfg, 0)
    r_o, r_n = predict_cases(s_o, test_cases), predict_cases(s_n, test_cases)
    details = {"original_only": _stack_summary(s_o), "with_noise": _stack_summary(s_n),
               "predictions": {"original_only": [r.to_dict() for r in r_o],
                               "with_noise": [r.to_dict() for r in r_n]}}
    return PairedResult(evaluate(test_cases, r_o), evaluate(test_cases, r_n), REFERENCE_HOLDOUT, details)


def low_snr_angle_means(rep: Report, levels=("15", "10")) -> dict[str, float | None]:
    """Mean 3D angle per plane over the given SNR levels."""
    out = {}
    for key in PLANES:
        tot, n = 0.0, 0
        for lv in levels:
            row = rep.by_snr.get(lv, {}).get(key)
            if row and row["n"]:
                tot += row["mean"] * row["n"]
                n += row["n"]
        out[key] = tot / n if n else None
    return out


__all__ = [
    "ANGLE_TARGETS",
    "CENTROID_TARGETS",
    "CaseFeatures",
    "CaseResult",
    "PairedResult",
    "PipelineError",
    "Prediction",
    "REFERENCE_CV",
    "REFERENCE_HOLDOUT",
    "ROW_LABELS",
    "Report",
    "TargetFit",
    "TrainedStack",
    "attach_features",
    "case_features",
    "cv_experiment",
    "ensure_features",
    "evaluate",
    "fit_target",
    "format_paired",
    "format_report",
    "holdout_experiment",
    "load_stack",
    "make_dataset",
    "low_snr_angle_means",
    "predict_case",
    "predict_cases",
    "save_stack",
    "snr_level",
    "train_stack",
    "training_set",
]
