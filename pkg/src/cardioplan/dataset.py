"""Patient-tagged case records, the dataset manifest, and patient-grouped k-fold splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import PlaneAngles
from .volume import PhysicalPoint, atomic_write_json

# |elevation - 90| below this marks a 2CH plane planned directly on the axial localizer
AXIAL_PLANNED_TOL_DEG = 0.5

TARGETS = ("lv_cx", "lv_cy", "lv_cz", "sa_az", "sa_el", "ch4_az", "ch4_el", "ch2_az", "ch2_el")
ANGULAR_TARGETS = frozenset(t for t in TARGETS if t.endswith("_az"))


@dataclass(frozen=True)
class GroundTruth:
    lv_centroid: PhysicalPoint
    sa: PlaneAngles
    ch4: PlaneAngles
    ch2: PlaneAngles
    ch2_axial_planned: bool = False

    def target(self, name: str) -> float:
        if name not in TARGETS:
            raise KeyError(f"unknown target {name!r}")
        if name.startswith("lv_c"):
            return getattr(self.lv_centroid, name[-1])
        plane, comp = name.split("_")
        ang = getattr(self, plane)
        return ang.azimuth_deg if comp == "az" else ang.elevation_deg

    def to_dict(self) -> dict:
        c = self.lv_centroid
        return {
            "lv_centroid_mm": [c.x, c.y, c.z],
            "sa": self.sa.to_dict(),
            "ch4": self.ch4.to_dict(),
            "ch2": self.ch2.to_dict(),
            "ch2_axial_planned": self.ch2_axial_planned,
        }

    @classmethod
    def from_dict(cls, d) -> "GroundTruth":
        ch2 = PlaneAngles.from_dict(d["ch2"])
        planned = d.get("ch2_axial_planned")
        if planned is None:
            planned = abs(ch2.elevation_deg - 90.0) < AXIAL_PLANNED_TOL_DEG
        return cls(
            PhysicalPoint.from_array(d["lv_centroid_mm"]),
            PlaneAngles.from_dict(d["sa"]),
            PlaneAngles.from_dict(d["ch4"]),
            ch2,
            bool(planned),
        )


@dataclass
class Case:
    patient_id: str
    snr_tag: float | None
    volume_path: str | None
    truth: GroundTruth
    centroid_features: dict | None = None
    angulation_features: dict | None = None  # six anatomy features; SA init added per stage
    rois: dict | None = None
    extras: dict = field(default_factory=dict)

    @property
    def is_original(self) -> bool:
        return self.snr_tag is None

    def to_dict(self) -> dict:
        d = {
            "patient_id": self.patient_id,
            "volume": self.volume_path,
            "snr_tag": self.snr_tag,
            "truth": self.truth.to_dict(),
        }
        if self.rois is not None:
            d["rois"] = self.rois
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "Case":
        vol = d.get("volume")
        if vol is not None and base_dir is not None and not Path(vol).is_absolute():
            vol = str(Path(base_dir) / vol)
        snr = d.get("snr_tag")
        return cls(
            patient_id=str(d["patient_id"]),
            snr_tag=None if snr is None else float(snr),
            volume_path=vol,
            truth=GroundTruth.from_dict(d["truth"]),
            rois=d.get("rois"),
        )

    def with_volume(self, path, snr_tag) -> "Case":
        return replace(self, volume_path=str(path), snr_tag=snr_tag)


def save_manifest(cases: list[Case], path) -> None:
    path = Path(path)
    entries = []
    for c in cases:
        d = c.to_dict()
        if d["volume"] is not None:
            try:
                d["volume"] = str(Path(d["volume"]).resolve().relative_to(path.parent.resolve()))
            except ValueError:
                pass
        entries.append(d)
    atomic_write_json(path, entries)


def load_manifest(path) -> list[Case]:
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError("manifest must be a JSON list of cases")
    return [Case.from_dict(e, base_dir=path.parent) for e in entries]


def grouped_kfold(cases: list[Case], k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Patient-grouped k-fold: every case follows its patient into exactly one test fold."""
    pids = sorted({c.patient_id for c in cases})
    if len(pids) < k:
        raise ValueError(f"{len(pids)} patients cannot fill {k} folds")
    if k < 2:
        raise ValueError("k must be >= 2")
    perm = np.random.default_rng(seed).permutation(len(pids))
    groups = np.array_split(perm, k)
    fold_of = {pids[i]: f for f, grp in enumerate(groups) for i in grp}
    assign = np.array([fold_of[c.patient_id] for c in cases])
    idx = np.arange(len(cases))
    return [(idx[assign != f], idx[assign == f]) for f in range(k)]
