"""Parametric torso / lung / left-ventricle phantoms with exact plane ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataset import Case, GroundTruth
from .geometry import PlaneAngles, angles_to_normal, normal_to_angles
from .noise import SnrRois
from .volume import BoxRoi, PhysicalPoint, Volume, VolumeMeta

AIR, LUNG, MUSCLE, WALL, BLOOD, FAT = 0.0, 60.0, 320.0, 380.0, 700.0, 760.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]  # mm
    semi_axes: tuple[float, float, float]  # mm, axis aligned
    intensity: float = LUNG


@dataclass(frozen=True)
class LvSpec:
    center: tuple[float, float, float]
    axis: PlaneAngles  # long-axis direction, canonical
    long_semi: float = 40.0
    short_semi: float = 18.0
    blood_intensity: float = BLOOD
    wall_thickness: float = 6.0
    wall_intensity: float = WALL


@dataclass(frozen=True)
class PhantomSpec:
    patient_id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    torso_center: tuple[float, float]  # (x, y) mm; the torso spans all slices
    torso_semi_axes: tuple[float, float]  # (lateral, anterior-posterior) mm
    fat_thickness: float
    left_lung: EllipsoidSpec
    right_lung: EllipsoidSpec
    lv: LvSpec
    torso_intensity: float = MUSCLE
    fat_intensity: float = FAT
    noise_floor_frac: float = 0.01
    n_coils: int = 4
    ch2_axial_planned: bool = False
    seed: int = 0

    def __post_init__(self):
        intens = [AIR, self.left_lung.intensity, self.torso_intensity, self.lv.blood_intensity, self.fat_intensity]
        if not (intens[0] < intens[1] < intens[2] < intens[3] <= intens[4]):
            raise PhantomError("intensities must satisfy air < lung < muscle < blood <= fat")
        if self.right_lung.intensity != self.left_lung.intensity:
            raise PhantomError("both lungs share one intensity")
        if self.fat_thickness < 0 or self.fat_thickness >= min(self.torso_semi_axes):
            raise PhantomError("fat shell thickness out of range")


# -- analytic truth ---------------------------------------------------------

def plane_truths(lv_axis: PlaneAngles, ch2_axial_planned: bool = False):
    """SA, 4CH and 2CH plane angles implied by an LV long axis.

    SA has the long axis as normal. 4CH contains the long axis and the
    left-right (x) direction; 2CH contains the long axis and is orthogonal to 4CH.
    """
    d = angles_to_normal(lv_axis).as_array()
    n4 = np.cross(d, [1.0, 0.0, 0.0])
    n2 = np.cross(d, n4)
    ch2 = PlaneAngles(0.0, 90.0) if ch2_axial_planned else normal_to_angles(n2)
    return normal_to_angles(d), normal_to_angles(n4), ch2


def ground_truth(spec: PhantomSpec) -> GroundTruth:
    sa, ch4, ch2 = plane_truths(spec.lv.axis, spec.ch2_axial_planned)
    return GroundTruth(PhysicalPoint(*spec.lv.center), sa, ch4, ch2, spec.ch2_axial_planned)


# -- rasterization ----------------------------------------------------------

def _grid(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    z, y, x = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij")
    return x, y, z


def _ellipsoid_mask(x, y, z, e: EllipsoidSpec) -> np.ndarray:
    (cx, cy, cz), (a, b, c) = e.center, e.semi_axes
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0


def _oriented_mask(x, y, z, center, axis_vec, long_semi, short_semi) -> np.ndarray:
    px, py, pz = x - center[0], y - center[1], z - center[2]
    along = px * axis_vec[0] + py * axis_vec[1] + pz * axis_vec[2]
    perp2 = px * px + py * py + pz * pz - along * along
    return (along / long_semi) ** 2 + perp2 / short_semi**2 <= 1.0


def anatomy_masks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    x, y, z = _grid(spec)
    (cx, cy), (a, b) = spec.torso_center, spec.torso_semi_axes
    torso = ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 <= 1.0
    t = spec.fat_thickness
    inner = ((x - cx) / (a - t)) ** 2 + ((y - cy) / (b - t)) ** 2 <= 1.0
    d = angles_to_normal(spec.lv.axis).as_array()
    lv = spec.lv
    wall = _oriented_mask(x, y, z, lv.center, d, lv.long_semi + lv.wall_thickness, lv.short_semi + lv.wall_thickness)
    blood = _oriented_mask(x, y, z, lv.center, d, lv.long_semi, lv.short_semi)
    return {
        "torso": torso,
        "fat": torso & ~inner,
        "left_lung": _ellipsoid_mask(x, y, z, spec.left_lung),
        "right_lung": _ellipsoid_mask(x, y, z, spec.right_lung),
        "lv_wall": wall & ~blood,
        "lv_blood": blood,
    }


def snr_rois(spec: PhantomSpec) -> SnrRois:
    nx, ny, nz = spec.dims
    sx, sy, _ = spec.spacing
    (cx, cy), (a, b) = spec.torso_center, spec.torso_semi_axes
    lo = (int(round((cx - 0.4 * a) / sx)), int(round((cy - 0.4 * b) / sy)), nz // 4)
    hi = (int(round((cx + 0.4 * a) / sx)), int(round((cy + 0.4 * b) / sy)), max(nz - nz // 4, nz // 4 + 1))
    corner = max(3, min(nx, ny) // 12)
    return SnrRois(signal=BoxRoi(lo, hi), background=BoxRoi((0, 0, 0), (corner, corner, nz)))


def validate(spec: PhantomSpec, masks: dict[str, np.ndarray] | None = None) -> None:
    masks = masks if masks is not None else anatomy_masks(spec)
    torso = masks["torso"]
    heart = masks["lv_wall"] | masks["lv_blood"]
    for name in ("left_lung", "right_lung"):
        m = masks[name]
        if not m.any():
            raise PhantomError(f"{name} is empty")
        if (m & ~torso).any() or (m & masks["fat"]).any():
            raise PhantomError(f"{name} leaves the torso interior")
        if (m & heart).any():
            raise PhantomError(f"{name} overlaps the left ventricle")
    if (masks["left_lung"] & masks["right_lung"]).any():
        raise PhantomError("lungs overlap")
    if (heart & ~torso).any() or (heart & masks["fat"]).any():
        raise PhantomError("left ventricle leaves the torso interior")
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ci = np.floor(np.array(spec.lv.center) / np.array([sx, sy, sz]) + 0.5).astype(int)
    if not (0 <= ci[0] < nx and 0 <= ci[1] < ny and 0 <= ci[2] < nz):
        raise PhantomError("LV centre outside the volume")
    bg = snr_rois(spec).background
    if torso[bg.slices].any():
        raise PhantomError("background ROI touches the torso")


def generate(spec: PhantomSpec) -> tuple[Volume, GroundTruth, SnrRois]:
    masks = anatomy_masks(spec)
    validate(spec, masks)
    img = np.zeros(masks["torso"].shape)
    img[masks["torso"]] = spec.torso_intensity
    img[masks["fat"]] = spec.fat_intensity
    img[masks["left_lung"]] = spec.left_lung.intensity
    img[masks["right_lung"]] = spec.right_lung.intensity
    img[masks["lv_wall"]] = spec.lv.wall_intensity
    img[masks["lv_blood"]] = spec.lv.blood_intensity

    # magnitude of a single complex channel keeps the floor Rician and non-negative
    sigma = spec.noise_floor_frac * spec.lv.blood_intensity
    rng = np.random.default_rng([spec.seed, 0x50484E54])
    n_re = rng.standard_normal(img.shape)
    n_im = rng.standard_normal(img.shape)
    img = np.hypot(img + sigma * n_re, sigma * n_im)

    meta = VolumeMeta(patient_id=spec.patient_id, n_coils=spec.n_coils, snr_tag=None, provenance="phantom")
    return Volume.from_array(img, spec.spacing, meta), ground_truth(spec), snr_rois(spec)


# -- populations ------------------------------------------------------------

@dataclass(frozen=True)
class PopulationRanges:
    """Uniform sampling ranges; zero-width ranges pin a quantity."""

    dims: tuple[int, int, int] = (112, 112, 28)
    spacing: tuple[float, float, float] = (4.0, 4.0, 8.0)
    torso_scale: tuple[float, float] = (0.8, 1.2)
    torso_aspect: tuple[float, float] = (-0.06, 0.06)
    torso_shift_mm: tuple[float, float] = (-12.0, 12.0)
    # patient position along the table; moves lungs and heart together in z
    table_shift_mm: tuple[float, float] = (-16.0, 16.0)
    lv_azimuth: tuple[float, float] = (115.0, 155.0)
    lv_elevation: tuple[float, float] = (25.0, 50.0)
    lung_asymmetry: tuple[float, float] = (0.75, 0.95)
    fat_thickness_mm: tuple[float, float] = (6.0, 20.0)
    lv_jitter_mm: tuple[float, float] = (-4.0, 4.0)
    lv_short_semi_mm: tuple[float, float] = (16.0, 20.0)
    ch2_axial_fraction: float = 0.0
    n_coils: int = 4

    def __post_init__(self):
        if not 0.0 <= self.ch2_axial_fraction <= 1.0:
            raise ValueError("ch2_axial_fraction must lie in [0, 1]")
        if self.n_coils < 1:
            raise ValueError("n_coils must be >= 1")
        for name, val in asdict(self).items():
            if isinstance(val, tuple) and len(val) == 2 and val[0] > val[1]:
                raise ValueError(f"range {name} has lo > hi")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "PopulationRanges":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown range key(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _draw(rng, bounds) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _spec_from_draws(pid: str, r: PopulationRanges, dr: dict, seed: int) -> PhantomSpec:
    nx, ny, nz = r.dims
    sx, sy, sz = r.spacing
    cx = nx * sx / 2 + dr["shift_x"]
    cy = ny * sy / 2 + dr["shift_y"]
    cz = (nz - 1) * sz / 2 + dr["shift_z"]
    a = 150.0 * dr["scale"] * (1 + dr["aspect"])
    b = 100.0 * dr["scale"] * (1 - dr["aspect"])
    asym = dr["asym"]
    right = EllipsoidSpec((cx - 0.50 * a, cy + 0.12 * b, cz + 12.0), (0.25 * a, 0.46 * b, 78.0))
    left = EllipsoidSpec(
        (cx + 0.54 * a, cy + 0.16 * b, cz + 12.0),
        (0.23 * a * asym, 0.44 * b * asym, 72.0 * asym),
    )
    lv_center = (
        cx + 0.10 * a + dr["jx"],
        cy - 0.26 * b + dr["jy"],
        cz - 18.0 + dr["jz"],
    )
    short = dr["short"]
    lv = LvSpec(lv_center, PlaneAngles.canonical(dr["az"], dr["el"]), long_semi=2.1 * short, short_semi=short)
    return PhantomSpec(
        patient_id=pid,
        dims=tuple(r.dims),
        spacing=tuple(r.spacing),
        torso_center=(cx, cy),
        torso_semi_axes=(a, b),
        fat_thickness=dr["fat"],
        left_lung=left,
        right_lung=right,
        lv=lv,
        n_coils=r.n_coils,
        ch2_axial_planned=dr["axial"],
        seed=seed,
    )


def sample_population(
    n: int, ranges: PopulationRanges = PopulationRanges(), seed: int = 0, validate_specs: bool = True
):
    """``n`` phantom specs with unique patient ids, paired with truth-only cases.

    Draws whose anatomy breaks a phantom invariant are redrawn when
    ``validate_specs`` is set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 0x504F50])
    out = []
    for i in range(n):
        pid = f"P{seed:04d}_{i:03d}"
        for _attempt in range(100):
            spec = _spec_from_draws(pid, ranges, _draw_all(rng, ranges), seed=int(rng.integers(2**31)))
            if not validate_specs:
                break
            try:
                validate(spec)
                break
            except PhantomError:
                continue
        else:
            raise PhantomError(f"could not draw a valid phantom for {pid}; ranges too wide")
        out.append((spec, Case(pid, None, None, ground_truth(spec))))
    return out


def _draw_all(rng, ranges: PopulationRanges) -> dict:
    return {
        "scale": _draw(rng, ranges.torso_scale),
        "aspect": _draw(rng, ranges.torso_aspect),
        "shift_x": _draw(rng, ranges.torso_shift_mm),
        "shift_y": _draw(rng, ranges.torso_shift_mm),
        "az": _draw(rng, ranges.lv_azimuth),
        "el": _draw(rng, ranges.lv_elevation),
        "asym": _draw(rng, ranges.lung_asymmetry),
        "fat": _draw(rng, ranges.fat_thickness_mm),
        "jx": _draw(rng, ranges.lv_jitter_mm),
        "jy": _draw(rng, ranges.lv_jitter_mm),
        "jz": _draw(rng, ranges.lv_jitter_mm),
        "short": _draw(rng, ranges.lv_short_semi_mm),
        "axial": bool(rng.uniform() < ranges.ch2_axial_fraction),
        "shift_z": _draw(rng, ranges.table_shift_mm),
    }


def translated(spec: PhantomSpec, dx_mm: float = 0.0, dy_mm: float = 0.0, dz_mm: float = 0.0) -> PhantomSpec:
    def shift(c):
        return (c[0] + dx_mm, c[1] + dy_mm, c[2] + dz_mm)

    return replace(
        spec,
        torso_center=(spec.torso_center[0] + dx_mm, spec.torso_center[1] + dy_mm),
        left_lung=replace(spec.left_lung, center=shift(spec.left_lung.center)),
        right_lung=replace(spec.right_lung, center=shift(spec.right_lung.center)),
        lv=replace(spec.lv, center=shift(spec.lv.center)),
    )
