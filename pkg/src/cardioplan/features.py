"""Patient-level anatomy features from an axial localizer volume."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geometry import PlaneAngles, initial_short_axis
from .segmentation import Connectivity, SegParams, component_at, segment_image
from .volume import BoundsError, BoxRoi, PhysicalPoint, Volume

log = logging.getLogger(__name__)

CENTROID_FEATURES = (
    "torso_height_mm",
    "torso_width_mm",
    "left_lung_x",
    "left_lung_y",
    "left_lung_z",
    "right_lung_x",
    "right_lung_y",
    "right_lung_z",
)
ANATOMY_FEATURES = (
    "torso_height_mm",
    "torso_width_mm",
    "torso_aspect",
    "torso_area_mm2",
    "fat_fraction",
    "lung_size_ratio",
)
ANGULATION_FEATURES = ANATOMY_FEATURES + ("sa_init_azimuth_deg", "sa_init_elevation_deg")

# lung segmentation runs on the tissue-air normalized image, so k is in contrast units
LUNG_SEG = SegParams(k_threshold=3.0, min_size=50, presmooth_sigma=0.0)
# the pool is segmented on the image divided by the smoothed seed intensity,
# so k is in units of pool brightness
POOL_SEG = SegParams(k_threshold=1.4, min_size=10, presmooth_sigma=0.0)
SHELL_FRAC = 0.15
POOL_SEARCH_MM = 12.0


class AnatomyNotFound(RuntimeError):
    pass


@dataclass(frozen=True)
class CentroidFeatures:
    torso_height_mm: float
    torso_width_mm: float
    left_lung_centroid: PhysicalPoint
    right_lung_centroid: PhysicalPoint

    def as_dict(self) -> dict[str, float]:
        l, r = self.left_lung_centroid, self.right_lung_centroid
        vals = (self.torso_height_mm, self.torso_width_mm, l.x, l.y, l.z, r.x, r.y, r.z)
        return dict(zip(CENTROID_FEATURES, (float(v) for v in vals)))

    def as_vector(self) -> np.ndarray:
        return np.array(list(self.as_dict().values()))


@dataclass(frozen=True)
class AngulationFeatures:
    torso_height_mm: float
    torso_width_mm: float
    torso_aspect: float
    torso_area_mm2: float
    fat_fraction: float
    lung_size_ratio: float
    sa_init_azimuth_deg: float
    sa_init_elevation_deg: float

    def __post_init__(self):
        if not 0.0 <= self.fat_fraction <= 1.0:
            raise ValueError("fat_fraction must lie in [0, 1]")
        if not (self.lung_size_ratio > 0 and self.torso_aspect > 0):
            raise ValueError("lung_size_ratio and torso_aspect must be positive")

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}

    def as_vector(self) -> np.ndarray:
        return np.array(list(self.as_dict().values()))


def otsu_threshold(values) -> float:
    """Otsu's between-class-variance threshold over a 256-bin histogram."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = vals.min(), vals.max()
    if lo == hi:
        return float(lo)
    hist, edges = np.histogram(vals, bins=256, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(edges[int(np.argmax(between[:-1])) + 1])


def torso_bbox(v: Volume) -> BoxRoi:
    """Bounding box of the body on the mid-stack axial slice, extruded over all slices."""
    sl = v.axial_slice(v.dims[2] // 2).astype(np.float64)
    if sl.max() <= sl.min():
        raise AnatomyNotFound("flat mid-stack slice; no body outline")
    body = sl > otsu_threshold(sl)
    lab, n = ndimage.label(body)
    if n == 0:
        raise AnatomyNotFound("no above-threshold region on the mid-stack slice")
    sizes = np.bincount(lab.ravel())[1:]
    rows, cols = np.nonzero(lab == int(np.argmax(sizes)) + 1)
    return BoxRoi((cols.min(), rows.min(), 0), (cols.max() + 1, rows.max() + 1, v.dims[2]))


def torso_dims(b: BoxRoi, spacing) -> tuple[float, float]:
    """(width, height) in mm; height is the anterior-posterior (y) extent."""
    ex, ey, _ = b.shape_xyz
    return ex * float(spacing[0]), ey * float(spacing[1])


def lung_centroids(v: Volume, torso: BoxRoi, p: SegParams = LUNG_SEG):
    """Centroids (mm) and voxel counts of the two largest dark segments inside the torso box."""
    torso.check_within(v.dims)
    img = v.data.astype(np.float64)
    # air outside the body never qualifies (it leaves the box), so the gate
    # only has to reject tissue. Air plus lungs and the fat shell each fill
    # less than half the box, so its median is muscle; the gate sits halfway
    # between that and the air level outside the box, which tracks the
    # noise floor as SNR drops.
    inside = np.zeros(img.shape, bool)
    inside[torso.slices] = True
    tissue = float(np.median(img[inside]))
    air = float(np.median(img[~inside])) if (~inside).any() else float(img[inside].min())
    if not tissue > air:
        raise AnatomyNotFound("torso box is no brighter than the air around it")
    # segment in units of the tissue-air contrast so the partition, and with
    # it every lung feature, is invariant to affine intensity changes
    norm = (img - air) / (tissue - air)
    labels = segment_image(norm, p, Connectivity.SIX_3D).labels
    n_lab = int(labels.max()) + 1
    flat = labels.ravel()
    size = np.bincount(flat, minlength=n_lab)
    mean = np.bincount(flat, weights=norm.ravel(), minlength=n_lab) / np.maximum(size, 1)
    thr = 0.5
    outside_count = np.bincount(flat[~inside.ravel()], minlength=n_lab)
    ok = np.nonzero((size > 0) & (outside_count == 0) & (mean < thr))[0]
    if ok.size < 2:
        raise AnatomyNotFound(f"found {ok.size} dark segments inside the torso, need two lungs")
    top = sorted(ok.tolist(), key=lambda i: (-size[i], i))[:2]
    zz, yy, xx = np.indices(img.shape)
    cents = []
    for cid in top:
        m = labels == cid
        cents.append(np.array([xx[m].mean(), yy[m].mean(), zz[m].mean()]) * np.array(v.spacing))
    # larger x is patient left
    (li, lc), (ri, rc) = sorted(zip(top, cents), key=lambda t: -t[1][0])
    return PhysicalPoint.from_array(lc), PhysicalPoint.from_array(rc), int(size[li]), int(size[ri])


def _shell_mask(torso: BoxRoi, frac: float = SHELL_FRAC) -> np.ndarray:
    ex, ey, ez = torso.shape_xyz
    bx, by = max(1, int(round(frac * ex))), max(1, int(round(frac * ey)))
    shell = np.ones((ez, ey, ex), bool)
    shell[:, by : ey - by, bx : ex - bx] = False
    return shell


def fat_fraction(v: Volume, torso: BoxRoi) -> float:
    """Fraction of the torso box's peripheral shell brighter than the fat threshold.

    The threshold sits halfway between the 75th percentile of the box core
    (muscle-dominated) and the 99th percentile of the shell (fat), so the
    result is invariant to intensity scaling and is 0 for a constant torso.
    """
    torso.check_within(v.dims)
    box = v.data[torso.slices].astype(np.float64)
    shell = _shell_mask(torso)
    core_vals, shell_vals = box[~shell], box[shell]
    if core_vals.size == 0:
        core_vals = shell_vals
    t = 0.5 * (np.percentile(core_vals, 75) + np.percentile(shell_vals, 99))
    return float(np.count_nonzero(shell_vals > t) / shell_vals.size)


def pool_seed(v: Volume, lv_centroid: PhysicalPoint, radius_mm: float = POOL_SEARCH_MM) -> tuple[int, int, int]:
    """Brightest lightly smoothed voxel within ``radius_mm`` of the centroid on its axial slice.

    A predicted centroid can miss the pool by a few millimetres and land on
    the myocardium; the blood pool is the brightest structure in its
    neighbourhood, so the seed moves there.
    """
    nx, ny, _ = v.dims
    x, y, z = _rint_index(v, lv_centroid)
    if not v.contains_index((x, y, z)):
        raise BoundsError(f"LV centroid {lv_centroid} lies outside the volume")
    sl = ndimage.gaussian_filter(v.axial_slice(z).astype(np.float64), 1.0, mode="nearest")
    rx = max(1, int(np.ceil(radius_mm / v.spacing[0])))
    ry = max(1, int(np.ceil(radius_mm / v.spacing[1])))
    x0, x1 = max(0, x - rx), min(nx, x + rx + 1)
    y0, y1 = max(0, y - ry), min(ny, y + ry + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = ((xx - x) * v.spacing[0]) ** 2 + ((yy - y) * v.spacing[1]) ** 2 <= radius_mm**2
    win = np.where(inside, sl[y0:y1, x0:x1], -np.inf)
    iy, ix = np.unravel_index(int(np.argmax(win)), win.shape)
    return x0 + int(ix), y0 + int(iy), z


def _rint_index(v: Volume, p: PhysicalPoint) -> tuple[int, int, int]:
    return tuple(int(np.rint(c / s)) for c, s in zip(p.as_array(), v.spacing))


def _pool_frame(v: Volume, lv_centroid: PhysicalPoint) -> tuple[Volume, tuple[int, int, int]]:
    """The volume scaled so the smoothed seed voxel has intensity one, and the seed."""
    x, y, z = pool_seed(v, lv_centroid)
    sl = ndimage.gaussian_filter(v.axial_slice(z).astype(np.float64), 1.0, mode="nearest")
    ref = float(sl[y, x])
    if not ref > 0.0:
        ref = 1.0  # dark seed (air); there is no pool brightness to measure against
    return v.with_data(v.data / ref), (x, y, z)


def _pool_indices(v: Volume, seed, p: SegParams) -> np.ndarray:
    x, y, z = seed
    mask = component_at(v.axial_slice(z), (x, y), p)
    rows, cols = np.nonzero(mask)
    return np.column_stack([cols, rows, np.full(rows.size, z)])


def lv_bloodpool(v: Volume, lv_centroid: PhysicalPoint, p: SegParams = POOL_SEG) -> np.ndarray:
    """(x, y, z) voxel indices of the axial-slice segment holding the pool near the LV centroid."""
    scaled, seed = _pool_frame(v, lv_centroid)
    return _pool_indices(scaled, seed, p)


def short_axis_init(v: Volume, lv_centroid: PhysicalPoint, p: SegParams = POOL_SEG) -> PlaneAngles:
    """Geometric short-axis estimate from the pool found near ``lv_centroid``."""
    scaled, seed = _pool_frame(v, lv_centroid)
    pool = _pool_indices(scaled, seed, p)
    return initial_short_axis(pool, seed[2], scaled, p)


@dataclass(frozen=True)
class AnatomySummary:
    """Everything the feature records need, computed once per volume."""

    torso: BoxRoi
    width_mm: float
    height_mm: float
    left_lung: PhysicalPoint
    right_lung: PhysicalPoint
    left_size: int
    right_size: int
    fat_fraction: float

    def centroid_features(self) -> CentroidFeatures:
        return CentroidFeatures(self.height_mm, self.width_mm, self.left_lung, self.right_lung)

    def anatomy_values(self) -> dict[str, float]:
        return {
            "torso_height_mm": self.height_mm,
            "torso_width_mm": self.width_mm,
            "torso_aspect": self.width_mm / self.height_mm,
            "torso_area_mm2": self.width_mm * self.height_mm,
            "fat_fraction": self.fat_fraction,
            "lung_size_ratio": self.left_size / self.right_size,
        }

    def angulation_features(self, sa_init: PlaneAngles) -> AngulationFeatures:
        return AngulationFeatures(**self.anatomy_values(), sa_init_azimuth_deg=sa_init.azimuth_deg,
                                  sa_init_elevation_deg=sa_init.elevation_deg)


def summarize_anatomy(v: Volume) -> AnatomySummary:
    box = torso_bbox(v)
    w, h = torso_dims(box, v.spacing)
    if not (w > 0 and h > 0):
        raise AnatomyNotFound("degenerate torso box")
    left, right, ls, rs = lung_centroids(v, box)
    return AnatomySummary(box, w, h, left, right, ls, rs, fat_fraction(v, box))


def centroid_features(v: Volume) -> CentroidFeatures:
    return summarize_anatomy(v).centroid_features()


def angulation_features(v: Volume, sa_init: PlaneAngles) -> AngulationFeatures:
    return summarize_anatomy(v).angulation_features(sa_init)


__all__ = [
    "ANATOMY_FEATURES",
    "ANGULATION_FEATURES",
    "CENTROID_FEATURES",
    "AnatomyNotFound",
    "AnatomySummary",
    "AngulationFeatures",
    "BoundsError",
    "CentroidFeatures",
    "angulation_features",
    "centroid_features",
    "fat_fraction",
    "lung_centroids",
    "lv_bloodpool",
    "otsu_threshold",
    "pool_seed",
    "short_axis_init",
    "summarize_anatomy",
    "torso_bbox",
    "torso_dims",
]
