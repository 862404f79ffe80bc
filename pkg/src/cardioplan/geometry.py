"""Plane-angle algebra, direct ellipse fitting and the geometric short-axis estimate.

Angle convention: azimuth is measured in the axial plane from +x toward +y,
elevation from the axial plane toward +z. Planes are unoriented, so normals are
canonicalized onto the uz >= 0 hemisphere; a vertical normal has azimuth 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .segmentation import SegParams, component_at
from .volume import Volume

log = logging.getLogger(__name__)

_VERTICAL_EPS = 1e-12


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneAngles:
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        if not (0.0 <= self.azimuth_deg < 360.0 and 0.0 <= self.elevation_deg <= 90.0):
            raise ValueError(f"non-canonical angles ({self.azimuth_deg}, {self.elevation_deg})")
        if self.elevation_deg == 90.0 and self.azimuth_deg != 0.0:
            raise ValueError("vertical normals carry azimuth 0")

    @classmethod
    def canonical(cls, azimuth_deg: float, elevation_deg: float) -> "PlaneAngles":
        """Canonical form of any (azimuth, elevation) pair, e.g. raw regression outputs."""
        return normal_to_angles(_direction(azimuth_deg, elevation_deg))

    def normal(self) -> np.ndarray:
        return angles_to_normal(self).as_array()

    def to_dict(self) -> dict:
        return {"azimuth_deg": self.azimuth_deg, "elevation_deg": self.elevation_deg}

    @classmethod
    def from_dict(cls, d) -> "PlaneAngles":
        return cls(float(d["azimuth_deg"]), float(d["elevation_deg"]))


@dataclass(frozen=True)
class UnitVector3:
    ux: float
    uy: float
    uz: float

    def __post_init__(self):
        if abs(math.sqrt(self.ux**2 + self.uy**2 + self.uz**2) - 1.0) > 1e-9:
            raise ValueError("UnitVector3 must have unit norm")

    @classmethod
    def normalized(cls, vec) -> "UnitVector3":
        a = np.asarray(vec, dtype=float)
        n = np.linalg.norm(a)
        if not n > 0:
            raise ValueError("zero vector has no direction")
        a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.ux, self.uy, self.uz])


@dataclass(frozen=True)
class Ellipse2D:
    center: tuple[float, float]
    semi_major: float
    semi_minor: float
    theta_deg: float

    def __post_init__(self):
        if not self.semi_major >= self.semi_minor > 0:
            raise ValueError("need semi_major >= semi_minor > 0")
        if not 0.0 <= self.theta_deg < 180.0:
            raise ValueError("theta_deg must lie in [0, 180)")

    @property
    def major_direction(self) -> np.ndarray:
        t = math.radians(self.theta_deg)
        return np.array([math.cos(t), math.sin(t)])

    def points(self, n: int = 64) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = math.cos(math.radians(self.theta_deg)), math.sin(math.radians(self.theta_deg))
        x, y = self.semi_major * np.cos(t), self.semi_minor * np.sin(t)
        return np.column_stack([self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])


def _direction(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


def angles_to_normal(a: PlaneAngles) -> UnitVector3:
    return UnitVector3.normalized(_direction(a.azimuth_deg, a.elevation_deg))


def normal_to_angles(n) -> PlaneAngles:
    vec = n.as_array() if isinstance(n, UnitVector3) else np.asarray(n, dtype=float)
    norm = np.linalg.norm(vec)
    if not norm > 0:
        raise ValueError("zero vector has no orientation")
    ux, uy, uz = vec / norm
    horiz = math.hypot(ux, uy)
    if horiz < _VERTICAL_EPS:
        return PlaneAngles(0.0, 90.0)
    if uz < 0 or (uz == 0 and (uy < 0 or (uy == 0 and ux < 0))):
        ux, uy, uz = -ux, -uy, -uz
    az = math.degrees(math.atan2(uy, ux)) % 360.0
    if az >= 360.0:
        az = 0.0
    el = math.degrees(math.atan2(uz, horiz))
    return PlaneAngles(az, min(max(el, 0.0), 90.0))


def angle3d(a: PlaneAngles, b: PlaneAngles) -> float:
    """Angle between two unoriented planes in degrees, in [0, 90]."""
    na, nb = a.normal(), b.normal()
    # atan2 of sine and cosine stays accurate near parallel, where acos does not
    s = float(np.linalg.norm(np.cross(na, nb)))
    c = abs(float(np.dot(na, nb)))
    return math.degrees(math.atan2(s, c))


def fit_ellipse(points) -> Ellipse2D:
    """Direct least-squares ellipse fit (Fitzgibbon, with the Halir-Flusser split).

    Points are centred and scaled before the fit for conditioning.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise FitError("need at least 6 points of shape (n, 2)")
    mean = pts.mean(axis=0)
    scale = np.sqrt(((pts - mean) ** 2).sum(axis=1).mean())
    if not scale > 0:
        raise FitError("degenerate point set")
    x, y = ((pts - mean) / scale).T

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise FitError("collinear or degenerate points")
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    # premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    m = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if ok.size == 0:
        raise FitError("no elliptical solution")
    a1 = evecs[:, ok[np.argmin(np.abs(np.real(evals[ok])))]]
    coef = np.concatenate([a1, t @ a1])
    return _conic_to_ellipse(coef, mean, scale)


def _conic_to_ellipse(coef, shift, scale) -> Ellipse2D:
    A, B, C, D, E, F = coef
    q = np.array([[A, B / 2], [B / 2, C]])
    try:
        cx, cy = np.linalg.solve(2 * q, [-D, -E])
    except np.linalg.LinAlgError as exc:
        raise FitError("conic has no centre") from exc
    f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F
    lam, vec = np.linalg.eigh(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        axes = np.sqrt(-f0 / lam)
    if not np.all(np.isfinite(axes)) or np.any(axes <= 0):
        raise FitError("conic is not an ellipse")
    i_major = int(np.argmax(axes))
    major, minor = axes[i_major], axes[1 - i_major]
    vx, vy = vec[:, i_major]
    theta = math.degrees(math.atan2(vy, vx)) % 180.0
    if theta >= 180.0:
        theta = 0.0
    return Ellipse2D(
        (float(cx * scale + shift[0]), float(cy * scale + shift[1])),
        float(major * scale),
        float(min(minor, major) * scale),
        float(theta),
    )


def mask_boundary_points(mask2d: np.ndarray) -> np.ndarray:
    """(row, col) indices of mask pixels with a four-neighbour outside the mask."""
    m = np.asarray(mask2d, bool)
    pad = np.pad(m, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return np.argwhere(m & ~interior)


def _slice_moments(mask2d: np.ndarray, spacing) -> tuple[float, np.ndarray, np.ndarray, Ellipse2D | None]:
    """Area (mm^2), centroid and 2x2 second moments of one pool cross-section.

    The moments come from the direct ellipse fit to the boundary when it
    succeeds, else from the raw pixel distribution.
    """
    sx, sy = spacing[0], spacing[1]
    rc = np.argwhere(mask2d)
    xy = np.column_stack([rc[:, 1] * sx, rc[:, 0] * sy])
    area = len(rc) * sx * sy
    bnd = mask_boundary_points(mask2d)
    try:
        ell = fit_ellipse(np.column_stack([bnd[:, 1] * sx, bnd[:, 0] * sy]))
    except FitError:
        ell = None
    if ell is not None:
        # boundary pixel centres sit half a pixel inside the true edge
        half = 0.25 * (sx + sy)
        a, b = ell.semi_major + half, ell.semi_minor + half
        u = ell.major_direction
        w = np.array([-u[1], u[0]])
        cov = (a * a / 4) * np.outer(u, u) + (b * b / 4) * np.outer(w, w)
        # guard against fits that wander far from the pixels they describe
        if np.linalg.norm(np.array(ell.center) - xy.mean(axis=0)) < 0.5 * a:
            return area, np.array(ell.center), cov, ell
    cov = np.cov(xy.T, bias=True) + np.diag([sx * sx, sy * sy]) / 12.0
    return area, xy.mean(axis=0), cov, None


def _track_pool(v: Volume, start_mask: np.ndarray, z0: int, step: int, p: SegParams,
                max_growth=2.5, min_rel_mean=0.8):
    """Follow the pool through successive slices from ``z0`` in direction ``step``.

    Tracking stops at the first slice whose segment under the previous
    centroid is implausible: too small, too large, touching the image edge,
    disjoint from the previous cross-section, or darker than ``min_rel_mean``
    times the seed pool (the apical and basal tips get absorbed into the
    myocardium once they shrink below the minimum segment size).
    """
    out = []
    ref_mean = float(v.axial_slice(z0)[start_mask].mean())
    prev = start_mask
    z = z0 + step
    while 0 <= z < v.dims[2]:
        rc = np.argwhere(prev)
        cy, cx = np.floor(rc.mean(axis=0) + 0.5).astype(int)
        img = v.axial_slice(z)
        mask = component_at(img, (cx, cy), p)
        n = int(mask.sum())
        touches_edge = mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
        if n < 3 or n > max_growth * prev.sum() or touches_edge or not (mask & prev).any():
            break
        if img[mask].mean() < min_rel_mean * ref_mean:
            break
        out.append((z, mask))
        prev = mask
        z += step
    return out


def initial_short_axis(pool, slice_z: int, v: Volume, p: SegParams | None = None) -> PlaneAngles:
    """Geometric short-axis estimate from the LV blood pool.

    ``pool`` holds (x, y, z) voxel indices of the pool on axial slice
    ``slice_z``. Each tracked cross-section is summarized by its fitted
    ellipse; the cross-sections are stacked in physical space and the
    principal component of the stack is the LV long axis, which is the
    short-axis plane normal.
    """
    p = p or SegParams()
    idx = np.asarray(pool, dtype=int).reshape(-1, 3)
    if idx.size == 0:
        raise FitError("empty blood pool")
    nx, ny, _ = v.dims
    mask0 = np.zeros((ny, nx), bool)
    mask0[idx[:, 1], idx[:, 0]] = True
    if len(mask_boundary_points(mask0)) < 6:
        raise FitError("blood pool too small for an ellipse fit")

    slices = [(slice_z, mask0)]
    slices += _track_pool(v, mask0, slice_z, -1, p)
    slices += _track_pool(v, mask0, slice_z, +1, p)

    sz = v.spacing[2]
    weights, centers, covs = [], [], []
    for z, m in slices:
        area, c, cov, ell = _slice_moments(m, v.spacing)
        if z == slice_z and ell is None:
            raise FitError("no ellipse fits the blood pool on the seed slice")
        weights.append(area * sz)
        centers.append(np.array([c[0], c[1], z * sz]))
        full = np.zeros((3, 3))
        full[:2, :2] = cov
        full[2, 2] = sz * sz / 12.0
        covs.append(full)
    w = np.array(weights) / np.sum(weights)
    centers = np.array(centers)
    mean = w @ centers
    total = sum(wi * (ci + np.outer(d, d)) for wi, ci, d in zip(w, covs, centers - mean))
    evals, evecs = np.linalg.eigh(total)
    axis = evecs[:, int(np.argmax(evals))]
    log.debug("short-axis estimate from %d slices: axis %s", len(slices), np.round(axis, 4))
    return normal_to_angles(axis)


def wrap_degrees(d):
    """Wrap angle differences onto [-180, 180)."""
    return (np.asarray(d, dtype=float) + 180.0) % 360.0 - 180.0


def mean_abs_deviation(pred, truth, angular: bool = False) -> float:
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"length mismatch or empty input ({p.size} vs {t.size})")
    d = p - t
    if angular:
        d = wrap_degrees(d)
    return float(np.mean(np.abs(d)))
