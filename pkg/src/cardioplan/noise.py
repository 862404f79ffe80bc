"""Controlled-SNR degradation with multi-coil RSS (Rician / chi) noise."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .volume import BoxRoi, Volume, roi_stats

log = logging.getLogger(__name__)

DEFAULT_TARGETS = (30.0, 25.0, 20.0, 15.0, 10.0)


class DegenerateInputError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SnrSpec:
    targets: tuple[float, ...] = DEFAULT_TARGETS
    tolerance_frac: float = 0.05
    # None -> 0.1 * mean(signal) / target, resolved per target
    sigma_step: float | None = None
    max_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        t = tuple(float(x) for x in self.targets)
        object.__setattr__(self, "targets", t)
        if any(x <= 0 for x in t) or any(a <= b for a, b in zip(t, t[1:])):
            raise ValueError(f"targets must be positive and strictly decreasing: {t}")
        if not 0 < self.tolerance_frac < 1:
            raise ValueError("tolerance_frac must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.sigma_step is not None and self.sigma_step <= 0:
            raise ValueError("sigma_step must be positive")


@dataclass(frozen=True)
class SnrRois:
    signal: BoxRoi
    background: BoxRoi

    def __post_init__(self):
        if self.signal.overlaps(self.background):
            raise ValueError("signal and background ROIs overlap")

    def to_dict(self) -> dict:
        return {"signal": self.signal.to_list(), "background": self.background.to_list()}

    @classmethod
    def from_dict(cls, d) -> "SnrRois":
        return cls(BoxRoi.from_list(d["signal"]), BoxRoi.from_list(d["background"]))


def chi_mean(n_coils: int, sigma: float = 1.0) -> float:
    """Mean of sqrt(sum of 2n squared N(0, sigma^2) draws)."""
    return float(sigma * np.sqrt(2.0) * np.exp(gammaln(n_coils + 0.5) - gammaln(n_coils)))


def chi_std(n_coils: int, sigma: float = 1.0) -> float:
    m = chi_mean(n_coils, 1.0)
    return float(sigma * np.sqrt(2.0 * n_coils - m * m))


def _unit_rss(shape, n_coils: int, key) -> np.ndarray:
    # Philox is counter based: any voxel block can be regenerated independently
    # from (key, offset), so the field does not depend on evaluation schedule.
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
    acc = np.zeros(shape, dtype=np.float64)
    for _ in range(n_coils):
        re = rng.standard_normal(shape)
        acc += re * re
        im = rng.standard_normal(shape)
        acc += im * im
    return np.sqrt(acc)


def rss_noise_field(dims, sigma: float, n_coils: int, seed: int, iteration: int = 0) -> Volume:
    """Magnitude of ``n_coils`` complex Gaussian channels, combined by root-sum-of-squares.

    With one coil the voxels are Rayleigh(sigma); in general they follow a
    scaled chi distribution with 2 * n_coils degrees of freedom.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    nx, ny, nz = (int(d) for d in dims)
    field_ = sigma * _unit_rss((nz, ny, nx), n_coils, [int(seed), int(iteration)])
    return Volume.from_array(field_, (1.0, 1.0, 1.0))


def measure_snr(v: Volume, rois: SnrRois) -> float:
    mean_sig, _ = roi_stats(v, rois.signal)
    _, sd_bg = roi_stats(v, rois.background)
    if sd_bg <= 0:
        raise DegenerateInputError("background ROI has zero standard deviation; SNR is unbounded")
    return mean_sig / sd_bg


def acceleration_headroom(snr_orig: float, snr_new: float) -> float:
    """Acquisition speed-up allowed by an SNR drop, using SNR ~ sqrt(acquisition time)."""
    if not (snr_orig > 0 and snr_new > 0):
        raise ValueError("SNR values must be positive")
    return (snr_orig / snr_new) ** 2


def _level_key(spec: SnrSpec, target: float, patient_id: str) -> list[int]:
    return [int(spec.seed), int(round(target * 1000)), zlib.crc32(patient_id.encode())]


def degrade_to_snr(v: Volume, target: float, rois: SnrRois, spec: SnrSpec = SnrSpec()) -> Volume:
    """Add RSS noise to ``v`` until its measured SNR is within tolerance of ``target``.

    One unit-sigma RSS realization is drawn per (seed, target, patient); each
    iteration adds a further ``sigma_step`` of it, and the last step is refined
    by bisection on the total sigma. Summing fresh independent fields instead
    would inflate the signal mean faster than the background spread and can
    stall above low targets.
    """
    current = measure_snr(v, rois)
    if target >= current:
        raise ValueError(f"target SNR {target} is not below current SNR {current:.3f}")
    tol = spec.tolerance_frac
    lo_ok, hi_ok = target * (1 - tol), target * (1 + tol)
    aim = tol * target * 0.25

    base = v.data.astype(np.float64)
    unit = _unit_rss(base.shape, v.meta.n_coils, _level_key(spec, target, v.meta.patient_id))
    sb, ss = rois.background.slices, rois.signal.slices
    b_bg, u_bg = base[sb].ravel(), unit[sb].ravel()
    b_sig_mean, u_sig_mean = base[ss].mean(), unit[ss].mean()

    def snr_at(sigma: float) -> float:
        sd = np.std(b_bg + sigma * u_bg)
        return np.inf if sd == 0 else (b_sig_mean + sigma * u_sig_mean) / sd

    step = spec.sigma_step or 0.1 * b_sig_mean / target
    prev, sigma, iters = 0.0, 0.0, 0
    while True:
        iters += 1
        if iters > spec.max_iters:
            raise ConvergenceError(f"no sigma reached SNR {target} within {spec.max_iters} iterations")
        sigma = prev + step
        s = snr_at(sigma)
        if s > target + aim:
            prev = sigma
            continue
        break

    lo_s, hi_s = prev, sigma
    while abs(s - target) > aim:
        iters += 1
        if iters > spec.max_iters:
            if lo_ok <= s <= hi_ok:
                break
            raise ConvergenceError(f"bisection for SNR {target} did not converge")
        mid = 0.5 * (lo_s + hi_s)
        s = snr_at(mid)
        sigma = mid
        if s > target:
            lo_s = mid
        else:
            hi_s = mid

    out = (base + sigma * unit).astype(np.float32)
    degraded = v.with_data(out)
    measured = measure_snr(degraded, rois)
    if not lo_ok <= measured <= hi_ok:
        raise ConvergenceError(f"measured SNR {measured:.3f} outside tolerance of {target}")
    log.debug("SNR %.2f -> %.3f (target %g, sigma %.4g, %d iters)", current, measured, target, sigma, iters)
    return v.with_data(
        out,
        snr_tag=float(measured),
        provenance=f"{v.meta.provenance}|rss(n={v.meta.n_coils},sigma={sigma:.6g})".lstrip("|"),
    )


def snr_ladder(v: Volume, rois: SnrRois, spec: SnrSpec = SnrSpec()) -> list[Volume]:
    """One degraded copy of the original per target, not chained."""
    if not spec.targets:
        return []
    current = measure_snr(v, rois)
    if current <= spec.targets[0]:
        raise ValueError(f"volume SNR {current:.3f} is not above the highest target {spec.targets[0]}")
    return [degrade_to_snr(v, t, rois, spec) for t in spec.targets]
