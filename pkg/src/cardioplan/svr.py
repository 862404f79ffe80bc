"""Epsilon-insensitive support vector regression with a Gaussian RBF kernel.

The dual is solved by a libsvm-style SMO over the 2l-variable formulation
(alpha and alpha* stacked, signs +1/-1), with working-set selection on the
maximal KKT violation and a second-order choice of the partner.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numba
import numpy as np

from .volume import atomic_write_json

DEFAULT_EPSILON = 0.1
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 100_000
_TAU = 1e-12


class TrainingError(ValueError):
    pass


class ModelSchemaError(ValueError):
    pass


class ModelInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class SvrParams:
    c_penalty: float
    gamma: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        vals = (self.c_penalty, self.gamma, self.epsilon)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("SVR parameters must be finite")
        if self.c_penalty <= 0 or self.gamma <= 0 or self.epsilon < 0:
            raise ValueError("need c_penalty > 0, gamma > 0, epsilon >= 0")

    def to_dict(self) -> dict:
        return {"c_penalty": self.c_penalty, "gamma": self.gamma, "epsilon": self.epsilon}


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ModelSchemaError("scaler mean/std length mismatch")
        if not np.all(self.std > 0):
            raise ModelInvariantError("scaler std must be positive")

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        if np.any(std <= 0):
            bad = np.nonzero(std <= 0)[0].tolist()
            raise TrainingError(f"constant selected feature(s) at columns {bad}")
        return cls(x.mean(axis=0), std)

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def rbf_kernel(x, y, gamma: float) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d.ravel(), d.ravel())))


@numba.njit(cache=True, nogil=True)
def _rbf_matrix(a, b, gamma):
    n, m, f = a.shape[0], b.shape[0], a.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(f):
                d = a[i, t] - b[j, t]
                s += d * d
            out[i, j] = math.exp(-gamma * s)
    return out


@numba.njit(cache=True, nogil=True)
def _smo(K, y, C, eps, tol, max_iter):
    """Solve min 1/2 b'Qb + p'b, s'b = 0, 0 <= b <= C over 2l variables.

    Returns (coef = alpha - alpha*, bias, objective of the maximization form, iterations).
    """
    l = y.size
    n = 2 * l
    beta = np.zeros(n)
    s = np.empty(n)
    G = np.empty(n)
    base = np.empty(n, np.int64)
    kd = np.empty(n)
    for i in range(l):
        s[i] = 1.0
        s[i + l] = -1.0
        G[i] = eps - y[i]
        G[i + l] = eps + y[i]
        base[i] = i
        base[i + l] = i
        kd[i] = K[i, i]
        kd[i + l] = K[i, i]
    # i: maximal -s_t G_t over I_up
    gmax = -np.inf
    bi = -1
    for t in range(n):
        if (s[t] > 0 and beta[t] < C) or (s[t] < 0 and beta[t] > 0):
            v = -s[t] * G[t]
            if v > gmax:
                gmax = v
                bi = t
    it = 0
    while it < max_iter and bi >= 0:
        # j: second-order gain over I_low among violators
        gmin = np.inf
        bj = -1
        obj_min = np.inf
        ki = K[base[bi]]
        kii = kd[bi]
        for t in range(n):
            if (s[t] > 0 and beta[t] > 0) or (s[t] < 0 and beta[t] < C):
                v = -s[t] * G[t]
                if v < gmin:
                    gmin = v
                b = gmax - v
                if b > 0:
                    a = kii + kd[t] - 2.0 * ki[base[t]]
                    if a <= 0:
                        a = _TAU
                    o = -(b * b) / a
                    if o <= obj_min:
                        obj_min = o
                        bj = t
        if bj < 0 or gmax - gmin < tol:
            break
        it += 1
        i, j = bi, bj
        kij = s[i] * s[j] * ki[base[j]]
        qii = kii
        qjj = kd[j]
        oi, oj = beta[i], beta[j]
        if s[i] != s[j]:
            quad = qii + qjj + 2.0 * kij
            if quad <= 0:
                quad = _TAU
            delta = (-G[i] - G[j]) / quad
            diff = oi - oj
            bi_new = oi + delta
            bj_new = oj + delta
            if diff > 0:
                if bj_new < 0:
                    bj_new = 0.0
                    bi_new = diff
            else:
                if bi_new < 0:
                    bi_new = 0.0
                    bj_new = -diff
            if diff > 0:
                if bi_new > C:
                    bi_new = C
                    bj_new = C - diff
            else:
                if bj_new > C:
                    bj_new = C
                    bi_new = C + diff
        else:
            quad = qii + qjj - 2.0 * kij
            if quad <= 0:
                quad = _TAU
            delta = (G[i] - G[j]) / quad
            total = oi + oj
            bi_new = oi - delta
            bj_new = oj + delta
            if total > C:
                if bi_new > C:
                    bi_new = C
                    bj_new = total - C
            else:
                if bj_new < 0:
                    bj_new = 0.0
                    bi_new = total
            if total > C:
                if bj_new > C:
                    bj_new = C
                    bi_new = total - C
            else:
                if bi_new < 0:
                    bi_new = 0.0
                    bj_new = total
        di = s[i] * (bi_new - oi)
        dj = s[j] * (bj_new - oj)
        beta[i] = bi_new
        beta[j] = bj_new
        kj = K[base[j]]
        # gradient update fused with the next selection of i
        gmax = -np.inf
        bi = -1
        for t in range(n):
            bt = base[t]
            G[t] += s[t] * (ki[bt] * di + kj[bt] * dj)
            if (s[t] > 0 and beta[t] < C) or (s[t] < 0 and beta[t] > 0):
                v = -s[t] * G[t]
                if v > gmax:
                    gmax = v
                    bi = t
    # bias: average over free variables, else midpoint of the feasible interval
    nfree = 0
    sfree = 0.0
    ub = np.inf
    lb = -np.inf
    for t in range(n):
        yg = s[t] * G[t]
        if beta[t] >= C:
            if s[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif beta[t] <= 0:
            if s[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            nfree += 1
            sfree += yg
    if nfree > 0:
        rho = sfree / nfree
    else:
        rho = 0.5 * (ub + lb)
    coef = np.empty(l)
    for i in range(l):
        coef[i] = beta[i] - beta[i + l]
    # dual objective in maximization form
    obj = 0.0
    for i in range(l):
        acc = 0.0
        for j in range(l):
            acc += K[i, j] * coef[j]
        obj += -0.5 * coef[i] * acc - eps * (beta[i] + beta[i + l]) + y[i] * coef[i]
    return coef, -rho, obj, it


def dual_objective(K, y, coef, alpha_sum, eps) -> float:
    """-1/2 c'Kc - eps * sum(alpha + alpha*) + y'c for coef c = alpha - alpha*."""
    K, y, coef = (np.asarray(a, dtype=np.float64) for a in (K, y, coef))
    return float(-0.5 * coef @ K @ coef - eps * alpha_sum + y @ coef)


def solve_dual(K, y, c_penalty: float, epsilon: float, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> tuple[np.ndarray, float, float, int]:
    """(coef, bias, objective, iterations) for a precomputed kernel matrix."""
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if K.shape != (y.size, y.size):
        raise ValueError("kernel matrix must be n x n for n targets")
    return _smo(K, y, float(c_penalty), float(epsilon), float(tol), int(max_iter))


@dataclass(frozen=True, eq=False)
class SvrModel:
    params: SvrParams
    feature_mask: tuple[bool, ...]
    feature_names: tuple[str, ...]
    scaler: Scaler
    support_vectors: np.ndarray  # standardized, selected features only
    dual_coeffs: np.ndarray
    bias: float
    target_mean: float = 0.0
    target_std: float = 1.0

    def __post_init__(self):
        if len(self.feature_mask) != len(self.feature_names):
            raise ModelSchemaError("feature_mask and feature_names differ in length")
        n_sel = int(sum(self.feature_mask))
        if n_sel < 1:
            raise ModelSchemaError("feature mask selects nothing")
        if self.scaler.mean.size != n_sel:
            raise ModelSchemaError("scaler length does not match the feature mask")
        sv = self.support_vectors
        if sv.ndim != 2 or sv.shape[0] != self.dual_coeffs.size or (sv.size and sv.shape[1] != n_sel):
            raise ModelSchemaError("support vectors and coefficients disagree in shape")
        if np.any(np.abs(self.dual_coeffs) > self.params.c_penalty * (1 + 1e-12)):
            raise ModelInvariantError("dual coefficient exceeds C")
        if abs(float(np.sum(self.dual_coeffs))) > 1e-6:
            raise ModelInvariantError("dual coefficients do not sum to zero")
        if not self.target_std > 0:
            raise ModelInvariantError("target std must be positive")

    @property
    def selected(self) -> np.ndarray:
        return np.nonzero(np.asarray(self.feature_mask, bool))[0]

    def decision(self, xs: np.ndarray) -> np.ndarray:
        """Standardized-space decision values for standardized selected features."""
        if self.dual_coeffs.size == 0:
            return np.full(xs.shape[0], self.bias)
        k = _rbf_matrix(np.ascontiguousarray(xs), np.ascontiguousarray(self.support_vectors), self.params.gamma)
        return k @ self.dual_coeffs + self.bias

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "feature_mask": [bool(b) for b in self.feature_mask],
            "feature_names": list(self.feature_names),
            "scaler": self.scaler.to_dict(),
            "support_vectors": self.support_vectors.tolist(),
            "dual_coeffs": self.dual_coeffs.tolist(),
            "bias": float(self.bias),
            "target_scaler": {"mean": float(self.target_mean), "std": float(self.target_std)},
        }

    @classmethod
    def from_dict(cls, d) -> "SvrModel":
        required = ("params", "feature_mask", "feature_names", "scaler", "support_vectors",
                    "dual_coeffs", "bias", "target_scaler")
        missing = [k for k in required if k not in d or d[k] is None]
        if missing:
            raise ModelSchemaError(f"model missing field(s): {', '.join(missing)}")
        try:
            p = SvrParams(**d["params"])
            n_sel = int(sum(bool(b) for b in d["feature_mask"]))
            sv = np.asarray(d["support_vectors"], dtype=np.float64).reshape(-1, n_sel)
            ts = d["target_scaler"]
            return cls(
                params=p,
                feature_mask=tuple(bool(b) for b in d["feature_mask"]),
                feature_names=tuple(str(n) for n in d["feature_names"]),
                scaler=Scaler.from_dict(d["scaler"]),
                support_vectors=sv,
                dual_coeffs=np.asarray(d["dual_coeffs"], dtype=np.float64),
                bias=float(d["bias"]),
                target_mean=float(ts["mean"]),
                target_std=float(ts["std"]),
            )
        except (KeyError, TypeError) as e:
            raise ModelSchemaError(f"malformed model: {e}") from e


def _as_matrix(data_x) -> np.ndarray:
    x = np.asarray(data_x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise TrainingError("need a non-empty (n_samples, n_features) matrix")
    if not np.all(np.isfinite(x)):
        raise TrainingError("non-finite feature values")
    return x


def train(x, y, p: SvrParams, mask=None, feature_names=None, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> SvrModel:
    """Fit an epsilon-SVR on the masked, standardized features and standardized targets."""
    x = _as_matrix(x)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != x.shape[0]:
        raise TrainingError("feature rows and targets differ in count")
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite targets")
    mask = np.ones(x.shape[1], bool) if mask is None else np.asarray(mask, bool)
    if mask.size != x.shape[1] or not mask.any():
        raise TrainingError("mask must match the feature count and select at least one feature")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(mask.size))
    xs_raw = x[:, mask]
    scaler = Scaler.fit(xs_raw) if x.shape[0] > 1 else Scaler(xs_raw[0].copy(), np.ones(xs_raw.shape[1]))
    xs = scaler.transform(xs_raw)
    t_mean = float(y.mean())
    t_std = float(y.std())
    if not t_std > 0:
        t_std = 1.0
    ys = (y - t_mean) / t_std
    K = _rbf_matrix(xs, xs, p.gamma)
    coef, bias, _, _ = _smo(K, ys, p.c_penalty, p.epsilon, tol, max_iter)
    keep = coef != 0.0
    return SvrModel(p, tuple(bool(b) for b in mask), names, scaler, xs[keep].copy(), coef[keep].copy(),
                    float(bias), t_mean, t_std)


def predict(m: SvrModel, features) -> np.ndarray | float:
    """Predict for one feature vector (returns float) or a matrix of rows."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != len(m.feature_mask):
        raise ValueError(f"expected {len(m.feature_mask)} features, got {x.shape[1]}")
    xs = m.scaler.transform(x[:, m.selected])
    out = m.decision(xs) * m.target_std + m.target_mean
    return float(out[0]) if single else out


def kkt_residuals(K, y, coef, bias, c_penalty, epsilon) -> np.ndarray:
    """Per-sample violation of the epsilon-insensitive optimality conditions."""
    K, y, coef = (np.asarray(a, dtype=np.float64) for a in (K, y, coef))
    r = y - (K @ coef + bias)
    c = c_penalty
    out = np.empty(y.size)
    for i, (ri, ai) in enumerate(zip(r, coef)):
        if ai == 0:
            out[i] = max(0.0, abs(ri) - epsilon)
        elif 0 < ai < c:
            out[i] = abs(ri - epsilon)
        elif -c < ai < 0:
            out[i] = abs(ri + epsilon)
        elif ai >= c:
            out[i] = max(0.0, epsilon - ri)
        else:
            out[i] = max(0.0, ri + epsilon)
    return out


def save_model(m: SvrModel, path) -> None:
    atomic_write_json(path, m.to_dict())


def load_model(path) -> SvrModel:
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ModelSchemaError("model file must hold a JSON object")
    return SvrModel.from_dict(d)


@numba.njit(cache=True, nogil=True)
def cv_abs_errors(x, y, fold_of, k, cols, c_penalty, gamma, eps, tol, max_iter, angular):
    """Held-out absolute errors of a k-fold SVR fit; NaN marks a failed fold.

    Features and targets are standardized on each training fold. Angular
    errors are wrapped onto [0, 180].
    """
    n = y.size
    f = cols.size
    err = np.empty(n)
    for fold in range(k):
        n_tr = 0
        for i in range(n):
            if fold_of[i] != fold:
                n_tr += 1
        n_te = n - n_tr
        if n_te == 0:
            continue
        if n_tr == 0:
            err[:] = np.nan
            return err
        xtr = np.empty((n_tr, f))
        xte = np.empty((n_te, f))
        ytr = np.empty(n_tr)
        te_idx = np.empty(n_te, np.int64)
        a = 0
        b = 0
        for i in range(n):
            if fold_of[i] != fold:
                for c in range(f):
                    xtr[a, c] = x[i, cols[c]]
                ytr[a] = y[i]
                a += 1
            else:
                for c in range(f):
                    xte[b, c] = x[i, cols[c]]
                te_idx[b] = i
                b += 1
        for c in range(f):
            mu = 0.0
            for i in range(n_tr):
                mu += xtr[i, c]
            mu /= n_tr
            var = 0.0
            for i in range(n_tr):
                var += (xtr[i, c] - mu) ** 2
            sd = math.sqrt(var / n_tr)
            if not sd > 0:
                if n_tr > 1:
                    err[:] = np.nan
                    return err
                sd = 1.0
            for i in range(n_tr):
                xtr[i, c] = (xtr[i, c] - mu) / sd
            for i in range(n_te):
                xte[i, c] = (xte[i, c] - mu) / sd
        ym = 0.0
        for i in range(n_tr):
            ym += ytr[i]
        ym /= n_tr
        yv = 0.0
        for i in range(n_tr):
            yv += (ytr[i] - ym) ** 2
        ysd = math.sqrt(yv / n_tr)
        if not ysd > 0:
            ysd = 1.0
        for i in range(n_tr):
            ytr[i] = (ytr[i] - ym) / ysd
        K = _rbf_matrix(xtr, xtr, gamma)
        coef, bias, _, _ = _smo(K, ytr, c_penalty, eps, tol, max_iter)
        Kt = _rbf_matrix(xte, xtr, gamma)
        for i in range(n_te):
            acc = bias
            for j in range(n_tr):
                acc += Kt[i, j] * coef[j]
            d = abs(acc * ysd + ym - y[te_idx[i]])
            if angular:
                d = d % 360.0
                if d > 180.0:
                    d = 360.0 - d
            err[te_idx[i]] = d
    return err


__all__ = [
    "DEFAULT_EPSILON",
    "ModelInvariantError",
    "ModelSchemaError",
    "Scaler",
    "SvrModel",
    "SvrParams",
    "TrainingError",
    "cv_abs_errors",
    "dual_objective",
    "kkt_residuals",
    "load_model",
    "predict",
    "rbf_kernel",
    "save_model",
    "solve_dual",
    "train",
]
