"""NSGA-II over feature subsets and SVR hyperparameters.

Objectives are the grouped k-fold mean absolute deviation of the SVR and the
number of selected features, both minimized.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .svr import DEFAULT_EPSILON, cv_abs_errors

log = logging.getLogger(__name__)

LOG2_C_BOUNDS = (-5.0, 15.0)
LOG2_GAMMA_BOUNDS = (-15.0, 3.0)
SENTINEL_MAD = 1e12
# evaluation inside the GA stops at the standard 1e-3 KKT gap and caps the
# iteration count; final models are trained to the tighter defaults in svr
GA_TOL = 1e-3
GA_MAX_ITER = 2_000


@dataclass(frozen=True, eq=False)
class Genome:
    feature_mask: tuple[bool, ...]
    log2_c: float
    log2_gamma: float

    def __post_init__(self):
        if not any(self.feature_mask):
            raise ValueError("genome mask selects no feature; repair it first")
        if not (LOG2_C_BOUNDS[0] <= self.log2_c <= LOG2_C_BOUNDS[1]):
            raise ValueError(f"log2_c {self.log2_c} out of bounds")
        if not (LOG2_GAMMA_BOUNDS[0] <= self.log2_gamma <= LOG2_GAMMA_BOUNDS[1]):
            raise ValueError(f"log2_gamma {self.log2_gamma} out of bounds")

    @property
    def key(self) -> tuple:
        return (self.feature_mask, float(self.log2_c), float(self.log2_gamma))

    def __eq__(self, other):
        return isinstance(other, Genome) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    @property
    def n_features(self) -> int:
        return int(sum(self.feature_mask))

    @property
    def c_penalty(self) -> float:
        return 2.0 ** self.log2_c

    @property
    def gamma(self) -> float:
        return 2.0 ** self.log2_gamma

    def mask_string(self) -> str:
        return "".join("1" if b else "0" for b in self.feature_mask)

    def to_dict(self) -> dict:
        return {"feature_mask": [bool(b) for b in self.feature_mask], "log2_c": self.log2_c,
                "log2_gamma": self.log2_gamma}

    @classmethod
    def from_dict(cls, d) -> "Genome":
        return cls(tuple(bool(b) for b in d["feature_mask"]), float(d["log2_c"]), float(d["log2_gamma"]))


@dataclass(frozen=True)
class Objectives:
    cv_mad: float
    n_features: int

    def __post_init__(self):
        if not self.cv_mad >= 0:
            raise ValueError("cv_mad must be >= 0")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")

    def as_tuple(self) -> tuple[float, float]:
        return (self.cv_mad, float(self.n_features))

    def to_dict(self) -> dict:
        return {"cv_mad": self.cv_mad, "n_features": self.n_features}


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 40
    generations: int = 50
    k_folds: int = 6
    crossover_prob: float = 0.9
    mutation_prob: float | None = None  # None: 1 / genome length
    seed: int = 0
    blend_alpha: float = 0.5
    mutation_sigma_frac: float = 0.1
    epsilon: float = DEFAULT_EPSILON
    threads: int = 1
    # optional grids: real genes snap to the nearest listed value
    log2_c_grid: tuple[float, ...] | None = None
    log2_gamma_grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.population_size < 4 or self.population_size % 2:
            raise ValueError("population_size must be even and >= 4")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        for name in ("crossover_prob", "mutation_prob"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        for grid, (lo, hi) in ((self.log2_c_grid, LOG2_C_BOUNDS), (self.log2_gamma_grid, LOG2_GAMMA_BOUNDS)):
            if grid is not None and (len(grid) == 0 or min(grid) < lo or max(grid) > hi):
                raise ValueError("grid values must be non-empty and within bounds")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("log2_c_grid", "log2_gamma_grid"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "GaConfig":
        d = dict(d)
        for k in ("log2_c_grid", "log2_gamma_grid"):
            if d.get(k) is not None:
                d[k] = tuple(float(v) for v in d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GA config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SearchData:
    """Feature matrix, target and patient-grouped fold assignment for one target."""

    x: np.ndarray
    y: np.ndarray
    fold_of: np.ndarray
    k: int
    feature_names: tuple[str, ...]
    angular: bool = False

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] != self.y.size or self.fold_of.size != self.y.size:
            raise ValueError("x, y and fold assignment disagree in length")
        if len(self.feature_names) != self.x.shape[1]:
            raise ValueError("feature_names length must match x columns")


@dataclass(frozen=True, eq=False)
class ParetoFront:
    members: list[tuple[Genome, Objectives]] = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def to_list(self) -> list[dict]:
        return [{"genome": g.to_dict(), "objectives": o.to_dict()} for g, o in self.members]


def dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def non_dominated_sort(points) -> list[list[int]]:
    """Fast non-dominated sort; ``points`` are Objectives or numeric tuples."""
    if len(points) == 0:
        raise ValueError("need at least one point")
    f = np.array([p.as_tuple() if isinstance(p, Objectives) else tuple(p) for p in points], dtype=np.float64)
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    n_dom = dom.sum(axis=0)
    fronts = []
    current = np.nonzero(n_dom == 0)[0]
    while current.size:
        fronts.append(current.tolist())
        n_dom = n_dom - dom[current].sum(axis=0)
        n_dom[current] = -1
        current = np.nonzero(n_dom == 0)[0]
    return fronts


def crowding_distance(front) -> list[float]:
    f = np.array([p.as_tuple() if isinstance(p, Objectives) else tuple(p) for p in front], dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty front")
    n, m = f.shape
    d = np.zeros(n)
    for j in range(m):
        order = np.argsort(f[:, j], kind="stable")
        d[order[0]] = d[order[-1]] = math.inf
        span = f[order[-1], j] - f[order[0], j]
        if span <= 0 or n < 3:
            continue
        gaps = (f[order[2:], j] - f[order[:-2], j]) / span
        d[order[1:-1]] += gaps
    return d.tolist()


def _snap(v: float, grid) -> float:
    if grid is None:
        return v
    g = np.asarray(grid, dtype=np.float64)
    return float(g[int(np.argmin(np.abs(g - v)))])


def repair(mask, log2_c: float, log2_gamma: float, rng, cfg: GaConfig) -> Genome:
    """Clamp reals into bounds (and onto grids) and give an empty mask one random bit."""
    m = np.array(mask, dtype=bool)
    if not m.any():
        m[int(rng.integers(m.size))] = True
    c = _snap(float(np.clip(log2_c, *LOG2_C_BOUNDS)), cfg.log2_c_grid)
    g = _snap(float(np.clip(log2_gamma, *LOG2_GAMMA_BOUNDS)), cfg.log2_gamma_grid)
    return Genome(tuple(bool(b) for b in m), c, g)


def evaluate_genome(g: Genome, data: SearchData, cfg: GaConfig) -> Objectives:
    """Grouped k-fold MAD of the SVR selected by ``g``; failures get the sentinel."""
    if len(g.feature_mask) != data.x.shape[1]:
        raise ValueError("genome mask length differs from the feature count")
    cols = np.nonzero(np.asarray(g.feature_mask, bool))[0].astype(np.int64)
    try:
        err = cv_abs_errors(data.x, data.y, data.fold_of, data.k, cols, g.c_penalty, g.gamma,
                            cfg.epsilon, GA_TOL, GA_MAX_ITER, data.angular)
    except Exception as e:  # keep the GA total
        log.debug("genome evaluation failed: %s", e)
        return Objectives(SENTINEL_MAD, g.n_features)
    if not np.all(np.isfinite(err)):
        return Objectives(SENTINEL_MAD, g.n_features)
    return Objectives(float(err.mean()), g.n_features)


def _rank_and_crowd(objs: list[Objectives]) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    fronts = non_dominated_sort(objs)
    rank = np.empty(len(objs), np.int64)
    crowd = np.empty(len(objs))
    for r, fr in enumerate(fronts):
        rank[fr] = r
        crowd[fr] = crowding_distance([objs[i] for i in fr])
    return rank, crowd, fronts


def _tournament(rng, rank, crowd) -> int:
    a, b = rng.integers(rank.size, size=2)
    if rank[a] != rank[b]:
        return int(a if rank[a] < rank[b] else b)
    if crowd[a] != crowd[b]:
        return int(a if crowd[a] > crowd[b] else b)
    return int(min(a, b))


def _variation(p1: Genome, p2: Genome, rng, cfg: GaConfig) -> tuple[Genome, Genome]:
    n = len(p1.feature_mask)
    pm = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / (n + 2)
    m1, m2 = np.array(p1.feature_mask), np.array(p2.feature_mask)
    r1 = np.array([p1.log2_c, p1.log2_gamma])
    r2 = np.array([p2.log2_c, p2.log2_gamma])
    if rng.random() < cfg.crossover_prob:
        swap = rng.random(n) < 0.5
        m1, m2 = np.where(swap, m2, m1), np.where(swap, m1, m2)
        # blend-alpha crossover, one draw per real gene
        lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
        span = hi - lo
        r1 = rng.uniform(lo - cfg.blend_alpha * span, hi + cfg.blend_alpha * span)
        r2 = rng.uniform(lo - cfg.blend_alpha * span, hi + cfg.blend_alpha * span)
    widths = np.array([LOG2_C_BOUNDS[1] - LOG2_C_BOUNDS[0], LOG2_GAMMA_BOUNDS[1] - LOG2_GAMMA_BOUNDS[0]])
    grids = (cfg.log2_c_grid, cfg.log2_gamma_grid)
    kids = []
    for m, r in ((m1, r1), (m2, r2)):
        m = m ^ (rng.random(n) < pm)
        r = r.copy()
        for j in range(2):
            if rng.random() < pm:
                if grids[j] is not None:
                    r[j] = float(rng.choice(np.asarray(grids[j])))
                else:
                    r[j] += rng.normal(0.0, cfg.mutation_sigma_frac * widths[j])
        kids.append(repair(m, r[0], r[1], rng, cfg))
    return kids[0], kids[1]


def _random_genome(rng, n: int, cfg: GaConfig) -> Genome:
    m = rng.random(n) < 0.5
    c = rng.uniform(*LOG2_C_BOUNDS)
    g = rng.uniform(*LOG2_GAMMA_BOUNDS)
    if cfg.log2_c_grid is not None:
        c = float(rng.choice(np.asarray(cfg.log2_c_grid)))
    if cfg.log2_gamma_grid is not None:
        g = float(rng.choice(np.asarray(cfg.log2_gamma_grid)))
    return repair(m, c, g, rng, cfg)


class _Evaluator:
    def __init__(self, data: SearchData, cfg: GaConfig):
        self.data, self.cfg = data, cfg
        self.cache: dict[Genome, Objectives] = {}

    def __call__(self, genomes: list[Genome]) -> list[Objectives]:
        todo = list(dict.fromkeys(g for g in genomes if g not in self.cache))
        if self.cfg.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as ex:
                res = list(ex.map(lambda g: evaluate_genome(g, self.data, self.cfg), todo))
        else:
            res = [evaluate_genome(g, self.data, self.cfg) for g in todo]
        self.cache.update(zip(todo, res))
        return [self.cache[g] for g in genomes]


def _front0(pop: list[Genome], objs: list[Objectives]) -> ParetoFront:
    fr = non_dominated_sort(objs)[0]
    seen, members = set(), []
    for i in sorted(fr, key=lambda i: (objs[i].cv_mad, objs[i].n_features, pop[i].mask_string(),
                                        pop[i].log2_c, pop[i].log2_gamma)):
        if pop[i] not in seen:
            seen.add(pop[i])
            members.append((pop[i], objs[i]))
    return ParetoFront(members)


def run_nsga2(data: SearchData, cfg: GaConfig, history: list | None = None) -> ParetoFront:
    """Elitist NSGA-II; returns the deduplicated first front of the final population.

    When ``history`` is a list, the best cv_mad of each generation's parent
    population is appended to it.
    """
    n = data.x.shape[1]
    evaluate = _Evaluator(data, cfg)
    rng0 = np.random.default_rng([cfg.seed, 0, 0])
    pop = [_random_genome(rng0, n, cfg) for _ in range(cfg.population_size)]
    objs = evaluate(pop)
    if history is not None:
        history.append(min(o.cv_mad for o in objs))
    for gen in range(1, cfg.generations + 1):
        rank, crowd, _ = _rank_and_crowd(objs)
        sel_rng = np.random.default_rng([cfg.seed, gen, 0])
        parents = [_tournament(sel_rng, rank, crowd) for _ in range(cfg.population_size)]
        kids = []
        for pair in range(cfg.population_size // 2):
            rng = np.random.default_rng([cfg.seed, gen, pair + 1])
            kids.extend(_variation(pop[parents[2 * pair]], pop[parents[2 * pair + 1]], rng, cfg))
        kid_objs = evaluate(kids)
        merged, merged_objs = pop + kids, objs + kid_objs
        _, _, fronts = _rank_and_crowd(merged_objs)
        chosen: list[int] = []
        for fr in fronts:
            if len(chosen) + len(fr) <= cfg.population_size:
                chosen.extend(fr)
                continue
            cd = crowding_distance([merged_objs[i] for i in fr])
            order = sorted(range(len(fr)), key=lambda t: (-cd[t], fr[t]))
            chosen.extend(fr[t] for t in order[: cfg.population_size - len(chosen)])
            break
        pop = [merged[i] for i in chosen]
        objs = [merged_objs[i] for i in chosen]
        if history is not None:
            history.append(min(o.cv_mad for o in objs))
    return _front0(pop, objs)


def pick_final(front) -> tuple[Genome, Objectives]:
    """Lowest cv_mad, then fewer features, then lexicographic mask (set bits first)."""
    members = list(front)
    if not members:
        raise ValueError("empty front")
    return min(members, key=lambda go: (go[1].cv_mad, go[1].n_features,
                                         tuple(not b for b in go[0].feature_mask),
                                         go[0].log2_c, go[0].log2_gamma))


__all__ = [
    "GA_MAX_ITER",
    "GA_TOL",
    "GaConfig",
    "Genome",
    "LOG2_C_BOUNDS",
    "LOG2_GAMMA_BOUNDS",
    "Objectives",
    "ParetoFront",
    "SENTINEL_MAD",
    "SearchData",
    "crowding_distance",
    "dominates",
    "evaluate_genome",
    "non_dominated_sort",
    "pick_final",
    "repair",
    "run_nsga2",
]
