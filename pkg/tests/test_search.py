import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardioplan.search import (
    LOG2_C_BOUNDS,
    LOG2_GAMMA_BOUNDS,
    SENTINEL_MAD,
    GaConfig,
    Genome,
    Objectives,
    SearchData,
    _variation,
    crowding_distance,
    evaluate_genome,
    non_dominated_sort,
    pick_final,
    repair,
    run_nsga2,
)


def pairwise_fronts(points):
    """O(n^2) reference: peel off the points no remaining point dominates."""
    pts = [tuple(p) for p in points]
    left = set(range(len(pts)))
    fronts = []

    def dom(a, b):
        return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))

    while left:
        fr = sorted(i for i in left if not any(dom(pts[j], pts[i]) for j in left if j != i))
        fronts.append(fr)
        left -= set(fr)
    return fronts


def test_sort_matches_pairwise_reference_on_1000_sets():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        m = int(rng.integers(2, 4))
        if trial % 2:
            pts = rng.integers(0, 6, size=(n, m)).astype(float)  # plenty of ties and duplicates
        else:
            pts = rng.random((n, m))
        got = [sorted(f) for f in non_dominated_sort(pts)]
        assert got == pairwise_fronts(pts), f"trial {trial}"


def test_sort_examples():
    pts = [(1, 2), (2, 1), (2, 2), (3, 3)]
    assert [sorted(f) for f in non_dominated_sort(pts)] == [[0, 1], [2], [3]]
    assert non_dominated_sort([(5, 5)]) == [[0]]
    assert [sorted(f) for f in non_dominated_sort([(1, 1)] * 4)] == [[0, 1, 2, 3]]
    with pytest.raises(ValueError):
        non_dominated_sort([])


def test_sort_accepts_objectives():
    objs = [Objectives(1.0, 3), Objectives(2.0, 1), Objectives(2.0, 3)]
    assert [sorted(f) for f in non_dominated_sort(objs)] == [[0, 1], [2]]


def test_crowding_examples():
    assert crowding_distance([(0, 1), (1, 0)]) == [math.inf, math.inf]
    d = crowding_distance([(0, 2), (1, 1), (2, 0)])
    assert d[0] == d[2] == math.inf
    assert d[1] == pytest.approx(2.0)
    d = crowding_distance([(0, 5), (1, 5), (3, 5), (4, 5)])
    assert d[1] == pytest.approx(0.75)
    assert d[2] == pytest.approx(0.75)


# -- genome handling --------------------------------------------------------

def test_genome_invariants():
    with pytest.raises(ValueError):
        Genome((False, False), 0.0, 0.0)
    with pytest.raises(ValueError):
        Genome((True,), 16.0, 0.0)
    with pytest.raises(ValueError):
        Genome((True,), 0.0, -16.0)


def test_repair_empty_mask_and_clamp():
    rng = np.random.default_rng(0)
    g = repair([False] * 5, 99.0, -99.0, rng, GaConfig())
    assert g.n_features == 1
    assert (g.log2_c, g.log2_gamma) == (LOG2_C_BOUNDS[1], LOG2_GAMMA_BOUNDS[0])


@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_operators_respect_invariants(seed, n):
    rng = np.random.default_rng(seed)
    cfg = GaConfig(mutation_prob=0.5)
    p1 = repair(rng.random(n) < 0.5, rng.uniform(*LOG2_C_BOUNDS), rng.uniform(*LOG2_GAMMA_BOUNDS), rng, cfg)
    p2 = repair(rng.random(n) < 0.5, rng.uniform(*LOG2_C_BOUNDS), rng.uniform(*LOG2_GAMMA_BOUNDS), rng, cfg)
    for kid in _variation(p1, p2, rng, cfg):
        assert kid.n_features >= 1 and len(kid.feature_mask) == n
        assert LOG2_C_BOUNDS[0] <= kid.log2_c <= LOG2_C_BOUNDS[1]
        assert LOG2_GAMMA_BOUNDS[0] <= kid.log2_gamma <= LOG2_GAMMA_BOUNDS[1]


def test_ga_config_invariants():
    for bad in ({"population_size": 5}, {"population_size": 2}, {"k_folds": 1},
                {"crossover_prob": 1.5}, {"mutation_prob": -0.1}, {"threads": 0}):
        with pytest.raises(ValueError):
            GaConfig(**bad)
    cfg = GaConfig(log2_c_grid=(0.0, 1.0))
    assert GaConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GaConfig.from_dict({"bogus": 1})


# -- evaluation and search on synthetic data --------------------------------

def synthetic_data(n_patients=12, per_patient=5, n_features=4, k=6, seed=0, leak=None):
    rng = np.random.default_rng(seed)
    n = n_patients * per_patient
    x = rng.normal(size=(n, n_features))
    y = 3.0 * x[:, 0] + np.sin(2.0 * x[:, 1]) + 0.05 * rng.normal(size=n)
    if leak is not None:
        x[:, leak] = y
    patient = np.repeat(np.arange(n_patients), per_patient)
    groups = np.array_split(rng.permutation(n_patients), k)
    fold_of = np.empty(n, np.int64)
    for f, grp in enumerate(groups):
        fold_of[np.isin(patient, grp)] = f
    return SearchData(x, y, fold_of, k, tuple(f"f{i}" for i in range(n_features)))


def test_leak_feature_gives_tiny_error():
    data = synthetic_data(n_patients=24, leak=2)
    g = Genome((False, False, True, False), 10.0, -2.0)
    cfg = GaConfig()
    obj = evaluate_genome(g, data, cfg)
    assert obj.n_features == 1
    assert obj.cv_mad <= cfg.epsilon * data.y.std()


def test_evaluate_deterministic():
    data = synthetic_data()
    g = Genome((True, True, False, False), 3.0, -1.0)
    assert evaluate_genome(g, data, GaConfig()) == evaluate_genome(g, data, GaConfig())


def test_failed_training_gets_sentinel():
    data = synthetic_data()
    x = data.x.copy()
    x[:, 3] = 1.0  # constant column cannot be standardized
    bad = SearchData(x, data.y, data.fold_of, data.k, data.feature_names)
    obj = evaluate_genome(Genome((False, False, False, True), 0.0, 0.0), bad, GaConfig())
    assert obj.cv_mad == SENTINEL_MAD


GRID = (-1.0, 3.0, 7.0)
GAMMA_GRID = (-4.0, -2.0, 0.0)


def toy_config(**kw):
    base = dict(population_size=16, generations=12, seed=3, log2_c_grid=GRID, log2_gamma_grid=GAMMA_GRID)
    base.update(kw)
    return GaConfig(**base)


def test_toy_front_not_dominated_by_exhaustive_enumeration():
    data = synthetic_data()
    cfg = toy_config()
    front = run_nsga2(data, cfg)
    everything = []
    for bits in itertools.product([False, True], repeat=4):
        if not any(bits):
            continue
        for c in GRID:
            for g in GAMMA_GRID:
                everything.append(evaluate_genome(Genome(bits, c, g), data, cfg).as_tuple())
    true_front = {everything[i] for i in non_dominated_sort(everything)[0]}
    for genome, obj in front:
        assert genome.log2_c in GRID and genome.log2_gamma in GAMMA_GRID
        assert not any(all(a <= b for a, b in zip(p, obj.as_tuple())) and p != obj.as_tuple()
                       for p in everything)
    # the returned front hits the exhaustive front at its best-MAD end
    assert min(o.cv_mad for _, o in front) == pytest.approx(min(p[0] for p in true_front))


def test_returned_front_is_mutually_non_dominated():
    front = run_nsga2(synthetic_data(), toy_config(log2_c_grid=None, log2_gamma_grid=None))
    objs = [o.as_tuple() for _, o in front]
    assert sorted(non_dominated_sort(objs)[0]) == list(range(len(objs)))
    assert len({g for g, _ in front}) == len(front)


def test_elitism_best_mad_non_increasing():
    hist = []
    run_nsga2(synthetic_data(), toy_config(log2_c_grid=None, log2_gamma_grid=None, generations=15), hist)
    assert len(hist) == 16
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_run_deterministic_and_thread_independent():
    data = synthetic_data()
    cfg = toy_config(log2_c_grid=None, log2_gamma_grid=None, generations=6)
    a = run_nsga2(data, cfg).to_list()
    b = run_nsga2(data, cfg).to_list()
    c = run_nsga2(data, GaConfig(**{**cfg.to_dict(), "threads": 3})).to_list()
    assert a == b == c


def test_generation_zero_reproducible():
    data = synthetic_data()
    cfg = toy_config(generations=0)
    assert run_nsga2(data, cfg).to_list() == run_nsga2(data, cfg).to_list()


# -- final pick -------------------------------------------------------------

def _member(mask, mad, c=0.0, g=0.0):
    return Genome(tuple(mask), c, g), Objectives(mad, sum(mask))


def test_pick_final_examples():
    a = _member((True, True, True), 2.0)
    b = _member((True, False, False), 5.0)
    assert pick_final([a, b]) is a
    assert pick_final([b]) is b
    c = _member((False, True, False), 2.0)
    assert pick_final([a, c]) is c
    d = _member((True, False, False), 2.0)
    assert pick_final([c, d]) is d  # same size: lexicographic mask, set bits first
    with pytest.raises(ValueError):
        pick_final([])
