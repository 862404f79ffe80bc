import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cardioplan.segmentation import (
    Connectivity,
    SegParams,
    Segmentation,
    build_grid_graph,
    component_at,
    largest_components,
    segment,
    segment_image,
)


def naive_segment(image, k, min_size):
    """Reference partition with explicit member sets and Int(C) recomputed from MST edges."""
    g = build_grid_graph(image, "four_2d")
    edges = sorted(g.edges(), key=lambda e: (e[2], e[0], e[1]))
    comp = {i: {i} for i in range(g.n_nodes)}
    owner = list(range(g.n_nodes))
    mst = {i: [] for i in range(g.n_nodes)}

    def merge(a, b, w=None):
        for node in comp[b]:
            owner[node] = a
        comp[a] |= comp.pop(b)
        mst[a] += mst.pop(b) + ([w] if w is not None else [])

    for u, v, w in edges:
        a, b = owner[u], owner[v]
        if a == b:
            continue
        int_a = max(mst[a], default=0.0)
        int_b = max(mst[b], default=0.0)
        if w <= min(int_a + k / len(comp[a]), int_b + k / len(comp[b])):
            merge(a, b, w)
    for u, v, _ in edges:
        a, b = owner[u], owner[v]
        if a != b and (len(comp[a]) < min_size or len(comp[b]) < min_size):
            merge(a, b)
    return canonical(np.array(owner))


def canonical(labels):
    """Relabel by order of first appearance."""
    flat = np.asarray(labels).ravel()
    seen = {}
    return np.array([seen.setdefault(x, len(seen)) for x in flat])


def test_naive_oracle_on_200_random_images():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        if trial % 2:
            img = rng.integers(0, 12, size=(16, 16)).astype(float)  # many weight ties
        else:
            img = rng.normal(100, 30, size=(16, 16))
        k = float(10 ** rng.uniform(-1, 3))
        min_size = int(rng.integers(1, 6))
        seg = segment(build_grid_graph(img), SegParams(k, min_size, 0.0))
        np.testing.assert_array_equal(canonical(seg.labels), naive_segment(img, k, min_size),
                                      err_msg=f"trial {trial} k={k} min_size={min_size}")


def test_edge_counts():
    assert build_grid_graph(np.zeros((2, 2)), "four_2d").n_edges == 4
    assert build_grid_graph(np.zeros((2, 2)), "eight_2d").n_edges == 6
    assert build_grid_graph(np.zeros((2, 2, 2)), "six_3d").n_edges == 12


def test_edge_weights():
    img = np.array([[0.0, 3.0], [1.0, 1.0]])
    g = build_grid_graph(img)
    assert sorted(g.w.tolist()) == [0.0, 1.0, 2.0, 3.0]
    assert np.all(build_grid_graph(np.full((5, 5), 7.0)).w == 0)
    assert np.all(g.u != g.v)


def test_connectivity_dimension_check():
    with pytest.raises(ValueError):
        build_grid_graph(np.zeros((2, 2)), "six_3d")
    with pytest.raises(ValueError):
        build_grid_graph(np.zeros((0, 3)))


@given(st.floats(1e-3, 1e6), st.integers(1, 30))
def test_uniform_image_single_component(k, min_size):
    seg = segment_image(np.full((9, 11), 3.0), SegParams(k, min_size, 0.0))
    assert seg.n_components == 1


def test_two_flat_regions():
    img = np.zeros((8, 8))
    img[:, 4:] = 1000.0
    seg = segment_image(img, SegParams(10.0, 1, 0.0))
    assert seg.n_components == 2
    assert len(np.unique(seg.labels[:, :4])) == 1
    assert seg.labels[0, 0] != seg.labels[0, 7]


@given(arrays(np.float64, (7, 9), elements=st.floats(0, 1000)))
def test_infinite_k_single_component(img):
    seg = segment_image(img, SegParams(1e300, 1, 0.0))
    assert seg.n_components == 1


@given(arrays(np.float64, (8, 8), elements=st.integers(0, 50).map(float)),
       st.floats(0.1, 100), st.integers(1, 6))
def test_partition_and_min_size(img, k, min_size):
    seg = segment_image(img, SegParams(k, min_size, 0.0))
    assert seg.labels.shape == img.shape
    assert sum(seg.component_sizes.values()) == img.size
    counts = np.bincount(seg.labels.ravel())
    assert all(counts[i] == s for i, s in seg.component_sizes.items())
    assert min(seg.component_sizes.values()) >= min(min_size, img.size)


@given(arrays(np.float64, (8, 8), elements=st.floats(0, 100)), st.floats(0.5, 50), st.floats(1.0, 10.0))
def test_components_non_increasing_in_k(img, k, factor):
    lo = segment_image(img, SegParams(k, 1, 0.0)).n_components
    hi = segment_image(img, SegParams(k * factor, 1, 0.0)).n_components
    assert hi <= lo


def test_deterministic(rng):
    img = rng.normal(size=(20, 20))
    a = segment_image(img, SegParams(5.0, 3, 0.8))
    b = segment_image(img, SegParams(5.0, 3, 0.8))
    assert np.array_equal(a.labels, b.labels)


def test_three_d_segmentation():
    vol = np.zeros((4, 6, 6))
    vol[:, :, 3:] = 500.0
    seg = segment_image(vol, SegParams(1.0, 1, 0.0), Connectivity.SIX_3D)
    assert seg.n_components == 2


def _seg(labels):
    labels = np.asarray(labels)
    return Segmentation(labels, {int(i): int(c) for i, c in enumerate(np.bincount(labels.ravel()))})


def test_largest_components_examples():
    assert len(largest_components(_seg(np.zeros((3, 3), int)), n=2)) == 1
    labels = np.zeros(16, int)
    labels[10:] = 1
    out = largest_components(_seg(labels.reshape(1, 1, 16)), n=2)
    assert [s for _, s, _ in out] == [10, 6]
    labels = np.ones((1, 1, 3), int)
    labels[0, 0, 0] = labels[0, 0, 2] = 0
    cid, size, cen = largest_components(_seg(labels), n=1)[0]
    assert (cid, size, cen) == (0, 2, (1, 0, 0))


def test_largest_components_tie_and_mask():
    labels = np.array([[0, 0, 1, 1, 2]])
    out = largest_components(_seg(labels), n=3)
    assert [c for c, _, _ in out] == [0, 1, 2]
    mask = np.array([[False, True, True, True, True]])
    out = largest_components(_seg(labels), mask=mask, n=3)
    assert [(c, s) for c, s, _ in out] == [(1, 2), (0, 1), (2, 1)]
    with pytest.raises(ValueError):
        largest_components(_seg(labels), n=0)


def test_component_at_is_four_connected_region():
    img = np.zeros((10, 10))
    img[2:6, 2:6] = 800.0
    m = component_at(img, (3, 3), SegParams(50.0, 1, 0.0))
    assert m.sum() == 16 and m[2:6, 2:6].all()
    with pytest.raises(IndexError):
        component_at(img, (10, 0), SegParams())


def test_seg_params_invariants():
    for bad in ((0.0, 1, 0.0), (1.0, 0, 0.0), (1.0, 1, -0.1)):
        with pytest.raises(ValueError):
            SegParams(*bad)
