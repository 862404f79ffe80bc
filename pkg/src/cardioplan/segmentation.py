"""Graph-based segmentation on voxel grids: Kruskal-order merging with an adaptive internal-difference threshold."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from scipy import ndimage


class Connectivity(str, Enum):
    FOUR_2D = "four_2d"
    EIGHT_2D = "eight_2d"
    SIX_3D = "six_3d"


@dataclass(frozen=True)
class SegParams:
    k_threshold: float = 300.0
    min_size: int = 20
    presmooth_sigma: float = 0.8

    def __post_init__(self):
        if not self.k_threshold > 0:
            raise ValueError("k_threshold must be positive")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")
        if self.presmooth_sigma < 0:
            raise ValueError("presmooth_sigma must be >= 0")


@dataclass(frozen=True, eq=False)
class GridGraph:
    n_nodes: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    connectivity: Connectivity
    shape: tuple[int, ...]

    @property
    def n_edges(self) -> int:
        return int(self.u.size)

    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.u.tolist(), self.v.tolist(), self.w.tolist()))

    def sorted_order(self) -> np.ndarray:
        """Stable edge order: weight, then (u, v) lexicographic."""
        return np.lexsort((self.v, self.u, self.w))


@dataclass(frozen=True, eq=False)
class Segmentation:
    labels: np.ndarray  # same shape as the source image, ids 0..n-1
    component_sizes: dict[int, int]

    @property
    def n_components(self) -> int:
        return len(self.component_sizes)


def _neighbor_pairs(shape, connectivity: Connectivity):
    idx = np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)
    pairs = []
    if connectivity in (Connectivity.FOUR_2D, Connectivity.EIGHT_2D):
        if len(shape) != 2:
            raise ValueError(f"{connectivity.value} needs a 2D image")
        pairs.append((idx[:, :-1], idx[:, 1:]))
        pairs.append((idx[:-1, :], idx[1:, :]))
        if connectivity is Connectivity.EIGHT_2D:
            pairs.append((idx[:-1, :-1], idx[1:, 1:]))
            pairs.append((idx[:-1, 1:], idx[1:, :-1]))
    elif connectivity is Connectivity.SIX_3D:
        if len(shape) != 3:
            raise ValueError("six_3d needs a 3D volume")
        pairs.append((idx[:, :, :-1], idx[:, :, 1:]))
        pairs.append((idx[:, :-1, :], idx[:, 1:, :]))
        pairs.append((idx[:-1, :, :], idx[1:, :, :]))
    else:
        raise ValueError(f"unknown connectivity {connectivity}")
    u = np.concatenate([a.ravel() for a, _ in pairs])
    v = np.concatenate([b.ravel() for _, b in pairs])
    return u, v


def build_grid_graph(image, connectivity="four_2d", presmooth_sigma: float = 0.0) -> GridGraph:
    """Grid graph with edge weight |I(u) - I(v)|; ``image`` is (ny, nx) or (nz, ny, nx)."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    connectivity = Connectivity(connectivity)
    if presmooth_sigma > 0:
        img = ndimage.gaussian_filter(img, presmooth_sigma, mode="nearest")
    u, v = _neighbor_pairs(img.shape, connectivity)
    flat = img.ravel()
    w = np.abs(flat[u] - flat[v])
    return GridGraph(int(img.size), u, v, w, connectivity, tuple(img.shape))


@numba.njit(cache=True, nogil=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True, nogil=True)
def _fh_kernel(n, us, vs, ws, k, min_size):
    parent = np.arange(n)
    rank = np.zeros(n, np.int64)
    size = np.ones(n, np.int64)
    thresh = np.full(n, k)
    for e in range(us.size):
        a = _find(parent, us[e])
        b = _find(parent, vs[e])
        if a == b:
            continue
        w = ws[e]
        if w <= thresh[a] and w <= thresh[b]:
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if rank[a] == rank[b]:
                rank[a] += 1
            # edges arrive in nondecreasing order, so w is the largest
            # edge of the merged Kruskal forest: Int(C) = w
            thresh[a] = w + k / size[a]
    for e in range(us.size):
        a = _find(parent, us[e])
        b = _find(parent, vs[e])
        if a != b and (size[a] < min_size or size[b] < min_size):
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if rank[a] == rank[b]:
                rank[a] += 1
    roots = np.empty(n, np.int64)
    for i in range(n):
        roots[i] = _find(parent, i)
    return roots


def _relabel(roots: np.ndarray) -> np.ndarray:
    # ids in order of first appearance by node index
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[inverse.ravel()]


def segment(g: GridGraph, p: SegParams) -> Segmentation:
    order = g.sorted_order()
    roots = _fh_kernel(
        g.n_nodes,
        g.u[order].astype(np.int64),
        g.v[order].astype(np.int64),
        g.w[order].astype(np.float64),
        float(p.k_threshold),
        int(p.min_size),
    )
    labels = _relabel(roots)
    counts = np.bincount(labels)
    return Segmentation(labels.reshape(g.shape), {i: int(c) for i, c in enumerate(counts)})


def segment_image(image, p: SegParams, connectivity="four_2d") -> Segmentation:
    return segment(build_grid_graph(image, connectivity, p.presmooth_sigma), p)


def largest_components(s: Segmentation, mask=None, n: int = 1) -> list[tuple[int, int, tuple[int, ...]]]:
    """The ``n`` largest components as (id, size, centroid index in x, y[, z] order).

    With ``mask`` (boolean array shaped like the labels) only masked voxels count
    toward sizes and centroids.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = s.labels
    sel = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    lab = labels[sel]
    if lab.size == 0:
        return []
    n_lab = int(labels.max()) + 1
    sizes = np.bincount(lab, minlength=n_lab)
    coords = np.nonzero(sel)
    sums = [np.bincount(lab, weights=c.astype(np.float64), minlength=n_lab) for c in coords]
    present = np.nonzero(sizes)[0]
    ranked = sorted(present.tolist(), key=lambda i: (-sizes[i], i))[:n]
    out = []
    for cid in ranked:
        # array axes are (z, y, x) or (y, x); report x first
        cen = [int(np.floor(sm[cid] / sizes[cid] + 0.5)) for sm in sums][::-1]
        out.append((int(cid), int(sizes[cid]), tuple(cen)))
    return out


def component_at(image2d, seed_xy, p: SegParams) -> np.ndarray:
    """Boolean mask of the four-connected segment of ``image2d`` containing ``seed_xy``."""
    img = np.asarray(image2d)
    x, y = int(seed_xy[0]), int(seed_xy[1])
    if not (0 <= y < img.shape[0] and 0 <= x < img.shape[1]):
        raise IndexError(f"seed {(x, y)} outside slice of shape {img.shape}")
    seg = segment_image(img, p, Connectivity.FOUR_2D)
    return seg.labels == seg.labels[y, x]
