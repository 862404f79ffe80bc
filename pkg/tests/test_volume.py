import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cardioplan.volume import (
    BoundsError,
    BoxRoi,
    PhysicalPoint,
    Volume,
    VolumeError,
    VolumeMeta,
    index_from_world,
    load_volume,
    roi_stats,
    save_volume,
    world_from_index,
)


def _vol(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0), fill=0.0):
    nx, ny, nz = dims
    return Volume(dims, spacing, np.full(nx * ny * nz, fill, dtype=np.float32))


@pytest.mark.parametrize(
    "spacing, idx, expected",
    [
        ((1, 1, 1), (0, 0, 0), (0, 0, 0)),
        ((2, 2, 5), (1, 1, 1), (2, 2, 5)),
        ((1.5, 1.5, 8), (10, 20, 3), (15, 30, 24)),
    ],
)
def test_world_from_index_examples(spacing, idx, expected):
    v = _vol(dims=(32, 32, 8), spacing=spacing)
    p = world_from_index(v, idx)
    assert (p.x, p.y, p.z) == pytest.approx(expected)


def test_world_from_index_out_of_bounds():
    with pytest.raises(BoundsError):
        world_from_index(_vol(), (4, 0, 0))


def test_index_from_world_rounds_to_nearest():
    v = _vol(spacing=(2.0, 2.0, 2.0))
    assert index_from_world(v, PhysicalPoint(2.9, 3.1, 0.2)) == (1, 2, 0)


@given(st.integers(0, 9), st.integers(0, 7), st.integers(0, 5),
       st.floats(0.3, 5.0), st.floats(0.3, 5.0), st.floats(0.3, 9.0))
def test_index_world_roundtrip_on_lattice(i, j, k, sx, sy, sz):
    v = _vol(dims=(10, 8, 6), spacing=(sx, sy, sz))
    assert index_from_world(v, world_from_index(v, (i, j, k))) == (i, j, k)


def test_roi_stats_constant():
    assert roi_stats(_vol(fill=7.0), BoxRoi((0, 0, 0), (2, 2, 2))) == (7.0, 0.0)


def test_roi_stats_two_values():
    data = np.zeros((1, 1, 2), dtype=np.float32)
    data[0, 0] = [1.0, 3.0]
    v = Volume.from_array(data, (1, 1, 1))
    assert roi_stats(v, BoxRoi((0, 0, 0), (2, 1, 1))) == (2.0, 1.0)


def test_roi_stats_full_volume(rng):
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    v = Volume.from_array(arr, (1, 1, 1))
    m, s = roi_stats(v, BoxRoi((0, 0, 0), (5, 4, 3)))
    assert m == pytest.approx(arr.astype(np.float64).mean())
    assert s == pytest.approx(arr.astype(np.float64).std())


def test_roi_outside_volume():
    with pytest.raises(BoundsError):
        roi_stats(_vol(), BoxRoi((0, 0, 0), (5, 1, 1)))


def test_empty_roi_rejected():
    with pytest.raises(ValueError):
        BoxRoi((1, 0, 0), (1, 2, 2))


@given(arrays(np.float32, (4, 5, 6), elements=st.floats(-1e3, 1e3, width=32)), st.integers(1, 5))
def test_roi_stats_pooled_over_disjoint_boxes(arr, split):
    v = Volume.from_array(arr, (1, 1, 1))
    a = BoxRoi((0, 0, 0), (split, 5, 4))
    b = BoxRoi((split, 0, 0), (6, 5, 4))
    (ma, sa), (mb, sb) = roi_stats(v, a), roi_stats(v, b)
    na, nb = split * 20, (6 - split) * 20
    mean = (na * ma + nb * mb) / (na + nb)
    var = (na * (sa**2 + ma**2) + nb * (sb**2 + mb**2)) / (na + nb) - mean**2
    m, s = roi_stats(v, BoxRoi((0, 0, 0), (6, 5, 4)))
    assert m == pytest.approx(mean, abs=1e-6)
    assert s**2 == pytest.approx(var, rel=1e-6, abs=1e-3)


def test_invariants():
    with pytest.raises(VolumeError):
        Volume((2, 2, 2), (1, 1, 1), np.zeros(7))
    with pytest.raises(VolumeError):
        Volume((2, 2, 2), (1, 0, 1), np.zeros(8))
    with pytest.raises(VolumeError):
        Volume((1, 1, 2), (1, 1, 1), np.array([0.0, np.nan]))
    with pytest.raises(VolumeError):
        VolumeMeta(n_coils=0)


@given(arrays(np.float32, (3, 4, 5), elements=st.floats(allow_nan=False, allow_infinity=False, width=32)),
       st.text(min_size=1, max_size=12), st.integers(1, 32),
       st.one_of(st.none(), st.floats(0.1, 100)))
def test_save_load_roundtrip(tmp_path_factory, arr, pid, coils, snr):
    v = Volume.from_array(arr, (1.5, 2.0, 8.0), VolumeMeta(pid, coils, snr, "test"))
    path = save_volume(v, tmp_path_factory.mktemp("vol") / "case")
    w = load_volume(path)
    assert w == v
    assert w.data.tobytes() == v.data.tobytes()


def test_load_length_mismatch(tmp_path):
    save_volume(_vol(dims=(2, 2, 2)), tmp_path / "v")
    (tmp_path / "v.f32").write_bytes(np.zeros(7, "<f4").tobytes())
    with pytest.raises(VolumeError, match="payload"):
        load_volume(tmp_path / "v.json")


def test_load_zero_coils(tmp_path):
    save_volume(_vol(dims=(2, 2, 2)), tmp_path / "v")
    hdr = json.loads((tmp_path / "v.json").read_text())
    hdr["n_coils"] = 0
    (tmp_path / "v.json").write_text(json.dumps(hdr))
    with pytest.raises(VolumeError, match="n_coils"):
        load_volume(tmp_path / "v")


def test_load_malformed_header(tmp_path):
    save_volume(_vol(dims=(2, 2, 2)), tmp_path / "v")
    (tmp_path / "v.json").write_text("{not json")
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "v")


def test_load_non_finite_payload(tmp_path):
    save_volume(_vol(dims=(2, 2, 2)), tmp_path / "v")
    bad = np.zeros(8, "<f4")
    bad[3] = np.inf
    (tmp_path / "v.f32").write_bytes(bad.tobytes())
    with pytest.raises(VolumeError, match="non-finite"):
        load_volume(tmp_path / "v")
