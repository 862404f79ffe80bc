import json

import numpy as np
import pytest

from cardioplan.cli import main
from cardioplan.volume import Volume, load_volume, save_volume


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    assert main(["phantom", "--n", "3", "--seed", "3", "--out-dir", str(out)]) == 0
    return out


def _first_volume(d):
    return sorted(d.glob("P*.json"))[0]


def test_phantom_outputs(phantom_dir):
    manifest = json.loads((phantom_dir / "manifest.json").read_text())
    assert len(manifest) == 3
    assert (phantom_dir / "rois.json").exists()
    cfg = json.loads((phantom_dir / "phantom_config.json").read_text())
    assert cfg["seed"] == 3 and cfg["n"] == 3 and "ranges" in cfg["resolved"]


def test_unknown_flag_is_usage_error(capsys):
    assert main(["phantom", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["nonsense"]) == 2


def test_missing_input_is_domain_error(tmp_path):
    assert main(["features", "--in", str(tmp_path / "nope.json"), "--out", str(tmp_path / "f.json")]) == 1


def test_noise_needs_rois(phantom_dir, tmp_path):
    assert main(["noise", "--in", str(_first_volume(phantom_dir)), "--out-dir", str(tmp_path)]) == 2


def test_noise_ladder(phantom_dir, tmp_path):
    vol = _first_volume(phantom_dir)
    rc = main(["noise", "--in", str(vol), "--rois", str(phantom_dir / "rois.json"), "--targets", "25,10",
               "--seed", "1", "--out-dir", str(tmp_path)])
    assert rc == 0
    outs = sorted(tmp_path.glob("*_snr*.json"))
    assert len(outs) == 2
    tags = sorted(load_volume(p).meta.snr_tag for p in outs)
    assert tags[0] == pytest.approx(10.0, rel=0.05) and tags[1] == pytest.approx(25.0, rel=0.05)
    assert (tmp_path / "noise_config.json").exists()


def test_noise_bad_targets_is_usage_error(phantom_dir, tmp_path):
    rc = main(["noise", "--in", str(_first_volume(phantom_dir)), "--rois", str(phantom_dir / "rois.json"),
               "--targets", "10,20", "--out-dir", str(tmp_path)])
    assert rc == 2


def test_segment_and_bad_slice(phantom_dir, tmp_path):
    vol = _first_volume(phantom_dir)
    out = tmp_path / "seg.json"
    assert main(["segment", "--in", str(vol), "--slice", "10", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert sum(c["size"] for c in d["components"]) == np.prod(d["shape"])
    assert main(["segment", "--in", str(vol), "--slice", "999", "--out", str(out)]) == 1
    assert main(["segment", "--in", str(vol), "--slice", "3", "--k", "-1", "--out", str(out)]) == 2


def test_features(phantom_dir, tmp_path):
    vol = _first_volume(phantom_dir)
    truth = json.loads((phantom_dir / "manifest.json").read_text())[0]["truth"]
    c = ",".join(str(x) for x in truth["lv_centroid_mm"])
    out = tmp_path / "f.json"
    assert main(["features", "--in", str(vol), "--lv-centroid", c, "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert "torso_width_mm" in rec and "sa_init_azimuth_deg" in rec
    assert json.loads((tmp_path / "features_config.json").read_text())["lv_centroid"] == truth["lv_centroid_mm"]


def test_features_on_blank_volume_is_domain_error(tmp_path):
    p = save_volume(Volume.from_array(np.zeros((4, 16, 16)), (1.0, 1.0, 1.0)), tmp_path / "blank")
    assert main(["features", "--in", str(p), "--out", str(tmp_path / "f.json")]) == 1


def test_inputs_not_mutated(phantom_dir, tmp_path):
    vol = _first_volume(phantom_dir)
    before = {p.name: p.read_bytes() for p in phantom_dir.iterdir() if p.is_file()}
    main(["features", "--in", str(vol), "--out", str(tmp_path / "f.json")])
    after = {p.name: p.read_bytes() for p in phantom_dir.iterdir() if p.is_file()}
    assert before == after


def test_search_train_predict_evaluate(phantom_dir, tmp_path):
    manifest = str(phantom_dir / "manifest.json")
    ga = ["--pop", "8", "--gens", "1", "--seed", "2"]
    model = tmp_path / "lv_cx.json"
    assert main(["search", "--dataset", manifest, "--target", "lv_cx", *ga, "--out", str(model)]) == 0
    assert model.exists() and (tmp_path / "lv_cx_front.json").exists()

    stack = tmp_path / "stack.json"
    assert main(["train", "--manifest", manifest, *ga, "--out", str(stack)]) == 0
    cfg = json.loads((tmp_path / "train_config.json").read_text())
    assert cfg["resolved"]["ga"]["population_size"] == 8

    vols = [str(p) for p in sorted(phantom_dir.glob("P*.json"))]
    pred = tmp_path / "pred.json"
    assert main(["predict", "--stack", str(stack), "--in", *vols, "--out", str(pred)]) == 0
    assert len(json.loads(pred.read_text())) == 3

    ev = tmp_path / "ev.json"
    assert main(["evaluate", "--pred", str(pred), "--manifest", manifest, "--out", str(ev)]) == 0
    rep = json.loads(ev.read_text())
    assert rep["n_cases"] == 3 and rep["rows"]["lv"]["n"] + rep["n_failed"] == 3


def test_bad_stack_is_domain_error(phantom_dir, tmp_path):
    bad = tmp_path / "stack.json"
    bad.write_text("{not json")
    vol = str(_first_volume(phantom_dir))
    assert main(["predict", "--stack", str(bad), "--in", vol, "--out", str(tmp_path / "p.json")]) == 1


def test_bad_ga_config_is_usage_error(phantom_dir, tmp_path):
    manifest = str(phantom_dir / "manifest.json")
    assert main(["train", "--manifest", manifest, "--pop", "7", "--out", str(tmp_path / "s.json")]) == 2
    assert main(["train", "--manifest", manifest, "--threads", "0", "--out", str(tmp_path / "s.json")]) == 2
