import json
import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardioplan.svr import (
    ModelInvariantError,
    ModelSchemaError,
    Scaler,
    SvrModel,
    SvrParams,
    TrainingError,
    _rbf_matrix,
    dual_objective,
    kkt_residuals,
    load_model,
    predict,
    rbf_kernel,
    save_model,
    solve_dual,
    train,
)


def qp_oracle(K, y, C, eps):
    """Generic QP solve of the epsilon-SVR dual; returns its optimal objective."""
    n = y.size
    w, V = np.linalg.eigh(K)
    R = np.diag(np.sqrt(np.clip(w, 0.0, None))) @ V.T  # K = R'R
    a, b = cp.Variable(n), cp.Variable(n)
    obj = -0.5 * cp.sum_squares(R @ (a - b)) - eps * cp.sum(a + b) + y @ (a - b)
    prob = cp.Problem(cp.Maximize(obj), [cp.sum(a - b) == 0, a >= 0, b >= 0, a <= C, b <= C])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


def random_problem(rng):
    n = int(rng.integers(1, 7))
    d = int(rng.integers(1, 4))
    x = rng.normal(size=(n, d))
    y = rng.normal(size=n) * rng.uniform(0.1, 3.0)
    gamma = float(2.0 ** rng.uniform(-4, 2))
    C = float(2.0 ** rng.uniform(-3, 5))
    eps = float(rng.uniform(0.0, 0.5))
    return _rbf_matrix(x, x, gamma), y, C, eps


def test_dual_matches_qp_oracle_on_100_datasets():
    rng = np.random.default_rng(99)
    for trial in range(100):
        K, y, C, eps = random_problem(rng)
        coef, bias, obj, _ = solve_dual(K, y, C, eps)
        ref = qp_oracle(K, y, C, eps)
        assert abs(obj - ref) <= 1e-4, f"trial {trial}: {obj} vs {ref}"
        assert obj == pytest.approx(dual_objective(K, y, coef, np.abs(coef).sum(), eps), abs=1e-9)
        assert abs(coef.sum()) < 1e-6
        assert np.all(np.abs(coef) <= C * (1 + 1e-12))
        assert kkt_residuals(K, y, coef, bias, C, eps).max() < 1e-3


@given(st.integers(0, 2**32 - 1))
def test_kkt_and_feasibility_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    x = rng.normal(size=(n, 3))
    y = np.sin(x[:, 0]) + 0.1 * rng.normal(size=n)
    K = _rbf_matrix(x, x, 0.5)
    coef, bias, _, _ = solve_dual(K, y, 4.0, 0.1)
    assert abs(coef.sum()) < 1e-6
    assert np.all(np.abs(coef) <= 4.0)
    assert kkt_residuals(K, y, coef, bias, 4.0, 0.1).max() < 1e-3


def test_rbf_kernel_examples():
    assert rbf_kernel([1.0, 2.0], [1.0, 2.0], 3.0) == 1.0
    assert rbf_kernel([0.0], [1.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-12)
    assert rbf_kernel([0.0], [1.0], 1.0) == pytest.approx(0.367879, abs=1e-6)
    assert rbf_kernel([0.0, 5.0], [9.0, -3.0], 1e-15) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rbf_kernel([0.0], [1.0, 2.0], 1.0)


def test_constant_targets_predict_constant(rng):
    x = rng.normal(size=(12, 3))
    m = train(x, np.full(12, 4.25), SvrParams(10.0, 0.5))
    assert m.dual_coeffs.size == 0
    assert np.allclose(predict(m, rng.normal(size=(5, 3))), 4.25)


def test_single_sample():
    m = train(np.array([[1.0, 2.0]]), np.array([3.0]), SvrParams(1.0, 1.0, 0.1))
    assert abs(predict(m, [1.0, 2.0]) - 3.0) <= 0.1 + 1e-12


def test_constant_feature_rejected(rng):
    x = rng.normal(size=(6, 2))
    x[:, 1] = 5.0
    with pytest.raises(TrainingError):
        train(x, rng.normal(size=6), SvrParams(1.0, 1.0))
    m = train(x, rng.normal(size=6), SvrParams(1.0, 1.0), mask=[True, False])
    assert m.selected.tolist() == [0]


def test_empty_mask_rejected(rng):
    with pytest.raises(TrainingError):
        train(rng.normal(size=(5, 2)), rng.normal(size=5), SvrParams(1.0, 1.0), mask=[False, False])


def test_free_points_inside_tube(rng):
    x = rng.normal(size=(40, 2))
    y = x[:, 0] ** 2 + x[:, 1]
    p = SvrParams(8.0, 0.7, 0.1)
    m = train(x, y, p)
    xs = m.scaler.transform(x)
    ys = (y - m.target_mean) / m.target_std
    for sv, c in zip(m.support_vectors, m.dual_coeffs):
        if abs(c) < p.c_penalty * (1 - 1e-6):
            i = int(np.argmin(np.linalg.norm(xs - sv, axis=1)))
            resid = abs(m.decision(sv[None])[0] - ys[i])
            assert resid <= p.epsilon + 1e-3


def test_zero_coefficient_model_predicts_bias():
    m = SvrModel(SvrParams(1.0, 1.0), (True,), ("a",), Scaler(np.zeros(1), np.ones(1)),
                 np.empty((0, 1)), np.empty(0), 2.5)
    assert predict(m, [123.0]) == 2.5


def test_two_sv_hand_expansion():
    sv = np.array([[0.0, 1.0], [2.0, -1.0]])
    coef = np.array([0.75, -0.75])
    scaler = Scaler(np.array([1.0, 0.0]), np.array([2.0, 0.5]))
    m = SvrModel(SvrParams(1.0, 0.3), (True, False, True), ("a", "b", "c"), scaler, sv, coef, 0.4,
                 target_mean=10.0, target_std=2.0)
    x = np.array([3.0, 99.0, 0.25])
    z = np.array([(3.0 - 1.0) / 2.0, 0.25 / 0.5])
    k1 = math.exp(-0.3 * ((z[0] - 0.0) ** 2 + (z[1] - 1.0) ** 2))
    k2 = math.exp(-0.3 * ((z[0] - 2.0) ** 2 + (z[1] + 1.0) ** 2))
    expected = (0.75 * k1 - 0.75 * k2 + 0.4) * 2.0 + 10.0
    assert predict(m, x) == pytest.approx(expected, rel=1e-12)


def test_prediction_invariant_to_sv_order(rng):
    x = rng.normal(size=(25, 3))
    m = train(x, np.cos(x[:, 0]) + x[:, 2], SvrParams(4.0, 0.4))
    perm = rng.permutation(m.dual_coeffs.size)
    m2 = SvrModel(m.params, m.feature_mask, m.feature_names, m.scaler, m.support_vectors[perm],
                  m.dual_coeffs[perm], m.bias, m.target_mean, m.target_std)
    q = rng.normal(size=(7, 3))
    assert np.allclose(predict(m, q), predict(m2, q), atol=1e-12)


def test_predict_missing_features(rng):
    m = train(rng.normal(size=(6, 3)), rng.normal(size=6), SvrParams(1.0, 1.0))
    with pytest.raises(ValueError):
        predict(m, [1.0, 2.0])


def _model(rng):
    x = rng.normal(size=(20, 4))
    return train(x, x @ [1.0, -2.0, 0.5, 0.0], SvrParams(2.0, 0.25), mask=[True, True, False, True],
                 feature_names=["a", "b", "c", "d"])


def test_save_load_identical_predictions(tmp_path, rng):
    m = _model(rng)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    q = rng.normal(size=(9, 4))
    assert predict(back, q).tobytes() == predict(m, q).tobytes()
    assert set(json.loads((tmp_path / "m.json").read_text())) == {
        "params", "feature_mask", "feature_names", "scaler", "support_vectors", "dual_coeffs", "bias",
        "target_scaler"}


def test_load_missing_scaler(tmp_path, rng):
    d = _model(rng).to_dict()
    del d["scaler"]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ModelSchemaError):
        load_model(tmp_path / "m.json")


def test_load_coefficient_above_c(tmp_path, rng):
    d = _model(rng).to_dict()
    # keep the sum at zero so only the bound is violated
    d["dual_coeffs"][0] += 10.0
    d["dual_coeffs"][1] -= 10.0
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ModelInvariantError):
        load_model(tmp_path / "m.json")


def test_load_unbalanced_coefficients(tmp_path, rng):
    d = _model(rng).to_dict()
    d["dual_coeffs"][0] += 0.01
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ModelInvariantError):
        load_model(tmp_path / "m.json")


def test_svr_params_invariants():
    for bad in ((0.0, 1.0, 0.1), (1.0, 0.0, 0.1), (1.0, 1.0, -0.1), (math.inf, 1.0, 0.1)):
        with pytest.raises(ValueError):
            SvrParams(*bad)
