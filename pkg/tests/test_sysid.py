import numpy as np
import pytest
from sklearn.base import clone

from curbside.core import ConvergenceError, InsufficientDataError, InvalidParameterError, default_eq_mask, default_sign_mask
from curbside.ingest import RegressionDataset
from curbside.sysid import (
    HIST_EDGES,
    CalibrationError,
    FitConfig,
    FitReport,
    GroupSparseDynamicsRegressor,
    admm_fit,
    calibrate_noise,
    evaluate,
    fit,
    objective,
    project_masks,
    residual_report,
    row_group_prox,
)
from conftest import random_masked_model


def test_prox_examples():
    np.testing.assert_allclose(row_group_prox(np.array([3.0, 4, 0, 0, 0, 0, 0, 0]), 1.0), [2.4, 3.2, 0, 0, 0, 0, 0, 0])
    assert (row_group_prox(np.zeros(8), 5.0) == 0).all()
    assert (row_group_prox(np.eye(8)[0], 2.0) == 0).all()
    with pytest.raises(InvalidParameterError):
        row_group_prox(np.ones(8), -1.0)


def test_prox_is_the_minimizer():
    # the prox point beats nearby perturbations on t*||z|| + 1/2 ||z - v||^2
    rng = np.random.default_rng(0)
    for _ in range(50):
        v, t = rng.normal(size=8) * 3, rng.uniform(0, 5)
        z = row_group_prox(v, t)
        f = lambda q: t * np.linalg.norm(q) + 0.5 * np.sum((q - v) ** 2)
        for _ in range(20):
            assert f(z) <= f(z + rng.normal(size=8) * 1e-3) + 1e-12


def test_projection():
    w = np.full((4, 8), -1.0)
    out = project_masks(w, default_eq_mask(), default_sign_mask())
    assert (out[default_eq_mask()] == 0).all()
    assert out[1, 4] == 0 and out[3, 5] == 0
    assert out[0, 0] == -1


def _random_problem(rng, n=500, noise=0.1):
    x = rng.normal(size=(8, n)) * rng.uniform(0.5, 20, (8, 1))
    w = rng.normal(size=(4, 8))
    return x, w @ x + noise * rng.normal(size=(4, n)), w


def test_unconstrained_rho_zero_matches_normal_equations():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x, y, _ = _random_problem(rng)
        res = admm_fit(x, y, FitConfig.unconstrained(rho=0.0))
        oracle = np.linalg.lstsq(x.T, y.T, rcond=None)[0].T
        assert np.abs(res.w - oracle).max() <= 1e-5


def test_identity_interpolation():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, 200))
    y = x[:4]
    res = admm_fit(x, y, FitConfig.unconstrained(rho=0.0))
    np.testing.assert_allclose(res.w, np.hstack([np.eye(4), np.zeros((4, 4))]), atol=1e-6)


def test_masks_exact_and_objective_decreases():
    rng = np.random.default_rng(4)
    x, y, _ = _random_problem(rng)
    # a penalty near the data curvature; the default of 1.0 suits nearly inactive problems
    res = admm_fit(x, y, FitConfig(rho=5.0, admm_penalty=1e4), trace=True)
    assert (res.w[default_eq_mask()] == 0).all()
    assert (res.w[default_sign_mask() > 0] >= -1e-9).all()
    assert res.final_objective <= res.initial_objective
    assert res.final_objective == pytest.approx(objective(res.w, x, y, 5.0))
    assert len(res.objective_trace) == res.iterations + 1


def test_constrained_solution_is_kkt_optimal():
    # any feasible perturbation of the returned W cannot lower the objective
    rng = np.random.default_rng(8)
    x, y, _ = _random_problem(rng, noise=1.0)
    cfg = FitConfig(rho=50.0, abs_tol=1e-10, rel_tol=1e-10, max_iters=20000, admm_penalty=1e4)
    w = admm_fit(x, y, cfg).w
    base = objective(w, x, y, cfg.rho)
    for _ in range(200):
        cand = project_masks(w + rng.normal(size=w.shape) * 1e-4, cfg.eq_mask, cfg.sign_mask)
        assert objective(cand, x, y, cfg.rho) >= base - 1e-6 * abs(base)


def test_shrinkage_limit_zeroes_rows():
    rng = np.random.default_rng(5)
    x, y, _ = _random_problem(rng)
    res = admm_fit(x, y, FitConfig(rho=1e6))
    assert (res.w == 0).all()
    assert res.iterations < 10


def test_recovery_of_masked_model():
    rng = np.random.default_rng(6)
    truth = random_masked_model(rng)
    n = 5000
    x = np.vstack([rng.uniform(0, 400, n), rng.uniform(0, 80, n), rng.uniform(0, 400, n), rng.uniform(0, 80, n),
                   rng.integers(0, 2, n), rng.integers(0, 2, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n)])
    y = truth.a_prime @ x + rng.uniform(-0.01, 0.01, (4, n))
    model = fit(RegressionDataset(x, y))
    assert np.abs(model.a_prime - truth.a_prime).max() <= 0.05
    assert model.mask_violation() <= 1e-9


def test_rank_deficient_data_warns_and_uses_ridge():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(8, 100))
    x[7] = x[6]
    y = rng.normal(size=(4, 100))
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        res = admm_fit(x, y, FitConfig.unconstrained(rho=0.0))
    assert np.isfinite(res.w).all()


def test_non_convergence_raises_with_residuals():
    rng = np.random.default_rng(9)
    x, y, _ = _random_problem(rng)
    with pytest.raises(ConvergenceError) as err:
        admm_fit(x, y, FitConfig(rho=1.0, max_iters=2, abs_tol=1e-14, rel_tol=1e-14))
    assert err.value.iterations == 2 and err.value.primal_residual >= 0


def test_too_few_columns():
    with pytest.raises(InsufficientDataError):
        admm_fit(np.ones((8, 5)), np.ones((4, 5)), FitConfig())


@pytest.mark.parametrize("kwargs", [dict(rho=-0.1), dict(abs_tol=0), dict(admm_penalty=0), dict(max_iters=0)])
def test_fit_config_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        FitConfig(**kwargs)


def test_regressor_follows_estimator_api():
    rng = np.random.default_rng(10)
    x, y, w = _random_problem(rng, noise=0.0)
    zeros = np.zeros((4, 8))
    est = GroupSparseDynamicsRegressor(rho=0.0, eq_mask=zeros.astype(bool), sign_mask=zeros.astype(np.int8))
    est.fit(x.T, y.T)
    assert est.coef_.shape == (4, 8)
    np.testing.assert_allclose(est.predict(x.T), y.T, atol=1e-4)
    assert est.score(x.T, y.T) > 0.999999
    params = est.get_params()
    assert params["rho"] == 0.0
    assert clone(est).get_params()["rho"] == 0.0
    with pytest.raises(InvalidParameterError):
        est.fit(x.T[:, :5], y.T)


def test_evaluate_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3))
    model = random_masked_model(rng)
    exact = model.a_prime @ x
    report = evaluate(model, RegressionDataset(x, exact))
    assert report.mae == (0.0,) * 4 and report.rmse == (0.0,) * 4

    y = exact.copy()
    y[1] += 2.0
    y[2] += np.array([-1.0, 1.0, 3.0])
    report = evaluate(model, RegressionDataset(x, y))
    assert report.mae[1] == pytest.approx(2.0) and report.rmse[1] == pytest.approx(2.0)
    assert report.mae[2] == pytest.approx(5 / 3) and report.rmse[2] == pytest.approx(np.sqrt(11 / 3))
    assert all(r >= m for r, m in zip(report.rmse, report.mae))


def test_evaluate_rejects_empty():
    with pytest.raises(InsufficientDataError):
        evaluate(random_masked_model(np.random.default_rng(0)), RegressionDataset(np.zeros((8, 0)), np.zeros((4, 0))))


def test_histograms_use_fixed_edges():
    res = np.zeros((4, 10))
    res[0, :] = 1000.0  # outside the flow range
    report = residual_report(res)
    assert report.hist_outside[0] == 10 and sum(report.hist_counts[1]) == 10
    assert np.allclose(report.hist_edges[0], HIST_EDGES[0]) and np.diff(report.hist_edges[1])[0] == pytest.approx(0.5)
    assert np.diff(report.hist_edges[0])[0] == pytest.approx(5.0)


def test_calibrate_uniform_residuals():
    rng = np.random.default_rng(12)
    sample = rng.uniform(-1, 1, (4, 200_000))
    noise = calibrate_noise(residual_report(sample), seed=3)
    oracle = [np.sort(row)[[int(0.1 * (len(row) - 1)), int(0.9 * (len(row) - 1))]] for row in sample]
    for i in range(4):
        assert noise.lo[i] == pytest.approx(-0.8, abs=0.05) and noise.hi[i] == pytest.approx(0.8, abs=0.05)
        assert noise.lo[i] == pytest.approx(oracle[i][0], abs=1e-4) and noise.hi[i] == pytest.approx(oracle[i][1], abs=1e-4)
    assert noise.seed == 3


def test_calibrate_zero_and_one_sided():
    noise = calibrate_noise(residual_report(np.zeros((4, 50))))
    assert noise.lo == (0.0,) * 4 and noise.hi == (0.0,) * 4
    with pytest.raises(CalibrationError):
        calibrate_noise(residual_report(np.ones((4, 50))))
    with pytest.raises(InvalidParameterError):
        FitReport().percentile(10)


def test_report_round_trip():
    rep = residual_report(np.random.default_rng(1).normal(size=(4, 100)))
    back = FitReport.from_dict(rep.to_dict())
    assert back.mae == rep.mae and back.hist_counts == rep.hist_counts
    np.testing.assert_array_equal(back.percentiles, rep.percentiles)
