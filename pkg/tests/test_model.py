import numpy as np
import pytest

from robustmm import (AugmentedParam, Dataset, check_identifiability,
                      exp_model, linear_model, load_csv, location_model,
                      residuals)
from robustmm.exceptions import DomainError
from robustmm.model import augmented_grad, augmented_grad_rows, augmented_hess


def fd_grad(fn, v, h=1e-6):
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    for j in range(v.size):
        e = np.zeros_like(v)
        e[j] = h
        out[j] = (fn(v + e) - fn(v - e)) / (2.0 * h)
    return out


class TestLinearModel:
    def test_eval_grad_hess(self):
        m = linear_model(2)
        x = np.array([1.0, 2.0])
        beta = np.array([3.0, 4.0])
        assert m.value(x, beta) == 11.0
        assert np.array_equal(m.grad(x, beta), x)
        assert np.array_equal(m.hess(x, beta), np.zeros((2, 2)))

    def test_grad_matches_fd(self):
        m = linear_model(3)
        rng = np.random.default_rng(0)
        x = rng.normal(size=3)
        beta = rng.normal(size=3)
        got = m.grad(x, beta)
        want = fd_grad(lambda b: m.value(x, b), beta)
        assert np.allclose(got, want, rtol=1e-5)

    def test_p_validated(self):
        with pytest.raises(ValueError):
            linear_model(0)


class TestExpModel:
    def test_flat_exponent(self):
        m = exp_model()
        assert m.value(np.array([1.3]), np.array([1.0, 0.0])) == 1.0

    def test_substitution(self):
        m = exp_model()
        x = np.array([0.0])
        beta = np.array([2.0, 0.5])
        assert m.value(x, beta) == 2.0
        assert np.allclose(m.grad(x, beta), [1.0, 0.0])

    def test_derivatives_match_fd(self):
        m = exp_model()
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.uniform(-1, 2, size=1)
            beta = rng.uniform([-3, -1], [3, 1])
            g = m.grad(x, beta)
            g_fd = fd_grad(lambda b: m.value(x, b), beta)
            assert np.allclose(g, g_fd, rtol=1e-5, atol=1e-8)
            H = m.hess(x, beta)
            assert np.allclose(H, H.T, atol=1e-10)
            for j in range(2):
                col_fd = fd_grad(lambda b: m.grad(x, b)[j], beta)
                assert np.allclose(H[j], col_fd, rtol=1e-4, atol=1e-7)

    def test_batch_agrees_with_rows(self):
        m = exp_model()
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, size=(15, 1))
        beta = np.array([1.5, 0.7])
        assert np.allclose(m.eval_batch(X, beta),
                           [m.value(x, beta) for x in X])
        assert np.allclose(m.grad_rows(X, beta),
                           [m.grad(x, beta) for x in X])


class TestResiduals:
    def test_exact_fit_is_zero(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 2))
        xi = AugmentedParam(beta=[1.0, -2.0], alpha=0.5)
        y = X @ xi.beta + xi.alpha
        d = Dataset(x=X, y=y)
        assert np.allclose(residuals(d, linear_model(2), xi), 0.0, atol=1e-14)

    def test_alpha_shift(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(10, 1))
        y = rng.normal(size=10)
        d = Dataset(x=X, y=y)
        m = linear_model(1)
        xi = AugmentedParam(beta=[0.3], alpha=1.0)
        shifted = AugmentedParam(beta=[0.3], alpha=1.0 + 2.5)
        assert np.allclose(residuals(d, m, shifted), residuals(d, m, xi) - 2.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(12, 2))
        y = rng.normal(size=12)
        d = Dataset(x=X, y=y)
        m = linear_model(2)
        xi = AugmentedParam(beta=[0.7, -0.2], alpha=0.1)
        want = np.array([y[i] - m.value(X[i], xi.beta) - xi.alpha for i in range(12)])
        assert np.allclose(residuals(d, m, xi), want, rtol=1e-14, atol=1e-15)

    def test_regression_equivariance(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(15, 2))
        y = rng.normal(size=15)
        b = np.array([1.0, 2.0])
        m = linear_model(2)
        xi = AugmentedParam(beta=[0.5, 0.5], alpha=0.0)
        xi_b = AugmentedParam(beta=xi.beta + b, alpha=0.0)
        r1 = residuals(Dataset(x=X, y=y + X @ b), m, xi_b)
        r2 = residuals(Dataset(x=X, y=y), m, xi)
        assert np.allclose(r1, r2, atol=1e-12)


class TestAugmented:
    def test_linear_augmented(self):
        m = linear_model(2)
        x = np.array([3.0, -1.0])
        xi = AugmentedParam(beta=[1.0, 1.0], alpha=0.0)
        assert np.array_equal(augmented_grad(m, x, xi), [3.0, -1.0, 1.0])
        assert np.array_equal(augmented_hess(m, x, xi), np.zeros((3, 3)))

    def test_alpha_component_is_one(self):
        m = exp_model()
        xi = AugmentedParam(beta=[2.0, 0.3], alpha=5.0)
        g = augmented_grad(m, np.array([0.7]), xi)
        assert g[-1] == 1.0

    def test_fd_consistency(self):
        m = exp_model()
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=1)
        xi = AugmentedParam(beta=[1.2, -0.4], alpha=0.3)

        def gbar(v):
            return m.value(x, v[:2]) + v[2]

        got = augmented_grad(m, x, xi)
        want = fd_grad(gbar, xi.as_array())
        assert np.allclose(got, want, rtol=1e-5, atol=1e-8)

    def test_grad_rows_stack(self):
        m = linear_model(2)
        X = np.arange(8.0).reshape(4, 2)
        xi = AugmentedParam(beta=[1.0, 1.0], alpha=0.0)
        J = augmented_grad_rows(m, X, xi)
        assert J.shape == (4, 3)
        assert np.array_equal(J[:, :2], X)
        assert np.array_equal(J[:, 2], np.ones(4))


class TestFdModel:
    def test_matches_analytic_derivatives(self):
        from robustmm import fd_model
        ref = exp_model()
        m = fd_model("exp-fd", 2, ref.value)
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=1)
        beta = np.array([1.4, -0.6])
        assert np.allclose(m.grad(x, beta), ref.grad(x, beta), rtol=1e-5, atol=1e-8)
        assert np.allclose(m.hess(x, beta), ref.hess(x, beta), rtol=1e-3, atol=1e-4)
        assert not m.certified_derivatives

    def test_inference_warns(self):
        from robustmm import FitConfig, asymptotic_cov, fd_model, fit
        rng = np.random.default_rng(11)
        X = rng.normal(size=(60, 1))
        y = 2.0 * X[:, 0] + 0.5 + 0.5 * rng.normal(size=60)
        d = Dataset(x=X, y=y)
        lin = linear_model(1)
        m = fd_model("linear-fd", 1, lin.value, bounds=[(-10.0, 10.0)])
        cfg = FitConfig(n_subsamples=40, seed=2)
        res = fit(d, m, cfg)
        with pytest.warns(UserWarning, match="not certified"):
            asymptotic_cov(d, m, res, cfg)


class TestDataset:
    def test_rejects_nan(self):
        with pytest.raises(DomainError, match="row 1"):
            Dataset(x=np.array([[1.0], [np.nan]]), y=np.array([0.0, 0.0]))

    def test_rejects_inf_response(self):
        with pytest.raises(DomainError, match="row 0"):
            Dataset(x=np.ones((2, 1)), y=np.array([np.inf, 0.0]))

    def test_location_shape(self):
        d = Dataset(x=np.zeros((5, 0)), y=np.arange(5.0))
        assert d.p == 0 and d.n == 5


class TestIdentifiability:
    def test_constant_column_flagged(self):
        rng = np.random.default_rng(8)
        X = np.column_stack([np.ones(30), rng.normal(size=30)])
        rep = check_identifiability(Dataset(x=X, y=rng.normal(size=30)))
        assert rep.at_risk
        assert 0 in rep.constant_columns

    def test_random_design_passes(self):
        rng = np.random.default_rng(9)
        d = Dataset(x=rng.normal(size=(50, 3)), y=rng.normal(size=50))
        rep = check_identifiability(d)
        assert not rep.at_risk
        assert rep.rank == 4

    def test_duplicated_point_flagged(self):
        X = np.tile([[1.0, 2.0]], (25, 1))
        rep = check_identifiability(Dataset(x=X, y=np.zeros(25)))
        assert rep.at_risk
        assert rep.max_duplicate_fraction == 1.0


class TestCsv:
    def test_with_header(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,x1,x2\n1.0,2.0,3.0\n4.0,5.0,6.0\n")
        d = load_csv(f, y_col="y", x_cols=["x1", "x2"])
        assert d.n == 2 and d.p == 2
        assert np.array_equal(d.y, [1.0, 4.0])

    def test_without_header_indices(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("1.0,2.0\n3.0,4.0\n")
        d = load_csv(f, y_col=0)
        assert np.array_equal(d.y, [1.0, 3.0])
        assert np.array_equal(d.x[:, 0], [2.0, 4.0])

    def test_nan_cell_named(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,x\n1.0,nan\n")
        with pytest.raises(DomainError, match="row 2"):
            load_csv(f, y_col="y")

    def test_bad_cell_named(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("1.0,2.0\n1.0,oops\n")
        with pytest.raises(ValueError, match="row 2"):
            load_csv(f, y_col=0)

    def test_quotes_rejected(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text('y,x\n"1.0",2.0\n')
        with pytest.raises(ValueError, match="quoted"):
            load_csv(f, y_col="y")

    def test_missing_column(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,x\n1.0,2.0\n")
        with pytest.raises(ValueError, match="not found"):
            load_csv(f, y_col="z")
