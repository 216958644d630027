import numpy as np
import pytest

from robustmm import (DEFAULT_K0, DEFAULT_K1, bisquare, custom_rho,
                      k_for_breakdown, k_for_efficiency, rho_from_config,
                      verify_r1)
from robustmm.exceptions import DomainError

K_TEST = 1.547


def fd_central(fn, t, h=1e-6):
    return (fn(t + h) - fn(t - h)) / (2.0 * h)


class TestRhoEval:
    def test_zero(self):
        assert bisquare(K_TEST).rho(0.0) == 0.0

    def test_boundary(self):
        f = bisquare(K_TEST)
        assert f.rho(K_TEST) == 1.0
        assert f.rho(-K_TEST) == 1.0

    def test_half_k(self):
        # t = k/2 substitutes to 1 - (1 - 1/4)^3
        f = bisquare(K_TEST)
        assert f.rho(K_TEST / 2.0) == pytest.approx(1.0 - 0.75 ** 3, abs=1e-15)
        assert f.rho(0.7735) == pytest.approx(0.578125, abs=1e-12)

    def test_outside(self):
        f = bisquare(K_TEST)
        assert f.rho(10.0) == 1.0
        assert f.rho(-1e8) == 1.0

    def test_nonfinite_rejected(self):
        f = bisquare(K_TEST)
        with pytest.raises(DomainError):
            f.rho(np.nan)
        with pytest.raises(DomainError):
            f.psi(np.inf)


class TestPsiEval:
    def test_zero_and_boundary(self):
        f = bisquare(K_TEST)
        assert f.psi(0.0) == 0.0
        assert f.psi(K_TEST) == 0.0
        assert f.psi(-K_TEST) == 0.0

    def test_matches_fd_of_rho(self):
        f = bisquare(K_TEST)
        assert f.psi(0.5) == pytest.approx(fd_central(f.rho, 0.5), abs=1e-8)

    def test_psi_prime_at_zero(self):
        f = bisquare(K_TEST)
        assert f.psi_prime(0.0) == pytest.approx(6.0 / K_TEST ** 2, abs=1e-14)

    def test_psi_prime_outside(self):
        assert bisquare(K_TEST).psi_prime(2.0) == 0.0

    def test_psi_prime_matches_fd_of_psi(self):
        f = bisquare(K_TEST)
        assert f.psi_prime(0.9) == pytest.approx(fd_central(f.psi, 0.9), abs=1e-6)


class TestWeight:
    def test_limit_at_zero(self):
        f = bisquare(K_TEST)
        assert f.weight(0.0) == pytest.approx(6.0 / K_TEST ** 2, abs=1e-15)

    def test_vanishes_outside(self):
        f = bisquare(K_TEST)
        assert f.weight(K_TEST) == 0.0
        assert f.weight(5.0) == 0.0

    def test_equals_psi_over_t(self):
        f = bisquare(K_TEST)
        assert f.weight(0.3) == pytest.approx(f.psi(0.3) / 0.3, rel=1e-14)


class TestDerivativeChain:
    @pytest.mark.parametrize("k", [1.547, 4.685])
    def test_dense_grid(self, k):
        f = bisquare(k)
        t = np.linspace(-1.5 * k, 1.5 * k, 10_000)
        h = 1e-6
        fd_rho = (f.rho(t + h) - f.rho(t - h)) / (2.0 * h)
        fd_psi = (f.psi(t + h) - f.psi(t - h)) / (2.0 * h)
        assert np.all(np.abs(f.psi(t) - fd_rho) <= 1e-7 * (1.0 + np.abs(f.psi(t))))
        assert np.all(np.abs(f.psi_prime(t) - fd_psi) <= 1e-6 * (1.0 + np.abs(f.psi_prime(t))))


class TestSymmetryAndRange:
    def test_evenness_exact(self):
        f = bisquare(K_TEST)
        rng = np.random.default_rng(7)
        t = rng.uniform(-3 * K_TEST, 3 * K_TEST, 1_000_000)
        assert np.array_equal(f.rho(t), f.rho(-t))
        assert np.array_equal(f.psi(t), -f.psi(-t))

    def test_range_and_monotonicity(self):
        f = bisquare(K_TEST)
        t = np.linspace(0.0, 3 * K_TEST, 5000)
        vals = f.rho(t)
        assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
        assert np.all(np.diff(vals) >= -1e-15)

    def test_majorization_larger_k_smaller_loss(self):
        f0 = bisquare(DEFAULT_K0)
        f1 = bisquare(DEFAULT_K1)
        t = np.linspace(-10, 10, 20001)
        assert np.all(f1.rho(t) <= f0.rho(t) + 1e-15)


class TestVerifyR1:
    @pytest.mark.parametrize("k", [1.547, 4.685])
    def test_bisquare_passes(self, k):
        assert verify_r1(bisquare(k), 1001)

    def test_corrupted_rho_fails(self):
        # flat spot inside (-k, k) followed by a jump: breaks concavity
        k = 2.0
        base = bisquare(k)

        def bad_rho(t):
            t = np.asarray(t, dtype=float)
            vals = np.asarray(base.rho(t))
            flat = (np.abs(t) > 0.5) & (np.abs(t) < 1.0)
            vals = np.where(flat, base.rho(0.5), vals)
            return vals

        f = custom_rho(k, bad_rho, base.psi, base.psi_prime)
        assert not verify_r1(f, 1001)

    def test_grid_size_validated(self):
        with pytest.raises(ValueError):
            verify_r1(bisquare(1.5), 2)


class TestTuning:
    def test_breakdown_constant(self):
        assert k_for_breakdown(0.5) == pytest.approx(1.5476, abs=1e-4)

    def test_efficiency_constant(self):
        assert k_for_efficiency(0.95) == pytest.approx(4.685, abs=1e-3)

    def test_defaults_match_solvers(self):
        assert DEFAULT_K0 == pytest.approx(k_for_breakdown(0.5), abs=1e-4)
        assert DEFAULT_K1 == pytest.approx(k_for_efficiency(0.95), abs=1e-3)


class TestConstruction:
    def test_from_config(self):
        f = rho_from_config("bisquare", "1.547")
        assert f.k == 1.547

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            rho_from_config("huber", "1.345")

    def test_bad_k(self):
        with pytest.raises(ValueError):
            bisquare(-1.0)
        with pytest.raises(ValueError):
            rho_from_config("bisquare", "abc")

    def test_custom_weight_limit(self):
        base = bisquare(2.0)
        f = custom_rho(2.0, base.rho, base.psi, base.psi_prime)
        assert f.weight(0.0) == pytest.approx(base.psi_prime(0.0), rel=1e-9)
        assert f.weight(0.7) == pytest.approx(base.weight(0.7), rel=1e-12)
