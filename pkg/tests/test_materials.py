"""Unit tests for constitutive laws, rotation transforms, and selection weights."""

import numpy as np
import pytest

from vstopo.materials import (CandidateAngles, constitutive_from_engineering,
                              constitutive_from_entries, dmo_effective_constitutive,
                              dmo_weight_gradient, dmo_weights, rotate_constitutive,
                              rotation_matrix, rotation_matrix_derivative)

D_ORTHO = constitutive_from_entries(0.5448, 0.0383, 0.1277, 0.0456)
D_ISO = constitutive_from_engineering(1.0, 1.0, 1.0 / 2.6, 0.3)


class TestConstitutive:
    def test_engineering_constants_orthotropic(self):
        D = constitutive_from_engineering(2.0, 1.0, 0.25, 0.3)
        # closed form: nu_yx = 0.15, denom = 0.955
        assert D[0, 0] == pytest.approx(2.0 / 0.955, rel=1e-12)
        assert D[1, 1] == pytest.approx(1.0 / 0.955, rel=1e-12)
        assert D[0, 1] == pytest.approx(0.3 / 0.955, rel=1e-12)
        assert D[2, 2] == 0.25
        assert np.allclose([D[0, 0], D[1, 1], D[0, 1]], [2.09424, 1.04712, 0.31414], atol=5e-6)

    def test_engineering_constants_isotropic(self):
        assert D_ISO[0, 0] == pytest.approx(1.0989011, abs=1e-7)
        assert D_ISO[0, 1] == pytest.approx(0.32967033, abs=1e-8)
        assert D_ISO[2, 2] == pytest.approx(0.38461538, abs=1e-8)
        assert D_ISO[0, 0] == pytest.approx(D_ISO[1, 1], rel=1e-15)

    def test_zero_poisson_decouples(self):
        D = constitutive_from_engineering(3.0, 3.0, 1.0, 0.0)
        assert D[0, 1] == 0.0
        assert D[0, 0] == 3.0 and D[1, 1] == 3.0

    def test_nonphysical_poisson_rejected(self):
        with pytest.raises(ValueError, match="Poisson"):
            constitutive_from_engineering(1.0, 1.0, 0.4, 1.1)

    def test_indefinite_entries_rejected(self):
        with pytest.raises(ValueError, match="positive definite"):
            constitutive_from_entries(1.0, 1.5, 1.0, 0.3)


class TestRotation:
    def test_zero_angle_is_identity(self):
        assert np.allclose(rotation_matrix(0.0), np.eye(3), atol=1e-15)

    def test_right_angle(self):
        expected = np.array([[0, 1, 0], [1, 0, 0], [0, 0, -1]], dtype=float)
        assert np.allclose(rotation_matrix(np.pi / 2), expected, atol=1e-15)

    def test_quarter_turn(self):
        expected = np.array([[0.5, 0.5, -1.0], [0.5, 0.5, 1.0], [0.5, -0.5, 0.0]])
        assert np.allclose(rotation_matrix(np.pi / 4), expected, atol=1e-15)

    def test_inverse_rotation_identity(self):
        for theta in np.linspace(-1.5, 1.5, 17):
            prod = rotation_matrix(theta) @ rotation_matrix(-theta)
            assert np.abs(prod - np.eye(3)).max() <= 1e-12

    def test_derivative_plugins(self):
        assert np.allclose(rotation_matrix_derivative(0.0),
                           [[0, 0, -2], [0, 0, 2], [1, -1, 0]], atol=1e-15)
        assert np.allclose(rotation_matrix_derivative(np.pi / 4),
                           [[-1, 1, 0], [1, -1, 0], [0, 0, -2]], atol=1e-15)

    def test_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        step = 1e-5
        for theta in rng.uniform(-np.pi, np.pi, 100):
            fd = (rotation_matrix(theta + step) - rotation_matrix(theta - step)) / (2 * step)
            assert np.abs(rotation_matrix_derivative(theta) - fd).max() <= 1e-8

    def test_isotropic_invariance(self):
        rng = np.random.default_rng(3)
        for theta in rng.uniform(-np.pi, np.pi, 100):
            assert np.abs(rotate_constitutive(D_ISO, theta) - D_ISO).max() <= 1e-12

    def test_rotated_is_pi_periodic(self):
        rng = np.random.default_rng(5)
        for theta in rng.uniform(-np.pi, np.pi, 50):
            a = rotate_constitutive(D_ORTHO, theta)
            b = rotate_constitutive(D_ORTHO, theta + np.pi)
            assert np.abs(a - b).max() <= 1e-12

    def test_rotation_by_90_swaps_normal_moduli(self):
        Dr = rotate_constitutive(D_ORTHO, np.pi / 2)
        assert Dr[0, 0] == pytest.approx(0.1277, abs=1e-12)
        assert Dr[1, 1] == pytest.approx(0.5448, abs=1e-12)
        assert Dr[0, 1] == pytest.approx(0.0383, abs=1e-12)
        assert Dr[2, 2] == pytest.approx(0.0456, abs=1e-12)

    def test_rotation_by_45_against_dense_product(self):
        lam = np.array([[0.5, 0.5, -1.0], [0.5, 0.5, 1.0], [0.5, -0.5, 0.0]])
        expected = lam @ D_ORTHO @ lam.T
        got = rotate_constitutive(D_ORTHO, np.pi / 4)
        assert np.abs(got - expected).max() <= 1e-14
        assert np.abs(got - got.T).max() == 0.0

    def test_batched_angles(self):
        thetas = np.array([0.0, 0.3, -1.1])
        batch = rotate_constitutive(D_ORTHO, thetas)
        assert batch.shape == (3, 3, 3)
        for i, t in enumerate(thetas):
            assert np.allclose(batch[i], rotate_constitutive(D_ORTHO, t))


class TestCandidateAngles:
    def test_minimum_two_angles(self):
        with pytest.raises(ValueError, match="at least 2"):
            CandidateAngles([0.0])

    def test_duplicates_modulo_180_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            CandidateAngles([-90.0, 90.0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            CandidateAngles([0.0, 180.0])

    def test_radians(self):
        cands = CandidateAngles([0, -45, 45, 90])
        assert np.allclose(cands.radians, np.deg2rad([0, -45, 45, 90]))


class TestSelectionWeights:
    def test_one_hot_saturates(self):
        w = dmo_weights(np.array([1.0, 0.0]), p=3.0, eps=1e-9)
        assert w[0] == pytest.approx(1.0, abs=1e-8)
        assert w[1] <= 1e-17

    def test_two_half_densities(self):
        w = dmo_weights(np.array([0.5, 0.5]), p=3.0, eps=1e-9)
        assert np.allclose(w, 0.125 * 0.875, atol=1e-8)

    def test_four_half_densities(self):
        w = dmo_weights(np.full(4, 0.5), p=3.0, eps=1e-9)
        assert np.allclose(w, 0.125 * 0.875 ** 3, atol=1e-8)
        assert w[0] == pytest.approx(0.08374023, abs=1e-7)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            dmo_weights(np.array([0.5, 1.2]), p=3.0)

    def test_monotonicity(self):
        rng = np.random.default_rng(7)
        for p in (1.0, 2.0, 3.0):
            chi = rng.uniform(0.05, 0.95, 4)
            w0 = dmo_weights(chi, p)
            up = chi.copy()
            up[1] += 0.01
            w_up = dmo_weights(up, p)
            assert w_up[1] > w0[1]  # own weight increases
            assert all(w_up[k] < w0[k] for k in (0, 2, 3))  # others decrease

    def test_gradient_one_hot_off_diagonal_vanishes(self):
        g = dmo_weight_gradient(np.array([1.0, 0.0, 0.0]), p=3.0, eps=1e-9)
        off = g - np.diag(np.diag(g))
        assert np.abs(off).max() <= 1e-7

    def test_gradient_linear_case(self):
        g = dmo_weight_gradient(np.array([0.5, 0.5]), p=1.0, eps=1e-9)
        assert g[0, 0] == pytest.approx(0.5, abs=1e-8)
        assert g[0, 1] == pytest.approx(-0.5, abs=1e-8)

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_gradient_matches_finite_differences(self, p):
        rng = np.random.default_rng(int(p))
        step = 1e-7
        for _ in range(100):
            n = rng.integers(2, 6)
            chi = rng.uniform(0.05, 0.95, n)
            g = dmo_weight_gradient(chi, p)
            for j in range(n):
                hi = chi.copy()
                hi[j] += step
                lo = chi.copy()
                lo[j] -= step
                fd = (dmo_weights(hi, p) - dmo_weights(lo, p)) / (2 * step)
                denom = np.maximum(np.abs(fd), 1e-8)
                assert (np.abs(g[:, j] - fd) / denom).max() <= 1e-6

    def test_batched_rows_match_single_rows(self):
        rng = np.random.default_rng(9)
        chi = rng.uniform(0, 1, (6, 4))
        w = dmo_weights(chi, 3.0)
        g = dmo_weight_gradient(chi, 3.0)
        for e in range(6):
            assert np.allclose(w[e], dmo_weights(chi[e], 3.0))
            assert np.allclose(g[e], dmo_weight_gradient(chi[e], 3.0))


class TestEffectiveConstitutive:
    CANDS = CandidateAngles([0, -45, 45, 90])

    def test_one_hot_recovers_rotated_candidate(self):
        chi = np.array([0.0, 0.0, 1.0, 0.0])
        De = dmo_effective_constitutive(chi, self.CANDS, D_ORTHO, p=3.0, eps=1e-9)
        expected = rotate_constitutive(D_ORTHO, np.deg2rad(45))
        assert np.abs(De - expected).max() <= 1e-7

    def test_all_zero_gives_void(self):
        De = dmo_effective_constitutive(np.zeros(4), self.CANDS, D_ORTHO, p=3.0, eps=1e-9)
        assert np.abs(De).max() <= 1e-8

    def test_uniform_isotropic_scales_base(self):
        De = dmo_effective_constitutive(np.full(4, 0.5), self.CANDS, D_ISO, p=3.0, eps=1e-9)
        assert np.abs(De - 4 * 0.125 * 0.875 ** 3 * D_ISO).max() <= 1e-6
        assert De[0, 0] == pytest.approx(0.33496 * D_ISO[0, 0], rel=1e-4)
