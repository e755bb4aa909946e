import numpy as np
import pytest
from scipy.linalg import subspace_angles

from conftest import orthonormality_residual, random_horizontal
from subgossip.manifold import (
    RankDeficient,
    Subspace,
    SubspacesTooFar,
    TangentVector,
    as_matrix,
    dist_sq,
    egrad_to_rgrad,
    exp_map,
    frechet_mean,
    log_map,
    principal_angles,
    project_tangent,
    random_subspace,
    reorthonormalize,
)

# Hand-computed closed forms on Gr(1, 2), where a subspace is a line in the
# plane and the geodesic from span(e1) with unit tangent e2 is
# t -> span((cos t, sin t)).
E1 = np.array([[1.0], [0.0]])
E2 = np.array([[0.0], [1.0]])
DIST_SQ_45_DEG = np.pi**2 / 32  # 0.5 * (pi/4)^2


def line(theta):
    return Subspace(np.array([[np.cos(theta)], [np.sin(theta)]]))


class TestSubspace:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Subspace(np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            Subspace(np.ones(3))
        with pytest.raises(ValueError):
            Subspace(np.eye(3))  # r < m required

    def test_basis_is_readonly_copy(self):
        raw = np.vstack([np.eye(2), np.zeros((2, 2))])
        U = Subspace(raw)
        raw[0, 0] = 7.0
        assert U.basis[0, 0] == 1.0
        with pytest.raises(ValueError):
            U.basis[0, 0] = 0.0
        assert (U.m, U.r) == (4, 2)

    def test_accepts_near_orthonormal_within_tolerance(self):
        rng = np.random.default_rng(0)
        U = random_subspace(20, 3, rng)
        perturbed = U.basis + 1e-12 * rng.standard_normal(U.basis.shape)
        Subspace(perturbed)  # must not raise


class TestTangentVector:
    def test_rejects_non_horizontal(self):
        U = Subspace(E1)
        with pytest.raises(ValueError, match="horizontal"):
            TangentVector(np.array([[0.5], [1.0]]), U)

    def test_rejects_shape_mismatch(self):
        U = Subspace(E1)
        with pytest.raises(ValueError, match="shape"):
            TangentVector(np.zeros((3, 1)), U)

    def test_norm(self):
        xi = TangentVector(3.0 * E2, Subspace(E1))
        assert xi.norm == 3.0


class TestProjection:
    def test_hand_value(self):
        U = Subspace(E1)
        xi = project_tangent(U, np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(xi.direction, np.array([[0.0], [4.0]]))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        U = random_subspace(30, 4, rng)
        xi = project_tangent(U, rng.standard_normal((30, 4)))
        again = project_tangent(U, xi.direction)
        np.testing.assert_allclose(again.direction, xi.direction, atol=1e-14)

    def test_egrad_to_rgrad_is_projection(self):
        rng = np.random.default_rng(2)
        U = random_subspace(10, 2, rng)
        Z = rng.standard_normal((10, 2))
        np.testing.assert_array_equal(
            egrad_to_rgrad(U, Z).direction, project_tangent(U, Z).direction
        )

    def test_horizontality_of_result(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            U = random_subspace(25, 5, rng)
            Z = 100.0 * rng.standard_normal((25, 5))
            xi = project_tangent(U, Z)
            assert np.linalg.norm(U.basis.T @ xi.direction) <= 1e-12 * np.linalg.norm(Z)


class TestExpMap:
    def test_circle_closed_form(self):
        U = Subspace(E1)
        xi = TangentVector(E2, U)
        t = np.pi / 6
        got = exp_map(U, xi, scale=t)
        np.testing.assert_allclose(
            got.basis, np.array([[np.cos(t)], [np.sin(t)]]), atol=1e-15
        )

    def test_zero_scale_returns_representative(self):
        rng = np.random.default_rng(4)
        U = random_subspace(12, 3, rng)
        xi = random_horizontal(U, rng)
        assert exp_map(U, xi, scale=0.0) is U

    def test_anchor_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        U = random_subspace(8, 2, rng)
        V = random_subspace(8, 2, rng)
        xi = random_horizontal(U, rng)
        with pytest.raises(ValueError, match="anchor"):
            exp_map(V, xi)

    def test_orthonormal_after_long_composition(self):
        # 1000 composed steps with modest tangents, reorthonormalizing every
        # 100 steps (the engine's default cadence).
        rng = np.random.default_rng(6)
        U = random_subspace(50, 5, rng)
        for k in range(1000):
            U = exp_map(U, random_horizontal(U, rng, length=0.1))
            if (k + 1) % 100 == 0:
                U = reorthonormalize(U)
        assert orthonormality_residual(U.basis) <= 1e-10

    def test_geodesic_speed(self):
        # sqrt(2 * dist_sq(U, exp(U, xi, t))) == t * ||xi|| while inside the
        # injectivity radius.
        rng = np.random.default_rng(7)
        U = random_subspace(20, 3, rng)
        xi = random_horizontal(U, rng, length=1.0)
        for t in (0.1, 0.5, 1.0):
            d = np.sqrt(2.0 * dist_sq(U, exp_map(U, xi, scale=t)))
            np.testing.assert_allclose(d, t, rtol=1e-10)


class TestLogMap:
    def test_circle_closed_form(self):
        U = Subspace(E1)
        xi = log_map(U, line(np.pi / 4))
        np.testing.assert_allclose(xi.direction, (np.pi / 4) * E2, atol=1e-12)

    def test_inverse_of_exp(self):
        rng = np.random.default_rng(8)
        for m, r in [(5, 2), (50, 5)]:
            for _ in range(10):
                U = random_subspace(m, r, rng)
                xi = random_horizontal(U, rng, length=0.5 * rng.uniform(0.1, 1.0))
                back = log_map(U, exp_map(U, xi))
                np.testing.assert_allclose(
                    back.direction, xi.direction, atol=1e-8
                )

    def test_exp_of_log_reaches_target_span(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            U = random_subspace(30, 4, rng)
            V = random_subspace(30, 4, rng)
            R = exp_map(U, log_map(U, V)).basis
            # sin of the largest principal angle; accurate near zero where
            # arccos of a singular value saturates around sqrt(eps).
            gap = np.linalg.norm(V.basis - R @ (R.T @ V.basis), ord=2)
            assert gap <= 1e-8

    def test_result_is_horizontal(self):
        rng = np.random.default_rng(10)
        U = random_subspace(40, 6, rng)
        V = random_subspace(40, 6, rng)
        xi = log_map(U, V)
        assert np.linalg.norm(U.basis.T @ xi.direction) <= 1e-12

    def test_orthogonal_spans_rejected(self):
        I4 = np.eye(4)
        U = Subspace(I4[:, :2])
        V = Subspace(I4[:, 2:])
        with pytest.raises(SubspacesTooFar):
            log_map(U, V)
        with pytest.raises(SubspacesTooFar):
            dist_sq(U, V)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            log_map(random_subspace(10, 2, rng), random_subspace(10, 3, rng))


class TestDistance:
    def test_circle_45_degrees(self):
        np.testing.assert_allclose(
            dist_sq(Subspace(E1), line(np.pi / 4)), DIST_SQ_45_DEG, rtol=1e-12
        )

    def test_half_sum_of_squared_principal_angles(self):
        # Independent oracle: principal angles from scipy (Björck–Golub),
        # which never goes through the logarithm.
        rng = np.random.default_rng(12)
        for _ in range(100):
            U = random_subspace(50, 5, rng)
            V = random_subspace(50, 5, rng)
            oracle = np.sort(subspace_angles(U.basis, V.basis))
            assert abs(2.0 * dist_sq(U, V) - np.sum(oracle**2)) <= 1e-8

    def test_symmetry(self):
        rng = np.random.default_rng(13)
        U = random_subspace(30, 4, rng)
        V = random_subspace(30, 4, rng)
        np.testing.assert_allclose(dist_sq(U, V), dist_sq(V, U), rtol=1e-9)

    def test_zero_for_same_span(self):
        rng = np.random.default_rng(14)
        U = random_subspace(20, 3, rng)
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        rotated = Subspace(U.basis @ Q)
        assert dist_sq(U, rotated) <= 1e-12


class TestPrincipalAngles:
    def test_range_and_order(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            U = random_subspace(50, 5, rng)
            V = random_subspace(50, 5, rng)
            theta = principal_angles(U, V)
            assert theta.shape == (5,)
            assert np.all(theta >= 0.0) and np.all(theta <= np.pi / 2 + 1e-15)
            assert np.all(np.diff(theta) >= -1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(16)
        U = random_subspace(40, 5, rng)
        V = random_subspace(40, 5, rng)
        np.testing.assert_allclose(
            principal_angles(U, V), np.sort(subspace_angles(U.basis, V.basis)),
            atol=1e-10,
        )

    def test_identical_spans_give_zero(self):
        rng = np.random.default_rng(17)
        U = random_subspace(10, 2, rng)
        assert principal_angles(U, U).max() <= 1e-7


class TestRandomSubspace:
    def test_deterministic_per_seed(self):
        a = random_subspace(20, 4, np.random.default_rng(42))
        b = random_subspace(20, 4, np.random.default_rng(42))
        np.testing.assert_array_equal(a.basis, b.basis)

    def test_spread(self):
        rng = np.random.default_rng(18)
        draws = [random_subspace(50, 5, rng) for _ in range(20)]
        pair_d = [dist_sq(draws[i], draws[i + 1]) for i in range(19)]
        assert min(pair_d) > 0.0
        assert max(pair_d) <= 0.5 * 5 * (np.pi / 2) ** 2


class TestReorthonormalize:
    def test_restores_orthonormality_and_span(self):
        rng = np.random.default_rng(19)
        U = random_subspace(50, 5, rng)
        drifted = U.basis + 1e-6 * rng.standard_normal(U.basis.shape)
        fixed = reorthonormalize(drifted)
        assert orthonormality_residual(fixed.basis) <= 1e-14
        assert principal_angles(fixed, U).max() <= 1e-5

    def test_deterministic(self):
        rng = np.random.default_rng(20)
        B = rng.standard_normal((12, 3))
        np.testing.assert_array_equal(
            reorthonormalize(B).basis, reorthonormalize(B.copy()).basis
        )

    def test_rank_deficient_rejected(self):
        B = np.ones((6, 2))
        with pytest.raises(RankDeficient):
            reorthonormalize(B)


class TestFrechetMean:
    def test_single_point(self):
        rng = np.random.default_rng(21)
        U = random_subspace(15, 3, rng)
        res = frechet_mean([U])
        assert res.converged and res.iterations == 0
        np.testing.assert_array_equal(res.subspace.basis, U.basis)

    def test_two_points_midpoint(self):
        rng = np.random.default_rng(22)
        U = random_subspace(30, 4, rng)
        V = exp_map(U, random_horizontal(U, rng, length=0.8))
        res = frechet_mean([U, V])
        midpoint = exp_map(U, log_map(U, V), scale=0.5)
        assert res.converged
        assert principal_angles(res.subspace, midpoint).max() <= 1e-6
        np.testing.assert_allclose(
            dist_sq(res.subspace, U), dist_sq(res.subspace, V), rtol=1e-6
        )

    def test_cluster_gradient_norm(self):
        rng = np.random.default_rng(23)
        center = random_subspace(40, 5, rng)
        cloud = [
            exp_map(center, random_horizontal(center, rng, length=0.3))
            for _ in range(6)
        ]
        res = frechet_mean(cloud, tol=1e-8)
        assert res.converged
        assert res.grad_norm <= 1e-8
        assert res.iterations <= 100

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            frechet_mean([])


def test_as_matrix_passthrough():
    rng = np.random.default_rng(24)
    U = random_subspace(6, 2, rng)
    assert as_matrix(U) is U.basis
    arr = rng.standard_normal((6, 2))
    np.testing.assert_array_equal(as_matrix(arr), arr)
