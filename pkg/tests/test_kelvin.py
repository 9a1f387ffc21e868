import math

import numpy as np
import pytest
from conftest import within
from hypothesis import given, settings
from hypothesis import strategies as st

from slm.core import RandomSource, joint_z
from slm.kelvin import (ScalarField, absorbed_ball_bm, conformal_inversion_check, fd_laplacian,
                        invert_point, inverted_coordinate_means, inverted_covariation,
                        kelvin_transform, laplacian_commutation_residual, observed_order)

FIELDS = {
    "one": ScalarField(lambda x: np.ones(x.shape[:-1]), 3),
    "x1": ScalarField(lambda x: x[..., 0], 3),
    "x1x2": ScalarField(lambda x: x[..., 0] * x[..., 1], 3),
    "r2": ScalarField(lambda x: np.sum(x * x, axis=-1), 3),
    "r4": ScalarField(lambda x: np.sum(x * x, axis=-1) ** 2, 3),
}
HS = [1e-2, 5e-3, 2.5e-3]


class TestInversion:
    def test_unit_vectors_fixed(self):
        e = np.eye(3)
        assert np.array_equal(invert_point(e), e)

    def test_example(self):
        assert invert_point([2.0, 0.0, 0.0]).tolist() == [0.5, 0.0, 0.0]

    def test_involution_cloud(self):
        x = np.random.default_rng(1).normal(size=(1000, 3))
        assert np.max(np.abs(invert_point(invert_point(x)) - x)) < 1e-14 * 10

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=5).filter(
        lambda v: sum(c * c for c in v) > 1e-6))
    @settings(max_examples=100, deadline=None)
    def test_norm_reciprocal(self, x):
        y = invert_point(x)
        assert np.linalg.norm(y) == pytest.approx(1 / np.linalg.norm(x), rel=1e-12)

    def test_origin_rejected(self):
        with pytest.raises(ValueError):
            invert_point([0.0, 0.0, 0.0])


class TestKelvinTransform:
    def test_constant_maps_to_inverse_radius(self):
        y = np.array([[1.0, 2.0, 2.0], [0.1, 0.0, 0.0]])
        assert kelvin_transform(FIELDS["one"])(y) == pytest.approx([1 / 3, 10.0])

    def test_coordinate_field(self):
        y = np.random.default_rng(2).normal(size=(50, 3))
        got = kelvin_transform(FIELDS["x1"])(y)
        assert got == pytest.approx(y[:, 0] / np.linalg.norm(y, axis=1) ** 3, rel=1e-13)

    def test_involution(self):
        u = FIELDS["x1x2"]
        y = np.random.default_rng(3).normal(size=(100, 3))
        assert np.max(np.abs(kelvin_transform(kelvin_transform(u))(y) - u(y))) < 1e-12

    def test_involution_all_fields(self):
        y = np.random.default_rng(4).uniform(0.3, 3.0, size=(100, 3))
        for u in FIELDS.values():
            ref = u(y)
            err = np.abs(kelvin_transform(kelvin_transform(u))(y) - ref)
            assert np.max(err / np.maximum(1.0, np.abs(ref))) < 1e-12

    def test_guard_follows_image(self):
        u = ScalarField(lambda x: np.log(x[..., 0]), 3, domain_guard=lambda x: x[..., 0] > 0)
        ku = kelvin_transform(u)
        assert ku.valid(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 0, 0]])).tolist() == [
            True, False, False]

    def test_dimension_guard(self):
        with pytest.raises(ValueError):
            ScalarField(lambda x: x[..., 0], 2)


class TestCommutation:
    Y = np.array([0.7, -0.4, 0.9])

    @pytest.mark.parametrize("name", list(FIELDS))
    def test_second_order(self, name):
        res = [laplacian_commutation_residual(FIELDS[name], self.Y, h) for h in HS]
        assert observed_order(res, HS) >= 1.9

    def test_harmonic_field_residual_order(self):
        res = [laplacian_commutation_residual(FIELDS["x1x2"], self.Y, h) for h in HS]
        assert max(res) < 1e-3

    def test_radius_squared_value(self):
        y = 2 * np.ones(3) / math.sqrt(3)
        val = fd_laplacian(kelvin_transform(FIELDS["r2"]), y, 1e-3)
        assert abs(val - 0.1875) < 1e-3

    def test_coordinate_field_random_points(self):
        # stencil truncation scales as h^2 |y|^-6, so 1e-6 at h = 1e-3 needs |y| >~ 1.6
        rng = np.random.default_rng(5)
        dirs = rng.normal(size=(20, 3))
        pts = dirs / np.linalg.norm(dirs, axis=1)[:, None] * rng.uniform(2.0, 4.0, size=(20, 1))
        for y in pts:
            assert laplacian_commutation_residual(FIELDS["x1"], y, 1e-3) <= 1e-6

    def test_stencil_outside_domain(self):
        u = ScalarField(lambda x: np.log(x[..., 0]), 3, domain_guard=lambda x: x[..., 0] > 0)
        with pytest.raises(ValueError):
            fd_laplacian(u, [1e-4, 0.0, 0.0], 1e-3)
        with pytest.raises(ValueError):
            laplacian_commutation_residual(u, [1e-4, 1.0, 0.0], 1e-3)

    def test_observed_order_fit(self):
        assert observed_order([4e-4, 1e-4, 2.5e-5], HS) == pytest.approx(2.0)
        assert observed_order([0.0, 0.0, 0.0], HS) == math.inf
        with pytest.raises(ValueError):
            observed_order([1e-4, 0.0, 1e-6], HS)


X0 = np.array([1.0, 0.0, 0.0])


class TestAbsorbedBall:
    def test_stays_outside_and_stops(self, src):
        out = absorbed_ball_bm(X0, 0.5, [0.2, 0.4], 100, src, 5000)["obs"]
        r = np.linalg.norm(out, axis=2)
        assert np.all(r >= 0.5 - 1e-12)
        stopped = np.isclose(r[:, 0], 0.5)
        assert np.allclose(out[stopped, 0], out[stopped, 1])

    def test_hit_probability_matches_radial_formula(self, src):
        # P(BM in R^3 from |x| = 1 ever hits the ball of radius r by t) = r erfc((1-r)/sqrt(2t))
        out = absorbed_ball_bm(X0, 0.5, [0.5], 250, src, 50_000)["obs"][:, 0]
        hit = np.isclose(np.linalg.norm(out, axis=1), 0.5)
        p = 0.5 * math.erfc(0.5 / math.sqrt(2 * 0.5))
        est = hit.mean()
        assert abs(est - p) < 3 * math.sqrt(p * (1 - p) / hit.size)

    def test_validation(self, src):
        with pytest.raises(ValueError):
            absorbed_ball_bm(X0, 1.0, [0.5], 10, src, 10)
        with pytest.raises(ValueError):
            absorbed_ball_bm(X0, 0.5, [0.5, 0.33], 10, src, 10)


class TestConformalInversion:
    def test_unit_payoff(self, src):
        res = conformal_inversion_check(0.5, X0, lambda x: np.ones(len(x)), 0.5, 100_000, src)
        assert res.lhs.mean == 1.0
        assert within(res.rhs, 1.0) and within(res.weight, 1.0)

    def test_identity(self):
        def U(x):
            return np.minimum(np.linalg.norm(x, axis=1), 5.0)

        res = conformal_inversion_check(0.5, X0, U, 0.5, 100_000, RandomSource(8))
        assert abs(joint_z(res.lhs, res.rhs)) < 3

    def test_coordinate_means_constant(self):
        rows = inverted_coordinate_means(0.5, X0, [0.25, 0.5, 1.0], 100_000, RandomSource(9))
        for t, ests in rows:
            for i, e in enumerate(ests):
                assert within(e, X0[i])

    def test_conformal_covariation(self):
        cov = inverted_covariation(0.5, X0, 0.5, 50_000, RandomSource(10))
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert within(cov[i][j], 0.0)
        for i in range(3):
            for j in range(i + 1, 3):
                assert abs(joint_z(cov[i][i], cov[j][j])) < 3

    @pytest.mark.parametrize("kw", [dict(r=1.0), dict(x0=np.array([2.0, 0, 0])),
                                    dict(bounded=False), dict(d=4)])
    def test_validation(self, kw):
        args = dict(r=0.5, x0=X0, U=lambda x: np.ones(len(x)), t=0.1, n_paths=10,
                    src=RandomSource(0))
        args.update(kw)
        with pytest.raises(ValueError):
            conformal_inversion_check(**args)
