import math

import numpy as np
import pytest
from conftest import separated, within
from hypothesis import given, settings
from hypothesis import strategies as st

from slm.core import DiagnosticsError, RandomSource, joint_z, make_grid, mc_reduce
from slm.experiments import (DiscArc, SizeBiasedConfig, conditioned_exit_curve,
                             conditioned_exit_expectation, disc_exit_frequencies,
                             disc_harmonic_measure, dyson_ratio_expectation,
                             harmonic_measure_closed, ratio_martingale_check,
                             simulate_disc_bm, size_biased_expectations, vandermonde,
                             vandermonde_bm_control, vandermonde_inverse,
                             vandermonde_inverse_last_row, vandermonde_matrix)
from slm.sde import simulate_besq, simulate_dyson

N = 100_000
PI = math.pi


class TestSizeBiased:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SizeBiasedConfig(1, 1.0, [1.0])
        with pytest.raises(ValueError):
            SizeBiasedConfig(2, 0.0, [1.0])
        assert SizeBiasedConfig(2, 1.0, [0.5, 1.0]).t_grid.times.tolist() == [0.5, 1.0]

    @pytest.mark.parametrize("n,ts", [(2, [0.5, 1.0, 2.0]), (4, [1.0])])
    def test_ratio_is_constant(self, src, n, ts):
        for t, est in ratio_martingale_check(SizeBiasedConfig(n, 1.0, ts), N, src):
            assert within(est, 1.0 / n)

    def test_ratio_near_start_is_one_over_n(self, src):
        (t, est), = ratio_martingale_check(SizeBiasedConfig(3, 1.0, [1e-10]), 1000, src)
        assert est.mean == pytest.approx(1 / 3, abs=1e-4)

    def test_ratio_convention_after_joint_absorption(self, src):
        # tiny start: nearly every path is absorbed by t = 5
        (_, e1), (_, e2) = ratio_martingale_check(SizeBiasedConfig(2, 0.01, [0.001, 5.0]), N, src)
        assert within(e2, 0.5) and within(e1, 0.5)

    def test_exchangeability(self, src):
        z = simulate_besq([0.0] * 3, 1.0, make_grid(1.0, 1), src, N).at(1.0)
        zeta = z.sum(axis=1)
        live = zeta > 0
        shares = [mc_reduce(z[live, i] / zeta[live]) for i in range(3)]
        for a in shares:
            assert within(a, 1 / 3)
        assert abs(joint_z(shares[0], shares[2])) < 3 * math.sqrt(2)

    def test_start_values(self, src):
        row, = size_biased_expectations(SizeBiasedConfig(2, 1.0, [1e-10]), 1000, src)
        assert row.N.mean == pytest.approx(4.0, abs=1e-3)
        assert row.U.mean == pytest.approx(2.0, abs=1e-3)
        assert row.V.mean == pytest.approx(2.0, abs=1e-3)
        assert row.M.mean == pytest.approx(2.0, abs=1e-3)

    def test_martingale_and_strict_local(self, src):
        rows = size_biased_expectations(SizeBiasedConfig(2, 1.0, [0.25, 0.5, 1.0]), N, src)
        for r in rows:
            assert within(r.M, 2.0)
            # closed forms for n = 2, z = 1 under the size-biased law
            assert within(r.N, 2 * (2 - math.exp(-0.5 / r.t)))
            assert within(r.U, 2 * (1 - math.exp(-0.5 / r.t)))
        for a, b in zip(rows, rows[1:]):
            for field in ("N", "U", "V"):
                assert separated(getattr(a, field), getattr(b, field))

    def test_spine_contrast_mean_grows(self, src):
        rows = size_biased_expectations(SizeBiasedConfig(2, 1.0, [0.25, 1.0]), N, src,
                                        method="spine")
        assert within(rows[0].M, 2 + 8 * 0.25)
        assert within(rows[1].M, 2 + 8 * 1.0)

    def test_worker_invariance(self):
        cfg = SizeBiasedConfig(3, 1.0, [0.5, 1.0])
        a = size_biased_expectations(cfg, 9000, RandomSource(2), workers=1)
        b = size_biased_expectations(cfg, 9000, RandomSource(2), workers=4)
        assert a == b

    def test_bad_method(self, src):
        with pytest.raises(ValueError):
            size_biased_expectations(SizeBiasedConfig(2, 1.0, [1.0]), 10, src, method="x")


class TestVandermonde:
    def test_examples(self):
        assert vandermonde([1.0, 2.0, 3.0]) == 2.0
        assert vandermonde([1.0, 2.0, 1.0]) == 0.0
        assert vandermonde([4.2]) == 1.0

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=7), st.data())
    @settings(max_examples=80, deadline=None)
    def test_alternating(self, xs, data):
        i = data.draw(st.integers(0, len(xs) - 1))
        j = data.draw(st.integers(0, len(xs) - 1).filter(lambda k: k != i))
        ys = list(xs)
        ys[i], ys[j] = ys[j], ys[i]
        assert vandermonde(ys) == pytest.approx(-vandermonde(xs), rel=1e-9, abs=1e-9)

    def test_matches_determinant(self):
        x = np.random.default_rng(0).normal(size=(20, 5))
        assert np.allclose(vandermonde(x), np.linalg.det(vandermonde_matrix(x)), rtol=1e-10)

    def test_adjugate_identity_on_dyson_paths(self, src):
        b = simulate_dyson([-1.0, 0.0, 1.0], make_grid(1.0, 10), src, 2000)
        lam = b.values.reshape(-1, 3)
        prod = vandermonde_matrix(lam) @ vandermonde_inverse(lam)
        assert np.max(np.abs(prod - np.eye(3))) < 1e-10
        assert np.allclose(vandermonde_inverse_last_row(lam), vandermonde_inverse(lam)[:, 2, :],
                           rtol=1e-10, atol=1e-12)

    def test_singular(self):
        with pytest.raises(ValueError):
            vandermonde_inverse([1.0, 1.0, 2.0])


class TestDyson:
    T = [0.1, 0.5, 1.0]

    def test_control_is_martingale(self, src):
        for t, est in vandermonde_bm_control([-1.0, 0.0, 1.0], self.T, N, src):
            assert within(est, 2.0)

    def test_ratio_strictly_decreasing(self, src):
        rows = dyson_ratio_expectation(2, 3, [-1.0, 0.0, 1.0], self.T, N, src)
        assert rows[0][1].mean < 0.5
        for (_, a), (_, b) in zip(rows, rows[1:]):
            assert separated(a, b)

    def test_inverse_mode_decreasing(self, src):
        rows = dyson_ratio_expectation(2, 3, [-1.0, 0.0, 1.0], self.T, N, src, mode="inverse",
                                       row=1)
        for (_, a), (_, b) in zip(rows, rows[1:]):
            assert separated(a, b)

    def test_first_row_equals_ratio(self, src):
        # |A^{-1}(3, 1)| = (l3 - l2) / Delta_3 = Delta_2 of the top pair over Delta_3
        lam = np.array([[-1.0, 0.0, 1.0], [0.3, 0.7, 2.0]])
        got = np.abs(vandermonde_inverse_last_row(lam)[:, 0])
        assert got == pytest.approx((lam[:, 2] - lam[:, 1]) / vandermonde(lam))

    @pytest.mark.parametrize("kw", [dict(start=[0.0, 0.0, 1.0]), dict(m=3), dict(m=0),
                                    dict(start=[0.0, 1.0]), dict(mode="bogus"),
                                    dict(mode="inverse", row=4)])
    def test_validation(self, kw):
        args = dict(m=2, n=3, start=[-1.0, 0.0, 1.0], t_grid=[0.5], n_paths=10,
                    src=RandomSource(0))
        args.update(kw)
        with pytest.raises(ValueError):
            dyson_ratio_expectation(**args)


ARCS = [DiscArc(0.0, PI), DiscArc(1.0, 2.5), DiscArc(4.0, 6.0)]


class TestHarmonicMeasure:
    def test_origin_semicircle(self):
        assert disc_harmonic_measure((0.0, 0.0), DiscArc(0.0, PI)) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("x0", [(0.5, 0.0), (-0.3, 0.4), (0.0, -0.95)])
    def test_complement_sums_to_one(self, x0):
        a, b = DiscArc(0.0, 2.0), DiscArc(2.0, 2 * PI)
        assert abs(disc_harmonic_measure(x0, a) + disc_harmonic_measure(x0, b) - 1) < 1e-10

    @given(st.floats(0, 0.97), st.floats(0, 2 * PI), st.floats(0, 2 * PI), st.floats(0, 2 * PI))
    @settings(max_examples=100, deadline=None)
    def test_closed_form_matches_quadrature(self, r, phi_, a, b):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-6:
            return
        arc = DiscArc(lo, hi)
        x0 = (r * math.cos(phi_), r * math.sin(phi_))
        assert harmonic_measure_closed(x0, arc) == pytest.approx(disc_harmonic_measure(x0, arc),
                                                                 abs=1e-9)

    def test_outside_rejected(self):
        with pytest.raises(ValueError):
            disc_harmonic_measure((1.0, 0.0), DiscArc(0.0, 1.0))

    @pytest.mark.parametrize("x0", [(0.5, 0.0), (-0.3, 0.4)])
    def test_exit_frequencies(self, x0):
        freqs = disc_exit_frequencies(x0, ARCS, N, RandomSource(17))
        for f, arc in zip(freqs, ARCS):
            assert within(f, disc_harmonic_measure(x0, arc))

    def test_arc_validation_and_geometry(self):
        with pytest.raises(ValueError):
            DiscArc(1.0, 1.0)
        with pytest.raises(ValueError):
            DiscArc(-0.1, 1.0)
        assert DiscArc(0.0, 1.0).disjoint(DiscArc(1.0, 2.0))
        assert not DiscArc(0.0, 1.5).disjoint(DiscArc(1.0, 2.0))
        assert DiscArc(0.0, PI).contains(np.array([-0.5, 0.5])).tolist() == [False, True]


class TestDiscBM:
    def test_observation_times_validated(self, src):
        with pytest.raises(ValueError):
            simulate_disc_bm((0.0, 0.0), [0.0005], src, 10)
        with pytest.raises(ValueError):
            simulate_disc_bm((0.0, 0.0), [0.1], src, 10, dt=0.01)

    def test_states_inside_then_on_circle(self, src):
        run = simulate_disc_bm((0.2, 0.1), [0.0, 0.2, 1.0], src, 2000)
        r = np.hypot(run.states[..., 0], run.states[..., 1])
        assert np.allclose(run.states[:, 0], [0.2, 0.1])
        for k, t in enumerate(run.times):
            out = run.exit_time <= t
            assert np.all(r[~out, k] < 1.0)
            assert np.allclose(r[out, k], 1.0)

    def test_mean_exit_time(self, src):
        # E tau = (1 - |x0|^2) / 2 for planar BM in the unit disc
        run = simulate_disc_bm((0.0, 0.0), [0.0], src, 50_000, t_max=20.0)
        assert within(mc_reduce(run.exit_time), 0.5)


B1 = DiscArc(0.0, PI)
U_ARC = DiscArc(PI + 0.2, 2 * PI - 0.2)


@pytest.fixture(scope="module")
def curve():
    return conditioned_exit_curve((0.0, 0.0), B1, U_ARC, [0.001, 0.1, 0.3, 0.5, 2.0], N,
                                  RandomSource(20240611))


class TestConditionedExit:
    def test_estimators_agree(self, curve):
        row = curve[2]
        assert row.t == 0.3
        assert abs(joint_z(row.via_rejection, row.via_ptoq)) < 3

    def test_start_value(self, curve):
        start = harmonic_measure_closed((0.0, 0.0), U_ARC) / 0.5
        assert float(start) == pytest.approx((PI - 0.4) / PI, rel=1e-12)
        assert within(curve[0].via_ptoq, float(start))

    def test_strictly_decreasing(self, curve):
        picked = [r.via_ptoq for r in curve if r.t in (0.1, 0.5, 2.0)]
        assert separated(picked[0], picked[1]) and separated(picked[1], picked[2])

    def test_single_time_wrapper(self):
        a, b = conditioned_exit_expectation((0.0, 0.0), B1, U_ARC, 0.05, 2000, RandomSource(3))
        assert a.n_paths < 2000 and b.n_paths == 2000

    def test_overlapping_arcs_rejected(self, src):
        with pytest.raises(ValueError):
            conditioned_exit_curve((0.0, 0.0), B1, DiscArc(3.0, 4.0), [0.1], 10, src)

    def test_unfinished_paths_reported(self, src):
        with pytest.raises(DiagnosticsError):
            conditioned_exit_curve((0.0, 0.0), B1, U_ARC, [0.01], 200, src, t_max=0.01)
