import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _models import silent_linear, zero_model
from thetaem.convergence import (RateReport, cos_test, invariant_rate, logistic_test, loglog_slope,
                                 strong_errors, weak_errors)
from thetaem.csvio import read_csv
from thetaem.errors import DegenerateInput, NonNestedGrids
from thetaem.integrator import SchemeConfig, initial_segment, simulate
from thetaem.model import cubic_model, ou_model
from thetaem.noise import NoiseStream


class TestLogLogSlope:
    @given(st.floats(-3, 3), st.floats(-5, 5))
    def test_exact_power_law(self, p, logc):
        x = np.array([0.5, 0.25, 0.125, 0.0625])
        y = np.exp(logc) * x**p
        slope, intercept = loglog_slope(np.column_stack([x, y]))
        assert slope == pytest.approx(p, abs=1e-9) and intercept == pytest.approx(logc, abs=1e-8)

    @pytest.mark.parametrize("pts", [[[1.0, 1.0]], [[1.0, 2.0], [1.0, 3.0]], [[1.0, 0.0], [2.0, 1.0]]])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateInput):
            loglog_slope(pts)


class TestStrong:
    def test_zero_noise_zero_drift_is_exact(self):
        m = zero_model()
        cfg = SchemeConfig(delta=0.25)
        rep = strong_errors(m, cfg, 1.0, 1.0, [0.25, 0.125], 1 / 32, 5)
        assert np.all(rep.errors == 0.0)
        assert math.isnan(rep.slope)

    def test_pure_noise_errors_are_interpolation_gaps(self):
        # with b = 0, sigma = 1 every level reproduces W exactly at its nodes
        m = zero_model(sigma=1.0)
        cfg = SchemeConfig(delta=0.5)
        rep = strong_errors(m, cfg, 0.0, 1.0, [0.5, 0.25], 1 / 16, 400, master_seed=3)
        assert np.all(rep.errors > 0) and rep.errors[0] > rep.errors[1]

    def test_coupled_levels_converge(self):
        m = cubic_model()
        cfg = SchemeConfig(delta=1 / 16)
        rep = strong_errors(m, cfg, 1.0, 1.0, [1 / 16, 1 / 32, 1 / 64], 1 / 256, 300, master_seed=4)
        assert np.all(np.diff(rep.errors) < 0)
        assert 0.2 < rep.slope < 0.9
        assert np.all(rep.stderr > 0) and np.all(rep.stderr < rep.errors)

    def test_thread_invariance(self):
        m = cubic_model()
        cfg = SchemeConfig(delta=1 / 8)
        kw = dict(T=1.0, delta_list=[1 / 8, 1 / 16], delta_ref=1 / 64, M=50, master_seed=9)
        a = strong_errors(m, cfg, 1.0, **kw)
        b = strong_errors(m, cfg, 1.0, chunk_size=7, threads=3, **kw)
        assert a.errors.tobytes() == b.errors.tobytes()

    def test_non_nested(self):
        m = cubic_model()
        cfg = SchemeConfig(delta=0.1)
        with pytest.raises(NonNestedGrids):
            strong_errors(m, cfg, 1.0, 1.0, [0.1, 0.03], 0.01, 5)

    def test_csv(self, tmp_path):
        rep = RateReport(np.array([0.5, 0.25]), np.array([0.2, 0.1]), np.array([0.01, 0.01]), 1.0, 0.0,
                         np.array([10, 10]))
        rep.to_csv(tmp_path / "r.csv", ["command=test"])
        meta, cols, rows = read_csv(tmp_path / "r.csv")
        assert cols == ["delta", "error", "stderr", "samples", "used"]
        assert meta["slope"] == "1.0" and meta["surviving_levels"] == "2"
        assert rows[0] == ["0.5", "0.2", "0.01", "10", "1"]


class TestWeak:
    def test_noiseless_error_is_the_path_gap(self):
        m = silent_linear()
        cfg = SchemeConfig(delta=0.125)
        f = lambda y: y[..., 0]
        rep = weak_errors(m, cfg, 1.0, 1.0, f, [0.125, 0.0625], 1 / 64, 3)

        def endpoint(d):
            c = cfg.with_delta(d)
            return simulate(m, c, initial_segment(1.0, m, c), int(round(1 / d)), NoiseStream(0)).states[-1, 0]

        ref = endpoint(1 / 64)
        expect = [abs(endpoint(d) - ref) for d in (0.125, 0.0625)]
        assert rep.errors == pytest.approx(expect, rel=1e-10)
        assert np.all(rep.stderr < 1e-14)

    def test_signal_filter(self):
        m = zero_model(sigma=1.0)
        cfg = SchemeConfig(delta=0.25)
        rep = weak_errors(m, cfg, 0.0, 1.0, "cos", [0.25, 0.125, 0.0625], 1 / 32, 100)
        # b = 0: every level equals the reference at T up to summation rounding
        assert np.all(rep.errors < 1e-15) and rep.surviving == 0 and math.isnan(rep.slope)

    def test_antithetic_keeps_bias(self):
        m = cubic_model()
        cfg = SchemeConfig(delta=0.25)
        kw = dict(T=1.0, f="cos", delta_list=[0.25, 0.125], delta_ref=1 / 32, M=2000, master_seed=5)
        plain = weak_errors(m, cfg, 1.0, **kw)
        anti = weak_errors(m, cfg, 1.0, antithetic=True, **kw)
        assert np.all(np.abs(anti.errors - plain.errors) < 4 * (plain.stderr + anti.stderr))

    def test_test_functions(self):
        x = np.array([[0.0], [math.pi]])
        assert np.allclose(cos_test(x), [1, -1])
        assert np.allclose(logistic_test(np.array([[0.0]])), [0.5])
        assert np.allclose(cos_test(np.array([[1.0, 2.0]]), [0, 1]), [math.cos(2)])


class TestInvariantRate:
    def test_reference_level_is_zero(self):
        m = ou_model()
        cfg = SchemeConfig(delta=1 / 8)
        rep = invariant_rate(m, cfg, 1.0, 2.0, [1 / 4, 1 / 8], 1 / 8, 30, master_seed=1)
        assert rep.errors[-1] == 0.0
        assert 0 < rep.extra["floor"] < 1
