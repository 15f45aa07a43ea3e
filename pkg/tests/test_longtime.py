import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _models import silent_linear
from thetaem.errors import EmptyWindow, GridMismatch, UnequalSampleCounts
from thetaem.integrator import SchemeConfig, initial_segment, simulate
from thetaem.longtime import (EmpiricalMeasure, attractiveness_curve, batch_means, invariant_cauchy,
                              invariant_diagnostics, time_average, wasserstein)
from thetaem.model import linear_delay_model, ou_model
from thetaem.noise import NoiseStream


def brute_force_wq(q, A, B):
    """Minimum over all permutations of the mean truncated cost."""
    n = A.shape[0]
    cost = np.array([[min(1.0, np.max(np.abs(A[i] - B[j])) ** q) for j in range(n)] for i in range(n)])
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return (best / n) ** (1 / q)


atoms = arrays(float, st.tuples(st.integers(1, 5), st.just(3)), elements=st.floats(-2, 2))


class TestWasserstein:
    def test_single_atoms(self):
        A = EmpiricalMeasure(np.array([[[0.0], [0.1], [0.3]]]), 0.5)
        B = EmpiricalMeasure(np.array([[[0.0], [0.0], [0.0]]]), 0.5)
        assert wasserstein(2, A, B) == pytest.approx(0.3)
        assert wasserstein(1, A, B) == pytest.approx(0.3)

    def test_saturates_at_one(self):
        A = EmpiricalMeasure(np.zeros((4, 3, 1)), 0.5)
        B = EmpiricalMeasure(np.full((4, 3, 1), 10.0), 0.5)
        assert wasserstein(2, A, B) == 1.0

    def test_identical_is_zero(self, rng):
        A = EmpiricalMeasure(rng.normal(size=(30, 5, 1)), 0.25)
        perm = EmpiricalMeasure(A.atoms[rng.permutation(30)], 0.25)
        assert wasserstein(2, A, perm) == 0.0

    @settings(max_examples=40)
    @given(atoms, st.data())
    def test_matches_brute_force(self, a, data):
        b = data.draw(arrays(float, a.shape, elements=st.floats(-2, 2)))
        q = data.draw(st.sampled_from([1, 2, 3]))
        got = wasserstein(q, EmpiricalMeasure(a, 0.5), EmpiricalMeasure(b, 0.5))
        assert got == pytest.approx(brute_force_wq(q, a, b), rel=1e-12, abs=1e-14)

    @settings(max_examples=40)
    @given(atoms, st.data())
    def test_metric_properties(self, a, data):
        b = data.draw(arrays(float, a.shape, elements=st.floats(-2, 2)))
        c = data.draw(arrays(float, a.shape, elements=st.floats(-2, 2)))
        A, B, C = (EmpiricalMeasure(x, 0.5) for x in (a, b, c))
        ab, ba = wasserstein(2, A, B), wasserstein(2, B, A)
        assert ab == pytest.approx(ba, abs=1e-14)
        assert 0.0 <= ab <= 1.0
        assert ab <= wasserstein(2, A, C) + wasserstein(2, C, B) + 1e-12

    def test_grid_and_count_checks(self):
        A = EmpiricalMeasure(np.zeros((3, 5, 1)), 0.25)
        with pytest.raises(GridMismatch):
            wasserstein(2, A, EmpiricalMeasure(np.zeros((3, 9, 1)), 0.125))
        with pytest.raises(UnequalSampleCounts):
            wasserstein(2, A, EmpiricalMeasure(np.zeros((4, 5, 1)), 0.25))

    def test_atom_cap(self):
        A = EmpiricalMeasure(np.zeros((600, 2, 1)), 1.0)
        with pytest.raises(ValueError):
            wasserstein(2, A, A)
        assert wasserstein(2, A, A, max_atoms=600) == 0.0


class TestAttractiveness:
    def test_same_start_zero_gap(self):
        m = linear_delay_model()
        cfg = SchemeConfig(delta=0.1)
        curve = attractiveness_curve(m, cfg, 1.0, 1.0, 50, 20)
        assert np.all(curve.mean_gap_sq == 0.0)

    def test_quadratic_scaling_without_noise(self):
        m = silent_linear()
        cfg = SchemeConfig(delta=0.1)
        one = attractiveness_curve(m, cfg, 1.0, 0.0, 60, 3, sample_every=5)
        two = attractiveness_curve(m, cfg, 2.0, 0.0, 60, 3, sample_every=5)
        assert np.allclose(two.mean_gap_sq, 4 * one.mean_gap_sq, rtol=1e-12)
        assert one.mean_gap_sq[0] == 1.0

    def test_linear_gap_decays(self):
        m = linear_delay_model()
        cfg = SchemeConfig(delta=0.05)
        curve = attractiveness_curve(m, cfg, 1.0, -1.0, 200, 50, sample_every=10)
        assert curve.tail_slope < 0
        assert curve.mean_gap_sq[-1] < 1e-3 * curve.mean_gap_sq[0]
        assert len(curve.to_rows()) == curve.times.size == 21


class TestInvariant:
    def test_cauchy_sequence_shrinks(self):
        m = ou_model()
        cfg = SchemeConfig(delta=1 / 16)
        d = invariant_cauchy(m, cfg, 3.0, 16, 5, 64, master_seed=1)
        assert d.shape == (4,)
        assert d[0] > d[-1]

    def test_window_shorter_than_delay_rejected(self):
        m = ou_model()
        cfg = SchemeConfig(delta=1 / 16)
        with pytest.raises(ValueError):
            invariant_cauchy(m, cfg, 3.0, 8, 3, 10)

    def test_diagnostics(self):
        m = ou_model()
        cfg = SchemeConfig(delta=1 / 16)
        diag = invariant_diagnostics(m, cfg, 3.0, 32, 4, 64, master_seed=2, eta=-3.0)
        assert diag.distances.size == 3
        assert 0 < diag.floor < 1 and 0 < diag.cross < 1
        assert diag.distances[0] > diag.floor


def ou_discrete_stationary_var(a, sigma0, theta, delta):
    """Stationary variance of the theta scheme for dx = -a x dt + sigma0 dW."""
    rho = (1 - (1 - theta) * a * delta) / (1 + theta * a * delta)
    s = sigma0 / (1 + theta * a * delta)
    return s * s * delta / (1 - rho * rho)


class TestTimeAverage:
    def test_constant_path(self):
        m = silent_linear(a=1.0, b_bar=0.0)
        cfg = SchemeConfig(delta=0.1)
        tr = simulate(m, cfg, initial_segment(0.0, m, cfg), 50, NoiseStream(0))
        stat = time_average(tr, lambda y: 3.0, burn_in=10, mean_ref=3.0)
        assert stat.mean == 3.0 and stat.count == 40 and stat.clt_statistic == 0.0

    def test_clt_statistic_formula(self):
        m = ou_model(a=2.0)
        cfg = SchemeConfig(delta=0.1)
        tr = simulate(m, cfg, initial_segment(0.0, m, cfg), 100, NoiseStream(1))
        vals = tr.states[tr.n_delay + 1:, 0] ** 2
        stat = time_average(tr, lambda y: y[0] ** 2, mean_ref=0.25)
        expect = np.sum(vals - 0.25) * 0.1 / math.sqrt(100 * 0.1)
        assert stat.clt_statistic == pytest.approx(expect, rel=1e-12)
        assert stat.mean == pytest.approx(vals.mean(), rel=1e-12)

    def test_empty_window(self):
        m = ou_model()
        cfg = SchemeConfig(delta=0.1)
        tr = simulate(m, cfg, initial_segment(0.0, m, cfg), 10, NoiseStream(1))
        with pytest.raises(EmptyWindow):
            time_average(tr, lambda y: y[0], burn_in=10)

    def test_batch_means(self):
        mean, se = batch_means(np.arange(40.0), n_batches=4)
        bm = np.array([4.5, 14.5, 24.5, 34.5])
        assert mean == 19.5 and se == pytest.approx(bm.std(ddof=1) / 2)

    @pytest.mark.slow
    def test_ergodic_average_and_shrinking_error(self):
        a, s0, theta, delta = 2.0, 1.0, 0.75, 0.1
        m = ou_model(a=a, sigma0=s0)
        cfg = SchemeConfig(theta=theta, delta=delta)
        target = ou_discrete_stationary_var(a, s0, theta, delta)
        half, full, zs = [], [], []
        for seed in range(10):
            tr = simulate(m, cfg, initial_segment(0.0, m, cfg), 4000, NoiseStream(seed))
            f = lambda y: y[0] ** 2
            st_full = time_average(tr, f, burn_in=100, n_batches=40)
            zs.append((st_full.mean - target) / st_full.stderr)
            vals = tr.states[tr.n_delay + 101:, 0] ** 2
            half.append(batch_means(vals[: vals.size // 2], 40)[1])
            full.append(st_full.stderr)
        assert max(abs(z) for z in zs) < 4
        ratio = math.sqrt(np.mean(np.square(half)) / np.mean(np.square(full)))
        # stderr scales like (window length)^(-1/2); doubling the window gives sqrt(2)
        assert 1.2 <= ratio <= 1.7
