"""
Longtime statistics of the numerical functional solution.

Empirical segment measures are compared in the bounded Wasserstein distance

    W_q(A, B) = ( min_pi (1/n) sum_i 1 ^ ||A_i - B_pi(i)||^q )^(1/q)

which for equal-size empirical measures is an assignment problem and is
solved exactly with :func:`scipy.optimize.linear_sum_assignment`.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyWindow, GridMismatch, UnequalSampleCounts
from .integrator import Level, initial_segment, run_levels, segments_at_steps
from .noise import derive_seed
from .segment import Segment

MAX_ATOMS = 512


@dataclass
class EmpiricalMeasure:
    """Equal-weight empirical measure of segments on a shared grid.

    ``atoms`` has shape (n, N+1, d).
    """

    atoms: np.ndarray
    delta: float

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[0] < 1:
            raise ValueError(f"atoms must have shape (n, N+1, d) with n >= 1, got {a.shape}")
        self.atoms = a

    @classmethod
    def from_segments(cls, segments):
        segments = list(segments)
        first = segments[0]
        for s in segments[1:]:
            if s.n != first.n or s.dim != first.dim or s.delta != first.delta:
                raise GridMismatch("atoms must share one grid")
        return cls(np.stack([s.values for s in segments]), first.delta)

    @property
    def size(self):
        return self.atoms.shape[0]

    def segment(self, i):
        return Segment(self.atoms[i], self.delta)


def cost_matrix(A, B, q=2):
    """Truncated costs 1 ^ ||A_i - B_j||^q with the node sup norm."""
    a, b = A.atoms, B.atoms
    out = np.empty((a.shape[0], b.shape[0]))
    rows = max(1, int(2**22 // max(1, b.size)))
    for i in range(0, a.shape[0], rows):
        diff = a[i:i + rows, None, :, :] - b[None, :, :, :]
        if diff.shape[-1] == 1:
            sup = np.max(np.abs(diff[..., 0]), axis=2)
        else:
            sup = np.max(np.sqrt(np.sum(diff * diff, axis=3)), axis=2)
        out[i:i + rows] = np.minimum(1.0, sup**q)
    return out


def wasserstein(q, A, B, max_atoms=MAX_ATOMS):
    """Bounded Wasserstein distance between two equal-size empirical measures."""
    if q < 1:
        raise ValueError("q must be at least 1")
    if A.atoms.shape[1:] != B.atoms.shape[1:] or abs(A.delta - B.delta) > 1e-15 * max(1.0, A.delta):
        raise GridMismatch("empirical measures live on different grids")
    if A.size != B.size:
        raise UnequalSampleCounts(f"{A.size} atoms vs {B.size} atoms")
    if A.size > max_atoms:
        raise ValueError(f"{A.size} atoms exceed the cap of {max_atoms}; raise max_atoms explicitly")
    cost = cost_matrix(A, B, q)
    rows, cols = linear_sum_assignment(cost)
    # fsum makes the value independent of the order of the optimal pairs
    return (math.fsum(cost[rows, cols]) / A.size) ** (1.0 / q)


def _gap_sq(seg_a, seg_b):
    diff = seg_a - seg_b
    if diff.shape[-1] == 1:
        return np.max(np.abs(diff[..., 0]), axis=-1) ** 2
    return np.max(np.sum(diff * diff, axis=-1), axis=-1)


@dataclass
class AttractivenessCurve:
    """Monte Carlo mean of ||y^xi_{t_k} - y^eta_{t_k}||^2 at sampled steps."""

    times: np.ndarray
    mean_gap_sq: np.ndarray
    tail_slope: float
    tail_intercept: float

    def to_rows(self):
        return list(zip(self.times.tolist(), self.mean_gap_sq.tolist()))


def attractiveness_curve(model, config, xi, eta, steps, paths, master_seed=0, sample_every=None,
                         tail_fraction=0.5, chunk_size=4096, threads=1):
    """Mean squared segment gap of two coupled solutions started from xi and eta.

    Both solutions of a pair share their Brownian increments.  The tail
    slope is the least-squares slope of log(mean gap^2) against time over the
    last ``tail_fraction`` of the sampled points with a positive gap.
    """
    xi = initial_segment(xi, model, config)
    eta = initial_segment(eta, model, config)
    if sample_every is None:
        sample_every = max(1, steps // 200)
    record = tuple(range(0, steps + 1, sample_every))
    levels = [Level(1, xi, record, "segment"), Level(1, eta, record, "segment")]
    seed = derive_seed(master_seed, "attract")
    sa, sb = run_levels(model, config, levels, config.delta, record[-1], seed, range(paths),
                        chunk_size=chunk_size, threads=threads)
    gaps = np.mean(_gap_sq(sa, sb), axis=1)
    times = np.array(record) * config.delta
    slope, intercept = _tail_fit(times, gaps, tail_fraction)
    return AttractivenessCurve(times, gaps, slope, intercept)


def _tail_fit(times, values, tail_fraction):
    start = int(len(times) * (1.0 - tail_fraction))
    t, v = times[start:], values[start:]
    ok = (v > 0) & np.isfinite(v)
    if ok.sum() < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(t[ok], np.log(v[ok]), 1)
    return float(slope), float(intercept)


def window_measures(model, config, xi, window_len, window_count, paths, master_seed, tag="invariant",
                    chunk_size=4096, threads=1):
    """Empirical measures of y_{t_k} at k = 0, W, 2W, ..., (J-1)W over ``paths`` paths."""
    n = config.steps_per_delay(model.tau)
    if window_len * config.delta < model.tau * (1 - 1e-12):
        raise ValueError(f"window length {window_len} steps is shorter than the delay")
    xi = initial_segment(xi, model, config)
    record = tuple(j * window_len for j in range(window_count))
    seed = derive_seed(master_seed, tag)
    if record[-1] == 0:
        segs = np.repeat(xi.values[None, None], paths, axis=1)
    else:
        segs = segments_at_steps(model, config, xi, record, seed, range(paths),
                                 chunk_size=chunk_size, threads=threads)
    assert segs.shape[2] == n + 1
    return [EmpiricalMeasure(segs[j], config.delta) for j in range(window_count)]


def invariant_cauchy(model, config, xi, window_len, window_count, paths, master_seed=0, q=2, **kw):
    """W_q distances between consecutive window measures, length J-1."""
    ms = window_measures(model, config, xi, window_len, window_count, paths, master_seed, **kw)
    return np.array([wasserstein(q, a, b) for a, b in zip(ms[:-1], ms[1:])])


@dataclass
class InvariantDiagnostic:
    """Window Cauchy sequence with its sampling floor and a cross-start check.

    ``floor`` is the distance between the terminal windows of two independent
    ensembles started from xi; ``cross`` the distance between the terminal
    windows of ensembles started from xi and from eta.
    """

    distances: np.ndarray
    floor: float
    cross: float | None


def invariant_diagnostics(model, config, xi, window_len, window_count, paths, master_seed=0, eta=None,
                          q=2, **kw):
    ms = window_measures(model, config, xi, window_len, window_count, paths, master_seed, **kw)
    dist = np.array([wasserstein(q, a, b) for a, b in zip(ms[:-1], ms[1:])])
    twin = window_measures(model, config, xi, window_len, window_count, paths, master_seed,
                           tag="invariant-twin", **kw)
    floor = wasserstein(q, ms[-1], twin[-1])
    cross = None
    if eta is not None:
        other = window_measures(model, config, eta, window_len, window_count, paths, master_seed,
                                tag="invariant-cross", **kw)
        cross = wasserstein(q, ms[-1], other[-1])
    return InvariantDiagnostic(dist, floor, cross)


# ---------------------------------------------------------------------------
# time averages


@dataclass
class TimeAverageStat:
    """Time average of f along one trajectory.

    ``clt_statistic`` is (m delta)^(-1/2) sum (f(y(t_k)) - mean_ref) delta and is
    NaN when no reference mean is given; ``stderr`` is the batch-means
    standard error of ``mean``.
    """

    mean: float
    count: int
    clt_statistic: float
    stderr: float


def batch_means(values, n_batches=20):
    """Mean and batch-means standard error of a correlated series."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyWindow("no samples")
    n_batches = min(n_batches, values.size)
    size = values.size // n_batches
    if n_batches < 2 or size < 1:
        return float(values.mean()), float("nan")
    trimmed = values[values.size - n_batches * size:]
    bm = trimmed.reshape(n_batches, size).mean(axis=1)
    return float(values.mean()), float(bm.std(ddof=1) / math.sqrt(n_batches))


def time_average(traj, f, burn_in=0, mean_ref=None, n_batches=20):
    """Average of f(y(t_k)) over burn_in < k <= K."""
    K = traj.steps
    if not 0 <= burn_in < K:
        raise EmptyWindow(f"burn_in={burn_in} leaves no samples among {K} steps")
    ys = traj.states[traj.n_delay + burn_in + 1:]
    vals = np.array([float(f(y)) for y in ys])
    mean, se = batch_means(vals, n_batches)
    count = vals.size
    if mean_ref is None:
        clt = float("nan")
    else:
        clt = float(np.sum(vals - mean_ref) * traj.delta / math.sqrt(count * traj.delta))
    return TimeAverageStat(mean=mean, count=count, clt_statistic=clt, stderr=se)
