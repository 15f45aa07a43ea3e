"""
Segments and delay measures
===========================

A segment is the restriction of a path to the delay interval [-tau, 0],
stored at the N+1 grid nodes t_j = j*delta (j = -N..0) and extended between
nodes by linear interpolation.  It is the state variable of the
theta-Euler-Maruyama scheme: every drift and diffusion evaluation happens on
a segment.

Delay measures are probability measures on [-tau, 0] discretised to the same
grid nodes, so that an integral against the measure is a weighted node sum.
"""
import csv
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, GridMismatch, OutOfDomain

#: Tolerance absorbing floating point drift of time offsets at the endpoints.
ENDPOINT_TOL = 1e-12


def steps_per_delay(tau, delta, rtol=1e-9):
    """Return N = tau/delta, requiring it to be a positive integer."""
    if tau <= 0 or delta <= 0:
        raise GridMismatch(f"tau and delta must be positive (tau={tau}, delta={delta})")
    ratio = tau / delta
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > rtol * max(1.0, ratio):
        raise GridMismatch(f"delta={delta} does not divide tau={tau} into an integer number of steps")
    return n


class Segment:
    """Piecewise-linear path on [-tau, 0].

    Parameters
    ----------
    values : array_like, shape (N+1,) or (N+1, d)
        Node values, oldest first: ``values[j]`` is the value at
        ``t = (j - N) * delta``.  A 1-D array is read as a scalar path.
    delta : float
        Grid step.

    Notes
    -----
    Segments are immutable; the stored array is a read-only copy.
    """

    __slots__ = ("_values", "_delta")

    def __init__(self, values, delta):
        vals = np.array(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 2 or vals.shape[1] < 1:
            raise DimensionMismatch(f"segment values must have shape (N+1, d) with N >= 1, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("segment values must be finite")
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        vals.flags.writeable = False
        self._values = vals
        self._delta = float(delta)

    @classmethod
    def constant(cls, value, n, delta):
        """Segment identically equal to ``value`` (scalar or vector)."""
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.broadcast_to(v, (n + 1, v.size)), delta)

    @classmethod
    def from_function(cls, func, n, delta):
        """Sample ``func(t)`` at the grid nodes t_{-N}, ..., t_0."""
        times = (np.arange(n + 1) - n) * delta
        return cls(np.array([np.atleast_1d(func(t)) for t in times], dtype=float), delta)

    @property
    def values(self):
        return self._values

    @property
    def delta(self):
        return self._delta

    @property
    def n(self):
        """Number of cells N."""
        return self._values.shape[0] - 1

    @property
    def dim(self):
        return self._values.shape[1]

    @property
    def tau(self):
        return self.n * self._delta

    @property
    def times(self):
        """Node times t_{-N}, ..., t_0."""
        return (np.arange(self.n + 1) - self.n) * self._delta

    @property
    def endpoint(self):
        """phi(0), the newest node value."""
        return self._values[-1]

    def eval(self, r):
        """Evaluate the linear interpolant at time offset ``r`` in [-tau, 0]."""
        tau = self.tau
        if r < -tau - ENDPOINT_TOL or r > ENDPOINT_TOL:
            raise OutOfDomain(f"r={r} outside [-{tau}, 0]")
        r = min(max(r, -tau), 0.0)
        s = (r + tau) / self._delta
        j = min(int(np.floor(s)), self.n - 1)
        t_j = (j - self.n) * self._delta
        t_next = t_j + self._delta
        # exact node hits avoid round-off from the convex combination
        if r == t_j:
            return self._values[j].copy()
        if r == t_next:
            return self._values[j + 1].copy()
        return ((t_next - r) / self._delta) * self._values[j] + ((r - t_j) / self._delta) * self._values[j + 1]

    def __call__(self, r):
        return self.eval(r)

    def sup_norm(self):
        """Supremum of |phi| over [-tau, 0].

        Exact for scalar paths; for d > 1 the node maximum of Euclidean norms
        is returned, which can underestimate the cell supremum by O(delta).
        """
        return float(np.max(np.linalg.norm(self._values, axis=1)))

    def shift_append(self, u):
        """Drop the oldest node and append ``u`` as the new value at t = 0."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.dim,):
            raise DimensionMismatch(f"endpoint of shape {u.shape} does not match dimension {self.dim}")
        return Segment(np.vstack([self._values[1:], u[None, :]]), self._delta)

    def resample(self, n_new):
        """Interpolate onto a refined grid with ``n_new`` cells (a multiple of N)."""
        if n_new % self.n:
            raise GridMismatch(f"cannot refine a grid of {self.n} cells to {n_new} cells")
        return Segment(refine_nodes(self._values, n_new // self.n), self.tau / n_new)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Segment(self._values - other._values, self._delta)

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        return self._delta == other._delta and np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash((self._delta, self._values.tobytes()))

    def __repr__(self):
        return f"Segment(n={self.n}, dim={self.dim}, delta={self._delta})"

    def to_csv(self, path):
        """Write the segment: header of node times, one row per coordinate."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([repr(float(t)) for t in self.times])
            for row in self._values.T:
                writer.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        times = np.array([float(x) for x in rows[0]])
        values = np.array([[float(x) for x in r] for r in rows[1:]]).T
        delta = (times[-1] - times[0]) / (len(times) - 1)
        return cls(values, delta)


def refine_nodes(values, ratio):
    """Linear interpolation of node arrays onto a grid ``ratio`` times finer.

    ``values`` has the node axis first; any trailing axes are carried along.
    """
    values = np.asarray(values, dtype=float)
    if ratio == 1:
        return values
    n = values.shape[0] - 1
    i = np.arange(n * ratio + 1)
    cell = np.minimum(i // ratio, n - 1)
    alpha = ((i - cell * ratio) / ratio).reshape((-1,) + (1,) * (values.ndim - 1))
    return values[cell] * (1.0 - alpha) + values[cell + 1] * alpha


def _check_same_grid(a, b):
    if a.n != b.n or a.dim != b.dim or abs(a.delta - b.delta) > 1e-15 * max(1.0, a.delta):
        raise GridMismatch(f"segments on different grids: {a!r} vs {b!r}")


class DelayMeasure:
    """Probability measure on [-tau, 0] carried by the grid nodes.

    Parameters
    ----------
    weights : array_like, shape (N+1,)
        Nonnegative node weights, oldest node first, summing to one.
    kind : str, optional
        Descriptive tag (``"uniform"``, ``"dirac"`` or ``"weights"``).
    """

    __slots__ = ("_weights", "kind")

    def __init__(self, weights, kind="weights"):
        w = np.array(weights, dtype=float)
        if w.ndim != 1 or w.size < 2:
            raise DimensionMismatch(f"weights must be a vector of length N+1 >= 2, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("delay measure weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"delay measure weights sum to {w.sum()!r}, not 1")
        w.flags.writeable = False
        self._weights = w
        self.kind = kind

    @property
    def weights(self):
        return self._weights

    @property
    def n(self):
        return self._weights.size - 1

    @classmethod
    def uniform(cls, n):
        """Normalised Lebesgue measure, trapezoidal node weights."""
        return cls(_trapezoid_weights(n), kind="uniform")

    @classmethod
    def dirac(cls, r, tau, n):
        """Point mass at offset ``r``, snapped to the nearest node.

        A warning is issued when ``r`` is not (numerically) a node.
        """
        if r < -tau - ENDPOINT_TOL or r > ENDPOINT_TOL:
            raise OutOfDomain(f"Dirac point r={r} outside [-{tau}, 0]")
        s = (r + tau) * n / tau
        j = int(round(s))
        if abs(s - j) > 1e-9:
            warnings.warn(f"Dirac point r={r} snapped to node t={(j - n) * tau / n}", stacklevel=2)
        w = np.zeros(n + 1)
        w[j] = 1.0
        return cls(w, kind="dirac")

    def integrate(self, seg):
        return integrate(seg, self)

    def __repr__(self):
        return f"DelayMeasure(kind={self.kind!r}, n={self.n})"


@lru_cache(maxsize=64)
def _trapezoid_weights(n):
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    w.flags.writeable = False
    return w


def integrate(seg, nu):
    """Quadrature of a segment against a delay measure: sum_j w_j phi(t_j)."""
    if nu.n != seg.n:
        raise DimensionMismatch(f"measure has {nu.n} cells but segment has {seg.n}")
    return nu.weights @ seg.values


@dataclass(frozen=True)
class MeasureSpec:
    """Grid-independent description of a delay measure.

    ``kind`` is ``"uniform"`` (normalised Lebesgue) or ``"dirac"`` (point
    mass at offset ``point``).  :meth:`on_grid` discretises it.
    """

    kind: str = "uniform"
    point: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "dirac"):
            raise ValueError(f"unknown measure kind {self.kind!r}")

    def on_grid(self, tau, n):
        return _discretise(self, float(tau), int(n))


@lru_cache(maxsize=256)
def _discretise(spec, tau, n):
    if spec.kind == "uniform":
        return DelayMeasure.uniform(n)
    return DelayMeasure.dirac(spec.point, tau, n)
