"""
Gaussian-mollification density estimates of scalar endpoint laws.

The estimate at z is the sample mean of g_zeta(y_i - z), where g_zeta is the
N(0, zeta) density.  Note that ``zeta`` is a variance, not a standard
deviation: Silverman's bandwidth h corresponds to zeta = h**2.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .csvio import write_csv
from .errors import EmptySamples, GridMismatch
from .integrator import endpoint_states, initial_segment
from .noise import derive_seed

DEFAULT_GRID_POINTS = 401
DEFAULT_GRID_WIDTH = 6.0
_CHUNK = 1 << 22


@dataclass
class DensityEstimate:
    """Density values on a 1-D grid.

    ``bandwidth`` is the kernel variance zeta (NaN for tabulated analytic
    densities) and ``sample_count`` the number of samples (0 when tabulated).
    """

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    sample_count: int

    @classmethod
    def from_function(cls, pdf, grid):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.asarray(pdf(grid), dtype=float), float("nan"), 0)

    def integral(self):
        return float(np.trapezoid(self.values, self.grid))

    def to_csv(self, path, header_lines=()):
        meta = {"bandwidth": self.bandwidth, "sample_count": self.sample_count}
        write_csv(path, ["z", "value"], zip(self.grid.tolist(), self.values.tolist()), meta, header_lines)


def gaussian_kernel(x, zeta):
    return np.exp(-0.5 * x * x / zeta) / math.sqrt(2.0 * math.pi * zeta)


def silverman_bandwidth(samples):
    """Kernel variance zeta = (1.06 sd M^(-1/5))^2 from Silverman's rule of thumb."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise EmptySamples("Silverman's rule needs at least two samples")
    sd = float(np.std(s, ddof=1))
    if sd == 0:
        raise EmptySamples("samples have zero spread; supply a bandwidth")
    h = 1.06 * sd * s.size ** (-0.2)
    return h * h


def default_grid(samples, points=DEFAULT_GRID_POINTS, width=DEFAULT_GRID_WIDTH):
    """Equispaced grid over mean +- width sample standard deviations."""
    s = np.asarray(samples, dtype=float).ravel()
    mu = float(s.mean())
    sd = float(np.std(s, ddof=1)) if s.size > 1 else 1.0
    sd = sd if sd > 0 else 1.0
    return np.linspace(mu - width * sd, mu + width * sd, points)


def kde(samples, bandwidth=None, grid=None):
    """Gaussian-mollified empirical density on ``grid``.

    Parameters
    ----------
    samples : array_like
        Scalar samples (an (M, 1) array is flattened).
    bandwidth : float, optional
        Kernel variance zeta; Silverman's rule when omitted.
    grid : array_like, optional
        Evaluation points; :func:`default_grid` when omitted.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise EmptySamples("no samples")
    zeta = silverman_bandwidth(s) if bandwidth is None else float(bandwidth)
    if not zeta > 0:
        raise ValueError(f"bandwidth must be positive, got {zeta}")
    z = default_grid(s) if grid is None else np.asarray(grid, dtype=float)
    acc = np.zeros(z.size)
    step = max(1, _CHUNK // max(1, z.size))
    for i in range(0, s.size, step):
        diff = s[i:i + step, None] - z[None, :]
        acc += gaussian_kernel(diff, zeta).sum(axis=0)
    return DensityEstimate(z, acc / s.size, zeta, int(s.size))


def density_distance(p1, p2):
    """Trapezoidal L1 distance and grid sup distance of two densities on one grid."""
    if p1.grid.shape != p2.grid.shape or not np.array_equal(p1.grid, p2.grid):
        raise GridMismatch("density estimates live on different grids")
    diff = np.abs(p1.values - p2.values)
    return float(np.trapezoid(diff, p1.grid)), float(diff.max())


@dataclass(frozen=True)
class GaussianLaw:
    """Scalar normal law N(mean, var); ``degenerate`` marks a point mass (var = 0)."""

    mean: float
    var: float

    @property
    def degenerate(self):
        return self.var == 0.0

    @property
    def std(self):
        return math.sqrt(self.var)

    def pdf(self, z):
        if self.degenerate:
            raise ValueError("point mass has no density")
        z = np.asarray(z, dtype=float)
        return gaussian_kernel(z - self.mean, self.var)

    def logpdf(self, z):
        if self.degenerate:
            raise ValueError("point mass has no density")
        z = np.asarray(z, dtype=float)
        return -0.5 * (z - self.mean) ** 2 / self.var - 0.5 * math.log(2 * math.pi * self.var)

    def sf(self, c):
        """P(X >= c)."""
        if self.degenerate:
            return 1.0 if self.mean >= c else 0.0
        return 0.5 * math.erfc((c - self.mean) / (self.std * math.sqrt(2.0)))

    def smoothed(self, zeta):
        """Law convolved with the N(0, zeta) kernel, i.e. the exact mean of a KDE."""
        return GaussianLaw(self.mean, self.var + zeta)


def ou_exact_density(a, sigma0, xi0, T, eps=1.0):
    """Exact law of x(T) for dx = -a x dt + sqrt(eps) sigma0 dW, x(0) = xi0."""
    if not a > 0:
        raise ValueError("a must be positive")
    if T < 0:
        raise ValueError("T must be nonnegative")
    mean = xi0 * math.exp(-a * T)
    var = eps * sigma0**2 * -math.expm1(-2 * a * T) / (2 * a)
    return GaussianLaw(mean, var)


def dens_con_threshold(L_b, n_b, theta):
    """Horizon T0 = ln(3/2) / (2 L_b n_b (theta + 2)) of the sup-norm density rate."""
    return math.log(1.5) / (2.0 * L_b * n_b * (theta + 2.0))


def horizon_check(model, config, T):
    """Return T0 for models declaring L_b and n_b (else None); warn when T < T0."""
    p = model.assumptions
    if p is None or p.L_b is None or p.n_b is None:
        return None
    t0 = dens_con_threshold(p.L_b, p.n_b, config.theta)
    if T < t0:
        warnings.warn(f"T={T} is below the density-rate horizon T0={t0:.4g}", stacklevel=2)
    return t0


def endpoint_samples(model, config, xi, T, M, master_seed=0, tag="density", chunk_size=4096, threads=1):
    """Scalar endpoints y(T) of M independent paths."""
    K = int(round(T / config.delta))
    if abs(K * config.delta - T) > 1e-9 * max(1.0, T):
        raise GridMismatch(f"T={T} is not a multiple of delta={config.delta}")
    y = endpoint_states(model, config, initial_segment(xi, model, config), K,
                        derive_seed(master_seed, tag), range(M), chunk_size=chunk_size, threads=threads)
    return y[:, 0]
