"""
Small-noise machinery: skeleton recursion, controlled scheme, quadratic
rate costs and their minimisation, and Monte Carlo log-probability and
log-density checks.

A control is piecewise constant on the scheme grid; the skeleton replaces the
noise increment sqrt(eps) dW_k by v(t_k) delta, and its cost is
(delta / 2) sum_k |v(t_k)|^2.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .csvio import write_csv
from .density import kde
from .errors import OptimizerStalled, SchemeError, ZeroHits
from .integrator import PathEnsemble, _run_path, endpoint_states, initial_segment
from .noise import derive_seed


@dataclass
class Control:
    """Control values v(t_k), k = 0..K-1, shape (K, m)."""

    values: np.ndarray
    delta: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"control values must have shape (K, m), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        self.values = v

    @classmethod
    def zeros(cls, steps, m, delta):
        return cls(np.zeros((steps, m)), delta)

    @classmethod
    def constant(cls, value, steps, delta):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(v, (steps, 1)), delta)

    @property
    def steps(self):
        return self.values.shape[0]

    def to_csv(self, path, header_lines=()):
        m = self.values.shape[1]
        rows = [[k] + row.tolist() for k, row in enumerate(self.values)]
        write_csv(path, ["k"] + [f"v_{i + 1}" for i in range(m)], rows, {"delta": self.delta}, header_lines)


@dataclass(frozen=True)
class RateValue:
    cost: float


def rate_cost(v):
    """Quadratic cost (delta / 2) sum_k |v(t_k)|^2 of a control."""
    sq = v.values * v.values
    return RateValue(0.5 * v.delta * math.fsum(sq.ravel()))


def _check_ldp_step(model, config):
    p = model.assumptions
    if p is not None and p.a2_a2 is not None and p.a2_a2 > 0:
        limit = 1.0 / (4.0 * config.theta * p.a2_a2)
        if config.delta > limit * (1 + 1e-12):
            raise SchemeError(f"delta={config.delta} exceeds 1/(4 theta a2) = {limit:.6g}")


def _as_control(v, config):
    if isinstance(v, Control):
        if abs(v.delta - config.delta) > 1e-15 * config.delta:
            raise SchemeError(f"control step {v.delta} differs from scheme step {config.delta}")
        return v
    return Control(v, config.delta)


def skeleton_solve(model, config, xi, v):
    """Deterministic controlled path w^{Delta, v} over the control horizon."""
    _check_ldp_step(model, config)
    xi = initial_segment(xi, model, config)
    v = _as_control(v, config)
    return _run_path(model, config, xi, v.steps, None, v.values, None)


def controlled_simulate(model, config, xi, v, eps, stream):
    """Controlled scheme with forcing sqrt(eps) dW_k + v(t_k) delta; advances ``stream``."""
    _check_ldp_step(model, config)
    cfg = config.with_eps(eps)
    xi = initial_segment(xi, model, cfg)
    v = _as_control(v, cfg)
    lineage = stream.lineage
    dW = stream.take(v.steps, cfg.delta, model.dim_noise)
    return _run_path(model, cfg, xi, v.steps, dW, v.values, lineage)


def skeleton_endpoints(model, config, xi, controls):
    """Endpoints w(t_K) for a batch of controls of shape (C, K, m), returned as (C, d)."""
    controls = np.asarray(controls, dtype=float)
    c, K, _ = controls.shape
    ens = PathEnsemble(model, config, initial_segment(xi, model, config), c=c)
    for k in range(K):
        ens.step(controls[:, k, :] * config.delta)
    return ens.state().copy()


# ---------------------------------------------------------------------------
# endpoint rate by penalty continuation


@dataclass
class OptimizerSettings:
    """Penalty continuation over ``rhos``; each stage runs Gauss-Newton
    preconditioned gradient steps with Armijo backtracking."""

    endpoint_tol: float = 1e-6
    rhos: tuple = (1.0, 1e1, 1e2, 1e3, 1e4, 1e6, 1e8, 1e10)
    max_iter: int = 100
    fd_step: float = 1e-6
    grad_tol: float = 1e-12
    armijo: float = 1e-4
    max_backtrack: int = 40


@dataclass
class EndpointRate:
    rate: RateValue
    control: Control
    endpoint: np.ndarray
    gap: float
    history: list = field(default_factory=list)

    @property
    def cost(self):
        return self.rate.cost


def _objective(v, end, z, rho, delta):
    r = end - z
    return 0.5 * delta * float(np.sum(v * v)) + rho * float(r @ r)


def endpoint_rate(model, config, xi, t, z, settings=None, v0=None):
    """Approximate min of the control cost subject to w^{Delta, v}(t) = z.

    Minimises cost + rho |w(t) - z|^2 for increasing rho.  Each stage is
    warm-started from the previous minimiser.  The history records one
    entry per accepted iterate as (rho, objective, cost, gap).  Raises
    OptimizerStalled, carrying the best result, when the endpoint gap is
    still above ``endpoint_tol`` after the last stage.
    """
    s = settings or OptimizerSettings()
    _check_ldp_step(model, config)
    K = int(round(t / config.delta))
    if K < 1 or abs(K * config.delta - t) > 1e-9 * max(1.0, t):
        raise SchemeError(f"t={t} is not a positive multiple of delta={config.delta}")
    m = model.dim_noise
    z = np.atleast_1d(np.asarray(z, dtype=float))
    xi = initial_segment(xi, model, config)
    n_par = K * m
    v = np.zeros(n_par) if v0 is None else np.array(v0, dtype=float).ravel()

    def endpoint(vec):
        return skeleton_endpoints(model, config, xi, vec.reshape(1, K, m))[0]

    def jacobian(vec):
        h = s.fd_step * (1.0 + np.abs(vec))
        batch = np.repeat(vec[None, :], 2 * n_par, axis=0)
        idx = np.arange(n_par)
        batch[idx, idx] += h
        batch[n_par + idx, idx] -= h
        ends = skeleton_endpoints(model, config, xi, batch.reshape(2 * n_par, K, m))
        return ((ends[:n_par] - ends[n_par:]) / (2 * h)[:, None]).T

    delta = config.delta
    end = endpoint(v)
    history = []
    for rho in s.rhos:
        obj = _objective(v, end, z, rho, delta)
        for _ in range(s.max_iter):
            J = jacobian(v)
            r = end - z
            grad = delta * v + 2.0 * rho * (J.T @ r)
            if np.linalg.norm(grad) <= s.grad_tol * (1.0 + rho):
                break
            H = delta * np.eye(n_par) + 2.0 * rho * (J.T @ J)
            step = -np.linalg.solve(H, grad)
            slope = float(grad @ step)
            if slope >= 0:
                step, slope = -grad, -float(grad @ grad)
            lam, accepted = 1.0, False
            for _ in range(s.max_backtrack):
                trial = v + lam * step
                e_trial = endpoint(trial)
                o_trial = _objective(trial, e_trial, z, rho, delta)
                if np.isfinite(o_trial) and o_trial <= obj + s.armijo * lam * slope:
                    accepted = True
                    break
                lam *= 0.5
            if not accepted:
                break
            improvement = obj - o_trial
            v, end, obj = trial, e_trial, o_trial
            control = Control(v.reshape(K, m), delta)
            history.append((rho, obj, rate_cost(control).cost, float(np.linalg.norm(end - z))))
            if improvement <= 1e-15 * max(1.0, abs(obj)):
                break
        if np.linalg.norm(end - z) <= s.endpoint_tol:
            break
    control = Control(v.reshape(K, m), delta)
    result = EndpointRate(rate_cost(control), control, end, float(np.linalg.norm(end - z)), history)
    if result.gap > s.endpoint_tol:
        raise OptimizerStalled(f"endpoint gap {result.gap:.3g} above tolerance {s.endpoint_tol}", best=result)
    return result


# ---------------------------------------------------------------------------
# Monte Carlo small-noise checks


def wilson_interval(hits, n, z=1.96):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = hits / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class LogProbRow:
    eps: float
    hits: int
    samples: int
    p_hat: float
    eps_log_p: float
    lo: float
    hi: float
    censored: bool


@dataclass
class LogProbTable:
    rows: list
    oracle: float | None = None

    @property
    def eps(self):
        return np.array([r.eps for r in self.rows])

    @property
    def values(self):
        return np.array([r.eps_log_p for r in self.rows])

    def to_csv(self, path, header_lines=()):
        cols = ["eps", "hits", "samples", "p_hat", "eps_log_p", "eps_log_lo", "eps_log_hi", "censored"]
        rows = [(r.eps, r.hits, r.samples, r.p_hat, r.eps_log_p, r.lo, r.hi, int(r.censored)) for r in self.rows]
        meta = {} if self.oracle is None else {"oracle": self.oracle}
        write_csv(path, cols, rows, meta, header_lines)


def small_noise_logprob(model, config, xi, t, c, eps_list, M, master_seed=0, oracle=None,
                        chunk_size=4096, threads=1):
    """Estimates of eps log P(y_1(t) >= c) for each eps.

    The Wilson interval of each proportion is mapped to the eps-log scale
    as (lo, hi).  Levels without hits are kept as censored rows with NaN
    estimates.  ZeroHits is raised when the largest eps already has no hit.
    """
    K = int(round(t / config.delta))
    if abs(K * config.delta - t) > 1e-9 * max(1.0, t):
        raise SchemeError(f"t={t} is not a multiple of delta={config.delta}")
    eps_sorted = sorted((float(e) for e in eps_list), reverse=True)
    rows = []
    for i, eps in enumerate(eps_sorted):
        cfg = config.with_eps(eps)
        y = endpoint_states(model, cfg, initial_segment(xi, model, cfg), K,
                            derive_seed(master_seed, "logprob", i), range(M),
                            chunk_size=chunk_size, threads=threads)[:, 0]
        hits = int(np.count_nonzero(y >= c))
        if hits == 0 and i == 0:
            raise ZeroHits(f"no hits at the largest eps={eps}; the event is too rare for M={M}")
        lo, hi = wilson_interval(hits, M)
        if hits == 0:
            rows.append(LogProbRow(eps, 0, M, 0.0, float("nan"), float("nan"), eps * math.log(hi), True))
            continue
        p = hits / M
        rows.append(LogProbRow(eps, hits, M, p, eps * math.log(p), eps * math.log(lo), eps * math.log(hi), False))
    return LogProbTable(rows, oracle)


@dataclass
class LogDensityRow:
    eps: float
    y: float
    eps_log_density: float
    neg_rate: float
    bandwidth: float

    @property
    def gap(self):
        return self.eps_log_density - self.neg_rate


def log_density_check(model, config, xi, t, y_grid, eps_list, M, zeta0=None, master_seed=0,
                      rates=None, settings=None, chunk_size=4096, threads=1):
    """Table of eps ln p_hat(t, y) next to -I_t(y).

    The kernel variance at level eps is zeta0 sqrt(eps).  By default
    zeta0 = (0.5 sd)^2, with sd the sample standard deviation at the
    largest eps.  ``rates`` may hold precomputed values of I_t(y); otherwise
    each one is obtained from :func:`endpoint_rate`.
    """
    K = int(round(t / config.delta))
    eps_sorted = sorted((float(e) for e in eps_list), reverse=True)
    y_grid = np.atleast_1d(np.asarray(y_grid, dtype=float))
    if rates is None:
        rates = [endpoint_rate(model, config, xi, t, [y], settings).cost for y in y_grid]
    rates = np.asarray(rates, dtype=float)
    rows = []
    for i, eps in enumerate(eps_sorted):
        cfg = config.with_eps(eps)
        y = endpoint_states(model, cfg, initial_segment(xi, model, cfg), K,
                            derive_seed(master_seed, "logdensity", i), range(M),
                            chunk_size=chunk_size, threads=threads)[:, 0]
        if zeta0 is None:
            zeta0 = (0.5 * float(np.std(y, ddof=1))) ** 2
        zeta = zeta0 * math.sqrt(eps)
        p = kde(y, zeta, y_grid)
        with np.errstate(divide="ignore"):
            logs = eps * np.log(p.values)
        for yy, lv, rt in zip(y_grid, logs, rates):
            rows.append(LogDensityRow(eps, float(yy), float(lv), -float(rt), zeta))
    return rows


def write_log_density(rows, path, header_lines=()):
    cols = ["eps", "y", "eps_log_density", "neg_rate", "gap", "bandwidth"]
    write_csv(path, cols, [(r.eps, r.y, r.eps_log_density, r.neg_rate, r.gap, r.bandwidth) for r in rows],
              None, header_lines)
