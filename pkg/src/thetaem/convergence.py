"""
Strong and weak convergence-rate harness.

Every level of a path index is driven by the same Brownian motion: the
reference run at ``delta_ref`` consumes the fine increments and each coarse
level sums them over its cells.  Errors are therefore pathwise (strong) or
common-random-number (weak) differences against the reference.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .csvio import write_csv
from .errors import DegenerateInput, NonNestedGrids
from .integrator import Level, initial_segment, nested_ratios, run_levels
from .longtime import EmpiricalMeasure, wasserstein
from .noise import derive_seed
from .segment import refine_nodes


@dataclass
class RateReport:
    """Errors per step size with a log-log least-squares fit.

    ``used`` flags the levels entering the regression (all of them for
    strong errors; the levels passing the signal test for weak errors).  The
    slope is NaN when fewer than ``min_levels`` levels are usable.
    """

    deltas: np.ndarray
    errors: np.ndarray
    stderr: np.ndarray
    slope: float
    intercept: float
    samples: np.ndarray
    used: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.used is None:
            self.used = np.ones(len(self.deltas), dtype=bool)

    @property
    def surviving(self):
        return int(np.sum(self.used))

    def to_csv(self, path, header_lines=()):
        meta = {"slope": self.slope, "intercept": self.intercept, "surviving_levels": self.surviving}
        meta.update(self.extra)
        rows = [(float(d), float(e), float(s), int(n), int(u))
                for d, e, s, n, u in zip(self.deltas, self.errors, self.stderr, self.samples, self.used)]
        write_csv(path, ["delta", "error", "stderr", "samples", "used"], rows, meta, header_lines)


def loglog_slope(points):
    """Least-squares fit of log y = slope * log x + intercept.

    Parameters
    ----------
    points : array_like, shape (n, 2)
        Pairs (x, y) with x, y > 0 and at least two distinct x.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise DegenerateInput("need at least two (x, y) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise DegenerateInput("points must be finite and positive")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise DegenerateInput("all x values coincide")
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def _fit(deltas, errors, used, min_levels=2):
    sel = used & (errors > 0)
    if sel.sum() < min_levels:
        return float("nan"), float("nan")
    return loglog_slope(np.column_stack([deltas[sel], errors[sel]]))


def _check_steps(model, config, T, delta_list, delta_ref):
    deltas = np.array(sorted(set(float(d) for d in delta_list), reverse=True))
    ratios = nested_ratios(deltas, delta_ref)
    for d in list(deltas) + [delta_ref]:
        initial_segment(0.0, model, config.with_delta(d))
    steps_ref = T / delta_ref
    K = int(round(steps_ref))
    if abs(steps_ref - K) > 1e-9 * max(1.0, steps_ref):
        raise NonNestedGrids(f"horizon T={T} is not a multiple of delta_ref={delta_ref}")
    for r in ratios:
        if K % r:
            raise NonNestedGrids(f"horizon T={T} is not a multiple of step {r * delta_ref}")
    return deltas, ratios, K


def _coupled_levels(model, config, xi, T, delta_list, delta_ref, M, master_seed, kind, tag,
                    chunk_size, threads, noise_sign=1.0):
    deltas, ratios, K = _check_steps(model, config, T, delta_list, delta_ref)
    levels = []
    for d, r in zip(deltas, ratios):
        cfg = config.with_delta(d)
        levels.append(Level(r, initial_segment(xi, model, cfg), (K // r,), kind))
    cfg_ref = config.with_delta(delta_ref)
    levels.append(Level(1, initial_segment(xi, model, cfg_ref), (K,), kind))
    seed = derive_seed(master_seed, tag)
    out = run_levels(model, config, levels, delta_ref, K, seed, range(M),
                     chunk_size=chunk_size, threads=threads, noise_sign=noise_sign)
    return deltas, ratios, [o[0] for o in out]


def _sup_gap_sq(coarse, fine, ratio):
    """Squared sup over the fine grid of |coarse interpolant - fine|, per path.

    ``coarse`` has shape (M, Nc+1, d) and ``fine`` (M, Nc*ratio+1, d).
    """
    up = np.transpose(refine_nodes(np.transpose(coarse, (1, 0, 2)), ratio), (1, 0, 2))
    diff = up - fine
    if diff.shape[-1] == 1:
        return np.max(np.abs(diff[..., 0]), axis=1) ** 2
    return np.max(np.sum(diff * diff, axis=-1), axis=1)


def strong_errors(model, config, xi, T, delta_list, delta_ref, M, master_seed=0, chunk_size=4096,
                  threads=1):
    """Root-mean-square sup-norm error of the terminal segment y_T at each step size.

    The standard error of each RMS value is the delta-method estimate
    se(mean e^2) / (2 rms).
    """
    deltas, ratios, segs = _coupled_levels(model, config, xi, T, delta_list, delta_ref, M, master_seed,
                                           "segment", "strong", chunk_size, threads)
    ref = segs[-1]
    errs, ses = [], []
    for r, s in zip(ratios, segs[:-1]):
        sq = _sup_gap_sq(s, ref, r)
        ms = float(np.mean(sq))
        rms = math.sqrt(ms)
        se_ms = float(np.std(sq, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
        errs.append(rms)
        ses.append(se_ms / (2 * rms) if rms > 0 else 0.0)
    errs, ses = np.array(errs), np.array(ses)
    used = np.ones(len(deltas), dtype=bool)
    slope, intercept = _fit(deltas, errs, used)
    return RateReport(deltas, errs, ses, slope, intercept, np.full(len(deltas), M), used,
                      {"delta_ref": delta_ref, "T": T})


# built-in smooth bounded test functions of the endpoint

def cos_test(x, weights=None):
    """cos of a linear functional of the endpoint (the first coordinate by default)."""
    x = np.asarray(x, dtype=float)
    w = np.zeros(x.shape[-1]) if weights is None else np.asarray(weights, dtype=float)
    if weights is None:
        w[0] = 1.0
    return np.cos(x @ w)


def logistic_test(x):
    x = np.asarray(x, dtype=float)
    return 1.0 / (1.0 + np.exp(-x[..., 0]))


TEST_FUNCTIONS = {"cos": cos_test, "logistic": logistic_test}


def weak_errors(model, config, xi, T, f, delta_list, delta_ref, M, master_seed=0, signal=3.0,
                min_levels=3, antithetic=False, chunk_size=4096, threads=1):
    """Weak errors |E_M f(y^Delta(T)) - E_M f(y^ref(T))| with common random numbers.

    Levels whose error does not exceed ``signal`` standard errors are
    excluded from the fit; with fewer than ``min_levels`` survivors the slope
    is NaN.  ``antithetic=True`` pools each path with its mirrored copy, so
    the standard error is taken over the M pair averages.
    """
    if isinstance(f, str):
        f = TEST_FUNCTIONS[f]
    deltas, ratios, ys = _coupled_levels(model, config, xi, T, delta_list, delta_ref, M, master_seed,
                                         "state", "weak", chunk_size, threads)
    vals = [np.asarray(f(y), dtype=float) for y in ys]
    if antithetic:
        _, _, ys_m = _coupled_levels(model, config, xi, T, delta_list, delta_ref, M, master_seed,
                                     "state", "weak", chunk_size, threads, noise_sign=-1.0)
        vals = [0.5 * (v + np.asarray(f(y), dtype=float)) for v, y in zip(vals, ys_m)]
    ref = vals[-1]
    errs, ses = [], []
    for v in vals[:-1]:
        diff = v - ref
        errs.append(abs(float(np.mean(diff))))
        ses.append(float(np.std(diff, ddof=1) / math.sqrt(M)) if M > 1 else float("nan"))
    errs, ses = np.array(errs), np.array(ses)
    used = (errs > signal * ses) & (errs > 0)
    slope, intercept = _fit(deltas, errs, used, min_levels)
    return RateReport(deltas, errs, ses, slope, intercept, np.full(len(deltas), M), used,
                      {"delta_ref": delta_ref, "T": T, "signal": signal})


def invariant_rate(model, config, xi, T_long, delta_list, delta_ref, M, n_atoms=None, master_seed=0,
                   q=2, chunk_size=4096, threads=1):
    """W_q distance between terminal-segment measures at each Delta and at delta_ref.

    Levels use independent noise.  Segments of the coarse levels are
    interpolated onto the reference grid before the transport problem is
    solved.  ``extra['floor']`` holds the distance between two independent
    reference ensembles.
    """
    from .integrator import segments_at_steps

    n_atoms = M if n_atoms is None else n_atoms
    deltas, ratios, K = _check_steps(model, config, T_long, delta_list, delta_ref)

    def terminal(delta, ratio, tag):
        cfg = config.with_delta(delta)
        segs = segments_at_steps(model, cfg, initial_segment(xi, model, cfg), (K // ratio,),
                                 derive_seed(master_seed, tag), range(n_atoms),
                                 chunk_size=chunk_size, threads=threads)[0]
        if ratio > 1:
            segs = np.transpose(refine_nodes(np.transpose(segs, (1, 0, 2)), ratio), (1, 0, 2))
        return EmpiricalMeasure(segs, delta_ref)

    ref = terminal(delta_ref, 1, "invariant-ref")
    errs = []
    for d, r in zip(deltas, ratios):
        tag = "invariant-ref" if r == 1 else f"invariant-level-{r}"
        errs.append(wasserstein(q, terminal(d, r, tag), ref, max_atoms=max(512, n_atoms)))
    floor = wasserstein(q, terminal(delta_ref, 1, "invariant-floor"), ref, max_atoms=max(512, n_atoms))
    errs = np.array(errs)
    used = np.ones(len(deltas), dtype=bool)
    slope, intercept = _fit(deltas, errs, used)
    return RateReport(deltas, errs, np.full(len(deltas), np.nan), slope, intercept,
                      np.full(len(deltas), n_atoms), used, {"floor": floor, "T": T_long})
