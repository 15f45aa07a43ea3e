"""
theta-Euler-Maruyama integrator
===============================

The scheme advances the node values y(t_k) of a functional solution by

    y(t_{k+1}) = y(t_k) + (1-theta) b(y_{t_k}) delta + theta b(y_{t_{k+1}}) delta
                 + sigma(y_{t_k}) (sqrt(eps) dW_k + v(t_k) delta),

where y_{t_k} is the segment interpolating y(t_{k-N}), ..., y(t_k) and v is an
optional deterministic control (zero for the plain scheme).  Only the newest
node of y_{t_{k+1}} is unknown, so each step solves

    F(u) = u - theta delta b(Phi_u) = rhs

in R^d with Phi_u the shifted segment ending in u.  F is strongly monotone
under the dissipativity assumptions and the root is found by damped Newton
iteration started from the explicit Euler predictor.

:class:`PathEnsemble` carries C paths at once; all public drivers are built
on it.  Delay-measure integrals are maintained incrementally: sparse
measures by direct lookup, the uniform measure by a sliding window sum
that is recomputed exactly once per delay length.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import (DimensionMismatch, IndexOutOfRange, MissingIncrements, NonNestedGrids,
                     SchemeError, SolverDiverged)
from .noise import BLOCK_STEPS, NoiseStream, batch_normals
from .segment import Segment, _trapezoid_weights, steps_per_delay

#: Number of residual-increase halvings tried before accepting a Newton step.
MAX_HALVINGS = 30
DEFAULT_CHUNK = 4096


@dataclass(frozen=True)
class SchemeConfig:
    """Parameters of the theta-EM scheme.

    Parameters
    ----------
    theta : float
        Implicitness in (1/2, 1].
    delta : float
        Step size in (0, 1]; must divide the model delay.
    solver_tol : float
        Newton stops once |F(u) - rhs| <= solver_tol * (1 + |u|).
    solver_max_iter : int
        Newton iteration cap.
    eps : float
        Noise scale in (0, 1]; the diffusion is multiplied by sqrt(eps).
    """

    theta: float = 0.75
    delta: float = 0.05
    solver_tol: float = 1e-10
    solver_max_iter: int = 50
    eps: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.theta <= 1.0:
            raise SchemeError(f"theta must lie in (1/2, 1], got {self.theta}")
        if not 0.0 < self.delta <= 1.0:
            raise SchemeError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.solver_tol > 0 or self.solver_max_iter < 1:
            raise SchemeError("solver_tol must be positive and solver_max_iter at least 1")
        if not 0.0 < self.eps <= 1.0:
            raise SchemeError(f"eps must lie in (0, 1], got {self.eps}")

    def steps_per_delay(self, tau):
        return steps_per_delay(tau, self.delta)

    def with_delta(self, delta):
        return replace(self, delta=delta)

    def with_eps(self, eps):
        return replace(self, eps=eps)


@dataclass
class Trajectory:
    """Node states of one path from t_{-N} to t_K.

    ``states[i]`` is y(t_{i-N}); ``increments[k]`` and ``controls[k]`` act on
    the transition t_k -> t_{k+1}.
    """

    states: np.ndarray
    delta: float
    n_delay: int
    seed_lineage: tuple | None = None
    increments: np.ndarray | None = None
    controls: np.ndarray | None = None
    eps: float = 1.0

    @property
    def steps(self):
        """Number K of simulated steps."""
        return self.states.shape[0] - self.n_delay - 1

    @property
    def times(self):
        return (np.arange(self.states.shape[0]) - self.n_delay) * self.delta

    def node(self, k):
        """y(t_k) for k = -N .. K."""
        return self.states[k + self.n_delay]

    def to_csv(self, path, header_lines=()):
        d = self.states.shape[1]
        cols = ["time"] + [f"state_{i + 1}" for i in range(d)]
        m = 0 if self.increments is None else self.increments.shape[1]
        cols += [f"dW_{i + 1}" for i in range(m)]
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(cols) + "\n")
            for i, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(x)) for x in self.states[i]]
                k = i - self.n_delay
                if m:
                    if 0 <= k < self.steps:
                        row += [repr(float(x)) for x in self.increments[k]]
                    else:
                        row += [""] * m
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# delay-measure trackers


class _SparseTracker:
    def __init__(self, weights):
        self.idx = np.flatnonzero(weights)
        self.w = weights[self.idx]
        self.n = weights.size - 1
        self.newest = float(weights[-1])

    def current(self, ens):
        out = self.w[0] * ens.node(self.idx[0])
        for j, w in zip(self.idx[1:], self.w[1:]):
            out = out + w * ens.node(j)
        return out

    def frozen_next(self, ens):
        out = np.zeros((ens.c, ens.d))
        for j, w in zip(self.idx, self.w):
            if j < self.n:
                out = out + w * ens.node(j + 1)
        return out

    def push(self, ens, dropped, u):
        pass


class _UniformTracker:
    """Trapezoidal uniform measure through a sliding window sum."""

    def __init__(self, n, hist):
        self.n = n
        self.newest = 0.5 / n
        self.total = hist.sum(axis=0)
        self.since_refresh = 0

    def current(self, ens):
        return (self.total - 0.5 * (ens.node(0) + ens.node(self.n))) / self.n

    def frozen_next(self, ens):
        return (self.total - ens.node(0) - 0.5 * ens.node(1)) / self.n

    def push(self, ens, dropped, u):
        self.since_refresh += 1
        if self.since_refresh >= self.n:
            self.total = ens.hist.sum(axis=0)
            self.since_refresh = 0
        else:
            self.total = self.total - dropped + u


class _DenseTracker:
    def __init__(self, weights):
        self.w = weights
        self.newest = float(weights[-1])

    def current(self, ens):
        return np.tensordot(self.w, ens.ordered(), axes=1)

    def frozen_next(self, ens):
        return np.tensordot(self.w[:-1], ens.ordered()[1:], axes=1)

    def push(self, ens, dropped, u):
        pass


def _make_tracker(measure, hist):
    w = measure.weights
    n = w.size - 1
    if np.count_nonzero(w) <= 8:
        return _SparseTracker(w)
    if np.array_equal(w, _trapezoid_weights(n)):
        return _UniformTracker(n, hist)
    return _DenseTracker(w)


# ---------------------------------------------------------------------------
# ensemble stepper


def _norm(x):
    if x.shape[1] == 1:
        return np.abs(x[:, 0])
    return np.sqrt(np.sum(x * x, axis=1))


class PathEnsemble:
    """C paths of the theta-EM scheme advanced in lockstep.

    Parameters
    ----------
    model : SfdeModel
    config : SchemeConfig
    init : Segment or ndarray
        Initial segment shared by all paths, or node values of shape
        (N+1, C, d).
    c : int
        Number of paths when ``init`` is a single segment.
    """

    def __init__(self, model, config, init, c=1):
        self.model = model
        self.config = config
        self.n = config.steps_per_delay(model.tau)
        self.d = model.dim_state
        self.m = model.dim_noise
        if isinstance(init, Segment):
            if init.n != self.n or init.dim != self.d:
                raise DimensionMismatch(
                    f"initial segment (n={init.n}, d={init.dim}) does not match grid n={self.n}, d={self.d}")
            hist = np.repeat(init.values[:, None, :], c, axis=1)
        else:
            hist = np.array(init, dtype=float)
            if hist.ndim != 3 or hist.shape[0] != self.n + 1 or hist.shape[2] != self.d:
                raise DimensionMismatch(f"initial node array of shape {hist.shape} does not match grid")
        self.c = hist.shape[1]
        self.hist = hist
        self.head = self.n
        self.k = 0
        self.trackers = [_make_tracker(nu, hist) for nu in model.measure_weights(self.n)]
        self._eye = np.eye(self.d)

    def node(self, j):
        """Node j = 0..N of the current segment (j = N is the newest)."""
        return self.hist[(self.head - (self.n - j)) % (self.n + 1)]

    def ordered(self):
        """Current segment values, oldest first, shape (N+1, C, d)."""
        idx = (self.head + 1 + np.arange(self.n + 1)) % (self.n + 1)
        return self.hist[idx]

    def state(self):
        return self.node(self.n)

    def features(self):
        return [t.current(self) for t in self.trackers]

    def drift(self):
        return self.model.drift_fn(self.state(), self.features())

    # -- one step -------------------------------------------------------
    def step(self, forcing):
        """Advance every path by one step.

        ``forcing`` has shape (C, m) and equals sqrt(eps) dW_k + v(t_k) delta.
        Returns the new endpoint values (C, d).
        """
        cfg = self.config
        x = self.state()
        feats = self.features()
        model = self.model
        with np.errstate(over="ignore", invalid="ignore"):
            b = np.asarray(model.drift_fn(x, feats), dtype=float)
            sig = np.asarray(model.diffusion_fn(x, feats), dtype=float)
            if self.d == 1 and self.m == 1:
                noise = sig[:, :, 0] * forcing
            else:
                noise = np.einsum("cdm,cm->cd", sig, forcing)
            rhs = x + (1.0 - cfg.theta) * cfg.delta * b + noise
            guess = x + cfg.delta * b + noise
        frozen = [t.frozen_next(self) for t in self.trackers]
        weights = [t.newest for t in self.trackers]
        u = self._solve(frozen, weights, rhs, guess, x)
        self._push(u)
        return u

    def _push(self, u):
        slot = (self.head + 1) % (self.n + 1)
        dropped = self.hist[slot].copy()
        self.hist[slot] = u
        self.head = slot
        for t in self.trackers:
            t.push(self, dropped, u)
        self.k += 1

    def _residual(self, u, sel, frozen, weights, rhs):
        feats = [f[sel] + w * u for f, w in zip(frozen, weights)]
        with np.errstate(over="ignore", invalid="ignore"):
            bu = self.model.drift_fn(u, feats)
            return u - self.config.theta * self.config.delta * bu - rhs[sel]

    def _jacobian(self, u, sel, frozen, weights, rhs, r):
        td = self.config.theta * self.config.delta
        jac = self.model.drift_jac
        if jac is not None:
            feats = [f[sel] + w * u for f, w in zip(frozen, weights)]
            dx, dfs = jac(u, feats)
            jb = np.array(dx, dtype=float)
            for w, df in zip(weights, dfs):
                if w:
                    jb = jb + w * df
            return self._eye - td * jb
        # forward differences in the endpoint, h = 1e-7 (1 + |u|)
        h = 1e-7 * (1.0 + _norm(u))
        cols = []
        for i in range(self.d):
            up = u.copy()
            up[:, i] += h
            cols.append((self._residual(up, sel, frozen, weights, rhs) - r) / h[:, None])
        return np.stack(cols, axis=2)

    def _solve(self, frozen, weights, rhs, guess, fallback):
        cfg = self.config
        tol = cfg.solver_tol
        all_idx = np.arange(self.c)
        u = guess.copy()
        r = self._residual(u, all_idx, frozen, weights, rhs)
        rn = _norm(r)
        bad = ~np.isfinite(rn) | ~np.all(np.isfinite(u), axis=1)
        if bad.any():
            # predictor overflow: restart those paths from the current state
            sel = np.flatnonzero(bad)
            u[sel] = fallback[sel]
            r[sel] = self._residual(u[sel], sel, frozen, weights, rhs)
            rn[sel] = _norm(r[sel])
        active = np.flatnonzero(~(rn <= tol * (1.0 + _norm(u))))
        it = 0
        while active.size and it < cfg.solver_max_iter:
            it += 1
            ua, ra, rna = u[active], r[active], rn[active]
            J = self._jacobian(ua, active, frozen, weights, rhs, ra)
            if self.d == 1:
                step = -ra / J[:, 0, :]
            else:
                step = -np.linalg.solve(J, ra[:, :, None])[:, :, 0]
            trial = ua + step
            rt = self._residual(trial, active, frozen, weights, rhs)
            rtn = _norm(rt)
            nonfinite_tries = np.zeros(active.size, dtype=int)
            need = ~np.isfinite(rtn) | (rtn > rna)
            halvings = 0
            while need.any() and halvings < MAX_HALVINGS:
                nf = need & ~np.isfinite(rtn)
                nonfinite_tries[nf] += 1
                if np.any(nonfinite_tries > 1):
                    p = int(active[np.argmax(nonfinite_tries > 1)])
                    raise SolverDiverged(f"non-finite drift during Newton iteration at step {self.k}",
                                         residual=float(rn[p]), step=self.k, path=p)
                sub = np.flatnonzero(need)
                step[sub] *= 0.5
                trial[sub] = ua[sub] + step[sub]
                rt[sub] = self._residual(trial[sub], active[sub], frozen, weights, rhs)
                rtn[sub] = _norm(rt[sub])
                need = ~np.isfinite(rtn) | (rtn > rna)
                halvings += 1
            if not np.all(np.isfinite(rtn)):
                p = int(active[np.argmax(~np.isfinite(rtn))])
                raise SolverDiverged(f"non-finite residual at step {self.k}", residual=float(rn[p]),
                                     step=self.k, path=p)
            u[active], r[active], rn[active] = trial, rt, rtn
            done = rtn <= tol * (1.0 + _norm(trial))
            active = active[~done]
        if active.size:
            p = int(active[0])
            raise SolverDiverged(
                f"Newton did not converge in {cfg.solver_max_iter} iterations at step {self.k} "
                f"(residual {rn[p]:.3e}); the step size may be too large for this model",
                residual=float(rn[p]), step=self.k, path=p)
        return u


# ---------------------------------------------------------------------------
# single-path operations


def implicit_step(model, config, seg, dW, control=None):
    """Solve one theta-EM transition from segment ``seg``.

    Returns y(t_{k+1}) for the increment ``dW`` (shape (m,)) and optional
    control value ``control`` (shape (m,)).
    """
    ens = PathEnsemble(model, config, seg, c=1)
    forcing = _forcing(config, np.atleast_1d(np.asarray(dW, dtype=float))[None, :],
                       None if control is None else np.atleast_1d(np.asarray(control, dtype=float))[None, :])
    return ens.step(forcing)[0]


def _forcing(config, dW, control):
    if dW is None:
        out = np.zeros_like(control)
    elif config.eps == 1.0:
        out = dW
    else:
        out = math.sqrt(config.eps) * dW
    if control is not None:
        out = out + control * config.delta
    return out


def _run_path(model, config, xi, steps, dW, controls, lineage):
    n = config.steps_per_delay(model.tau)
    ens = PathEnsemble(model, config, xi, c=1)
    states = np.empty((n + 1 + steps, model.dim_state))
    states[:n + 1] = xi.values
    for k in range(steps):
        f = _forcing(config, None if dW is None else dW[k][None, :],
                     None if controls is None else controls[k][None, :])
        try:
            states[n + 1 + k] = ens.step(f)[0]
        except SolverDiverged as exc:
            exc.step = k
            raise
    return Trajectory(states=states, delta=config.delta, n_delay=n, seed_lineage=lineage,
                      increments=dW, controls=controls, eps=config.eps)


def simulate(model, config, xi, steps, stream, retain_increments=True):
    """Simulate one path for ``steps`` steps from the initial segment ``xi``.

    Increments are drawn from ``stream`` (which is advanced).  The output is
    a pure function of the model, config, ``xi`` and the stream lineage and
    position.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    lineage = stream.lineage
    dW = stream.take(steps, config.delta, model.dim_noise)
    traj = _run_path(model, config, xi, steps, dW, None, lineage)
    if not retain_increments:
        traj.increments = None
    return traj


def segment_at(traj, k):
    """The segment y_{t_k} = (y(t_{k-N}), ..., y(t_k)) of a trajectory."""
    if not 0 <= k <= traj.steps:
        raise IndexOutOfRange(f"k={k} outside 0..{traj.steps}")
    return Segment(traj.states[k:k + traj.n_delay + 1], traj.delta)


@dataclass
class SplitProcess:
    """Auxiliary process z(t_k) = y(t_k) - theta b(y_{t_k}) delta, k = 0..K.

    ``recursion_residual[k]`` is the defect of
    z(t_{k+1}) = z(t_k) + b(y_{t_k}) delta + sigma(y_{t_k}) (sqrt(eps) dW_k + v_k delta).
    """

    z: np.ndarray
    recursion_residual: np.ndarray


def split_process(traj, model, config):
    """Auxiliary split process of a trajectory together with its recursion defect."""
    if traj.increments is None and traj.controls is None:
        raise MissingIncrements("trajectory was simulated without retaining increments")
    K = traj.steps
    drifts = np.array([model.drift(segment_at(traj, k)) for k in range(K + 1)])
    z = traj.states[traj.n_delay:] - config.theta * config.delta * drifts
    resid = np.zeros(K)
    for k in range(K):
        sig = model.diffusion(segment_at(traj, k))
        f = _forcing(config, None if traj.increments is None else traj.increments[k][None, :],
                     None if traj.controls is None else traj.controls[k][None, :])[0]
        pred = z[k] + drifts[k] * config.delta + sig @ f
        resid[k] = np.linalg.norm(z[k + 1] - pred)
    return SplitProcess(z=z, recursion_residual=resid)


# ---------------------------------------------------------------------------
# Monte Carlo drivers


@dataclass
class Level:
    """One member of a lockstep run.

    ``ratio`` is the number of fine steps per step of this level; ``xi`` the
    initial segment on this level's grid; ``record`` the level step indices
    at which to save data, ``kind`` either ``"state"`` (endpoint) or
    ``"segment"`` (full segment).
    """

    ratio: int
    xi: Segment
    record: tuple = ()
    kind: str = "state"


def nested_ratios(deltas, fine):
    """Integer ratios delta/fine, checking that all steps are mutually nested."""
    ratios = []
    for d in deltas:
        r = d / fine
        ri = int(round(r))
        if ri < 1 or abs(r - ri) > 1e-9 * r:
            raise NonNestedGrids(f"delta={d} is not a multiple of the fine step {fine}")
        ratios.append(ri)
    srt = sorted(set(ratios))
    for a, b in zip(srt, srt[1:]):
        if b % a:
            raise NonNestedGrids(f"steps {a * fine} and {b * fine} are not nested")
    return ratios


def _chunks(paths, chunk_size):
    paths = list(paths)
    return [paths[i:i + chunk_size] for i in range(0, len(paths), chunk_size)]


def run_levels(model, config, levels, fine_delta, fine_steps, master_seed, paths,
               controls=None, chunk_size=DEFAULT_CHUNK, threads=1, noise_sign=1.0):
    """Run several coupled ensembles driven by one fine Brownian path per path index.

    Each level advances with step ``ratio * fine_delta`` using increments that
    are sums of the fine increments over its cells, so every level of a
    given path index sees the same Brownian motion.  ``controls`` (shape
    (fine_steps, m), or None) is a deterministic control on the fine grid,
    only supported when every ratio is 1.  ``noise_sign=-1`` replays the
    mirrored (antithetic) Brownian paths.

    Returns a list (one entry per level) of arrays of shape
    (len(record), M, ...) with paths in the order given.
    """
    ratios = [lv.ratio for lv in levels]
    lcm = 1
    for r in ratios:
        lcm = lcm * r // math.gcd(lcm, r)
    if fine_steps % lcm:
        raise NonNestedGrids(f"{fine_steps} fine steps is not a multiple of every level step")
    if controls is not None and any(r != 1 for r in ratios):
        raise ValueError("controls are only supported on the fine grid")
    configs = [config.with_delta(lv.ratio * fine_delta) for lv in levels]
    block = lcm * max(1, BLOCK_STEPS // lcm)
    chunks = _chunks(paths, chunk_size)

    sqrt_fine = float(noise_sign) * math.sqrt(fine_delta)

    def run_chunk(ids):
        ens = [PathEnsemble(model, cfg, lv.xi, c=len(ids)) for cfg, lv in zip(configs, levels)]
        recs = [{} for _ in levels]
        wanted = [set(lv.record) for lv in levels]
        for li, lv in enumerate(levels):
            if 0 in lv.record:
                recs[li][0] = _snapshot(ens[li], lv.kind)
            start = 0
        while start < fine_steps:
            count = min(block, fine_steps - start)
            z = batch_normals(master_seed, ids, start, count, model.dim_noise)
            dW_fine = sqrt_fine * z
            for li, lv in enumerate(levels):
                r = lv.ratio
                dW = dW_fine if r == 1 else dW_fine.reshape(count // r, r, len(ids), -1).sum(axis=1)
                e = ens[li]
                for j in range(dW.shape[0]):
                    ctrl = None
                    if controls is not None:
                        ctrl = np.broadcast_to(controls[start + j], (len(ids), model.dim_noise))
                    try:
                        e.step(_forcing(configs[li], dW[j], ctrl))
                    except SolverDiverged as exc:
                        exc.step = e.k
                        exc.path = ids[exc.path] if exc.path is not None else None
                        raise
                    if e.k in wanted[li]:
                        recs[li][e.k] = _snapshot(e, lv.kind)
            start += count
        return [np.stack([rec[k] for k in lv.record]) if lv.record else None
                for rec, lv in zip(recs, levels)]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    out = []
    for li, lv in enumerate(levels):
        if not lv.record:
            out.append(None)
        else:
            out.append(np.concatenate([res[li] for res in results], axis=1))
    return out


def _snapshot(ens, kind):
    if kind == "state":
        return ens.state().copy()
    return np.transpose(ens.ordered(), (1, 0, 2)).copy()


def endpoint_states(model, config, xi, steps, master_seed, paths, chunk_size=DEFAULT_CHUNK, threads=1):
    """Endpoint values y(t_K) of independent paths, shape (M, d)."""
    lv = Level(1, xi, record=(steps,), kind="state")
    return run_levels(model, config, [lv], config.delta, steps, master_seed, paths,
                      chunk_size=chunk_size, threads=threads)[0][0]


def segments_at_steps(model, config, xi, record, master_seed, paths, chunk_size=DEFAULT_CHUNK, threads=1):
    """Segments y_{t_k} for k in ``record``, shape (len(record), M, N+1, d)."""
    record = tuple(sorted(set(int(k) for k in record)))
    lv = Level(1, xi, record=record, kind="segment")
    return run_levels(model, config, [lv], config.delta, max(record), master_seed, paths,
                      chunk_size=chunk_size, threads=threads)[0]


def initial_segment(xi, model, config):
    """Restrict an initial datum to the scheme grid.

    ``xi`` may be a Segment on the right grid, a Segment on a coarser or finer
    compatible grid (re-interpolated), a scalar/vector constant, or a callable
    of time.
    """
    n = config.steps_per_delay(model.tau)
    if isinstance(xi, Segment):
        if xi.n == n:
            return xi
        return Segment.from_function(xi.eval, n, config.delta)
    if callable(xi):
        return Segment.from_function(xi, n, config.delta)
    v = np.atleast_1d(np.asarray(xi, dtype=float))
    if v.size == 1 and model.dim_state > 1:
        v = np.full(model.dim_state, float(v[0]))
    return Segment.constant(v, n, config.delta)


__all__ = [
    "SchemeConfig", "Trajectory", "NoiseStream", "PathEnsemble", "implicit_step", "simulate",
    "segment_at", "split_process", "SplitProcess", "Level", "run_levels", "endpoint_states",
    "segments_at_steps", "nested_ratios", "initial_segment",
]
