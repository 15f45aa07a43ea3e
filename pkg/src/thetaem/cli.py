"""
Command line experiment runner.

Usage::

    thetaem <subcommand> --config run.yaml [--seed N] [--out DIR] [--threads N]

A config is a YAML mapping with the blocks ``model``, ``scheme``,
``initial``, ``master_seed``, ``output_dir`` and one block per experiment
(``simulate``, ``strong_rate``, ...).  ``--config`` also accepts the name of
a bundled config (``cubic``, ``linear``, ``ou``).  Every output file starts
with ``#`` lines recording the sha256 of the config file and the seed.
Failures print one ``error: kind=... field=... message="..."`` line on
stderr and exit nonzero.
"""
import argparse
import hashlib
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .convergence import TEST_FUNCTIONS, strong_errors, weak_errors
from .csvio import write_csv
from .density import (DensityEstimate, default_grid, density_distance, endpoint_samples, horizon_check, kde,
                      ou_exact_density)
from .errors import ConfigInvalid, SolverDiverged, ThetaEMError
from .integrator import SchemeConfig, initial_segment, simulate
from .ldp import (Control, OptimizerSettings, endpoint_rate, log_density_check, skeleton_solve,
                  small_noise_logprob, write_log_density)
from .longtime import attractiveness_curve, invariant_diagnostics
from .model import MODEL_CATALOG, build_model
from .noise import NoiseStream, derive_seed
from .segment import Segment, steps_per_delay

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4
EXIT_OTHER = 5

SUBCOMMANDS = ("simulate", "strong-rate", "weak-rate", "attract", "invariant", "density",
               "ldp-skeleton", "ldp-rate", "ldp-logprob", "ldp-logdensity", "validate")
_BLOCKS = {name: name.replace("-", "_") for name in SUBCOMMANDS}
_LDP_BLOCKS = ("ldp_skeleton", "ldp_rate", "ldp_logprob", "ldp_logdensity")


def bundled_configs():
    return sorted(p.name[:-5] for p in resources.files("thetaem.configs").iterdir() if p.name.endswith(".yaml"))


def resolve_config(path):
    p = Path(path)
    if p.exists():
        return p
    if path in bundled_configs():
        return Path(str(resources.files("thetaem.configs") / f"{path}.yaml"))
    raise FileNotFoundError(f"config {path!r} not found")


# ---------------------------------------------------------------------------
# config parsing


class Experiment:
    """Validated configuration with the objects it describes."""

    def __init__(self, raw, sha256, seed=None, out=None, threads=None):
        if not isinstance(raw, dict):
            raise ConfigInvalid("<root>", "config must be a mapping")
        self.raw = raw
        self.sha256 = sha256
        self.model = _parse_model(raw.get("model"))
        self.scheme = _parse_scheme(raw.get("scheme", {}), self.model)
        self.initial_spec = raw.get("initial", 0.0)
        self.xi = _parse_initial(self.initial_spec, self.model, self.scheme, "initial")
        seed = raw.get("master_seed", 0) if seed is None else seed
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigInvalid("master_seed", "must be an unsigned 64-bit integer")
        self.seed = seed
        self.out = Path(out if out is not None else raw.get("output_dir") or os.environ.get("THETAEM_OUT", "out"))
        threads = raw.get("threads", 1) if threads is None else threads
        if not isinstance(threads, int) or threads < 1:
            raise ConfigInvalid("threads", "must be a positive integer")
        self.threads = threads
        self._check_blocks()

    def block(self, name):
        b = self.raw.get(name)
        if not isinstance(b, dict):
            raise ConfigInvalid(name, "block missing or not a mapping")
        return b

    def header(self, command):
        return [f"config_sha256={self.sha256}", f"seed={self.seed}", f"command={command}"]

    def cfg(self, delta=None):
        return self.scheme if delta is None else self.scheme.with_delta(delta)

    def _check_blocks(self):
        for name in ("strong_rate", "weak_rate", "invariant_rate"):
            if name in self.raw:
                b = self.block(name)
                deltas = _num_list(b, "deltas", name)
                ref = _num(b, "delta_ref", name)
                for i, d in enumerate(deltas):
                    _check_delta(d, self.model.tau, f"{name}.deltas[{i}]")
                    r = d / ref
                    if abs(r - round(r)) > 1e-9 * r or round(r) < 1:
                        raise ConfigInvalid(f"{name}.deltas[{i}]", f"{d} is not a multiple of delta_ref={ref}")
                srt = sorted(set(int(round(d / ref)) for d in deltas))
                for a, c in zip(srt, srt[1:]):
                    if c % a:
                        raise ConfigInvalid(f"{name}.deltas", "step sizes are not nested")
                _check_delta(ref, self.model.tau, f"{name}.delta_ref")
        if "weak_rate" in self.raw:
            f = self.block("weak_rate").get("test_function", "cos")
            if f not in TEST_FUNCTIONS:
                raise ConfigInvalid("weak_rate.test_function", f"unknown test function {f!r}; known: {sorted(TEST_FUNCTIONS)}")
        if any(b in self.raw for b in _LDP_BLOCKS):
            p = self.model.assumptions
            if p is not None and p.a2_a2:
                limit = 1.0 / (4.0 * self.scheme.theta * p.a2_a2)
                if self.scheme.delta > limit * (1 + 1e-12):
                    raise ConfigInvalid("scheme.delta",
                                        f"small-noise runs need delta <= 1/(4 theta a2) = {limit:.6g}")


def _num(block, key, where, default=None, kind=float):
    if key not in block:
        if default is not None:
            return default
        raise ConfigInvalid(f"{where}.{key}", "required field missing")
    v = block[key]
    try:
        if kind is int:
            if isinstance(v, bool) or int(v) != v:
                raise ValueError
            return int(v)
        return float(v)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{where}.{key}", f"expected a {kind.__name__}, got {v!r}") from None


def _num_list(block, key, where):
    v = block.get(key)
    if not isinstance(v, list) or not v:
        raise ConfigInvalid(f"{where}.{key}", "expected a non-empty list of numbers")
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{where}.{key}", "expected a list of numbers") from None


def _check_delta(delta, tau, field):
    try:
        steps_per_delay(tau, delta)
    except ThetaEMError as exc:
        raise ConfigInvalid(field, str(exc)) from None


def _parse_model(b):
    if not isinstance(b, dict):
        raise ConfigInvalid("model", "block missing or not a mapping")
    name = b.get("name")
    if name not in MODEL_CATALOG:
        raise ConfigInvalid("model.name", f"unknown model {name!r}; known: {sorted(MODEL_CATALOG)}")
    params = b.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigInvalid("model.params", "expected a mapping")
    allowed = MODEL_CATALOG[name][1]
    for key in params:
        if key not in allowed:
            raise ConfigInvalid(f"model.params.{key}", f"model {name!r} accepts only {list(allowed)}")
    try:
        return build_model(name, params)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid("model.params", str(exc)) from None


def _parse_scheme(b, model):
    if not isinstance(b, dict):
        raise ConfigInvalid("scheme", "expected a mapping")
    theta = _num(b, "theta", "scheme", 0.75)
    if not 0.5 < theta <= 1.0:
        raise ConfigInvalid("scheme.theta", f"theta={theta} outside (1/2, 1]; the scheme is only supported "
                                            "for theta in (1/2, 1]")
    delta = _num(b, "delta", "scheme", 0.05)
    if not 0 < delta <= 1:
        raise ConfigInvalid("scheme.delta", f"delta={delta} outside (0, 1]")
    _check_delta(delta, model.tau, "scheme.delta")
    eps = _num(b, "eps", "scheme", 1.0)
    if not 0 < eps <= 1:
        raise ConfigInvalid("scheme.eps", f"eps={eps} outside (0, 1]")
    tol = _num(b, "solver_tol", "scheme", 1e-10)
    iters = _num(b, "solver_max_iter", "scheme", 50, kind=int)
    try:
        return SchemeConfig(theta=theta, delta=delta, solver_tol=tol, solver_max_iter=iters, eps=eps)
    except ThetaEMError as exc:
        raise ConfigInvalid("scheme", str(exc)) from None


def _initial_datum(spec, model, field):
    """Grid-free description of xi: number, vector, Segment or callable."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if isinstance(spec, list):
        return np.array(spec, dtype=float)
    if not isinstance(spec, dict):
        raise ConfigInvalid(field, "expected a number, a list or a mapping")
    kind = spec.get("kind", "constant")
    if kind == "constant":
        v = spec.get("value", 0.0)
        return np.array(v, dtype=float) if isinstance(v, list) else _num(spec, "value", field, 0.0)
    if kind == "nodes":
        vals = spec.get("values")
        if not isinstance(vals, list) or len(vals) < 2:
            raise ConfigInvalid(f"{field}.values", "expected at least two node values")
        return Segment(np.array(vals, dtype=float), model.tau / (len(vals) - 1))
    if kind == "holder":
        x0 = _num(spec, "xi0", field, 0.0)
        c = _num(spec, "slope", field, 0.0)
        return lambda s: np.full(model.dim_state, x0 + c * s)
    raise ConfigInvalid(f"{field}.kind", f"unknown initial kind {kind!r}; use constant, nodes or holder")


def _parse_initial(spec, model, scheme, field):
    xi = _initial_datum(spec, model, field)
    try:
        return initial_segment(xi, model, scheme)
    except (ThetaEMError, ValueError) as exc:
        raise ConfigInvalid(field, str(exc)) from None


def load_experiment(path, seed=None, out=None, threads=None):
    p = resolve_config(path)
    data = p.read_bytes()
    try:
        raw = yaml.safe_load(data)
    except yaml.YAMLError as exc:
        raise ConfigInvalid("<root>", f"not valid YAML: {exc}") from None
    return Experiment(raw, hashlib.sha256(data).hexdigest(), seed, out, threads)


# ---------------------------------------------------------------------------
# subcommands


def _steps(T, delta, field):
    K = T / delta
    if abs(K - round(K)) > 1e-9 * max(1.0, K):
        raise ConfigInvalid(field, f"{T} is not a multiple of delta={delta}")
    return int(round(K))


def _summary(exp, command, items):
    lines = [f"# {h}" for h in exp.header(command)] + [f"{k}={v}" for k, v in items.items()]
    (exp.out / f"{command}_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[len(exp.header(command)):]))


def cmd_simulate(exp):
    b = exp.raw.get("simulate", {}) or {}
    cfg = exp.cfg()
    K = _num(b, "steps", "simulate", 0, kind=int)
    paths = _num(b, "paths", "simulate", 1, kind=int)
    seed = derive_seed(exp.seed, "simulate")
    files = []
    for i in range(paths):
        traj = simulate(exp.model, cfg, exp.xi, K, NoiseStream(seed, i))
        name = f"trajectory_path{i}.csv"
        traj.to_csv(exp.out / name, exp.header("simulate") + [f"path_index={i}"])
        files.append(name)
    _summary(exp, "simulate", {"steps": K, "paths": paths, "files": ",".join(files)})


def _rate_inputs(exp, name):
    b = exp.block(name)
    return b, _num(b, "T", name), _num_list(b, "deltas", name), _num(b, "delta_ref", name), \
        _num(b, "paths", name, kind=int)


def cmd_strong_rate(exp):
    b, T, deltas, ref, M = _rate_inputs(exp, "strong_rate")
    xi0 = _initial_datum(exp.initial_spec, exp.model, "initial")
    rep = strong_errors(exp.model, exp.cfg(), xi0, T, deltas, ref, M, exp.seed, threads=exp.threads)
    rep.to_csv(exp.out / "strong_rate.csv", exp.header("strong-rate"))
    _summary(exp, "strong-rate", {"slope": rep.slope, "intercept": rep.intercept, "surviving_levels": rep.surviving})


def cmd_weak_rate(exp):
    b, T, deltas, ref, M = _rate_inputs(exp, "weak_rate")
    xi0 = _initial_datum(exp.initial_spec, exp.model, "initial")
    rep = weak_errors(exp.model, exp.cfg(), xi0, T, b.get("test_function", "cos"), deltas, ref, M, exp.seed,
                      signal=_num(b, "signal", "weak_rate", 3.0), threads=exp.threads,
                      chunk_size=_num(b, "chunk_size", "weak_rate", 2048, kind=int))
    rep.to_csv(exp.out / "weak_rate.csv", exp.header("weak-rate"))
    _summary(exp, "weak-rate", {"slope": rep.slope, "intercept": rep.intercept, "surviving_levels": rep.surviving})


def cmd_attract(exp):
    b = exp.block("attract")
    eta = _parse_initial(b.get("eta", 0.0), exp.model, exp.scheme, "attract.eta")
    steps = _num(b, "steps", "attract", kind=int)
    every = b.get("sample_every")
    curve = attractiveness_curve(exp.model, exp.cfg(), exp.xi, eta, steps, _num(b, "paths", "attract", kind=int),
                                 exp.seed, sample_every=every, threads=exp.threads)
    write_csv(exp.out / "attract.csv", ["time", "mean_gap_sq"], curve.to_rows(),
              {"tail_slope": curve.tail_slope}, exp.header("attract"))
    _summary(exp, "attract", {"tail_slope": curve.tail_slope, "initial_gap_sq": curve.mean_gap_sq[0],
                              "final_gap_sq": curve.mean_gap_sq[-1]})


def cmd_invariant(exp):
    b = exp.block("invariant")
    eta = None
    if "eta" in b:
        eta = _parse_initial(b["eta"], exp.model, exp.scheme, "invariant.eta")
    diag = invariant_diagnostics(exp.model, exp.cfg(), exp.xi, _num(b, "window_len", "invariant", kind=int),
                                 _num(b, "window_count", "invariant", kind=int),
                                 _num(b, "paths", "invariant", kind=int), exp.seed, eta=eta,
                                 q=_num(b, "q", "invariant", 2.0), threads=exp.threads)
    write_csv(exp.out / "invariant.csv", ["index", "w_distance"], enumerate(diag.distances.tolist()),
              {"floor": diag.floor, "cross": diag.cross}, exp.header("invariant"))
    _summary(exp, "invariant", {"floor": diag.floor, "cross": diag.cross,
                                "last_distance": diag.distances[-1] if diag.distances.size else float("nan")})


def cmd_density(exp):
    b = exp.block("density")
    T = _num(b, "T", "density")
    M = _num(b, "paths", "density", kind=int)
    cfg = exp.cfg()
    t0 = horizon_check(exp.model, cfg, T)
    y = endpoint_samples(exp.model, cfg, exp.xi, T, M, exp.seed, threads=exp.threads)
    zeta = b.get("bandwidth")
    grid = default_grid(y, _num(b, "grid_points", "density", 401, kind=int))
    est = kde(y, None if zeta is None else float(zeta), grid)
    est.to_csv(exp.out / "density.csv", exp.header("density"))
    items = {"bandwidth": est.bandwidth, "sample_count": est.sample_count, "T0": t0}
    if exp.model.name == "ou":
        p = exp.model.params
        law = ou_exact_density(p["a"], p["sigma0"], float(exp.xi.endpoint[0]), T, cfg.eps)
        l1, sup = density_distance(est, DensityEstimate.from_function(law.pdf, grid))
        items.update({"exact_l1": l1, "exact_sup": sup})
    _summary(exp, "density", items)


def _control(exp, b, field, steps):
    spec = b.get("control", 0.0)
    m = exp.model.dim_noise
    if isinstance(spec, list):
        return Control(np.array(spec, dtype=float).reshape(len(spec), -1), exp.scheme.delta)
    if isinstance(spec, (int, float)):
        return Control.constant(np.full(m, float(spec)), steps, exp.scheme.delta)
    raise ConfigInvalid(field, "control must be a number or a list of per-step values")


def cmd_ldp_skeleton(exp):
    b = exp.block("ldp_skeleton")
    steps = _num(b, "steps", "ldp_skeleton", kind=int)
    v = _control(exp, b, "ldp_skeleton.control", steps)
    traj = skeleton_solve(exp.model, exp.cfg(), exp.xi, v)
    traj.to_csv(exp.out / "skeleton.csv", exp.header("ldp-skeleton"))
    v.to_csv(exp.out / "control.csv", exp.header("ldp-skeleton"))
    _summary(exp, "ldp-skeleton", {"steps": v.steps, "endpoint": float(traj.states[-1, 0])})


def cmd_ldp_rate(exp):
    b = exp.block("ldp_rate")
    t = _num(b, "t", "ldp_rate")
    targets = _num_list(b, "targets", "ldp_rate")
    s = OptimizerSettings(endpoint_tol=_num(b, "endpoint_tol", "ldp_rate", 1e-6))
    rows = []
    for z in targets:
        r = endpoint_rate(exp.model, exp.cfg(), exp.xi, t, [z], s)
        rows.append((z, r.cost, float(r.endpoint[0]), r.gap, len(r.history)))
    write_csv(exp.out / "ldp_rate.csv", ["target", "cost", "endpoint", "gap", "iterations"], rows, None,
              exp.header("ldp-rate"))
    _summary(exp, "ldp-rate", {"targets": len(rows), "max_gap": max(r[3] for r in rows)})


def cmd_ldp_logprob(exp):
    b = exp.block("ldp_logprob")
    tab = small_noise_logprob(exp.model, exp.cfg(), exp.xi, _num(b, "t", "ldp_logprob"),
                              _num(b, "threshold", "ldp_logprob"), _num_list(b, "eps_list", "ldp_logprob"),
                              _num(b, "paths", "ldp_logprob", kind=int), exp.seed, threads=exp.threads)
    tab.to_csv(exp.out / "ldp_logprob.csv", exp.header("ldp-logprob"))
    _summary(exp, "ldp-logprob", {"levels": len(tab.rows), "censored": sum(r.censored for r in tab.rows),
                                  "last_eps_log_p": tab.rows[-1].eps_log_p})


def cmd_ldp_logdensity(exp):
    b = exp.block("ldp_logdensity")
    zeta0 = b.get("zeta0")
    rows = log_density_check(exp.model, exp.cfg(), exp.xi, _num(b, "t", "ldp_logdensity"),
                             _num_list(b, "y_grid", "ldp_logdensity"), _num_list(b, "eps_list", "ldp_logdensity"),
                             _num(b, "paths", "ldp_logdensity", kind=int),
                             None if zeta0 is None else float(zeta0), exp.seed, threads=exp.threads)
    write_log_density(rows, exp.out / "ldp_logdensity.csv", exp.header("ldp-logdensity"))
    _summary(exp, "ldp-logdensity", {"rows": len(rows), "max_abs_gap": max(abs(r.gap) for r in rows)})


def cmd_validate(exp):
    blocks = [k for k in _BLOCKS.values() if k in exp.raw]
    print(f"valid model={exp.model.name} theta={exp.scheme.theta} delta={exp.scheme.delta} "
          f"seed={exp.seed} blocks={','.join(blocks) or '-'}")


COMMANDS = {
    "simulate": cmd_simulate, "strong-rate": cmd_strong_rate, "weak-rate": cmd_weak_rate, "attract": cmd_attract,
    "invariant": cmd_invariant, "density": cmd_density, "ldp-skeleton": cmd_ldp_skeleton,
    "ldp-rate": cmd_ldp_rate, "ldp-logprob": cmd_ldp_logprob, "ldp-logdensity": cmd_ldp_logdensity,
    "validate": cmd_validate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML config path or bundled config name")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads for path loops")
    parser = argparse.ArgumentParser(prog="thetaem", description="theta-EM experiments for delay SDEs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _error(kind, message, field=None, **extra):
    parts = [f"kind={kind}"]
    if field is not None:
        parts.append(f"field={field}")
    parts += [f"{k}={v}" for k, v in extra.items()]
    msg = message.replace('"', "'")
    parts.append(f'message="{msg}"')
    print("error: " + " ".join(parts), file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        exp = load_experiment(args.config, args.seed, args.out, args.threads)
        if args.command != "validate":
            exp.out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.command](exp)
    except ConfigInvalid as exc:
        _error("ConfigInvalid", exc.message, exc.field)
        return EXIT_CONFIG
    except SolverDiverged as exc:
        _error("SolverDiverged", str(exc), step=exc.step, residual=exc.residual)
        return EXIT_SOLVER
    except OSError as exc:
        _error("IOError", str(exc))
        return EXIT_IO
    except ThetaEMError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
