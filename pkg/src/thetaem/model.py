"""
SFDE models
===========

A model bundles the drift ``b`` and diffusion ``sigma`` of

    dx(t) = b(x_t) dt + sqrt(eps) sigma(x_t) dW(t),   x_0 = xi,

as functionals of the segment x_t.  The functionals used here factor through
the endpoint phi(0) and a finite list of delay-measure integrals
int phi d(nu_i): the model stores the measures and coefficient functions of
``(x0, feats)`` where ``x0`` has shape (C, d) and ``feats`` is a list with
one (C, d) array per measure.  This keeps segment evaluation exact while
letting the integrator vectorise over C paths.

Three families are provided: :func:`cubic_model` (superlinear distributed
delay drift), :func:`linear_delay_model` and :func:`ou_model` (delay free).
"""
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DimensionMismatch, MissingParams
from .segment import MeasureSpec, Segment


@dataclass(frozen=True)
class AssumptionParams:
    """User-declared structural constants of a model.

    They are metadata: experiments read them to check parameter ranges and
    :func:`check_dissipativity` spot-checks the inequalities, nothing here
    is derived automatically.
    """

    a1_L: float = 0.0
    a2_a1: float = 0.0
    a2_a2: float = 0.0
    a4_K: float = 0.0
    a4_a3: float = 0.0
    a4_a4: float = 0.0
    a4_ell: float = 0.0
    a5_K: float = 0.0
    a5_beta: float = 0.0
    L_b: float | None = None
    n_b: int | None = None

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class SfdeModel:
    """Drift and diffusion functionals on segments of length ``tau``.

    Parameters
    ----------
    dim_state, dim_noise : int
        State dimension d and noise dimension m.
    tau : float
        Delay.
    measures : tuple of MeasureSpec
        Delay measures whose integrals feed the coefficient functions.
    drift_fn : callable
        ``drift_fn(x0, feats) -> (C, d)``.
    diffusion_fn : callable
        ``diffusion_fn(x0, feats) -> (C, d, m)``.
    drift_jac : callable, optional
        ``drift_jac(x0, feats) -> (d_x0, [d_feat_i])``, each (C, d, d).
        When absent the implicit solver differentiates numerically.
    """

    name: str
    dim_state: int
    dim_noise: int
    tau: float
    measures: tuple
    drift_fn: object
    diffusion_fn: object
    drift_jac: object = None
    params: dict = field(default_factory=dict)
    assumptions: AssumptionParams | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be at least 1")

    def measure_weights(self, n):
        """Node weights of every delay measure on a grid with ``n`` cells."""
        return [m.on_grid(self.tau, n) for m in self.measures]

    def features(self, seg):
        """Return (x0, feats) of a single segment, batched with C = 1."""
        self._check_segment(seg)
        x0 = seg.endpoint[None, :]
        feats = [(nu.weights @ seg.values)[None, :] for nu in self.measure_weights(seg.n)]
        return x0, feats

    def drift(self, seg):
        """b(phi) as a vector of length d."""
        x0, feats = self.features(seg)
        return np.asarray(self.drift_fn(x0, feats))[0]

    def diffusion(self, seg):
        """sigma(phi) as a (d, m) matrix."""
        x0, feats = self.features(seg)
        return np.asarray(self.diffusion_fn(x0, feats))[0]

    def _check_segment(self, seg):
        if seg.dim != self.dim_state:
            raise DimensionMismatch(f"segment dimension {seg.dim} != model dimension {self.dim_state}")
        if abs(seg.tau - self.tau) > 1e-9 * self.tau:
            raise DimensionMismatch(f"segment covers [-{seg.tau}, 0] but the model delay is {self.tau}")


def _constant_diffusion(sigma0, d, m):
    mat = np.zeros((d, m))
    mat[np.arange(min(d, m)), np.arange(min(d, m))] = sigma0

    def diffusion(x0, feats):
        return np.broadcast_to(mat, (x0.shape[0], d, m))

    return diffusion


def cubic_distributed_drift(tau):
    """The classical superlinear drift as a functional of segments.

    b(phi) = (1/tau) int_{-tau}^0 phi(s) ds - |phi(0)|^2 phi(0) - phi(0),
    with the integral evaluated by the trapezoidal rule on the segment grid.
    """
    model = cubic_model(tau=tau, sigma0=0.0)
    return model.drift


def _cubic_drift(x0, feats):
    sq = np.sum(x0 * x0, axis=1, keepdims=True)
    return feats[0] - sq * x0 - x0


def _cubic_jac(x0, feats):
    c, d = x0.shape
    eye = np.eye(d)
    sq = np.sum(x0 * x0, axis=1)[:, None, None]
    dx = -(sq + 1.0) * eye - 2.0 * x0[:, :, None] * x0[:, None, :]
    return dx, [np.broadcast_to(eye, (c, d, d))]


def cubic_model(tau=1.0, sigma0=0.5, kappa=0.0, dim=1):
    """Cubic distributed-delay drift with additive or linear multiplicative noise.

    The diffusion is sigma0 * (1 + kappa * mean_i (int phi_i dnu)) times the
    identity, with nu the uniform measure on [-tau, 0]; ``kappa = 0`` gives
    additive noise.  Declared constants: a1 = a2 = 1/2 (sharp for this drift,
    the linear part is only marginally dissipative around constants),
    a4 with ell = 2, a5 with beta = 2.
    """
    measures = (MeasureSpec("uniform"),)
    if kappa == 0.0:
        diffusion = _constant_diffusion(sigma0, dim, dim)
    else:
        eye = np.eye(dim)

        def diffusion(x0, feats):
            scale = sigma0 * (1.0 + kappa * feats[0].mean(axis=1))
            return scale[:, None, None] * eye

    lip = (sigma0 * kappa) ** 2
    return SfdeModel(
        name="cubic",
        dim_state=dim,
        dim_noise=dim,
        tau=float(tau),
        measures=measures,
        drift_fn=_cubic_drift,
        diffusion_fn=diffusion,
        drift_jac=_cubic_jac,
        params={"tau": float(tau), "sigma0": float(sigma0), "kappa": float(kappa), "dim": int(dim)},
        assumptions=AssumptionParams(
            a1_L=lip, a2_a1=0.5, a2_a2=0.5, a4_K=0.0, a4_a3=1.0, a4_a4=0.5, a4_ell=2.0, a5_K=3.0, a5_beta=2.0
        ),
    )


def linear_delay_model(a=2.0, b_bar=0.5, sigma0=0.3, nu=None, tau=1.0, dim=1):
    """b(phi) = -a phi(0) + b_bar int phi dnu, additive noise sigma0.

    ``nu`` is a :class:`MeasureSpec` (default: uniform on [-tau, 0]).  The
    declared a2 constants a1 = a - |b_bar|/2, a2 = |b_bar|/2 follow from
    Young's and Jensen's inequalities; a1 > a2 exactly when a > |b_bar|.
    """
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    nu = nu if nu is not None else MeasureSpec("uniform")
    a, b_bar = float(a), float(b_bar)

    def drift(x0, feats):
        return -a * x0 + b_bar * feats[0]

    def jac(x0, feats):
        c, d = x0.shape
        eye = np.eye(d)
        return np.broadcast_to(-a * eye, (c, d, d)), [np.broadcast_to(b_bar * eye, (c, d, d))]

    half = abs(b_bar) / 2.0
    return SfdeModel(
        name="linear",
        dim_state=dim,
        dim_noise=dim,
        tau=float(tau),
        measures=(nu,),
        drift_fn=drift,
        diffusion_fn=_constant_diffusion(float(sigma0), dim, dim),
        drift_jac=jac,
        params={"a": a, "b_bar": b_bar, "sigma0": float(sigma0), "tau": float(tau), "dim": int(dim),
                "nu": {"kind": nu.kind, "point": nu.point}},
        assumptions=AssumptionParams(
            a1_L=0.0, a2_a1=a - half, a2_a2=half, a4_K=0.0, a4_a3=a - half, a4_a4=half, a4_ell=0.0,
            a5_K=a + abs(b_bar), a5_beta=0.0, L_b=a + abs(b_bar), n_b=1,
        ),
    )


def ou_model(a=1.0, sigma0=1.0, tau=1.0):
    """Delay-free scalar Ornstein-Uhlenbeck model dx = -a x dt + sigma0 dW.

    Written as a linear delay model with b_bar = 0 and nu the Dirac mass at 0,
    so the endpoint law is exactly Gaussian.
    """
    model = linear_delay_model(a=a, b_bar=0.0, sigma0=sigma0, nu=MeasureSpec("dirac", 0.0), tau=tau)
    params = {"a": float(a), "sigma0": float(sigma0), "tau": float(tau)}
    return SfdeModel(
        name="ou",
        dim_state=1,
        dim_noise=1,
        tau=model.tau,
        measures=model.measures,
        drift_fn=model.drift_fn,
        diffusion_fn=model.diffusion_fn,
        drift_jac=model.drift_jac,
        params=params,
        assumptions=model.assumptions,
    )


#: name -> (constructor, accepted parameter names)
MODEL_CATALOG = {
    "cubic": (cubic_model, ("tau", "sigma0", "kappa", "dim")),
    "linear": (linear_delay_model, ("a", "b_bar", "sigma0", "nu", "tau", "dim")),
    "ou": (ou_model, ("a", "sigma0", "tau")),
}


def build_model(name, params=None):
    """Instantiate a catalog model from its name and parameter mapping."""
    if name not in MODEL_CATALOG:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODEL_CATALOG)}")
    ctor, allowed = MODEL_CATALOG[name]
    params = dict(params or {})
    unknown = set(params) - set(allowed)
    if unknown:
        raise TypeError(f"model {name!r} does not accept parameters {sorted(unknown)}")
    if "nu" in params and isinstance(params["nu"], dict):
        params["nu"] = MeasureSpec(**params["nu"])
    return ctor(**params)


@dataclass
class DissipativityReport:
    """Worst margins (declared bound minus observed value) over sampled segments.

    A negative margin means the declared constant is contradicted by a
    sample.  Passing is evidence, not a proof.
    """

    samples: int
    a2_worst_margin: float
    a4_worst_margin: float
    a2_violations: int
    a4_violations: int

    @property
    def ok(self):
        return self.a2_violations == 0 and self.a4_violations == 0


def check_dissipativity(model, sample_count=1000, radius=2.0, rng=None, n=16, measure_index=0):
    """Monte Carlo spot-check of the declared a2 and a4 inequalities.

    Segment pairs have i.i.d. node values uniform in [-radius, radius]^d on a
    grid of ``n`` cells; the delay measure in the inequalities is the model's
    measure number ``measure_index``.
    """
    if model.assumptions is None:
        raise MissingParams(f"model {model.name!r} declares no assumption constants")
    rng = np.random.default_rng(rng)
    p = model.assumptions
    d = model.dim_state
    delta = model.tau / n
    nu = model.measure_weights(n)[measure_index].weights
    worst2 = worst4 = np.inf
    bad2 = bad4 = 0
    for _ in range(sample_count):
        s1 = Segment(rng.uniform(-radius, radius, size=(n + 1, d)), delta)
        s2 = Segment(rng.uniform(-radius, radius, size=(n + 1, d)), delta)
        diff = s1.values - s2.values
        dx = diff[-1]
        lhs2 = float(dx @ (model.drift(s1) - model.drift(s2)))
        rhs2 = -p.a2_a1 * float(dx @ dx) + p.a2_a2 * float(nu @ np.sum(diff * diff, axis=1))
        x = s1.endpoint
        lhs4 = float(x @ model.drift(s1))
        rhs4 = (p.a4_K - p.a4_a3 * float(np.linalg.norm(x)) ** (2.0 + p.a4_ell)
                + p.a4_a4 * float(nu @ np.sum(s1.values**2, axis=1)))
        m2 = rhs2 - lhs2
        m4 = rhs4 - lhs4
        # margins below -1e-12 relative to the magnitudes involved count as violations
        if m2 < -1e-12 * (1.0 + abs(lhs2)):
            bad2 += 1
        if m4 < -1e-12 * (1.0 + abs(lhs4)):
            bad4 += 1
        worst2 = min(worst2, m2)
        worst4 = min(worst4, m4)
    return DissipativityReport(sample_count, worst2, worst4, bad2, bad4)
