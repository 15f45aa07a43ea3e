"""theta-Euler-Maruyama simulation and verification toolkit for stochastic delay equations."""
from .errors import *  # noqa: F401,F403
from .segment import DelayMeasure, MeasureSpec, Segment, integrate
from .model import (AssumptionParams, SfdeModel, build_model, check_dissipativity, cubic_distributed_drift,
                    cubic_model, linear_delay_model, ou_model)
from .noise import NoiseStream, derive_seed, gaussian_increments
from .integrator import SchemeConfig, Trajectory, implicit_step, segment_at, simulate, split_process
from .longtime import (EmpiricalMeasure, TimeAverageStat, attractiveness_curve, invariant_cauchy,
                       invariant_diagnostics, time_average, wasserstein)
from .convergence import RateReport, invariant_rate, loglog_slope, strong_errors, weak_errors
from .density import DensityEstimate, density_distance, kde, ou_exact_density, silverman_bandwidth
from .ldp import (Control, RateValue, controlled_simulate, endpoint_rate, log_density_check, rate_cost,
                  skeleton_solve, small_noise_logprob)

__version__ = "0.1.0"
