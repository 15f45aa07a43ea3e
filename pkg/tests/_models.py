"""Small hand-built models used as oracles in tests."""
import numpy as np

from thetaem.model import SfdeModel, linear_delay_model
from thetaem.segment import MeasureSpec


def zero_model(tau=1.0, sigma=0.0, d=1):
    """b = 0 and sigma = const * I (zero by default)."""
    return SfdeModel(
        name="zero", dim_state=d, dim_noise=d, tau=tau, measures=(MeasureSpec("uniform"),),
        drift_fn=lambda x, f: np.zeros_like(x),
        diffusion_fn=lambda x, f: np.broadcast_to(sigma * np.eye(d), (x.shape[0], d, d)).copy(),
    )


def silent_linear(a=2.0, b_bar=0.5, nu=None):
    """Linear delay model without noise."""
    m = linear_delay_model(a=a, b_bar=b_bar, sigma0=0.0, nu=nu)
    return m


def no_jacobian(model):
    """Same model with the analytic Jacobian removed, forcing finite differences."""
    import dataclasses
    return dataclasses.replace(model, drift_jac=None)
