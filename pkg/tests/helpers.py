"""Shared test stubs and independent oracles."""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from pflab import autodiff as ad
from pflab.sde import SubVpSde


class FlatSde:
    """Degenerate schedule stub: beta identically equal to a constant.

    Bypasses NoiseSchedule validation on purpose; used for zero-vector-field
    and diagonal-Jacobian oracle cases.
    """

    def __init__(self, beta_const=0.0):
        self.beta_const = float(beta_const)

    def beta(self, t):
        return self.beta_const

    def beta_integral(self, t):
        return self.beta_const * t

    def drift_f(self, x, t):
        coef = -0.5 * self.beta(t)
        if isinstance(x, ad.Var):
            return ad.scale(coef, x)
        return coef * np.asarray(x)

    def diffusion_g2(self, t):
        return self.beta(t) * -np.expm1(-2.0 * self.beta_integral(t))

    def kernel_moments(self, t):
        big_b = self.beta_integral(t)
        return float(np.exp(-0.5 * big_b)), float(-np.expm1(-big_b))


class ZeroScore:
    """Score model that always returns zero (pure-drift dynamics)."""

    def __init__(self, dim, sde=None):
        self.dim = dim
        self.shape = (dim,)
        self.sde = sde if sde is not None else SubVpSde()

    def score(self, x, t):
        zeros = np.zeros(self.dim)
        if isinstance(x, ad.Var):
            # Stays connected to x so solver tapes have a gradient path.
            return ad.scale(0.0, x)
        return zeros


def central_diff_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def find_modes(model, starts):
    """Locate density modes by Nelder-Mead on the exact log-density."""
    modes = []
    for start in starts:
        res = minimize(
            lambda x: -model.logp0(x),
            np.asarray(start, dtype=np.float64),
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 2000},
        )
        modes.append((res.x, -res.fun))
    return modes
