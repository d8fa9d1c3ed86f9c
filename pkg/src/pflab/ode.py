"""Probability-flow ODE: right-hand side, divergence, fixed-grid solvers,
and forward/reverse log-likelihood estimators.

The ODE drift is ``f(x,t) - 0.5 * g(t)**2 * score(x,t)``.  Integrating its
divergence alongside the state yields the likelihood estimator: a forward
pass accumulates the integral term I and evaluates the prior term P at the
latent, with ``log p = I + P``.  The reverse pass decodes a latent and
carries the same identity with the integral sign flipped.

Two divergence routes exist.  The exact route sums the D diagonal entries
of the Jacobian of the drift: when gradients through the divergence are
requested it runs D separate reverse passes (each differentiable); on the
plain evaluation path it runs a single reverse sweep seeded with a full
identity covector block, which is the same linear algebra batched.  The
Hutchinson route contracts the Jacobian with one Rademacher vector and
stays differentiable through its own reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .sde import prior_logp


class SolveError(RuntimeError):
    """The solver hit a non-finite state; message carries the step index."""


class DimensionBoundError(ValueError):
    """Exact divergence requested above the configured dimension bound."""


RK4 = "rk4"
EULER = "euler"
EXACT = "exact"
HUTCHINSON = "hutchinson"
FIXED_SINGLE = "fixed"
FRESH_PER_STEP = "per_step"
FORWARD = "forward"
REVERSE = "reverse"

# Stride between the Philox counter blocks of consecutive solver steps;
# one step never consumes anywhere near this many counters.
_Z_COUNTER_STRIDE = 1 << 64


@dataclass(frozen=True)
class ZPolicy:
    """Rademacher draw policy: one shared vector, or a fresh one per step."""

    kind: str = FIXED_SINGLE
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (FIXED_SINGLE, FRESH_PER_STEP):
            raise ValueError(f"unknown z policy {self.kind!r}")


def rademacher(dim: int, seed: int, counter: int = 0) -> np.ndarray:
    """Counter-based seeded Rademacher vector, reproducible per (seed, step)."""
    gen = np.random.Generator(
        np.random.Philox(key=seed, counter=counter * _Z_COUNTER_STRIDE)
    )
    return gen.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


@dataclass(frozen=True)
class SolverConfig:
    method: str = RK4
    step_size: float = 0.05
    t0: float = 1e-5
    divergence: str = HUTCHINSON
    z: ZPolicy = field(default_factory=ZPolicy)
    direction: str = FORWARD
    exact_bound: int = 64

    def __post_init__(self):
        if self.method not in (RK4, EULER):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.divergence not in (EXACT, HUTCHINSON):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")
        if self.direction not in (FORWARD, REVERSE):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not 0.0 < self.t0 < 1.0:
            raise ValueError(f"t0 must lie in (0, 1), got {self.t0}")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError(f"step_size must lie in (0, 1], got {self.step_size}")
        # Integer-grid requirement; the tiny start offset t0 perturbs the
        # interval count by ~t0/h, so the check is relative to n.
        span = 1.0 - self.t0
        frac = span / self.step_size
        n = round(frac)
        if n < 1 or abs(frac - n) > 1e-4 * n:
            raise ValueError(
                f"step_size {self.step_size} does not divide [{self.t0}, 1] "
                f"into an integer number of steps"
            )

    @property
    def n_intervals(self) -> int:
        return round((1.0 - self.t0) / self.step_size)

    @property
    def n_points(self) -> int:
        """Grid points, the 'unrolled steps' count (21 for h=0.05, 1001 for 0.001)."""
        return self.n_intervals + 1

    @property
    def evals_per_interval(self) -> int:
        return 4 if self.method == RK4 else 1

    def with_direction(self, direction: str) -> "SolverConfig":
        return replace(self, direction=direction)

    def with_seed(self, seed: int) -> "SolverConfig":
        return replace(self, z=ZPolicy(self.z.kind, seed))


@dataclass
class AugmentedState:
    x: ad.Var
    logdet: ad.Var
    n_intervals: int

    @property
    def x_value(self) -> np.ndarray:
        return np.asarray(self.x.value)

    @property
    def logdet_value(self) -> float:
        return float(self.logdet.value)


@dataclass(frozen=True)
class LikelihoodEstimate:
    integral: float
    prior: float
    total: float
    per_dim: float
    direction: str


def _estimate(i: float, p: float, dim: int, direction: str) -> LikelihoodEstimate:
    total = i + p
    return LikelihoodEstimate(i, p, total, total / dim, direction)


def drift_tilde(x, t: float, model):
    """ODE right-hand side f(x,t) - 0.5 g(t)^2 score(x,t), on the tape."""
    xv = x if isinstance(x, ad.Var) else ad.constant(x)
    sde = model.sde
    s = model.score(xv, t)
    g2 = sde.diffusion_g2(t)
    if g2 == 0.0:
        return sde.drift_f(xv, t)
    return ad.sub(sde.drift_f(xv, t), ad.scale(0.5 * g2, s))


def _recording(x) -> bool:
    tape = ad._active()
    return tape is not None and isinstance(x, ad.Var) and x.tape is tape


def divergence_exact(x, t: float, model, bound: int | None = None):
    """Sum of the D diagonal Jacobian entries of the drift.

    Differentiable when ``x`` is on the active tape (D reverse passes, each
    recorded); otherwise evaluated with one batched sweep on a local tape.
    """
    dim = model.dim
    if bound is not None and dim > bound:
        raise DimensionBoundError(
            f"exact divergence needs dim <= {bound}, model has {dim}"
        )
    if _recording(x):
        f = drift_tilde(x, t, model)
        total = None
        for i in range(dim):
            basis = np.zeros(dim)
            basis[i] = 1.0
            (row,) = ad.gradient(ad.dot(basis, f), [x], create_graph=True)
            entry = ad.dot(row, basis)
            total = entry if total is None else ad.add(total, entry)
        return total
    xval = np.asarray(x.value if isinstance(x, ad.Var) else x, dtype=np.float64)
    with ad.Tape() as tape:
        leaf = tape.leaf(xval)
        f = drift_tilde(leaf, t, model)
        jac = ad.jacobian(f, leaf)
    return ad.constant(np.trace(jac))


def divergence_hutchinson(x, t: float, model, z: np.ndarray):
    """Skilling-Hutchinson estimate z^T (df/dx) z with a Rademacher z.

    One reverse pass produces the vector-Jacobian product z^T J; contracting
    with z again gives the estimate.  The pass is recorded when gradients
    are being taken, so the estimate itself stays differentiable.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.abs(z) == 1.0):
        raise ValueError("Hutchinson probe must have entries +-1")
    if z.shape != (model.dim,):
        raise ad.ShapeError(f"probe shape {z.shape} does not match dim {model.dim}")
    if _recording(x):
        f = drift_tilde(x, t, model)
        (vjp,) = ad.gradient(ad.dot(z, f), [x], create_graph=True)
        return ad.dot(vjp, z)
    xval = np.asarray(x.value if isinstance(x, ad.Var) else x, dtype=np.float64)
    with ad.Tape() as tape:
        leaf = tape.leaf(xval)
        f = drift_tilde(leaf, t, model)
        (vjp,) = ad.gradient(ad.dot(z, f), [leaf])
    return ad.constant(np.dot(np.asarray(vjp.value), z))


def solve(x_init, cfg: SolverConfig, model, want_logdet: bool = True) -> AugmentedState:
    """Fixed-grid integration of the augmented state (x, accumulated divergence).

    Forward runs t0 -> 1 from a data sample, reverse runs 1 -> t0 from a
    latent.  Under the fixed z policy one probe is shared by every stage of
    every step; per-step policy draws a fresh probe per grid interval, shared
    by that interval's RK4 stages so the integrand stays a single
    deterministic function within the step.
    """
    x = x_init if isinstance(x_init, ad.Var) else ad.constant(x_init)
    if np.shape(x.value) != (model.dim,):
        raise ad.ShapeError(
            f"initial state shape {np.shape(x.value)} does not match model dim "
            f"{model.dim}"
        )
    n = cfg.n_intervals
    grid = np.linspace(cfg.t0, 1.0, n + 1)
    if cfg.direction == REVERSE:
        grid = grid[::-1]

    hutch = cfg.divergence == HUTCHINSON
    z_fixed = None
    if want_logdet and hutch and cfg.z.kind == FIXED_SINGLE:
        z_fixed = rademacher(model.dim, cfg.z.seed, 0)

    def rhs(xv, t, z):
        fx = drift_tilde(xv, t, model)
        if not want_logdet:
            return fx, None
        if hutch:
            dv = divergence_hutchinson(xv, t, model, z)
        else:
            dv = divergence_exact(xv, t, model, cfg.exact_bound)
        return fx, dv

    logdet = ad.constant(0.0)
    for i in range(n):
        t_a = float(grid[i])
        t_b = float(grid[i + 1])
        h = t_b - t_a
        z = None
        if want_logdet and hutch:
            z = z_fixed if z_fixed is not None else rademacher(model.dim, cfg.z.seed, i)
        try:
            if cfg.method == RK4:
                k1, l1 = rhs(x, t_a, z)
                k2, l2 = rhs(ad.add(x, ad.scale(0.5 * h, k1)), t_a + 0.5 * h, z)
                k3, l3 = rhs(ad.add(x, ad.scale(0.5 * h, k2)), t_a + 0.5 * h, z)
                k4, l4 = rhs(ad.add(x, ad.scale(h, k3)), t_b, z)
                combo = ad.add(
                    ad.add(k1, ad.scale(2.0, k2)), ad.add(ad.scale(2.0, k3), k4)
                )
                x = ad.add(x, ad.scale(h / 6.0, combo))
                if want_logdet:
                    lsum = ad.add(
                        ad.add(l1, ad.mul(l2, 2.0)), ad.add(ad.mul(l3, 2.0), l4)
                    )
                    logdet = ad.add(logdet, ad.mul(lsum, h / 6.0))
            else:
                k1, l1 = rhs(x, t_a, z)
                x = ad.add(x, ad.scale(h, k1))
                if want_logdet:
                    logdet = ad.add(logdet, ad.mul(l1, h))
        except ad.NonFiniteError as err:
            raise SolveError(f"non-finite state at step {i} (t={t_a:.6g})") from err
    return AugmentedState(x, logdet, n)


# ---------------------------------------------------------------------------
# Likelihood estimators, Var-level (for attack objectives) and float-level.


def forward_terms(x0: ad.Var, cfg: SolverConfig, model):
    """Taped forward estimate: (total, integral, prior, latent)."""
    state = solve(x0, cfg.with_direction(FORWARD), model)
    integral = state.logdet
    prior = prior_logp(state.x)
    return ad.add(integral, prior), integral, prior, state.x


def reverse_terms(x1: ad.Var, cfg: SolverConfig, model):
    """Taped reverse estimate from a latent: (total, integral, prior, decoded)."""
    state = solve(x1, cfg.with_direction(REVERSE), model)
    integral = ad.neg(state.logdet)
    prior = prior_logp(x1)
    return ad.add(integral, prior), integral, prior, state.x


def log_likelihood_forward(x0, cfg: SolverConfig, model) -> LikelihoodEstimate:
    x0 = np.asarray(x0, dtype=np.float64)
    _, integral, prior, _ = forward_terms(ad.constant(x0), cfg, model)
    return _estimate(float(integral.value), float(prior.value), model.dim, FORWARD)


def log_likelihood_reverse(x1, cfg: SolverConfig, model):
    """Reverse estimate plus the decoded sample."""
    x1 = np.asarray(x1, dtype=np.float64)
    _, integral, prior, decoded = reverse_terms(ad.constant(x1), cfg, model)
    est = _estimate(float(integral.value), float(prior.value), model.dim, REVERSE)
    return est, np.asarray(decoded.value)


def encode(x0, cfg: SolverConfig, model) -> np.ndarray:
    """Map a sample to its latent (forward solve without the divergence)."""
    state = solve(ad.constant(np.asarray(x0, dtype=np.float64)),
                  cfg.with_direction(FORWARD), model, want_logdet=False)
    return state.x_value


def decode(x1, cfg: SolverConfig, model) -> np.ndarray:
    """Map a latent back to sample space (reverse solve, no divergence)."""
    state = solve(ad.constant(np.asarray(x1, dtype=np.float64)),
                  cfg.with_direction(REVERSE), model, want_logdet=False)
    return state.x_value
