"""Gradient-based likelihood-maximization attacks and black-box probes.

Every attack runs Adam ascent on the fast differentiable estimator and is
scored afterwards with the accurate solver, so a perturbation cannot win by
overfitting the cheap objective.  Projection happens after each optimizer
step: first onto the epsilon box, then onto the global pixel bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .complexity import complexity_png, hf_energy, is_image_shape, gaussian_filter2d
from .ode import (
    FORWARD,
    REVERSE,
    LikelihoodEstimate,
    SolveError,
    SolverConfig,
    forward_terms,
    log_likelihood_forward,
    reverse_terms,
    solve,
)
from .sde import prior_logp

UNRESTRICTED = "unrestricted"
RANDOM_REGION = "random_region"
NEAR_SAMPLE = "near_sample"
HIGH_COMPLEXITY = "high_complexity"
PRIOR_ONLY = "prior_only"
REVERSE_INTEGRATION = "reverse_integration"

ATTACK_KINDS = (
    UNRESTRICTED,
    RANDOM_REGION,
    NEAR_SAMPLE,
    HIGH_COMPLEXITY,
    PRIOR_ONLY,
    REVERSE_INTEGRATION,
)

_NEEDS_BENIGN = (NEAR_SAMPLE, HIGH_COMPLEXITY, REVERSE_INTEGRATION)

# Philox counter blocks keep the center draw, the accurate-solver probes,
# and the fast-solver probes on disjoint streams of the same run seed.
_STREAM_CENTER = 1
_STREAM_ACCURATE = 2


class AttackConfigError(ValueError):
    pass


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=stream << 160))


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    fast: SolverConfig
    accurate: SolverConfig
    epsilon: float = 0.16
    lam: float = 1.0
    lr: float = 0.003
    max_steps: int = 500
    seed: int = 0
    early_stop: bool = True
    conv_window: int = 50
    conv_tol_per_dim: float = 1e-4

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackConfigError(f"unknown attack kind {self.kind!r}")
        # epsilon == 0 is a degenerate-but-legal box (identity attack).
        if self.kind not in (UNRESTRICTED,) and self.epsilon < 0:
            raise AttackConfigError(f"{self.kind} needs epsilon >= 0")
        if self.lam < 0:
            raise AttackConfigError("lambda must be nonnegative")
        if self.max_steps < 1:
            raise AttackConfigError("max_steps must be >= 1")


@dataclass
class AttackResult:
    kind: str
    center: np.ndarray
    delta: np.ndarray
    x_final: np.ndarray
    objective_traj: list
    delta_inf_traj: list
    fast_final: LikelihoodEstimate
    accurate_final: LikelihoodEstimate
    complexity: float | None
    converged: bool
    steps_run: int
    aborted: bool
    extras: dict = field(default_factory=dict)


def _project(delta, center, eps, pixel_bounds):
    if eps is not None:
        delta = np.clip(delta, -eps, eps)
    if pixel_bounds:
        x = np.clip(center + delta, -1.0, 1.0)
        delta = x - center
    return delta


def _ascend(cfg: AttackConfig, center, objective, eps, pixel_bounds):
    """Adam ascent with per-step projection.

    The convergence flag fires when the running best improves by less than
    conv_tol_per_dim nats/dim over the trailing window; it is informational
    (some attacks never fully converge) but, when early_stop is set, also
    ends the loop.
    """
    dim = center.shape[0]
    delta = np.zeros(dim)
    state = ad.adam_init(delta)
    traj: list[float] = []
    delta_inf: list[float] = []
    prefix_best: list[float] = []
    converged = False
    aborted = False
    for step in range(cfg.max_steps):
        try:
            with ad.Tape() as tape:
                dv = tape.leaf(delta)
                obj = objective(dv)
                (grad,) = ad.gradient(obj, [dv])
        except (ad.NonFiniteError, SolveError):
            aborted = True
            break
        value = float(obj.value)
        traj.append(value)
        prefix_best.append(max(prefix_best[-1], value) if prefix_best else value)
        delta, state = ad.adam_step(delta, -np.asarray(grad.value), state, cfg.lr)
        delta = _project(delta, center, eps, pixel_bounds)
        delta_inf.append(float(np.abs(delta).max()))
        if len(traj) > cfg.conv_window:
            gain = prefix_best[-1] - prefix_best[-1 - cfg.conv_window]
            if gain < cfg.conv_tol_per_dim * dim:
                converged = True
                if cfg.early_stop:
                    break
    return delta, traj, delta_inf, converged, len(traj), aborted


def _finish(model, cfg: AttackConfig, kind, center, delta, x_final, traj, dinf,
            converged, steps, aborted, extras=None):
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)
    acc_cfg = cfg.accurate.with_seed(cfg.seed + _STREAM_ACCURATE).with_direction(FORWARD)
    fast_est = log_likelihood_forward(x_final, fast_cfg, model)
    acc_est = log_likelihood_forward(x_final, acc_cfg, model)
    comp = None
    if is_image_shape(model.shape):
        comp = complexity_png(x_final, model.shape)
    return AttackResult(
        kind=kind,
        center=center,
        delta=delta,
        x_final=x_final,
        objective_traj=traj,
        delta_inf_traj=dinf,
        fast_final=fast_est,
        accurate_final=acc_est,
        complexity=comp,
        converged=converged,
        steps_run=steps,
        aborted=aborted,
        extras=extras or {},
    )


def _forward_objective(model, fast_cfg):
    def objective(dv, center):
        xv = ad.add(center, dv)
        total, _, _, _ = forward_terms(xv, fast_cfg, model)
        return total

    return objective


def attack_unrestricted(model, cfg: AttackConfig) -> AttackResult:
    """Ascent from the all-zeros sample, restricted only by pixel bounds."""
    center = np.zeros(model.dim)
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)
    obj = _forward_objective(model, fast_cfg)
    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, center, lambda dv: obj(dv, center), eps=1.0, pixel_bounds=True
    )
    return _finish(model, cfg, UNRESTRICTED, center, delta, center + delta,
                   traj, dinf, conv, steps, aborted)


def _random_center(model, cfg: AttackConfig) -> np.ndarray:
    rng = _stream_rng(cfg.seed, _STREAM_CENTER)
    return 0.2 * rng.standard_normal(model.dim)


def attack_random_region(model, cfg: AttackConfig) -> AttackResult:
    """Ascent inside an epsilon box around a random draw x ~ N(0, 0.2)."""
    center = _random_center(model, cfg)
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)
    obj = _forward_objective(model, fast_cfg)
    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, center, lambda dv: obj(dv, center), eps=cfg.epsilon, pixel_bounds=True
    )
    return _finish(model, cfg, RANDOM_REGION, center, delta, center + delta,
                   traj, dinf, conv, steps, aborted)


def attack_near_sample(model, cfg: AttackConfig, x_benign) -> AttackResult:
    """Ascent inside an epsilon box around an in-distribution sample."""
    center = np.asarray(x_benign, dtype=np.float64).copy()
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)
    obj = _forward_objective(model, fast_cfg)
    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, center, lambda dv: obj(dv, center), eps=cfg.epsilon, pixel_bounds=True
    )
    return _finish(model, cfg, NEAR_SAMPLE, center, delta, center + delta,
                   traj, dinf, conv, steps, aborted)


def attack_high_complexity(model, cfg: AttackConfig, x_benign) -> AttackResult:
    """Near-sample ascent with the high-frequency DCT term added.

    With lam == 0 the extra term is skipped entirely, so the run is
    bit-identical to a near-sample attack under the same seed.
    """
    if not is_image_shape(model.shape):
        raise AttackConfigError("high_complexity attack needs an image-shaped model")
    center = np.asarray(x_benign, dtype=np.float64).copy()
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)
    shape = model.shape
    lam = cfg.lam

    def objective(dv):
        xv = ad.add(center, dv)
        total, _, _, _ = forward_terms(xv, fast_cfg, model)
        if lam == 0.0:
            return total
        return ad.add(total, ad.mul(hf_energy(xv, shape), lam))

    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, center, objective, eps=cfg.epsilon, pixel_bounds=True
    )
    return _finish(model, cfg, HIGH_COMPLEXITY, center, delta, center + delta,
                   traj, dinf, conv, steps, aborted)


def attack_prior_only(model, cfg: AttackConfig) -> AttackResult:
    """Random-region setup, but the objective keeps only the prior term.

    The forward solve still runs (the latent is needed) but skips the
    divergence integral, which also makes each step much cheaper.  The
    integral term at the start and end is logged for the convergence
    comparison even though it never enters the objective.
    """
    center = _random_center(model, cfg)
    fast_cfg = cfg.fast.with_seed(cfg.seed).with_direction(FORWARD)

    def objective(dv):
        xv = ad.add(center, dv)
        state = solve(xv, fast_cfg, model, want_logdet=False)
        return prior_logp(state.x)

    start_est = log_likelihood_forward(center, fast_cfg, model)
    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, center, objective, eps=cfg.epsilon, pixel_bounds=True
    )
    final_est = log_likelihood_forward(center + delta, fast_cfg, model)
    extras = {
        "integral_start": start_est.integral,
        "integral_final": final_est.integral,
        "prior_start": start_est.prior,
        "prior_final": final_est.prior,
    }
    return _finish(model, cfg, PRIOR_ONLY, center, delta, center + delta,
                   traj, dinf, conv, steps, aborted, extras)


def attack_reverse_integration(model, cfg: AttackConfig, x_benign) -> AttackResult:
    """Optimize the latent code under the reverse estimator.

    The benign sample is encoded with the fast grid, the perturbed latent is
    scored by reverse integration each step, and the optimized latent is
    decoded with the accurate grid.  The box constrains the latent; sample
    space is only clipped on the final decode.
    """
    benign = np.asarray(x_benign, dtype=np.float64)
    fast_cfg = cfg.fast.with_seed(cfg.seed)
    acc_cfg = cfg.accurate.with_seed(cfg.seed + _STREAM_ACCURATE)
    enc = solve(ad.constant(benign), fast_cfg.with_direction(FORWARD), model,
                want_logdet=False)
    latent0 = enc.x_value

    def objective(dv):
        xv = ad.add(latent0, dv)
        total, _, _, _ = reverse_terms(xv, fast_cfg, model)
        return total

    delta, traj, dinf, conv, steps, aborted = _ascend(
        cfg, latent0, objective, eps=cfg.epsilon, pixel_bounds=False
    )
    latent = latent0 + delta
    dec = solve(ad.constant(latent), acc_cfg.with_direction(REVERSE), model,
                want_logdet=False)
    x_final = np.clip(dec.x_value, -1.0, 1.0)
    extras = {"latent_delta_inf": float(np.abs(delta).max())}
    return _finish(model, cfg, REVERSE_INTEGRATION, benign, delta, x_final,
                   traj, dinf, conv, steps, aborted, extras)


def run_attack(model, cfg: AttackConfig, x_benign=None) -> AttackResult:
    if cfg.kind in _NEEDS_BENIGN and x_benign is None:
        raise AttackConfigError(f"{cfg.kind} attack needs a benign sample")
    if cfg.kind == UNRESTRICTED:
        return attack_unrestricted(model, cfg)
    if cfg.kind == RANDOM_REGION:
        return attack_random_region(model, cfg)
    if cfg.kind == NEAR_SAMPLE:
        return attack_near_sample(model, cfg, x_benign)
    if cfg.kind == HIGH_COMPLEXITY:
        return attack_high_complexity(model, cfg, x_benign)
    if cfg.kind == PRIOR_ONLY:
        return attack_prior_only(model, cfg)
    return attack_reverse_integration(model, cfg, x_benign)


# ---------------------------------------------------------------------------
# Black-box (optimization-free) probe suites.


MONOCHROME = "monochrome"
FILTERED_NOISE = "filtered_noise"
UNIFORM_NOISE = "uniform_noise"
BLACKBOX_KINDS = (MONOCHROME, FILTERED_NOISE, UNIFORM_NOISE)


def blackbox_suite(kind, shape, levels=7, seed=0, kernel_size=8):
    """Probe samples of graded complexity, flat in the given image shape.

    Monochrome: constant images over a level grid that includes both pixel
    bounds.  Filtered noise: uniform noise of increasing magnitude on the
    all-(-1) image, smoothed by the Gaussian filter.  Uniform noise:
    i.i.d. uniform values of increasing spread.
    """
    if kind not in BLACKBOX_KINDS:
        raise AttackConfigError(f"unknown black-box suite {kind!r}")
    if not is_image_shape(shape):
        raise AttackConfigError("black-box suites need an image shape")
    c, h, w = shape
    dim = c * h * w
    samples = []
    if kind == MONOCHROME:
        for level in np.linspace(-1.0, 1.0, levels):
            samples.append(np.full(dim, level))
        return samples
    kind_index = BLACKBOX_KINDS.index(kind)
    for i in range(levels):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([seed, kind_index, i]))
        )
        if kind == FILTERED_NOISE:
            magnitude = 2.0 * (i + 1) / levels
            noise = rng.uniform(0.0, magnitude, size=(c, h, w))
            smooth = np.stack([gaussian_filter2d(n, kernel_size) for n in noise])
            samples.append(np.clip(-1.0 + smooth, -1.0, 1.0).ravel())
        else:
            half_width = (i + 1) / levels
            samples.append(rng.uniform(-half_width, half_width, size=dim))
    return samples
