"""Versioned JSON experiment configuration.

One file plus a seed fully determines a run.  Validation errors name the
offending field; JSON syntax errors carry line/column diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gmm import AnalyticGmmScore, GaussianMixture
from ..ode import SolverConfig, ZPolicy
from ..scorenet import TinyScoreNet, load_checkpoint, train_dsm
from ..sde import NoiseSchedule, SubVpSde
from ..toydata import toy_image_dataset

SCHEMA_VERSION = 1

COMMANDS = ("estimate", "attack", "solver_compare", "blackbox", "train")


class ConfigError(ValueError):
    """Configuration problem; message names the field."""


_MISSING = object()


def _get(obj, key, path, expect=None, default=_MISSING):
    if key not in obj:
        if default is _MISSING:
            raise ConfigError(f"{path}{key}: required field is missing")
        return default
    value = obj[key]
    if expect is not None and not isinstance(value, expect):
        names = (
            expect.__name__
            if not isinstance(expect, tuple)
            else "/".join(t.__name__ for t in expect)
        )
        raise ConfigError(f"{path}{key}: expected {names}, got {type(value).__name__}")
    return value


def _reject_unknown(obj, known, path):
    for key in obj:
        if key not in known:
            raise ConfigError(f"{path}{key}: unknown field")


@dataclass
class ModelSpec:
    type: str
    gmm: GaussianMixture | None = None
    checkpoint_path: str | None = None
    train: dict | None = None
    shape: tuple | None = None


@dataclass
class DatasetSpec:
    type: str
    n: int = 0
    height: int = 0
    width: int = 0
    channels: int = 1
    seed: int = 0
    values: np.ndarray | None = None


@dataclass
class AttackSpec:
    kind: str
    epsilon: float
    lam: float
    lr: float
    max_steps: int
    early_stop: bool


@dataclass
class BlackboxSpec:
    height: int = 32
    width: int = 32
    channels: int = 3
    levels: int = 7
    kernel_size: int = 8

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


@dataclass
class SolverCompareSpec:
    regime_a: SolverConfig
    regime_b: SolverConfig
    seeds: int = 5
    lr: float = 0.01
    max_steps: int = 300
    epsilon: float = 0.16


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    output_dir: str
    schedule: NoiseSchedule
    model: ModelSpec
    dataset: DatasetSpec | None
    fast_solver: SolverConfig
    accurate_solver: SolverConfig
    attacks: list
    samples_per_attack: int
    blackbox: BlackboxSpec
    solver_compare: SolverCompareSpec
    workers: int = 1
    smoke: bool = False

    def apply_smoke(self):
        """CI-speed override: 5 samples per attack, 100 optimizer steps."""
        self.smoke = True
        self.samples_per_attack = min(self.samples_per_attack, 5)
        for spec in self.attacks:
            spec.max_steps = min(spec.max_steps, 100)


def _parse_solver(obj, path, default_divergence, default_policy):
    _reject_unknown(
        obj, {"method", "step_size", "t0", "divergence", "z_policy", "exact_bound"}, path
    )
    try:
        return SolverConfig(
            method=_get(obj, "method", path, str, "rk4"),
            step_size=float(_get(obj, "step_size", path, (int, float))),
            t0=float(_get(obj, "t0", path, (int, float), 1e-5)),
            divergence=_get(obj, "divergence", path, str, default_divergence),
            z=ZPolicy(_get(obj, "z_policy", path, str, default_policy), 0),
            exact_bound=int(_get(obj, "exact_bound", path, int, 64)),
        )
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err


def _parse_model(obj, path):
    mtype = _get(obj, "type", path, str)
    if mtype == "gmm":
        _reject_unknown(obj, {"type", "weights", "means", "stds", "shape"}, path)
        try:
            gmm = GaussianMixture(
                np.asarray(_get(obj, "weights", path, list), dtype=np.float64),
                np.asarray(_get(obj, "means", path, list), dtype=np.float64),
                np.asarray(_get(obj, "stds", path, list), dtype=np.float64),
            )
        except ValueError as err:
            raise ConfigError(f"{path}: {err}") from err
        shape = obj.get("shape")
        return ModelSpec("gmm", gmm=gmm, shape=tuple(shape) if shape else None)
    if mtype == "checkpoint":
        _reject_unknown(obj, {"type", "path"}, path)
        return ModelSpec("checkpoint", checkpoint_path=_get(obj, "path", path, str))
    if mtype == "train":
        _reject_unknown(
            obj,
            {"type", "hidden", "steps", "batch_size", "lr", "seed", "dataset"},
            path,
        )
        train = {
            "hidden": tuple(_get(obj, "hidden", path, list, [48, 48])),
            "steps": _get(obj, "steps", path, int),
            "batch_size": _get(obj, "batch_size", path, int, 64),
            "lr": float(_get(obj, "lr", path, (int, float), 1e-3)),
            "seed": _get(obj, "seed", path, int, 0),
            "dataset": _parse_dataset(
                _get(obj, "dataset", path, dict), path + "dataset."
            ),
        }
        return ModelSpec("train", train=train)
    raise ConfigError(f"{path}type: unknown model type {mtype!r}")


def _parse_dataset(obj, path):
    dtype = _get(obj, "type", path, str)
    if dtype == "toy_images":
        _reject_unknown(obj, {"type", "n", "height", "width", "channels", "seed"}, path)
        return DatasetSpec(
            "toy_images",
            n=_get(obj, "n", path, int),
            height=_get(obj, "height", path, int, 8),
            width=_get(obj, "width", path, int, 8),
            channels=_get(obj, "channels", path, int, 1),
            seed=_get(obj, "seed", path, int, 0),
        )
    if dtype == "gmm_samples":
        _reject_unknown(obj, {"type", "n", "seed"}, path)
        return DatasetSpec(
            "gmm_samples", n=_get(obj, "n", path, int), seed=_get(obj, "seed", path, int, 0)
        )
    if dtype == "points":
        _reject_unknown(obj, {"type", "values"}, path)
        values = np.asarray(_get(obj, "values", path, list), dtype=np.float64)
        if values.ndim != 2:
            raise ConfigError(f"{path}values: expected a list of points")
        return DatasetSpec("points", n=values.shape[0], values=values)
    raise ConfigError(f"{path}type: unknown dataset type {dtype!r}")


def _parse_attack(obj, path):
    from ..attacks import ATTACK_KINDS

    kind = _get(obj, "kind", path, str)
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"{path}kind: unknown attack kind {kind!r}")
    _reject_unknown(
        obj, {"kind", "epsilon", "lambda", "lr", "max_steps", "early_stop"}, path
    )
    defaults = {"near_sample": 0.06, "high_complexity": 0.06}
    return AttackSpec(
        kind=kind,
        epsilon=float(_get(obj, "epsilon", path, (int, float), defaults.get(kind, 0.16))),
        lam=float(_get(obj, "lambda", path, (int, float), 1.0)),
        lr=float(_get(obj, "lr", path, (int, float), 0.003)),
        max_steps=_get(obj, "max_steps", path, int, 500),
        early_stop=_get(obj, "early_stop", path, bool, True),
    )


def parse_config(obj: dict, source: str = "config") -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be an object")
    version = _get(obj, "schema_version", "", int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version}")
    kind = _get(obj, "kind", "", str)
    if kind not in COMMANDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r}")
    _reject_unknown(
        obj,
        {
            "schema_version",
            "kind",
            "seed",
            "output_dir",
            "schedule",
            "model",
            "dataset",
            "fast_solver",
            "accurate_solver",
            "attacks",
            "samples_per_attack",
            "blackbox",
            "solver_compare",
        },
        "",
    )
    sched_obj = _get(obj, "schedule", "", dict, {})
    try:
        schedule = NoiseSchedule(
            beta0=float(_get(sched_obj, "beta0", "schedule.", (int, float), 0.1)),
            beta1=float(_get(sched_obj, "beta1", "schedule.", (int, float), 20.0)),
        )
    except ValueError as err:
        raise ConfigError(f"schedule: {err}") from err

    dataset = None
    if "dataset" in obj:
        dataset = _parse_dataset(_get(obj, "dataset", "", dict), "dataset.")

    attacks = []
    for i, a in enumerate(_get(obj, "attacks", "", list, [])):
        if not isinstance(a, dict):
            raise ConfigError(f"attacks[{i}]: expected an object")
        attacks.append(_parse_attack(a, f"attacks[{i}]."))

    bb = _get(obj, "blackbox", "", dict, {})
    _reject_unknown(bb, {"height", "width", "channels", "levels", "kernel_size"}, "blackbox.")
    blackbox = BlackboxSpec(
        height=_get(bb, "height", "blackbox.", int, 32),
        width=_get(bb, "width", "blackbox.", int, 32),
        channels=_get(bb, "channels", "blackbox.", int, 3),
        levels=_get(bb, "levels", "blackbox.", int, 7),
        kernel_size=_get(bb, "kernel_size", "blackbox.", int, 8),
    )

    sc = _get(obj, "solver_compare", "", dict, {})
    _reject_unknown(
        sc,
        {"regime_a", "regime_b", "seeds", "lr", "max_steps", "epsilon"},
        "solver_compare.",
    )
    solver_compare = SolverCompareSpec(
        regime_a=_parse_solver(
            _get(sc, "regime_a", "solver_compare.", dict, {"step_size": 0.05}),
            "solver_compare.regime_a.", "exact", "fixed",
        ),
        regime_b=_parse_solver(
            _get(
                sc,
                "regime_b",
                "solver_compare.",
                dict,
                {"method": "euler", "step_size": 0.02},
            ),
            "solver_compare.regime_b.", "exact", "fixed",
        ),
        seeds=_get(sc, "seeds", "solver_compare.", int, 5),
        lr=float(_get(sc, "lr", "solver_compare.", (int, float), 0.01)),
        max_steps=_get(sc, "max_steps", "solver_compare.", int, 300),
        epsilon=float(_get(sc, "epsilon", "solver_compare.", (int, float), 0.16)),
    )

    return ExperimentConfig(
        kind=kind,
        seed=_get(obj, "seed", "", int, 0),
        output_dir=_get(obj, "output_dir", "", str, "out"),
        schedule=schedule,
        model=_parse_model(_get(obj, "model", "", dict), "model."),
        dataset=dataset,
        fast_solver=_parse_solver(
            _get(obj, "fast_solver", "", dict, {"step_size": 0.05}),
            "fast_solver.", "hutchinson", "fixed",
        ),
        accurate_solver=_parse_solver(
            _get(obj, "accurate_solver", "", dict, {"step_size": 0.001}),
            "accurate_solver.", "exact", "per_step",
        ),
        attacks=attacks,
        samples_per_attack=_get(obj, "samples_per_attack", "", int, 20),
        blackbox=blackbox,
        solver_compare=solver_compare,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err}") from err
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"{path}:{err.lineno}:{err.colno}: invalid JSON: {err.msg}"
        ) from err
    return parse_config(obj, source=str(path))


# ---------------------------------------------------------------------------
# Model and dataset realization.


def build_sde(cfg: ExperimentConfig) -> SubVpSde:
    return SubVpSde(cfg.schedule)


def build_dataset(spec: DatasetSpec, model=None):
    if spec.type == "toy_images":
        return toy_image_dataset(
            spec.n, spec.height, spec.width, spec.seed, channels=spec.channels
        )
    if spec.type == "points":
        return spec.values
    if spec.type == "gmm_samples":
        if model is None or not hasattr(model, "gmm"):
            raise ConfigError("dataset.type: gmm_samples needs a gmm model")
        rng = np.random.Generator(np.random.Philox(spec.seed))
        return model.gmm.sample(spec.n, rng)
    raise ConfigError(f"dataset.type: unhandled {spec.type!r}")


def build_model(cfg: ExperimentConfig):
    """Realize the configured score model (training it when asked)."""
    sde = build_sde(cfg)
    spec = cfg.model
    if spec.type == "gmm":
        return AnalyticGmmScore(spec.gmm, sde, shape=spec.shape)
    if spec.type == "checkpoint":
        return load_checkpoint(spec.checkpoint_path, sde=sde)
    train = spec.train
    ds_spec = train["dataset"]
    data = build_dataset(ds_spec)
    if ds_spec.type != "toy_images":
        raise ConfigError("model.train.dataset: training expects toy_images")
    shape = (ds_spec.channels, ds_spec.height, ds_spec.width)
    net = TinyScoreNet(
        data.shape[1], hidden=train["hidden"], sde=sde, shape=shape, seed=train["seed"]
    )
    train_dsm(
        data,
        net,
        steps=train["steps"],
        batch_size=train["batch_size"],
        lr=train["lr"],
        seed=train["seed"],
        t0=cfg.fast_solver.t0,
    )
    return net
