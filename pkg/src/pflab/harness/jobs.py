"""Experiment orchestration and persistence.

Every command is a pure function of (config, seed): per-run randomness is
derived from stable integer key tuples via SeedSequence, rows are sorted by
stable keys before writing, and floats are serialized with shortest
round-trip formatting, so reruns produce byte-identical CSVs.  Wall-clock
timings go to timings.json, never into the CSVs.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from .. import ode
from ..attacks import (
    ATTACK_KINDS,
    BLACKBOX_KINDS,
    AttackConfig,
    blackbox_suite,
    run_attack,
)
from .. import autodiff as ad
from ..complexity import complexity_png, is_image_shape, quantize_image
from ..png import encode_png
from ..scorenet import TinyScoreNet, TrainingDiverged, save_checkpoint, train_dsm
from .config import ConfigError, ExperimentConfig, build_dataset, build_model, build_sde
from . import plots


class InvariantViolation(RuntimeError):
    pass


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _f(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _export_png(path, x, shape) -> None:
    img = quantize_image(x, shape)
    with open(path, "wb") as fh:
        fh.write(encode_png(img.pixels))


def _spearman(xs, ys):
    rho, p = stats.spearmanr(xs, ys)
    return float(rho), float(p)


# ---------------------------------------------------------------------------
# estimate


def run_estimate(cfg: ExperimentConfig, out_dir: Path) -> int:
    model = build_model(cfg)
    if cfg.dataset is None:
        raise ConfigError("dataset: estimate needs a dataset")
    data = build_dataset(cfg.dataset, model)
    if data.shape[0] == 0:
        raise ConfigError("dataset: no samples")
    analytic = hasattr(model, "logp0")

    regimes = {"fast": cfg.fast_solver, "accurate": cfg.accurate_solver}
    rows = []
    failures = 0
    started = time.perf_counter()
    for i, x0 in enumerate(data):
        for regime, solver in regimes.items():
            solver = solver.with_seed(derive_seed(cfg.seed, i, 0))
            total, integral, prior, latent = ode.forward_terms(
                ad.constant(x0), solver, model
            )
            fw_i = float(integral.value)
            fw_p = float(prior.value)
            fw_total = fw_i + fw_p
            rev_est, decoded = ode.log_likelihood_reverse(
                np.asarray(latent.value), solver, model
            )
            roundtrip = float(np.abs(decoded - x0).max())
            truth = model.logp0(x0) if analytic else None
            abs_err = abs(fw_total - truth) if truth is not None else None
            ok = (
                math.isfinite(fw_total)
                and math.isfinite(rev_est.total)
                and fw_total == fw_i + fw_p
                and rev_est.total == rev_est.integral + rev_est.prior
            )
            if not ok:
                failures += 1
            rows.append(
                [
                    f"{i:03d}",
                    regime,
                    _f(fw_total),
                    _f(fw_i),
                    _f(fw_p),
                    _f(rev_est.total),
                    _f(rev_est.integral),
                    _f(rev_est.prior),
                    _f(roundtrip),
                    _f(fw_total / model.dim),
                    _f(truth),
                    _f(abs_err),
                ]
            )
    rows.sort(key=lambda r: (r[0], r[1]))
    write_csv(
        out_dir / "estimates.csv",
        [
            "sample_id",
            "regime",
            "logp_fw",
            "integral_fw",
            "prior_fw",
            "logp_rev",
            "integral_rev",
            "prior_rev",
            "roundtrip_inf_err",
            "per_dim_fw",
            "truth_logp0",
            "abs_err_vs_truth",
        ],
        rows,
    )
    write_json(out_dir / "timings.json", {"estimate_s": time.perf_counter() - started})
    if failures:
        print(f"estimate: {failures} rows violated estimator invariants", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# attack campaign


def _attack_job(args):
    model, acfg, benign, run_id = args
    result = run_attack(model, acfg, x_benign=benign)
    return run_id, result


def _benign_job(args):
    model, fast, accurate, x, run_id = args
    fast_est = ode.log_likelihood_forward(x, fast, model)
    acc_est = ode.log_likelihood_forward(x, accurate, model)
    comp = complexity_png(x, model.shape) if is_image_shape(model.shape) else None
    return run_id, fast_est, acc_est, comp


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def build_attack_config(cfg: ExperimentConfig, spec, run_seed: int) -> AttackConfig:
    return AttackConfig(
        kind=spec.kind,
        fast=cfg.fast_solver,
        accurate=cfg.accurate_solver,
        epsilon=spec.epsilon,
        lam=spec.lam,
        lr=spec.lr,
        max_steps=spec.max_steps,
        seed=run_seed,
        early_stop=spec.early_stop,
    )


def run_attack_campaign(cfg: ExperimentConfig, out_dir: Path) -> int:
    model = build_model(cfg)
    image = is_image_shape(model.shape)
    if cfg.dataset is None:
        raise ConfigError("dataset: attack campaigns need a benign dataset")
    data = build_dataset(cfg.dataset, model)
    if data.shape[0] == 0:
        raise ConfigError("dataset: no samples")
    if not cfg.attacks:
        raise ConfigError("attacks: no attacks configured")
    if not image:
        for spec in cfg.attacks:
            if spec.kind == "high_complexity":
                raise ConfigError(
                    "attacks: high_complexity is disabled for non-image models"
                )

    started = time.perf_counter()
    benign_jobs = []
    for i, x in enumerate(data):
        fast = cfg.fast_solver.with_seed(derive_seed(cfg.seed, 900, i))
        acc = cfg.accurate_solver.with_seed(derive_seed(cfg.seed, 901, i))
        benign_jobs.append((model, fast, acc, x, f"benign/{i:03d}"))
    benign_rows = _pool_map(_benign_job, benign_jobs, cfg.workers)

    jobs = []
    for a_idx, spec in enumerate(cfg.attacks):
        kind_id = ATTACK_KINDS.index(spec.kind)
        for k in range(cfg.samples_per_attack):
            run_seed = derive_seed(cfg.seed, a_idx, kind_id, k)
            acfg = build_attack_config(cfg, spec, run_seed)
            benign = data[k % data.shape[0]]
            run_id = f"{spec.kind}[{a_idx}]/{k:03d}"
            jobs.append((model, acfg, benign, run_id))
    results = _pool_map(_attack_job, jobs, cfg.workers)

    records = []
    lam_by_run = {}
    for run_id, fast_est, acc_est, comp in benign_rows:
        records.append(
            {
                "run_id": run_id,
                "attack": "benign",
                "lam": "",
                "fast": fast_est,
                "acc": acc_est,
                "comp": comp,
                "steps": 0,
                "converged": 1,
                "aborted": 0,
            }
        )
    traj_rows = []
    finals = []
    for (run_id, result), (_, acfg, _, _) in zip(results, jobs):
        records.append(
            {
                "run_id": run_id,
                "attack": result.kind,
                "lam": _f(acfg.lam) if result.kind == "high_complexity" else "",
                "fast": result.fast_final,
                "acc": result.accurate_final,
                "comp": result.complexity,
                "steps": result.steps_run,
                "converged": int(result.converged),
                "aborted": int(result.aborted),
                "extras": result.extras,
            }
        )
        for step, (obj, dinf) in enumerate(
            zip(result.objective_traj, result.delta_inf_traj)
        ):
            traj_rows.append(
                [run_id, str(step), _f(obj), _f(obj / model.dim), _f(dinf)]
            )
        finals.append((run_id, result))

    records.sort(key=lambda r: (r["attack"], r["run_id"]))
    rec_rows = []
    for r in records:
        rec_rows.append(
            [
                r["run_id"],
                r["attack"],
                r["lam"],
                _f(r["fast"].total),
                _f(r["acc"].total),
                _f(r["acc"].integral),
                _f(r["acc"].prior),
                _f(r["acc"].per_dim),
                _f(r["comp"]),
                str(model.dim),
                str(r["steps"]),
                str(r["converged"]),
                str(r["aborted"]),
            ]
        )
    header = [
        "run_id",
        "attack",
        "lambda",
        "logp_fast",
        "logp_acc",
        "integral_acc",
        "prior_acc",
        "per_dim_acc",
        "complexity",
        "dim",
        "steps",
        "converged",
        "aborted",
    ]
    write_csv(out_dir / "records.csv", header, rec_rows)
    traj_rows.sort(key=lambda r: (r[0], int(r[1])))
    write_csv(
        out_dir / "trajectories.csv",
        ["run_id", "step", "objective", "objective_per_dim", "delta_inf"],
        traj_rows,
    )

    finals_dir = _ensure_dir(out_dir / "finals")
    if image:
        for run_id, result in finals:
            name = run_id.replace("/", "_").replace("[", "_").replace("]", "")
            _export_png(finals_dir / f"{name}.png", result.x_final, model.shape)
    else:
        rows = [
            [run_id] + [_f(v) for v in result.x_final]
            for run_id, result in sorted(finals)
        ]
        write_csv(
            finals_dir / "finals.csv",
            ["run_id"] + [f"x{i}" for i in range(model.dim)],
            rows,
        )

    summary = _summarize_campaign(out_dir, model.dim, image)
    write_json(out_dir / "summary.json", summary)
    _plot_campaign(out_dir, image)
    write_json(out_dir / "timings.json", {"campaign_s": time.perf_counter() - started})
    return 0


def _summarize_campaign(out_dir: Path, dim: int, image: bool) -> dict:
    header, rows = read_csv(out_dir / "records.csv")
    col = {name: i for i, name in enumerate(header)}
    benign_logp = []
    benign_c = []
    pooled_logp = []
    pooled_c = []
    per_attack: dict[str, dict] = {}
    for r in rows:
        attack = r[col["attack"]]
        per_dim = float(r[col["per_dim_acc"]])
        comp = r[col["complexity"]]
        comp_v = float(comp) if comp else None
        if attack == "benign":
            benign_logp.append(per_dim)
            if comp_v is not None:
                benign_c.append(comp_v)
        stat = per_attack.setdefault(
            attack, {"n": 0, "mean_per_dim": 0.0, "mean_complexity": None, "_c": []}
        )
        stat["n"] += 1
        stat["mean_per_dim"] += per_dim
        if comp_v is not None:
            stat["_c"].append(comp_v)
        pooled_logp.append(per_dim)
        if comp_v is not None:
            pooled_c.append((per_dim, comp_v))
    for stat in per_attack.values():
        stat["mean_per_dim"] /= max(stat["n"], 1)
        if stat["_c"]:
            stat["mean_complexity"] = sum(stat["_c"]) / len(stat["_c"])
        del stat["_c"]

    summary = {"per_attack": per_attack, "n_rows": len(rows)}
    if image and benign_c and len(pooled_c) >= 3:
        p95_logp = float(np.percentile(benign_logp, 95))
        p95_c = float(np.percentile(benign_c, 95))
        joint = [
            (lp, c) for lp, c in pooled_c if lp > p95_logp and c > p95_c
        ]
        rho, p = _spearman([v[0] for v in pooled_c], [v[1] for v in pooled_c])
        summary.update(
            {
                "benign_p95_per_dim": p95_logp,
                "benign_p95_complexity": p95_c,
                "joint_high_region_count": len(joint),
                "joint_high_region_empty": not joint,
                "spearman_logp_complexity": {"rho": rho, "p": p},
            }
        )
    return summary


def _plot_campaign(out_dir: Path, image: bool) -> None:
    header, rows = read_csv(out_dir / "records.csv")
    col = {name: i for i, name in enumerate(header)}
    if image:
        series: dict[str, tuple[list, list]] = {}
        for r in rows:
            comp = r[col["complexity"]]
            if not comp:
                continue
            label = r[col["attack"]]
            xs, ys = series.setdefault(label, ([], []))
            xs.append(float(r[col["per_dim_acc"]]))
            ys.append(float(comp))
        if series:
            plots.scatter_with_cdf(
                out_dir / "scatter_cdf.svg", series,
                "accurate log p / D (nats)", "complexity C",
            )
    theader, trows = read_csv(out_dir / "trajectories.csv")
    tcol = {name: i for i, name in enumerate(theader)}
    first_runs: dict[str, str] = {}
    for r in trows:
        run_id = r[tcol["run_id"]]
        kind = run_id.split("[")[0]
        first_runs.setdefault(kind, run_id)
    series = {}
    for kind, run_id in sorted(first_runs.items()):
        pts = [
            (int(r[tcol["step"]]), float(r[tcol["objective_per_dim"]]))
            for r in trows
            if r[tcol["run_id"]] == run_id
        ]
        pts.sort()
        series[kind] = ([p[0] for p in pts], [p[1] for p in pts])
    if series:
        plots.line_chart(
            out_dir / "convergence.svg", series,
            "optimizer step", "objective / D (nats)",
            title="attack convergence (first run of each kind)",
        )


# ---------------------------------------------------------------------------
# solver comparison


def run_solver_compare(cfg: ExperimentConfig, out_dir: Path) -> int:
    model = build_model(cfg)
    sc = cfg.solver_compare
    regimes = {
        sc.regime_a.method: sc.regime_a,
        f"{sc.regime_b.method}_b" if sc.regime_b.method == sc.regime_a.method
        else sc.regime_b.method: sc.regime_b,
    }
    costs = {
        name: solver.n_intervals * solver.evals_per_interval
        for name, solver in regimes.items()
    }
    if len(set(costs.values())) > 1:
        print(
            f"warning: regimes have unequal evaluation cost: {costs}", file=sys.stderr
        )

    started = time.perf_counter()
    traj_rows = []
    gap_rows = []
    per_seed_gaps: dict[int, dict[str, float]] = {}
    for seed_idx in range(sc.seeds):
        for name, solver in regimes.items():
            run_seed = derive_seed(cfg.seed, 50, seed_idx)
            acfg = AttackConfig(
                kind="prior_only",
                fast=solver,
                accurate=cfg.accurate_solver,
                epsilon=sc.epsilon,
                lr=sc.lr,
                max_steps=sc.max_steps,
                seed=run_seed,
                early_stop=False,
            )
            result = run_attack(model, acfg)
            run_id = f"{name}/{seed_idx:03d}"
            for step, obj in enumerate(result.objective_traj):
                traj_rows.append([run_id, name, str(step), _f(obj), _f(obj / model.dim)])
            fast_total = result.fast_final.total
            acc_total = result.accurate_final.total
            gap = abs(fast_total - acc_total)
            per_seed_gaps.setdefault(seed_idx, {})[name] = gap
            gap_rows.append(
                [run_id, name, str(seed_idx), _f(fast_total), _f(acc_total), _f(gap)]
            )
    traj_rows.sort(key=lambda r: (r[0], int(r[2])))
    gap_rows.sort(key=lambda r: (r[0],))
    write_csv(
        out_dir / "trajectories.csv",
        ["run_id", "regime", "step", "objective", "objective_per_dim"],
        traj_rows,
    )
    write_csv(
        out_dir / "gaps.csv",
        ["run_id", "regime", "seed", "logp_fast_final", "logp_acc_final", "gap"],
        gap_rows,
    )
    name_a, name_b = list(regimes)
    agree = sum(
        1 for gaps in per_seed_gaps.values() if gaps[name_a] <= gaps[name_b]
    )
    summary = {
        "eval_cost": costs,
        "mean_gap": {
            name: float(np.mean([g[name] for g in per_seed_gaps.values()]))
            for name in regimes
        },
        "regime_a": name_a,
        "regime_b": name_b,
        "a_gap_le_b_seeds": agree,
        "n_seeds": sc.seeds,
    }
    write_json(out_dir / "summary.json", summary)

    header, trows = read_csv(out_dir / "trajectories.csv")
    tcol = {name: i for i, name in enumerate(header)}
    series = {}
    for name in regimes:
        per_step: dict[int, list] = {}
        for r in trows:
            if r[tcol["regime"]] == name:
                per_step.setdefault(int(r[tcol["step"]]), []).append(
                    float(r[tcol["objective_per_dim"]])
                )
        steps = sorted(per_step)
        series[name] = (steps, [float(np.mean(per_step[s])) for s in steps])
    plots.line_chart(
        out_dir / "convergence.svg", series,
        "optimizer step", "prior objective / D (nats)",
        title="prior-only attack under matched-cost solvers",
    )
    write_json(out_dir / "timings.json", {"solver_compare_s": time.perf_counter() - started})
    return 0


# ---------------------------------------------------------------------------
# black-box probes


def run_blackbox(cfg: ExperimentConfig, out_dir: Path) -> int:
    model = build_model(cfg)
    if not is_image_shape(model.shape):
        raise ConfigError("model: image model required")
    bb = cfg.blackbox
    if tuple(model.shape) != bb.shape:
        raise ConfigError(
            f"blackbox: model shape {tuple(model.shape)} != suite shape {bb.shape}"
        )
    started = time.perf_counter()
    rows = []
    png_dir = _ensure_dir(out_dir / "probes")
    for kind in BLACKBOX_KINDS:
        samples = blackbox_suite(
            kind, bb.shape, levels=bb.levels, seed=derive_seed(cfg.seed, 7),
            kernel_size=bb.kernel_size,
        )
        for level, x in enumerate(samples):
            acc = cfg.accurate_solver.with_seed(derive_seed(cfg.seed, 8, level))
            est = ode.log_likelihood_forward(x, acc, model)
            comp = complexity_png(x, bb.shape)
            rows.append(
                [
                    kind,
                    str(level),
                    _f(est.total),
                    _f(est.per_dim),
                    _f(est.integral),
                    _f(est.prior),
                    _f(comp),
                ]
            )
            _export_png(png_dir / f"{kind}_{level}.png", x, bb.shape)
    rows.sort(key=lambda r: (r[0], int(r[1])))
    write_csv(
        out_dir / "blackbox.csv",
        ["suite", "level", "logp_acc", "per_dim_acc", "integral", "prior", "complexity"],
        rows,
    )

    header, rows = read_csv(out_dir / "blackbox.csv")
    col = {name: i for i, name in enumerate(header)}
    summary: dict = {"suites": {}}
    pooled = []
    for kind in BLACKBOX_KINDS:
        sub = [r for r in rows if r[col["suite"]] == kind]
        sub.sort(key=lambda r: int(r[col["level"]]))
        logps = [float(r[col["per_dim_acc"]]) for r in sub]
        comps = [float(r[col["complexity"]]) for r in sub]
        pooled.extend(zip(logps, comps))
        inversions = sum(
            1 for a, b in zip(logps, logps[1:]) if b > a
        )
        summary["suites"][kind] = {
            "per_dim_logp": logps,
            "complexity": comps,
            "logp_increasing_inversions": inversions,
            "max_complexity": max(comps),
            "min_complexity": min(comps),
        }
    rho, p = _spearman([v[0] for v in pooled], [v[1] for v in pooled])
    summary["spearman_logp_complexity"] = {"rho": rho, "p": p}
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "timings.json", {"blackbox_s": time.perf_counter() - started})
    return 0


# ---------------------------------------------------------------------------
# training


def run_train(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.model.type != "train":
        raise ConfigError("model.type: train command expects a train model spec")
    sde = build_sde(cfg)
    spec = cfg.model.train
    ds_spec = spec["dataset"]
    data = build_dataset(ds_spec)
    shape = (ds_spec.channels, ds_spec.height, ds_spec.width)
    net = TinyScoreNet(
        data.shape[1], hidden=spec["hidden"], sde=sde, shape=shape, seed=spec["seed"]
    )
    started = time.perf_counter()
    aborted = False
    losses = []
    try:
        result = train_dsm(
            data,
            net,
            steps=spec["steps"],
            batch_size=spec["batch_size"],
            lr=spec["lr"],
            seed=spec["seed"],
            t0=cfg.fast_solver.t0,
        )
        losses = result.losses
    except TrainingDiverged as err:
        # Parameters still hold the last finite state; keep them.
        print(f"train: {err}; saving last good checkpoint", file=sys.stderr)
        losses = getattr(err, "losses", [])
        aborted = True
    save_checkpoint(out_dir / "checkpoint.bin", net)
    write_csv(
        out_dir / "loss.csv",
        ["step", "loss"],
        [[str(i), _f(v)] for i, v in enumerate(losses)],
    )
    write_json(
        out_dir / "timings.json",
        {"train_s": time.perf_counter() - started, "aborted": aborted},
    )
    return 1 if aborted else 0
