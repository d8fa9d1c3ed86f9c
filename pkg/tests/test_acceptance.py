"""Acceptance gate: one test per criterion, each at its stated tolerance.

Campaign-scale criteria run the CI-sized smoke variant (5 samples per
attack, 100 optimizer steps); the corresponding full campaigns live in
configs/.  Each test finishes by printing a CRITERION line (visible with
``pytest -rA``).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from pflab import autodiff as ad
from pflab import ode
from pflab.attacks import AttackConfig, blackbox_suite, run_attack
from pflab.complexity import complexity_png, hf_energy
from pflab.gmm import GaussianMixture, AnalyticGmmScore
from pflab.harness import jobs
from pflab.harness.cli import main as cli_main
from pflab.harness.config import parse_config
from pflab.scorenet import TinyScoreNet, train_dsm
from pflab.toydata import toy_image_dataset

from helpers import ZeroScore, central_diff_grad, find_modes

ACC = ode.SolverConfig(step_size=0.001, divergence=ode.EXACT)
FAST_FIXED_Z = ode.SolverConfig(
    step_size=0.05, divergence=ode.HUTCHINSON, z=ode.ZPolicy("fixed", 7)
)
FAST_EXACT = ode.SolverConfig(step_size=0.05, divergence=ode.EXACT)
FAST_FRESH_Z = ode.SolverConfig(
    step_size=0.05, divergence=ode.HUTCHINSON, z=ode.ZPolicy("per_step", 0)
)


def report(line):
    print(line)


@pytest.fixture(scope="session")
def gmm3_model():
    # Zero-mean 3-component mixture: estimator-exactness backbone.
    gmm = GaussianMixture(
        [0.4, 0.4, 0.2], [[1.0, 0.5], [-1.0, -0.5], [0.0, 0.0]], [0.55, 0.4, 0.7]
    )
    return AnalyticGmmScore(gmm)


@pytest.fixture(scope="session")
def gmm2_centered():
    gmm = GaussianMixture([0.8, 0.2], [[-0.25, -0.1625], [1.0, 0.65]], [0.7, 0.45])
    return AnalyticGmmScore(gmm)


@pytest.fixture(scope="session")
def gmm2_attack():
    gmm = GaussianMixture([0.9, 0.1], [[-0.9, -0.7], [0.42, 0.28]], [0.22, 0.5])
    return AnalyticGmmScore(gmm)


@pytest.fixture(scope="session")
def toy8_net():
    data = toy_image_dataset(256, 8, 8, seed=11)
    net = TinyScoreNet(64, hidden=(48, 48), shape=(1, 8, 8), seed=7)
    train_dsm(data, net, steps=4000, batch_size=64, lr=2e-3, seed=7)
    return net


@pytest.fixture(scope="session")
def gmm_campaign(tmp_path_factory):
    """Smoke attack campaign on the analytic attack mixture (criterion 5 pool)."""
    out = tmp_path_factory.mktemp("gmm_campaign")
    cfg = parse_config(
        {
            "schema_version": 1,
            "kind": "attack",
            "seed": 0,
            "output_dir": str(out),
            "model": {
                "type": "gmm",
                "weights": [0.9, 0.1],
                "means": [[-0.9, -0.7], [0.42, 0.28]],
                "stds": [0.22, 0.5],
            },
            "dataset": {"type": "gmm_samples", "n": 6, "seed": 42},
            "fast_solver": {"step_size": 0.05, "divergence": "exact"},
            "accurate_solver": {"step_size": 0.001, "divergence": "exact"},
            "attacks": [
                {"kind": "unrestricted", "max_steps": 500},
                {"kind": "random_region", "epsilon": 0.16, "max_steps": 200},
                {"kind": "near_sample", "epsilon": 0.06, "max_steps": 200},
                {"kind": "prior_only", "epsilon": 0.16, "max_steps": 200},
                {"kind": "reverse_integration", "epsilon": 0.16, "max_steps": 200},
            ],
            "samples_per_attack": 3,
        }
    )
    cfg.workers = 2
    assert jobs.run_attack_campaign(cfg, out) == 0
    return out


@pytest.fixture(scope="session")
def image_campaign(tmp_path_factory):
    """Smoke variant of the criterion-7 campaign: 5 samples, 100 steps."""
    out = tmp_path_factory.mktemp("image_campaign")
    cfg = parse_config(json.load(open("configs/image_attacks.json")))
    cfg.output_dir = str(out)
    cfg.workers = 2
    cfg.apply_smoke()
    assert jobs.run_attack_campaign(cfg, out) == 0
    return out


@pytest.fixture(scope="session")
def blackbox_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("blackbox")
    cfg = parse_config(json.load(open("configs/blackbox.json")))
    cfg.output_dir = str(out)
    assert jobs.run_blackbox(cfg, out) == 0
    return out


def _records(out_dir):
    header, rows = jobs.read_csv(out_dir / "records.csv")
    col = {n: i for i, n in enumerate(header)}
    return col, rows


def test_criterion_01_estimator_exactness(gmm3_model):
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    errs = []
    for _ in range(20):
        x0 = gmm3_model.gmm.sample(1, rng)[0]
        est = ode.log_likelihood_forward(x0, ACC, gmm3_model)
        errs.append(abs(est.total - gmm3_model.logp0(x0)))
    elapsed = time.perf_counter() - started
    assert max(errs) < 1e-3
    assert elapsed < 120
    report(
        f"CRITERION 1 PASS: accurate forward estimator within 1e-3 of closed-form "
        f"log p0 at 20 points (max err {max(errs):.2e}, {elapsed:.0f}s)"
    )


def test_criterion_02_forward_reverse_consistency(gmm3_model):
    started = time.perf_counter()
    rng = np.random.default_rng(202)
    max_idiff = 0.0
    max_round = 0.0
    for _ in range(20):
        x0 = gmm3_model.gmm.sample(1, rng)[0]
        _, integral, _, latent = ode.forward_terms(ad.constant(x0), ACC, gmm3_model)
        est, decoded = ode.log_likelihood_reverse(
            np.asarray(latent.value), ACC, gmm3_model
        )
        max_idiff = max(max_idiff, abs(float(integral.value) - est.integral))
        max_round = max(max_round, float(np.abs(decoded - x0).max()))
    elapsed = time.perf_counter() - started
    assert max_idiff < 1e-3
    assert max_round < 1e-4
    assert elapsed < 120
    report(
        f"CRITERION 2 PASS: |I_fw - I_rev| < 1e-3 (max {max_idiff:.2e}) and "
        f"roundtrip < 1e-4 (max {max_round:.2e}) on 20 paired states ({elapsed:.0f}s)"
    )


def test_criterion_03_hutchinson_unbiasedness(gmm3_model):
    rng = np.random.default_rng(303)
    for probe in range(5):
        x = gmm3_model.gmm.sample(1, rng)[0]
        t = float(rng.uniform(0.05, 0.95))
        exact = float(ode.divergence_exact(ad.constant(x), t, gmm3_model).value)
        vals = np.array(
            [
                float(
                    ode.divergence_hutchinson(
                        ad.constant(x), t, gmm3_model,
                        ode.rademacher(2, seed=9000 + probe, counter=k),
                    ).value
                )
                for k in range(10_000)
            ]
        )
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - exact) <= 3 * se + 1e-12
    diag_model = ZeroScore(6)
    expected = -0.5 * diag_model.sde.beta(0.7) * 6
    for k in range(16):
        z = ode.rademacher(6, seed=k)
        got = float(
            ode.divergence_hutchinson(ad.constant(np.ones(6)), 0.7, diag_model, z).value
        )
        assert got == pytest.approx(expected, rel=1e-12)
    report(
        "CRITERION 3 PASS: Hutchinson mean within 3 MC standard errors of the exact "
        "divergence at 5 random (x,t); diagonal-Jacobian case exact for every z"
    )


def test_criterion_04_gradient_fidelity(gmm3_model):
    x0 = np.array([0.35, -0.2])
    with ad.Tape() as tape:
        xv = tape.leaf(x0)
        total, _, _, _ = ode.forward_terms(xv, FAST_FIXED_Z, gmm3_model)
        (grad,) = ad.gradient(total, [xv])
    fd = central_diff_grad(
        lambda v: ode.log_likelihood_forward(v, FAST_FIXED_Z, gmm3_model).total,
        x0,
        h=1e-5,
    )
    rel = float(np.max(np.abs(np.asarray(grad.value) - fd) / np.abs(fd)))
    assert rel < 1e-4
    report(
        f"CRITERION 4 PASS: fast-solver (21-step RK4, fixed z) gradient matches "
        f"central finite differences, max rel err {rel:.2e}"
    )


def test_criterion_05_fast_accurate_transfer(gmm_campaign, crit6_campaign):
    worst = 0.0
    n = 0
    for out in (gmm_campaign, crit6_campaign):
        col, rows = _records(out)
        for r in rows:
            if r[col["attack"]] == "benign":
                continue
            gap = abs(
                float(r[col["logp_fast"]]) - float(r[col["logp_acc"]])
            ) / float(r[col["dim"]])
            worst = max(worst, gap)
            n += 1
    assert n >= 20
    assert worst < 0.1
    report(
        f"CRITERION 5 PASS: fast-to-accurate transfer below 0.1 nats/dim over "
        f"{n} analytic-model attack finals (worst {worst:.2e})"
    )


@pytest.fixture(scope="session")
def crit6_campaign(tmp_path_factory, gmm2_centered):
    out = tmp_path_factory.mktemp("mode_seek")
    cfg = parse_config(json.load(open("configs/gmm_mode_seek.json")))
    cfg.output_dir = str(out)
    cfg.workers = 2
    assert jobs.run_attack_campaign(cfg, out) == 0
    return out


def test_criterion_06_mode_seeking(crit6_campaign, gmm2_centered, tmp_path):
    started = time.perf_counter()
    modes = find_modes(gmm2_centered, gmm2_centered.gmm.means)
    col, rows = _records(crit6_campaign)
    finals_header, finals_rows = jobs.read_csv(crit6_campaign / "finals" / "finals.csv")
    fcol = {n: i for i, n in enumerate(finals_header)}
    ok = 0
    total = 0
    for r in finals_rows:
        if not r[fcol["run_id"]].startswith("unrestricted"):
            continue
        total += 1
        x = np.array([float(r[fcol["x0"]]), float(r[fcol["x1"]])])
        dists = [np.linalg.norm(x - m) for m, _ in modes]
        nearest = int(np.argmin(dists))
        rec = next(
            rr for rr in rows if rr[col["run_id"]] == r[fcol["run_id"]]
        )
        gap = abs(float(rec[col["logp_acc"]]) - modes[nearest][1])
        if dists[nearest] < 0.1 and gap < 0.01:
            ok += 1
    elapsed = time.perf_counter() - started
    assert total == 10
    assert ok >= 8
    report(
        f"CRITERION 6 PASS: unrestricted attack hit a component mean within 0.1 "
        f"and 0.01 nats of its mode density on {ok}/10 seeds"
    )


def test_criterion_07_central_claim_smoke(image_campaign, blackbox_run):
    col, rows = _records(image_campaign)
    benign_logp = []
    benign_c = []
    pooled = []
    for r in rows:
        per_dim = float(r[col["per_dim_acc"]])
        comp = float(r[col["complexity"]])
        if r[col["attack"]] == "benign":
            benign_logp.append(per_dim)
            benign_c.append(comp)
        pooled.append((per_dim, comp))
    bheader, brows = jobs.read_csv(blackbox_run / "blackbox.csv")
    bcol = {n: i for i, n in enumerate(bheader)}
    for r in brows:
        pooled.append(
            (float(r[bcol["per_dim_acc"]]), float(r[bcol["complexity"]]))
        )
    p95_logp = float(np.percentile(benign_logp, 95))
    p95_c = float(np.percentile(benign_c, 95))
    joint = [(lp, c) for lp, c in pooled if lp > p95_logp and c > p95_c]
    rho, p = stats.spearmanr([v[0] for v in pooled], [v[1] for v in pooled])
    assert not joint, f"high-likelihood high-complexity region not empty: {joint}"
    assert rho < 0
    assert p < 0.01
    report(
        f"CRITERION 7 PASS (smoke): joint region above benign P95s is empty over "
        f"{len(pooled)} pooled outcomes; Spearman(logp, C) = {rho:.3f} (p = {p:.1e})"
    )


def test_criterion_08_lambda_tradeoff(toy8_net):
    bench = toy_image_dataset(5, 8, 8, seed=99)
    lams = (0.1, 0.3, 1.0, 3.0)
    for s_idx in range(5):
        hfs = []
        lps = []
        for lam in lams:
            cfg = AttackConfig(
                kind="high_complexity",
                fast=FAST_FRESH_Z,
                accurate=ACC,
                epsilon=0.06,
                lam=lam,
                max_steps=800,
                seed=40 + s_idx,
            )
            res = run_attack(toy8_net, cfg, x_benign=bench[s_idx])
            hfs.append(hf_energy(res.x_final, (1, 8, 8)))
            lps.append(res.accurate_final.total)
        hf_inv = sum(1 for a, b in zip(hfs, hfs[1:]) if b < a)
        lp_inv = sum(1 for a, b in zip(lps, lps[1:]) if b > a)
        assert hf_inv <= 1, f"sample {s_idx}: hf inversions {hf_inv} ({hfs})"
        assert lp_inv <= 1, f"sample {s_idx}: logp inversions {lp_inv} ({lps})"
    report(
        "CRITERION 8 PASS: final hf energy nondecreasing and accurate log p "
        "nonincreasing across lambda in {0.1, 0.3, 1, 3} (<=1 inversion each, 5 samples)"
    )


def test_criterion_09_prior_only_parity(gmm2_centered):
    agree = 0
    for seed in range(10):
        rr = run_attack(
            gmm2_centered,
            AttackConfig(
                kind="random_region", fast=FAST_EXACT, accurate=ACC,
                epsilon=0.16, max_steps=200, seed=seed,
            ),
        )
        po = run_attack(
            gmm2_centered,
            AttackConfig(
                kind="prior_only", fast=FAST_EXACT, accurate=ACC,
                epsilon=0.16, max_steps=200, seed=seed,
            ),
        )
        assert np.array_equal(rr.center, po.center)
        if abs(rr.accurate_final.total - po.accurate_final.total) < 0.5:
            agree += 1
    assert agree >= 8
    report(
        f"CRITERION 9 PASS: prior-only final accurate log p within 0.5 nats of the "
        f"paired random-region attack on {agree}/10 seeds"
    )


def test_criterion_10_solver_comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("solver_compare")
    cfg = parse_config(json.load(open("configs/solver_compare.json")))
    cfg.output_dir = str(out)
    assert jobs.run_solver_compare(cfg, out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_seeds"] == 5
    assert summary["a_gap_le_b_seeds"] >= 4
    report(
        f"CRITERION 10 PASS: RK4 over-estimation gap <= Euler's at matched cost on "
        f"{summary['a_gap_le_b_seeds']}/5 seeds "
        f"(mean gaps {summary['mean_gap']})"
    )


def test_criterion_11_blackbox_trends(blackbox_run):
    summary = json.loads((blackbox_run / "summary.json").read_text())
    mono = summary["suites"]["monochrome"]
    noise = summary["suites"]["uniform_noise"]
    assert mono["max_complexity"] < 0.05
    assert 0.9 <= noise["complexity"][-1] <= 1.1
    assert noise["logp_increasing_inversions"] <= 1
    drop = noise["per_dim_logp"][0] - noise["per_dim_logp"][-1]
    assert drop > 0
    report(
        f"CRITERION 11 PASS: monochrome C < 0.05 (max {mono['max_complexity']:.3f}); "
        f"uniform-noise C at max magnitude {noise['complexity'][-1]:.3f} in [0.9, 1.1]; "
        f"log p decreasing in magnitude with "
        f"{noise['logp_increasing_inversions']} inversion(s)"
    )


def test_criterion_12_cli_determinism(tmp_path):
    est_cfg = {
        "schema_version": 1,
        "kind": "estimate",
        "seed": 3,
        "output_dir": "",
        "model": {
            "type": "gmm",
            "weights": [0.9, 0.1],
            "means": [[-0.9, -0.7], [0.42, 0.28]],
            "stds": [0.22, 0.5],
        },
        "dataset": {"type": "gmm_samples", "n": 2, "seed": 5},
        "fast_solver": {"step_size": 0.05, "divergence": "exact"},
        "accurate_solver": {"step_size": 0.005, "divergence": "exact"},
    }
    atk_cfg = {
        "schema_version": 1,
        "kind": "attack",
        "seed": 1,
        "output_dir": "",
        "model": est_cfg["model"],
        "dataset": {"type": "gmm_samples", "n": 2, "seed": 8},
        "fast_solver": {"step_size": 0.05, "divergence": "exact"},
        "accurate_solver": {"step_size": 0.005, "divergence": "exact"},
        "attacks": [{"kind": "prior_only", "epsilon": 0.16, "max_steps": 10}],
        "samples_per_attack": 2,
    }
    sc_cfg = {
        "schema_version": 1,
        "kind": "solver_compare",
        "seed": 2,
        "output_dir": "",
        "model": est_cfg["model"],
        "accurate_solver": {"step_size": 0.005, "divergence": "exact"},
        "solver_compare": {
            "regime_a": {"step_size": 0.05, "divergence": "exact"},
            "regime_b": {"method": "euler", "step_size": 0.02, "divergence": "exact"},
            "seeds": 1,
            "max_steps": 8,
        },
    }
    bb_cfg = {
        "schema_version": 1,
        "kind": "blackbox",
        "seed": 0,
        "output_dir": "",
        "model": {
            "type": "train",
            "hidden": [8, 8],
            "steps": 30,
            "batch_size": 8,
            "lr": 0.002,
            "seed": 4,
            "dataset": {"type": "toy_images", "n": 16, "height": 8, "width": 8,
                        "channels": 1, "seed": 2},
        },
        "accurate_solver": {"step_size": 0.01, "divergence": "exact"},
        "blackbox": {"height": 8, "width": 8, "channels": 1, "levels": 2,
                     "kernel_size": 8},
    }
    tr_cfg = {
        "schema_version": 1,
        "kind": "train",
        "seed": 4,
        "output_dir": "",
        "model": bb_cfg["model"],
    }
    checks = {
        "estimate": (est_cfg, ["estimates.csv"]),
        "attack": (atk_cfg, ["records.csv", "trajectories.csv"]),
        "solver-compare": (sc_cfg, ["trajectories.csv", "gaps.csv"]),
        "blackbox": (bb_cfg, ["blackbox.csv"]),
        "train": (tr_cfg, ["loss.csv", "checkpoint.bin"]),
    }
    for command, (obj, artifacts) in checks.items():
        paths = []
        for run in ("x", "y"):
            out = tmp_path / f"{command}_{run}"
            obj["output_dir"] = str(out)
            cfg_path = tmp_path / f"{command}_{run}.json"
            cfg_path.write_text(json.dumps(obj))
            assert cli_main([command, "--config", str(cfg_path)]) == 0
            paths.append(out)
        for name in artifacts:
            a = (paths[0] / name).read_bytes()
            b = (paths[1] / name).read_bytes()
            assert a == b, f"{command}: {name} differs between reruns"
    report(
        "CRITERION 12 PASS: every CLI command reproduces byte-identical artifacts "
        "under identical config and seed"
    )
