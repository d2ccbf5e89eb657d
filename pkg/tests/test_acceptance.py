"""Acceptance criteria, each checked at its stated tolerance.

The ablation (five variants x three seeds at the default 1600 steps) is
trained once into ``$BELIEFRL_ACCEPTANCE_DIR`` (default ``runs/acceptance``
in the repository) and reused on later runs when the config hash matches.
A cold start takes roughly half an hour on one core; ``beliefrl ablate
--out runs/acceptance`` builds the same cache.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from beliefrl.checks import run_all
from beliefrl.config import RunConfig
from beliefrl.evaluation import spearman
from beliefrl.experiments import ablate
from beliefrl.policies import VARIANTS, PolicyConfig
from beliefrl.report import write_ablation_outputs
from beliefrl.training import TrainConfig, recompose_total, train_run

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_ID = {"mlp": 0.909, "summary": 0.924, "belief": 0.919}
REFERENCE_OOD_BELIEF = 0.650
RECURRENT = ("summary", "belief", "belief_gated", "belief_privileged")


@pytest.fixture(scope="session")
def suite():
    out = Path(os.environ.get("BELIEFRL_ACCEPTANCE_DIR", ROOT / "runs" / "acceptance"))
    cfg = RunConfig().validate()
    res = ablate(cfg, out)
    assert not res.failures, res.failures
    write_ablation_outputs(res, out)
    return res


def _id(res, v, regime="mean"):
    return res.evaluations[v].id_report.mean[regime]


def _ood(res, v):
    return res.evaluations[v].ood_report.mean["mean"]


def test_criterion_1_in_distribution(suite, record_criterion):
    means = {v: _id(suite, v) for v in REFERENCE_ID}
    within = {v: abs(means[v] - REFERENCE_ID[v]) <= 0.03 for v in REFERENCE_ID}
    beats_mlp = means["summary"] > means["mlp"] and means["belief"] > means["mlp"]
    vh_b, vh_s = _id(suite, "belief", "very_hard"), _id(suite, "summary", "very_hard")
    vh_ok = vh_b >= vh_s - 0.01
    minutes = {v: sum(suite.manifests[v].durations.values()) / 60 for v in suite.manifests}
    fast = all(m < 15 for m in minutes.values())
    ok = all(within.values()) and beats_mlp and vh_ok and fast
    detail = (
        "ID mean " + ", ".join(f"{v}={means[v]:.3f} (target {REFERENCE_ID[v]})" for v in REFERENCE_ID)
        + f"; recurrent > mlp: {beats_mlp}; very-hard belief {vh_b:.3f} vs summary {vh_s:.3f} - 0.01"
        + f"; max train time {max(minutes.values()):.1f} min/variant"
    )
    record_criterion("1", ok, detail)
    assert ok, detail


def test_criterion_2_ood_shift(suite, record_criterion):
    b, s, m = _ood(suite, "belief"), _ood(suite, "summary"), _ood(suite, "mlp")
    ok = b > s > m and abs(b - REFERENCE_OOD_BELIEF) <= 0.03
    detail = f"OOD mean belief={b:.3f} summary={s:.3f} mlp={m:.3f}; need belief > summary > mlp and |belief - 0.650| <= 0.03"
    record_criterion("2", ok, detail)
    assert ok, detail


def test_criterion_3_calibration_and_privileged(suite, record_criterion):
    eces = {v: suite.evaluations[v].ood_report.ece_mean for v in RECURRENT}
    ece_ok = all(eces["belief"] <= eces[v] + 0.005 for v in RECURRENT if v != "belief")
    fam = {v: _ood(suite, v) for v in ("belief", "belief_gated", "belief_privileged")}
    priv_ok = all(fam["belief_privileged"] < fam[v] for v in ("belief", "belief_gated"))
    ok = ece_ok and priv_ok
    detail = (
        "OOD ECE " + ", ".join(f"{v}={e:.4f}" for v, e in eces.items())
        + f" (belief lowest within 0.005: {ece_ok}); OOD return "
        + ", ".join(f"{v}={r:.3f}" for v, r in fam.items())
        + f" (privileged lowest: {priv_ok})"
    )
    record_criterion("3", ok, detail)
    assert ok, detail


def test_criterion_4_sweep_trends(suite, record_criterion):
    bel, summ = suite.sweeps["belief"], suite.sweeps["summary"]
    sig = np.asarray(bel.sigmas)
    assert list(sig) == list(summ.sigmas) and len(sig) == 16
    low, high = sig <= 0.6 + 1e-9, sig > 1.2 + 1e-9
    gap = bel.mean_return() - summ.mean_return()
    a = float(gap[low].mean()) < 0
    b = float(gap[high].mean()) > 0
    rho = spearman(sig, bel.mean_latency())
    c = rho > 0
    ok = a and b and c
    detail = (
        f"(a) mean belief-summary gap for sigma<=0.6 = {gap[low].mean():+.4f} (need < 0): {a}; "
        f"(b) gap for sigma>1.2 = {gap[high].mean():+.4f} (need > 0): {b}; "
        f"(c) Spearman(sigma, belief latency) = {rho:.3f} (need > 0): {c}"
    )
    record_criterion("4", ok, detail)
    assert ok, detail


def test_criterion_5_property_suite(record_criterion):
    results = run_all(quick=False)
    failed = [r.name for r in results if not r.passed]
    runtime = results[-1].measured
    ok = not failed
    detail = f"{len(results) - len(failed)}/{len(results)} checks passed in {runtime:.0f} s" + (f"; failed: {failed}" if failed else "")
    for r in results:
        print(r.line())
    record_criterion("5", ok, detail)
    assert ok, detail


def test_criterion_6_loss_recomposition(record_criterion):
    checked, bad = 0, []
    for v in VARIANTS:
        cfg = TrainConfig(opt_steps=25, batch_episodes=64, snapshot_every=0, policy=PolicyConfig(variant=v))
        for seed in (0, 1, 2):
            for row in train_run(cfg, seed).metrics:
                checked += 1
                if recompose_total(row, cfg.c_v, cfg.c_e) != row["total"]:
                    bad.append((v, seed, int(row["step"])))
    ok = not bad
    detail = f"{checked} logged steps over {len(VARIANTS)} variants x 3 seeds, exact mismatches: {len(bad)}"
    record_criterion("6", ok, detail)
    assert ok, detail
