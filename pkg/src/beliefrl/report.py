"""Delimited outputs and markdown tables.

Every file starts with ``#`` comment lines carrying the config hash and the
seed list so a table can always be traced back to the run that made it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .evaluation import EvalReport
from .experiments import AblationResult, RunEvaluation, SweepResult

LABELS = {
    "mlp": "MLP (memoryless)",
    "summary": "RWKV-style summary state",
    "belief": "Belief-state RWKV-style",
    "belief_gated": "Belief-state + gated memory",
    "belief_privileged": "Belief-state + privileged targets",
    "rwkv_belief": "Belief-state RWKV block",
}


def _header(fh, config_hash: str, seeds, extra: list[str] | None = None) -> None:
    fh.write(f"# config_hash={config_hash}\n")
    fh.write(f"# seeds={','.join(str(s) for s in seeds)}\n")
    for line in extra or []:
        fh.write(f"# {line}\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_eval_csv(path: Path | str, ev: RunEvaluation, seeds, regime_bounds: dict[str, tuple[float, float]]) -> Path:
    """One row per regime (ID regimes, then the OOD range if evaluated)."""
    path = Path(path)
    rep = ev.id_report
    with path.open("w", newline="") as fh:
        _header(fh, rep.config_hash, seeds, [f"variant={ev.variant}"])
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "regime", "sigma_lo", "sigma_hi", "mean_return", "std_return", "mean_latency", "episodes_per_seed", "ece_mean", "ece_std", "error"])
        for prot, r in (("id", rep), ("ood", ev.ood_report)):
            if r is None:
                continue
            for name in r.regimes:
                lo, hi = regime_bounds[f"{prot}:{name}"]
                n = int(np.mean([e.counts[name] for e in r.per_seed]))
                w.writerow([prot, name, lo, hi, _fmt(r.mean[name]), _fmt(r.std[name]), _fmt(r.latency[name]), n, _fmt(r.ece_mean), _fmt(r.ece_std), ""])
        for seed, msg in sorted(ev.errors.items()):
            w.writerow(["error", f"seed{seed}"] + [""] * 8 + [msg])
    return path


def write_calibration_csv(path: Path | str, evals: dict[str, RunEvaluation], config_hash: str, seeds) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        _header(fh, config_hash, seeds)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "protocol", "seed", "bin_lo", "bin_hi", "conf_mean", "accuracy", "count", "ece", "committed_fraction"])
        for v, ev in evals.items():
            for prot, rep in (("id", ev.id_report), ("ood", ev.ood_report)):
                if rep is None:
                    continue
                for se in rep.per_seed:
                    cal = se.calibration
                    if cal is None:
                        continue
                    for b in range(cal.counts.size):
                        w.writerow(
                            [v, prot, se.seed, _fmt(cal.bin_edges[b]), _fmt(cal.bin_edges[b + 1]), _fmt(cal.conf_mean[b]), _fmt(cal.accuracy[b]), int(cal.counts[b]), _fmt(cal.ece), _fmt(cal.committed_fraction)]
                        )
    return path


def write_sweep_csv(path: Path | str, sweeps: dict[str, SweepResult], config_hash: str, seeds) -> Path:
    """One row per (variant, sigma), averaged over seeds."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        _header(fh, config_hash, seeds)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "sigma", "mean_return", "std_return", "mean_latency", "episodes_per_seed"])
        for v, sw in sweeps.items():
            mr, sd, ml = sw.mean_return(), sw.std_return(), sw.mean_latency()
            n = next(iter(sw.per_seed.values()))[0].episodes
            for i, s in enumerate(sw.sigmas):
                w.writerow([v, _fmt(s), _fmt(mr[i]), _fmt(sd[i]), _fmt(ml[i]), n])
    return path


def _pm(rep: EvalReport, key: str) -> str:
    return f"{rep.mean[key]:.3f} ± {rep.std[key]:.3f}"


def markdown_tables(evals: dict[str, RunEvaluation], config_hash: str, seeds, eval_cfg=None) -> str:
    lines = [f"<!-- config_hash={config_hash} seeds={','.join(str(s) for s in seeds)} -->", ""]
    if eval_cfg is not None:
        lines += [
            f"Regimes: hard σ∈[{eval_cfg.hard[0]}, {eval_cfg.hard[1]}], very-hard σ∈[{eval_cfg.very_hard[0]}, {eval_cfg.very_hard[1]}], "
            f"OOD σ∈U({eval_cfg.ood[0]}, {eval_cfg.ood[1]}); {eval_cfg.episodes} episodes per seed; ECE with {eval_cfg.n_bins} bins.",
            "",
        ]
    lines += ["### In-distribution returns", "", "| Model | Mean return | Hard return | Very-hard return | Latency |", "|---|---|---|---|---|"]
    for v, ev in evals.items():
        r = ev.id_report
        lines.append(f"| {LABELS.get(v, v)} | {_pm(r, 'mean')} | {_pm(r, 'hard')} | {_pm(r, 'very_hard')} | {r.latency['mean']:.2f} |")
    ood = {v: ev for v, ev in evals.items() if ev.ood_report is not None}
    if ood:
        lines += ["", "### Held-out noise shift", "", "| Model | OOD mean return | OOD very-hard return |", "|---|---|---|"]
        for v, ev in ood.items():
            r = ev.ood_report
            # The OOD range is a single regime, so both columns coincide.
            lines.append(f"| {LABELS.get(v, v)} | {_pm(r, 'mean')} | {_pm(r, 'mean')} |")
        lines += ["", "### Ablation and calibration", "", "| Model | ID return | OOD return | ID ECE | OOD ECE |", "|---|---|---|---|---|"]
        for v, ev in ood.items():
            if v == "mlp":
                continue
            a, b = ev.id_report, ev.ood_report
            lines.append(f"| {LABELS.get(v, v)} | {a.mean['mean']:.3f} | {b.mean['mean']:.3f} | {a.ece_mean:.3f} | {b.ece_mean:.3f} |")
    errs = {v: ev.errors for v, ev in evals.items() if ev.errors}
    if errs:
        lines += ["", "### Errors", ""]
        for v, e in errs.items():
            for seed, msg in e.items():
                lines.append(f"- {v} seed {seed}: {msg}")
    return "\n".join(lines) + "\n"


def sweep_markdown(sweeps: dict[str, SweepResult]) -> str:
    if not sweeps:
        return ""
    variants = list(sweeps)
    sigmas = sweeps[variants[0]].sigmas
    lines = ["### Noise sweep (mean return / latency)", "", "| σ | " + " | ".join(LABELS.get(v, v) for v in variants) + " |", "|---" * (len(variants) + 1) + "|"]
    for i, s in enumerate(sigmas):
        cells = [f"{sweeps[v].mean_return()[i]:.3f} / {sweeps[v].mean_latency()[i]:.2f}" for v in variants]
        lines.append(f"| {s:.1f} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_ablation_outputs(res: AblationResult, out: Path | str, figures: bool = True) -> list[Path]:
    out = Path(out)
    cfg = res.config
    h = cfg.config_hash()
    seeds = list(cfg.seeds)
    written = []
    bounds = {f"id:{r.name}": (r.sigma_lo, r.sigma_hi) for r in cfg.eval.regimes(cfg.env)}
    bounds["ood:mean"] = cfg.eval.ood
    for v, ev in res.evaluations.items():
        written.append(write_eval_csv(out / f"{v}_eval.csv", ev, seeds, bounds))
    written.append(write_calibration_csv(out / "calibration.csv", res.evaluations, h, seeds))
    if res.sweeps:
        written.append(write_sweep_csv(out / "sweep.csv", res.sweeps, h, seeds))
    md = markdown_tables(res.evaluations, h, seeds, cfg.eval) + "\n" + sweep_markdown(res.sweeps)
    if res.failures:
        md += "\n### Failed variants\n\n" + "".join(f"- {v}: {m}\n" for v, m in res.failures.items())
    (out / "summary.md").write_text(md)
    written.append(out / "summary.md")
    if figures:
        from . import figures as figs

        written += figs.render_all(res, out)
    return written
