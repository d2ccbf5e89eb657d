"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import LABELS  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(scale: float = 1.0, ratio: float | None = None) -> tuple[float, float]:
    width = 6.5 * scale
    ratio = ratio if ratio is not None else (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(sweeps, path: Path | str, train_hi: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_r, ax_l) = plt.subplots(1, 2, figsize=figsize(1.0, 0.4))
        for v, sw in sweeps.items():
            s = np.asarray(sw.sigmas)
            mr, sd = sw.mean_return(), sw.std_return()
            ax_r.plot(s, mr, marker="o", ms=3, label=LABELS.get(v, v))
            ax_r.fill_between(s, mr - sd, mr + sd, alpha=0.15)
            ax_l.plot(s, sw.mean_latency(), marker="o", ms=3, label=LABELS.get(v, v))
        for ax in (ax_r, ax_l):
            ax.set_xlabel("evaluation noise σ")
            if train_hi is not None:
                ax.axvline(train_hi, color="0.5", ls="--", lw=0.8)
        ax_r.set_ylabel("mean return")
        ax_l.set_ylabel("decision latency (steps)")
        ax_r.legend(frameon=False)
        return _save(fig, Path(path))


def plot_reliability(evals, path: Path | str, protocol: str = "ood") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.6, 1.0))
        ax.plot([0.5, 1.0], [0.5, 1.0], color="0.6", lw=0.8, ls="--")
        for v, ev in evals.items():
            rep = ev.ood_report if protocol == "ood" else ev.id_report
            if rep is None:
                continue
            cals = [e.calibration for e in rep.per_seed if e.calibration is not None]
            if not cals:
                continue
            counts = np.sum([c.counts for c in cals], axis=0)
            conf = np.nansum([np.nan_to_num(c.conf_mean) * c.counts for c in cals], axis=0)
            acc = np.nansum([np.nan_to_num(c.accuracy) * c.counts for c in cals], axis=0)
            m = counts > 0
            ax.plot(conf[m] / counts[m], acc[m] / counts[m], marker="o", ms=3, label=f"{LABELS.get(v, v)} (ECE {rep.ece_mean:.3f})")
        ax.set_xlabel("confidence at commit")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_training_curves(metrics: dict[str, list[list[dict]]], path: Path | str, window: int = 25) -> Path:
    """`metrics` maps variant -> per-seed metric rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        for v, seeds in metrics.items():
            curves = np.array([[r["mean_return"] for r in rows] for rows in seeds])
            mean = curves.mean(axis=0)
            if mean.size >= window:
                mean = np.convolve(mean, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(mean.size) + window - 1, mean, lw=1, label=LABELS.get(v, v))
        ax.set_xlabel("optimisation step")
        ax.set_ylabel("batch mean return")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def render_all(res, out: Path | str) -> list[Path]:
    from .training import read_metrics_csv

    out = Path(out)
    paths = []
    if res.sweeps:
        paths.append(plot_sweep(res.sweeps, out / "sweep.png", res.config.env.sigma_hi))
    paths.append(plot_reliability(res.evaluations, out / "reliability_ood.png", "ood"))
    metrics = {}
    for v, man in res.manifests.items():
        metrics[v] = [read_metrics_csv(man.root / man.metrics[s]) for s in man.seeds]
    if metrics:
        paths.append(plot_training_curves(metrics, out / "training_curves.png"))
    return paths
