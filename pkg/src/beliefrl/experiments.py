"""Run orchestration: train seeds, write manifests, evaluate, sweep, ablate.

A run directory holds one variant::

    <run>/config.yaml
    <run>/run_manifest.json
    <run>/seed<k>.manifest, seed<k>.bin       checkpoint
    <run>/seed<k>_metrics.csv                  one row per optimisation step
    <run>/seed<k>_snapshots.csv                periodic evaluation returns
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config, load_config
from .env import EVAL_STREAM
from .evaluation import EvalReport, SweepRow, aggregate, evaluate, sigma_sweep
from .params import IntegrityError, ParamStore, load_checkpoint, save_checkpoint
from .policies import Policy, make_policy
from .training import train_run, write_metrics_csv

log = logging.getLogger(__name__)

WORKERS_ENV = "BELIEFRL_WORKERS"
MANIFEST_NAME = "run_manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class RunManifest:
    config_hash: str
    variant: str
    seeds: list[int]
    checkpoints: dict[int, str]
    metrics: dict[int, str]
    snapshots: dict[int, str]
    file_hashes: dict[str, str]
    durations: dict[int, float]
    version: str = __version__
    root: Path = field(default=Path("."), repr=False)

    def write(self, path: Path) -> None:
        data = {
            "config_hash": self.config_hash,
            "version": self.version,
            "variant": self.variant,
            "seeds": self.seeds,
            "checkpoints": {str(k): v for k, v in self.checkpoints.items()},
            "metrics": {str(k): v for k, v in self.metrics.items()},
            "snapshots": {str(k): v for k, v in self.snapshots.items()},
            "file_hashes": self.file_hashes,
            "durations_s": {str(k): round(v, 3) for k, v in self.durations.items()},
        }
        Path(path).write_text(json.dumps(data, indent=2) + "\n")

    @classmethod
    def read(cls, path: Path | str) -> RunManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        return cls(
            d["config_hash"],
            d["variant"],
            [int(s) for s in d["seeds"]],
            {int(k): v for k, v in d["checkpoints"].items()},
            {int(k): v for k, v in d["metrics"].items()},
            {int(k): v for k, v in d.get("snapshots", {}).items()},
            d["file_hashes"],
            {int(k): float(v) for k, v in d.get("durations_s", {}).items()},
            d.get("version", ""),
            path.parent,
        )

    def verify(self) -> None:
        """Every referenced file exists and matches its recorded hash."""
        for rel, digest in self.file_hashes.items():
            p = self.root / rel
            if not p.exists():
                raise IntegrityError(f"missing file {p}")
            if _sha256(p) != digest:
                raise IntegrityError(f"hash mismatch for {p}")

    def verify_config(self) -> None:
        rel = "config.yaml"
        p = self.root / rel
        if not p.exists() or _sha256(p) != self.file_hashes.get(rel):
            raise IntegrityError(f"run config {p} is missing or does not match the manifest")

    def config(self) -> RunConfig:
        return load_config(self.root / "config.yaml")


def _train_seed(cfg: RunConfig, seed: int, out: Path) -> tuple[int, float]:
    t0 = time.perf_counter()
    res = train_run(cfg.train, seed)
    header = [f"config_hash={cfg.config_hash()}", f"variant={cfg.policy.variant}", f"seed={seed}"]
    write_metrics_csv(out / f"seed{seed}_metrics.csv", res.metrics, header)
    with (out / f"seed{seed}_snapshots.csv").open("w", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_return"])
        for s in res.snapshots:
            w.writerow([int(s["step"]), repr(s["mean_return"])])
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "variant": cfg.policy.variant,
        "policy": json.dumps(cfg.to_dict()["train"]["policy"], sort_keys=True),
    }
    save_checkpoint(res.params, out / f"seed{seed}", meta)
    return seed, time.perf_counter() - t0


def train_variant(cfg: RunConfig, out: Path | str, seeds: list[int] | None = None) -> RunManifest:
    """Train every seed of one variant into `out` and write its manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    dump_config(cfg, out / "config.yaml")
    durations: dict[int, float] = {}
    n = min(workers(), len(seeds))
    if n > 1:
        with cf.ProcessPoolExecutor(n) as pool:
            for seed, dt in pool.map(_train_seed, [cfg] * len(seeds), seeds, [out] * len(seeds)):
                durations[seed] = dt
    else:
        for seed in seeds:
            durations[seed] = _train_seed(cfg, seed, out)[1]
    files: dict[str, str] = {"config.yaml": _sha256(out / "config.yaml")}
    ckpts, mets, snaps = {}, {}, {}
    for seed in seeds:
        ckpts[seed] = f"seed{seed}"
        mets[seed] = f"seed{seed}_metrics.csv"
        snaps[seed] = f"seed{seed}_snapshots.csv"
        for rel in (f"seed{seed}.manifest", f"seed{seed}.bin", mets[seed], snaps[seed]):
            files[rel] = _sha256(out / rel)
    man = RunManifest(cfg.config_hash(), cfg.policy.variant, seeds, ckpts, mets, snaps, files, durations, root=out)
    man.write(out / MANIFEST_NAME)
    return man


def load_policy(manifest: RunManifest, seed: int) -> tuple[Policy, ParamStore, dict[str, str]]:
    cfg = manifest.config()
    policy = make_policy(cfg.policy)
    store, meta = load_checkpoint(manifest.root / manifest.checkpoints[seed], list(policy.specs))
    if meta.get("config_hash") != manifest.config_hash:
        log.warning("checkpoint %s was written under config %s, manifest says %s", seed, meta.get("config_hash"), manifest.config_hash)
    return policy, store, meta


@dataclass
class RunEvaluation:
    variant: str
    id_report: EvalReport
    ood_report: EvalReport | None
    errors: dict[int, str] = field(default_factory=dict)


def evaluate_run(manifest: RunManifest, cfg: RunConfig, ood: bool = True, episodes: int | None = None) -> RunEvaluation:
    """ID regimes (bucketed by sigma) and optionally the OOD range, per seed."""
    episodes = episodes or cfg.eval.episodes
    id_evals, ood_evals, errors = [], [], {}
    for seed in manifest.seeds:
        try:
            policy, store, _ = load_policy(manifest, seed)
        except (OSError, IntegrityError) as exc:
            errors[seed] = str(exc)
            continue
        id_evals.append(
            evaluate(policy, store, cfg.env, episodes, seed, cfg.eval.regimes(cfg.env), cfg.eval.n_bins, cfg.eval.greedy)
        )
        if ood:
            ood_evals.append(
                evaluate(
                    policy,
                    store,
                    cfg.eval.ood_env(cfg.env),
                    episodes,
                    seed,
                    None,
                    cfg.eval.n_bins,
                    cfg.eval.greedy,
                    domain=EVAL_STREAM,
                    start=1 << 34,
                )
            )
    if not id_evals:
        raise IntegrityError(f"no loadable checkpoints in {manifest.root}: {errors}")
    h = manifest.config_hash
    return RunEvaluation(
        manifest.variant,
        aggregate(id_evals, h),
        aggregate(ood_evals, h) if ood_evals else None,
        errors,
    )


@dataclass
class SweepResult:
    variant: str
    sigmas: list[float]
    per_seed: dict[int, list[SweepRow]]
    errors: dict[int, str] = field(default_factory=dict)

    def mean_return(self) -> np.ndarray:
        return np.mean([[r.mean_return for r in rows] for rows in self.per_seed.values()], axis=0)

    def mean_latency(self) -> np.ndarray:
        return np.mean([[r.mean_latency for r in rows] for rows in self.per_seed.values()], axis=0)

    def std_return(self) -> np.ndarray:
        return np.std([[r.mean_return for r in rows] for rows in self.per_seed.values()], axis=0)


def sweep_run(manifest: RunManifest, cfg: RunConfig, sigmas=None, episodes: int | None = None) -> SweepResult:
    sigmas = list(sigmas if sigmas is not None else cfg.eval.sweep_sigmas)
    episodes = episodes or cfg.eval.sweep_episodes
    per_seed, errors = {}, {}
    for seed in manifest.seeds:
        try:
            policy, store, _ = load_policy(manifest, seed)
        except (OSError, IntegrityError) as exc:
            errors[seed] = str(exc)
            continue
        per_seed[seed] = sigma_sweep(policy, store, sigmas, episodes, seed, cfg.env, cfg.eval.greedy)
    if not per_seed:
        raise IntegrityError(f"no loadable checkpoints in {manifest.root}: {errors}")
    return SweepResult(manifest.variant, sigmas, per_seed, errors)


@dataclass
class AblationResult:
    config: RunConfig
    evaluations: dict[str, RunEvaluation]
    sweeps: dict[str, SweepResult]
    manifests: dict[str, RunManifest]
    failures: dict[str, str]


def _ablate_job(cfg: RunConfig, variant: str, out: Path, sweep: bool) -> tuple[str, RunManifest, RunEvaluation, SweepResult | None]:
    vcfg = cfg.with_variant(variant)
    run_dir = out / variant
    man = _reuse_or_train(vcfg, run_dir)
    ev = evaluate_run(man, vcfg, ood=True)
    sw = sweep_run(man, vcfg) if sweep else None
    return variant, man, ev, sw


def _reuse_or_train(cfg: RunConfig, run_dir: Path) -> RunManifest:
    mpath = run_dir / MANIFEST_NAME
    if mpath.exists():
        try:
            man = RunManifest.read(mpath)
            if man.config_hash == cfg.config_hash() and man.seeds == list(cfg.seeds):
                man.verify()
                log.info("reusing %s", run_dir)
                return man
        except (IntegrityError, OSError, KeyError, ValueError) as exc:
            log.warning("retraining %s: %s", run_dir, exc)
    return train_variant(cfg, run_dir)


def ablate(cfg: RunConfig, out: Path | str, variants=None, sweep: bool = True) -> AblationResult:
    """Train (or reuse) and evaluate every variant; partial failures are recorded."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    variants = list(variants or cfg.ablation_variants)
    evals, sweeps, mans, failures = {}, {}, {}, {}
    n = min(workers(), len(variants))
    if n > 1:
        with cf.ProcessPoolExecutor(n) as pool:
            futs = {pool.submit(_ablate_job, cfg, v, out, sweep): v for v in variants}
            results = []
            for f in cf.as_completed(futs):
                try:
                    results.append(f.result())
                except Exception as exc:  # noqa: BLE001
                    failures[futs[f]] = f"{type(exc).__name__}: {exc}"
    else:
        results = []
        for v in variants:
            try:
                results.append(_ablate_job(cfg, v, out, sweep))
            except Exception as exc:  # noqa: BLE001
                log.exception("variant %s failed", v)
                failures[v] = f"{type(exc).__name__}: {exc}"
    for v, man, ev, sw in results:
        mans[v], evals[v] = man, ev
        if sw is not None:
            sweeps[v] = sw
    order = [v for v in variants if v in evals]
    return AblationResult(
        cfg,
        {v: evals[v] for v in order},
        {v: sweeps[v] for v in order if v in sweeps},
        {v: mans[v] for v in order},
        failures,
    )
