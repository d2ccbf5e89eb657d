"""Command-line entry point.

Exit codes: 0 success, 1 failed self-check, 2 config error, 3 numeric
divergence, 4 integrity failure (missing or corrupted run files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .evaluation import spearman
from .experiments import MANIFEST_NAME, RunManifest, ablate, evaluate_run, sweep_run, train_variant
from .params import IntegrityError
from .training import DivergenceError

log = logging.getLogger("beliefrl")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTEGRITY = 0, 1, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "variant", None):
        overrides.append(f"train.policy.variant={args.variant}")
    if getattr(args, "seed", None):
        overrides.append(f"train.seeds=[{','.join(str(s) for s in args.seed)}]")
    if getattr(args, "episodes", None):
        overrides.append(f"eval.episodes={args.episodes}")
        overrides.append(f"eval.sweep_episodes={args.episodes}")
    if getattr(args, "argmax", False):
        overrides.append("eval.greedy=true")
    if getattr(args, "sigmas", None):
        overrides.append(f"eval.sweep_sigmas=[{args.sigmas}]")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _manifest(path: str, full: bool = True) -> RunManifest:
    """Read a run manifest. With full=False only the config is checked here;
    each checkpoint verifies its own hash when loaded, so one bad seed
    becomes an error row instead of aborting the command."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise IntegrityError(f"no run manifest at {p}")
    man = RunManifest.read(p)
    if full:
        man.verify()
    else:
        man.verify_config()
    return man


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or Path(cfg.out_dir) / cfg.policy.variant)
    try:
        man = train_variant(cfg, out)
    except DivergenceError as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "divergence.json").write_text(json.dumps(exc.dump, indent=2) + "\n")
        print(f"training diverged: {exc}; diagnostics in {out / 'divergence.json'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out / MANIFEST_NAME} ({len(man.seeds)} seeds, config {man.config_hash})")
    return EXIT_OK


def _eval_overrides(args, cfg: RunConfig) -> RunConfig:
    extra = list(args.set or [])
    if args.episodes:
        extra += [f"eval.episodes={args.episodes}", f"eval.sweep_episodes={args.episodes}"]
    if args.argmax:
        extra.append("eval.greedy=true")
    if getattr(args, "sigmas", None):
        extra.append(f"eval.sweep_sigmas=[{args.sigmas}]")
    return apply_overrides(cfg, extra) if extra else cfg


def cmd_eval(args) -> int:
    from .report import markdown_tables, write_calibration_csv, write_eval_csv

    man = _manifest(args.manifest, full=False)
    cfg = _eval_overrides(args, man.config())
    ev = evaluate_run(man, cfg, ood=args.ood)
    out = Path(args.out or man.root)
    out.mkdir(parents=True, exist_ok=True)
    bounds = {f"id:{r.name}": (r.sigma_lo, r.sigma_hi) for r in cfg.eval.regimes(cfg.env)}
    bounds["ood:mean"] = cfg.eval.ood
    write_eval_csv(out / f"{man.variant}_eval.csv", ev, man.seeds, bounds)
    write_calibration_csv(out / f"{man.variant}_calibration.csv", {man.variant: ev}, man.config_hash, man.seeds)
    md = markdown_tables({man.variant: ev}, man.config_hash, man.seeds, cfg.eval)
    (out / f"{man.variant}_summary.md").write_text(md)
    print(md)
    for seed, msg in sorted(ev.errors.items()):
        print(f"seed {seed}: {msg}", file=sys.stderr)
    if ev.errors:
        return EXIT_INTEGRITY
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .figures import plot_sweep
    from .report import write_sweep_csv

    man = _manifest(args.manifest, full=False)
    cfg = _eval_overrides(args, man.config())
    sw = sweep_run(man, cfg)
    out = Path(args.out or man.root)
    out.mkdir(parents=True, exist_ok=True)
    path = write_sweep_csv(out / f"{man.variant}_sweep.csv", {man.variant: sw}, man.config_hash, man.seeds)
    plot_sweep({man.variant: sw}, out / f"{man.variant}_sweep.png", cfg.env.sigma_hi)
    rho = spearman(sw.sigmas, sw.mean_latency()) if len(sw.sigmas) > 1 else float("nan")
    print(f"wrote {path}; latency-vs-sigma Spearman rho = {rho:.3f}")
    for seed, msg in sorted(sw.errors.items()):
        print(f"seed {seed}: {msg}", file=sys.stderr)
    return EXIT_INTEGRITY if sw.errors else EXIT_OK


def cmd_ablate(args) -> int:
    from .report import write_ablation_outputs

    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    res = ablate(cfg, out, sweep=not args.no_sweep)
    paths = write_ablation_outputs(res, out, figures=not args.no_figures)
    print((out / "summary.md").read_text())
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK if not res.failures else EXIT_DIVERGED


def cmd_report(args) -> int:
    """Rebuild tables and figures for an ablation directory (no retraining)."""
    from .experiments import AblationResult
    from .report import write_ablation_outputs

    root = Path(args.out)
    mans = {}
    for sub in sorted(root.iterdir()):
        if (sub / MANIFEST_NAME).exists():
            mans[sub.name] = _manifest(sub)
    if not mans:
        raise IntegrityError(f"no run manifests under {root}")
    first = next(iter(mans.values()))
    cfg = _eval_overrides(args, first.config())
    order = [v for v in cfg.ablation_variants if v in mans] + [v for v in mans if v not in cfg.ablation_variants]
    evals, sweeps = {}, {}
    for v in order:
        vcfg = _eval_overrides(args, mans[v].config())
        evals[v] = evaluate_run(mans[v], vcfg, ood=True)
        if not args.no_sweep:
            sweeps[v] = sweep_run(mans[v], vcfg)
    res = AblationResult(cfg, evals, sweeps, {v: mans[v] for v in order}, {})
    paths = write_ablation_outputs(res, root, figures=not args.no_figures)
    print((root / "summary.md").read_text())
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run configuration (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.opt_steps=10")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train every seed of one variant")
    common(sp)
    sp.add_argument("--variant")
    sp.add_argument("--seed", type=int, action="append", help="restrict to these seeds (repeatable)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run on ID regimes (and OOD)")
    sp.add_argument("manifest", help="run directory or run_manifest.json")
    common(sp, config=False)
    sp.add_argument("--ood", action="store_true", help="also evaluate the held-out noise range")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--argmax", action="store_true", help="act greedily instead of sampling")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="evaluate a run at fixed noise levels")
    sp.add_argument("manifest")
    common(sp, config=False)
    sp.add_argument("--sigmas", help="comma-separated list, default 0.3..1.8 step 0.1")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--argmax", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="train and evaluate every ablation variant")
    common(sp)
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--argmax", action="store_true")
    sp.add_argument("--sigmas")
    sp.add_argument("--no-sweep", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="rebuild tables and figures for an ablation directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--argmax", action="store_true")
    sp.add_argument("--sigmas")
    sp.add_argument("--no-sweep", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("check", help="run the self-test suite")
    sp.add_argument("--quick", action="store_true", help="shorter stability runs")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
