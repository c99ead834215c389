"""Command-line entry point: ``curvlab <command> ...``.

Exit status: 0 on success, 1 when a validation check fails, 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .oracle import OracleSizeError

log = logging.getLogger("curvlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise H.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load(args) -> H.ExperimentConfig:
    extra = _overrides(args.set)
    if getattr(args, "out", None):
        extra["out_dir"] = args.out
    return H.load_config(args.config, **extra)


def cmd_train(args) -> int:
    cfg = _load(args)
    results = H.run_experiment(cfg)
    for seed, res in results.items():
        flag = " diverged" if res.diverged else ""
        print(f"seed {seed}: final_train_loss={res.final_train_loss:.6g}{flag}  {res.csv_path}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load(args)
    grid = H.parse_grid(H.resolve_preset(args.gridfile, ".grid").read_text())
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = H.grid_search(cfg, grid, seeds=seeds, workers=args.workers, extend=args.extend)
    out = Path(cfg.out_dir)
    H.write_grid_csv(result, out / f"{cfg.name}_grid.csv")
    (out / f"{cfg.name}_best.cfg").write_text(result.best.to_text())
    for cell in result.cells:
        tag = " diverged" if cell.diverged else ""
        print(f"{cell.params}  score={cell.score:.6g}{tag}{'  ' + cell.error if cell.error else ''}")
    best = {k: getattr(result.best, k) for k in grid}
    print(f"best: {best}")
    if result.boundary:
        print(f"optimum on grid boundary: {', '.join(result.boundary)}")
    return EXIT_OK


def cmd_align(args) -> int:
    rows = [r for r in H.summarize_alignment(args.run_dir) if r["count"]]
    if not rows:
        print(f"no alignment columns under {args.run_dir} (train with diagnostics = true)")
        return EXIT_FAIL
    fields = ["file", "column", "count", "mean", "median", "min"]
    H.write_rows(rows, fields, Path(args.run_dir) / "align_summary.csv")
    for r in rows:
        print(f"{r['file']}  {r['column']:<22} n={r['count']:<5} mean={r['mean']:.4f} "
              f"median={r['median']:.4f} min={r['min']:.4f}")
    return EXIT_OK


def cmd_progress(args) -> int:
    cfg = _load(args)
    splits = H.prepare_data(cfg)
    for seed in cfg.seeds:
        rows = H.progress_run(cfg, seed, splits)
        path = H.write_rows(rows, H.PROGRESS_FIELDS,
                            Path(cfg.out_dir) / f"{cfg.name}_progress_seed{seed}.csv")
        finite = [(r["kfac_rel_progress"], r["foof_rel_progress"]) for r in rows
                  if math.isfinite(r["kfac_rel_progress"]) and math.isfinite(r["foof_rel_progress"])]
        if finite:
            k, f = np.mean(finite, axis=0)
            print(f"seed {seed}: {len(rows)} updates, mean rel progress kfac={k:.4g} foof={f:.4g}  {path}")
        else:
            print(f"seed {seed}: {len(rows)} updates  {path}")
    return EXIT_OK


def cmd_laplace(args) -> int:
    from .laplace import LaplaceSampler, laplace_cov_check

    cfg = _load(args)
    seed = cfg.seeds[0]
    spec, _ = H.laplace_for_config(cfg, seed)
    draws = LaplaceSampler(spec).draw_many(args.samples, seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.name}_laplace_seed{seed}.npy"
    np.save(path, draws)
    print(f"{args.samples} samples of {draws.shape[1]} parameters -> {path}")
    print(f"sample variance: mean={draws.var(axis=0).mean():.4g}  prior variance={1 / cfg.prior_precision:.4g}")
    if args.check:
        try:
            report = laplace_cov_check(spec, args.samples)
        except OracleSizeError as exc:
            print(f"dense check skipped: {exc}")
            return EXIT_CONFIG
        ok = report["relative_deviation"] <= args.tolerance and not report["insufficient_samples"]
        print(f"{'PASS' if ok else 'FAIL'}  covariance max deviation {report['max_abs_deviation']:.3e} "
              f"= {report['relative_deviation']:.2%} of largest entry (tol {args.tolerance:.0%})")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import format_report, validate_oracle

    results = validate_oracle(count=args.instances, seed=args.seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, helptext):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        return sp

    with_config("train", "train once per seed, one CSV per seed").set_defaults(fn=cmd_train)

    g = with_config("grid", "grid search over a grid file")
    g.add_argument("gridfile")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--extend", type=int, default=0, help="extend boundary optima this many times")
    g.add_argument("--seeds", help="comma-separated seeds for tuning (default: config seeds)")
    g.set_defaults(fn=cmd_grid)

    a = sub.add_parser("align", help="summarise alignment_to_foof columns of a run directory")
    a.add_argument("run_dir")
    a.set_defaults(fn=cmd_align)

    with_config("progress", "KFAC vs norm-matched FOOF per-update progress").set_defaults(fn=cmd_progress)

    lap = with_config("laplace-sample", "draw full-covariance Laplace posterior samples")
    lap.add_argument("--samples", type=int, required=True)
    lap.add_argument("--check", action="store_true", help="compare with the dense covariance")
    lap.add_argument("--tolerance", type=float, default=0.05)
    lap.set_defaults(fn=cmd_laplace)

    v = sub.add_parser("validate-oracle", help="implicit vs dense agreement checks")
    v.add_argument("--instances", type=int, default=16)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (H.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
