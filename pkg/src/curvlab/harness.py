"""Experiment runner: configs, training loop, diagnostics, CSV output, grids."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import data as dio
from . import curvature as cv
from . import laplace as lp
from .net import Network, forward, init_network, loss_value
from .optim import KroneckerOptimizer, OptimizerConfig, damped_inverse, make_optimizer

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: str = "mnist"
    data_dir: str = ""
    subset: int = 0
    subset_seed: int = 0
    normalize: bool = True
    eval_split: str = "test"
    eval_subset: int = 1000
    hidden: list[int] = field(default_factory=list)
    activation: str = "relu"
    loss: str = "ce"
    optimizer: str = "sgd"
    lr: float = 0.1
    damping: float = 1.0
    momentum: float = 0.0
    ema_decay: float = 0.95
    T: int = 1
    S: int = 1
    policy: str = "same-batch"
    subsampled: bool = False
    fisher: str = "mc"
    weight_decay: float = 0.0
    warmup_batches: int = 50
    foof_kfac_damping: bool = False
    ng_solver: str = "auto"
    cg_rtol: float = 1e-10
    cg_maxiter: int = 2000
    cg_precondition: bool = True
    epochs: int = 10
    batch_size: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    log_every: int = 0
    diagnostics: bool = False
    align_damping: float = 0.0
    prior_precision: float = 1.0
    laplace_points: int = 100
    laplace_fisher: str = "full"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if not self.prior_precision > 0:
            raise ConfigError("prior_precision must be positive")
        if self.laplace_fisher not in ("mc", "full"):
            raise ConfigError(f"laplace_fisher must be mc or full, got {self.laplace_fisher!r}")
        try:
            self.optimizer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer_config(self) -> OptimizerConfig:
        names = {f.name for f in fields(OptimizerConfig)}
        kw = {k: getattr(self, k) for k in names if hasattr(self, k)}
        return OptimizerConfig(kind=self.optimizer, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ == "list[int]":
            return [int(x) for x in raw.replace(",", " ").split()] if raw else []
        return raw
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r} as {typ}") from None


def _field_types() -> dict:
    return {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = raw if not isinstance(raw, str) else _coerce(key, types[key], raw)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_preset(path, suffix=".cfg"):
    """Return ``path`` if it exists, else the packaged preset of that name."""
    p = Path(path)
    if p.exists():
        return p
    root = files("curvlab").joinpath("presets")
    for name in (p.name, p.name + suffix):
        cand = root.joinpath(name)
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"{path}: no such file or packaged preset")


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(resolve_preset(path).read_text(), **overrides)


# --------------------------------------------------------------------------
# data and model


@dataclass
class Splits:
    train: dio.Dataset
    eval: dio.Dataset | None
    sizes: list[int]


def prepare_data(cfg: ExperimentConfig) -> Splits:
    if cfg.dataset == "toy":
        ds = dio.synth_toy()
        return Splits(ds, None, [2] + cfg.hidden + [1])
    if cfg.dataset == "blobs":
        ds = dio.synth_blobs(n=cfg.subset or 200, seed=cfg.subset_seed)
        return Splits(ds, None, [ds.inputs.shape[0]] + cfg.hidden + [3])
    root = cfg.data_dir or None
    train = dio.load_mnist(cfg.dataset, "train", root)
    if cfg.subset:
        train = dio.subset(train, cfg.subset, cfg.subset_seed)
    ev = None
    if cfg.eval_split:
        ev = dio.load_mnist(cfg.dataset, cfg.eval_split, root)
        if cfg.eval_subset and cfg.eval_subset < ev.N:
            ev = dio.subset(ev, cfg.eval_subset, cfg.subset_seed)
    if cfg.normalize:
        # constants from the training split only
        mean, std = dio.stats(train)
        train = dio.normalize(train, mean, std)
        ev = dio.normalize(ev, mean, std) if ev is not None else None
    classes = int(train.labels.max()) + 1
    return Splits(train, ev, [train.inputs.shape[0]] + cfg.hidden + [max(classes, 10)])


def build_network(cfg: ExperimentConfig, splits: Splits, seed: int) -> Network:
    if cfg.dataset == "toy":
        return Network([np.zeros((1, 2))], cfg.activation, "mse")
    return init_network(splits.sizes, cfg.activation, cfg.loss, seed)


# --------------------------------------------------------------------------
# diagnostics


def _inner(u, v, metric):
    if metric is None:
        return float(np.sum(u * v))
    return float(np.sum((u @ metric) * v))


def alignment(u1, u2, metric=None) -> float:
    """Cosine of the angle between two updates.

    ``u1``/``u2`` are lists of per-layer matrices (or single matrices).  With
    ``metric`` (a list of ``lam I + Sigma_A`` matrices, one per layer) the inner
    product is ``sum_k trace(U_k M_k V_k^T)``, the FOOF curvature metric.
    Returns ``nan`` if either update is zero.
    """
    if isinstance(u1, np.ndarray):
        u1, u2 = [u1], [u2]
        metric = None if metric is None else [metric]
    ms = metric if metric is not None else [None] * len(u1)
    uv = sum(_inner(a, b, m) for a, b, m in zip(u1, u2, ms))
    uu = sum(_inner(a, a, m) for a, m in zip(u1, ms))
    vv = sum(_inner(b, b, m) for b, m in zip(u2, ms))
    if uu <= 0 or vv <= 0:
        return float("nan")
    return uv / math.sqrt(uu * vv)


def foof_metric(sigma_a: list[np.ndarray], lam: float) -> list[np.ndarray]:
    return [s + lam * np.eye(s.shape[0]) for s in sigma_a]


def batch_sigma_a(net: Network, X) -> list[np.ndarray]:
    tr = forward(net, X)
    return [a @ a.T / a.shape[1] for a in tr.A]


def relative_improvement(net: Network, X, y, update) -> float:
    base = loss_value(net, forward(net, X).logits, y)
    if base == 0 or not math.isfinite(base):
        return float("nan")
    probe = net.copy()
    for w, u in zip(probe.weights, update):
        w += u
    return (base - loss_value(probe, forward(probe, X).logits, y)) / base


def norm_match(update, reference):
    """Rescale each layer of ``update`` to the Frobenius norm of ``reference``."""
    out = []
    for u, r in zip(update, reference):
        nu = np.linalg.norm(u)
        out.append(u * (np.linalg.norm(r) / nu) if nu > 0 else u.copy())
    return out


def per_update_progress(net: Network, X, y, candidates, match_to=None) -> list[float]:
    """Relative loss improvement on ``(X, y)`` for each candidate update.

    With ``match_to`` every candidate is first rescaled layerwise to that
    update's norms.
    """
    out = []
    for cand in candidates:
        if match_to is not None:
            cand = norm_match(cand, match_to)
        out.append(relative_improvement(net, X, y, cand))
    return out


# --------------------------------------------------------------------------
# training


def metric_fields(n_layers: int) -> list[str]:
    return (
        ["step", "epoch", "train_loss", "eval_loss", "eval_accuracy"]
        + [f"update_norm_{k}" for k in range(n_layers)]
        + ["alignment_to_foof"]
        + [f"alignment_to_foof_{k}" for k in range(n_layers)]
        + ["rel_progress", "wall_ms", "seed", "diverged"]
    )


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class RunResult:
    seed: int
    final_train_loss: float
    diverged: bool
    rows: list[dict]
    csv_path: Path | None = None
    net: Network | None = None


def _dataset_loss(net, ds):
    if ds is None:
        return float("nan"), float("nan")
    logits = forward(net, ds.inputs).logits
    lossv = loss_value(net, logits, ds.labels)
    acc = float("nan")
    if net.loss == "ce":
        acc = float((logits.argmax(axis=0) == ds.labels).mean())
    return lossv, acc


def _warmup_batches(cfg, splits, seed, B):
    count, epoch = 0, -1
    while count < cfg.warmup_batches:
        for batch in dio.batches(splits.train, B, seed, shuffle=True, epoch=epoch):
            yield batch
            count += 1
            if count >= cfg.warmup_batches:
                return
        epoch -= 1


def _reference_sigma(opt, net, X):
    if isinstance(opt, KroneckerOptimizer):
        return [opt.state.sigma_a(k) for k in range(len(net.weights))]
    return batch_sigma_a(net, X)


def train(cfg: ExperimentConfig, seed: int, splits: Splits | None = None) -> RunResult:
    splits = splits or prepare_data(cfg)
    net = build_network(cfg, splits, seed)
    opt = make_optimizer(cfg.optimizer_config(), net, seed)
    N = splits.train.N
    B = cfg.batch_size if cfg.batch_size and cfg.batch_size < N else N
    if opt.needs_warmup and cfg.warmup_batches:
        opt.warm_start(net, _warmup_batches(cfg, splits, seed, B))
    steps_per_epoch = math.ceil(N / B)
    log_every = cfg.log_every or steps_per_epoch
    L = len(net.weights)
    rows, t0, step, diverged = [], time.perf_counter(), 0, False

    def record(epoch, proposal=None, X=None, y=None):
        tl, _ = _dataset_loss(net, splits.train)
        el, ea = _dataset_loss(net, splits.eval)
        row = dict.fromkeys(metric_fields(L), float("nan"))
        row.update(step=step, epoch=epoch, train_loss=tl, eval_loss=el, eval_accuracy=ea,
                   seed=seed, diverged=int(diverged or not math.isfinite(tl)))
        if proposal is not None:
            for k, u in enumerate(proposal.updates):
                row[f"update_norm_{k}"] = float(np.linalg.norm(u))
            row["rel_progress"] = proposal.info.get("rel_progress", float("nan"))
            if "alignment" in proposal.info:
                whole, per = proposal.info["alignment"]
                row["alignment_to_foof"] = whole
                for k, v in enumerate(per):
                    row[f"alignment_to_foof_{k}"] = v
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        rows.append(row)
        return row

    record(0)
    for epoch in range(cfg.epochs):
        for X, y in dio.batches(splits.train, B, seed, shuffle=B < N, epoch=epoch):
            try:
                proposal = opt.propose(net, X, y)
            except cv.NonFiniteCurvature as exc:
                # blown-up statistics are divergence, not a configuration error
                log.warning("run stopped at step %d: %s", step, exc)
                diverged = True
                break
            bad = not math.isfinite(proposal.loss) or not all(
                np.all(np.isfinite(u)) for u in proposal.updates
            )
            if bad:
                diverged = True
                break
            logging_step = (step + 1) % log_every == 0
            if logging_step:
                proposal.info["rel_progress"] = relative_improvement(net, X, y, proposal.updates)
                if cfg.diagnostics:
                    lam = cfg.align_damping or cfg.damping or 1.0
                    metric = foof_metric(_reference_sigma(opt, net, X), lam)
                    foof_dirs = [g @ np.linalg.inv(m) for g, m in zip(proposal.grads, metric)]
                    dirs = proposal.info["dirs"]
                    per = [alignment(d, f, m) for d, f, m in zip(dirs, foof_dirs, metric)]
                    proposal.info["alignment"] = (alignment(dirs, foof_dirs, metric), per)
            opt.apply(net, proposal)
            step += 1
            if logging_step:
                row = record(epoch + 1 if step % steps_per_epoch == 0 else epoch, proposal)
                if not math.isfinite(row["train_loss"]):
                    diverged = True
                    break
        if diverged:
            break
    if diverged:
        record(epoch)
    elif rows[-1]["step"] != step:
        record(cfg.epochs)
    final = rows[-1]["train_loss"]
    if diverged or not math.isfinite(final):
        final, diverged = float("inf"), True
    return RunResult(seed, final, diverged, rows, net=net)


def write_csv(rows: list[dict], path: Path, n_layers: int) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=metric_fields(n_layers))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def run_experiment(cfg: ExperimentConfig, out_dir=None, write=True) -> dict[int, RunResult]:
    """Train once per seed; one CSV per (config, seed)."""
    splits = prepare_data(cfg)
    out = Path(out_dir or cfg.out_dir)
    results = {}
    for seed in cfg.seeds:
        res = train(cfg, seed, splits)
        if write:
            n_layers = len(splits.sizes) - 1
            res.csv_path = write_csv(res.rows, out / f"{cfg.name}_seed{seed}.csv", n_layers)
        log.info("%s seed %d: final train loss %.6g%s", cfg.name, seed, res.final_train_loss,
                 " (diverged)" if res.diverged else "")
        results[seed] = res
    if write:
        (out / f"{cfg.name}.cfg").write_text(cfg.to_text())
    return results


# --------------------------------------------------------------------------
# grid search


def log_grid(lo: int, hi: int, mantissas=(1, 3)) -> list[float]:
    """Values ``m * 10^i`` for ``i`` in ``[lo, hi]`` and each mantissa."""
    return [float(f"{m}e{i}") for i in range(lo, hi + 1) for m in mantissas]


def parse_grid(text: str) -> dict[str, list]:
    """Grid file: ``key = v1, v2, ...``; ``log13(lo, hi)`` and ``log10(lo, hi)``
    expand to ``1e{i}, 3e{i}`` and ``1e{i}`` for ``i`` in ``lo..hi``."""
    types = _field_types()
    grid = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected 'key = v1, v2'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"grid line {lineno}: unknown key {key!r}")
        raw = raw.replace(" ", "")
        if raw.startswith(("log13(", "log10(")) and raw.endswith(")"):
            lo, hi = (int(x) for x in raw[6:-1].split(","))
            vals = log_grid(lo, hi, (1, 3) if raw.startswith("log13") else (1,))
        elif types[key] == "list[int]":
            vals = [_coerce(key, types[key], v) for v in raw.split(";")]
        else:
            vals = [_coerce(key, types[key], v) for v in raw.split(",") if v]
        grid[key] = vals
    return grid


@dataclass
class GridCell:
    params: dict
    losses: dict
    diverged: bool
    score: float
    error: str = ""


@dataclass
class GridResult:
    best: ExperimentConfig
    cells: list[GridCell]
    boundary: list[str]


def _run_cell(args):
    cfg, params, seeds = args
    try:
        cell_cfg = dataclasses.replace(cfg, **params, seeds=seeds)
        res = run_experiment(cell_cfg, write=False)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return GridCell(params, {}, True, float("inf"), f"{type(exc).__name__}: {exc}")
    losses = {s: r.final_train_loss for s, r in res.items()}
    vals = list(losses.values())
    score = float(np.mean(vals)) if all(math.isfinite(v) for v in vals) else float("inf")
    log.info("grid cell %s: score %.6g", params, score)
    return GridCell(params, losses, any(r.diverged for r in res.values()), score)


def _mantissa_step(v: float, mantissas, up: bool) -> float:
    e = math.floor(math.log10(v) + 1e-9)
    i = mantissas.index(round(v / 10**e, 6))
    if up:
        return float(f"{mantissas[i + 1]}e{e}") if i + 1 < len(mantissas) else float(f"{mantissas[0]}e{e + 1}")
    return float(f"{mantissas[i - 1]}e{e}") if i > 0 else float(f"{mantissas[-1]}e{e - 1}")


def _extend_axis(values):
    """One more step past each end of a sorted positive axis.

    Axes made of ``1e{i}`` / ``3e{i}`` values keep that shape; anything else
    is extended geometrically.
    """
    vals = sorted(values)
    if len(vals) < 2 or vals[0] <= 0:
        return None, None
    mants = sorted({round(v / 10 ** math.floor(math.log10(v) + 1e-9), 6) for v in vals})
    if mants in ([1.0], [1.0, 3.0]):
        return _mantissa_step(vals[0], mants, False), _mantissa_step(vals[-1], mants, True)
    lo = vals[0] * vals[0] / vals[1]
    hi = vals[-1] * vals[-1] / vals[-2]
    return float(f"{lo:.6g}"), float(f"{hi:.6g}")


def grid_search(
    base: ExperimentConfig,
    grid: dict[str, list],
    seeds: list[int] | None = None,
    workers: int = 1,
    extend: int = 0,
) -> GridResult:
    """Exhaustive search selecting the lowest mean final training loss.

    Diverged or failing cells score ``inf``.  Axes where the winner sits on
    the edge are reported in ``boundary``; with ``extend > 0`` such numeric
    axes are widened by one geometric step (up to ``extend`` times) and the
    new cells evaluated.
    """
    seeds = seeds or base.seeds
    grid = {k: list(v) for k, v in grid.items()}
    cells: dict[tuple, GridCell] = {}

    def evaluate():
        keys = list(grid)
        todo = []
        for combo in itertools.product(*(grid[k] for k in keys)):
            params = dict(zip(keys, combo))
            tag = tuple(sorted(params.items()))
            if tag not in cells:
                todo.append((tag, params))
        jobs = [(base, p, seeds) for _, p in todo]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(workers) as pool:
                done = list(pool.map(_run_cell, jobs))
        else:
            done = [_run_cell(j) for j in jobs]
        for (tag, _), cell in zip(todo, done):
            cells[tag] = cell

    def best_cell():
        ordered = [cells[tuple(sorted(dict(zip(grid, c)).items()))]
                   for c in itertools.product(*grid.values())]
        return min(ordered, key=lambda c: c.score)

    evaluate()
    for _ in range(extend):
        best = best_cell()
        grew = False
        for k, vals in grid.items():
            if len(vals) < 2 or not all(isinstance(v, (int, float)) for v in vals):
                continue
            v = best.params[k]
            lo, hi = _extend_axis(vals)
            if lo is None:
                continue
            if v == min(vals) and lo not in vals:
                grid[k] = [lo] + sorted(vals)
                grew = True
            elif v == max(vals) and hi not in vals:
                grid[k] = sorted(vals) + [hi]
                grew = True
        if not grew:
            break
        evaluate()

    best = best_cell()
    boundary = [
        k for k, vals in grid.items()
        if len(vals) > 1 and best.params[k] in (vals[0], vals[-1])
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vals)
    ]
    if boundary:
        log.warning("grid optimum on the boundary of: %s", ", ".join(boundary))
    ordered = [cells[tuple(sorted(dict(zip(grid, c)).items()))]
               for c in itertools.product(*grid.values())]
    return GridResult(dataclasses.replace(base, **best.params), ordered, boundary)


def write_grid_csv(result: GridResult, path: Path) -> Path:
    keys = list(result.cells[0].params) if result.cells else []
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(keys + ["score", "diverged", "losses", "error"])
        for c in result.cells:
            losses = ";".join(f"{s}:{v!r}" for s, v in c.losses.items())
            writer.writerow([c.params[k] for k in keys] + [repr(c.score), int(c.diverged), losses, c.error])
    return path


# --------------------------------------------------------------------------
# per-update progress: KFAC vs norm-matched FOOF with damping lam_A

PROGRESS_FIELDS = ["step", "epoch", "batch_loss", "kfac_rel_progress", "foof_rel_progress", "seed"]


def progress_run(cfg: ExperimentConfig, seed: int, splits: Splits | None = None) -> list[dict]:
    """Train with heuristic-damped KFAC; at each logging step also score the
    FOOF update built from KFAC's own ``Sigma_A`` and ``lam_A``, rescaled
    layerwise to the KFAC update's norm, on the same minibatch."""
    if cfg.optimizer != "kfac-heuristic":
        raise ConfigError("progress needs optimizer = kfac-heuristic")
    splits = splits or prepare_data(cfg)
    net = build_network(cfg, splits, seed)
    opt = make_optimizer(cfg.optimizer_config(), net, seed)
    N = splits.train.N
    B = cfg.batch_size if cfg.batch_size and cfg.batch_size < N else N
    if cfg.warmup_batches:
        opt.warm_start(net, _warmup_batches(cfg, splits, seed, B))
    log_every = cfg.log_every or 1
    rows, step = [], 0
    for epoch in range(cfg.epochs):
        for X, y in dio.batches(splits.train, B, seed, shuffle=B < N, epoch=epoch):
            try:
                proposal = opt.propose(net, X, y)
            except cv.NonFiniteCurvature as exc:
                log.warning("run stopped at step %d: %s", step, exc)
                return rows
            if not math.isfinite(proposal.loss):
                return rows
            if step % log_every == 0:
                foof = [-g @ opt.state.P_A[k] for k, g in enumerate(proposal.grads)]
                kfac_p = per_update_progress(net, X, y, [proposal.updates])[0]
                foof_p = per_update_progress(net, X, y, [foof], match_to=proposal.updates)[0]
                rows.append(dict(step=step, epoch=epoch, batch_loss=proposal.loss,
                                 kfac_rel_progress=kfac_p, foof_rel_progress=foof_p, seed=seed))
            opt.apply(net, proposal)
            step += 1
    return rows


def write_rows(rows: list[dict], fieldnames: list[str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path


# --------------------------------------------------------------------------
# alignment summaries over a run directory


def summarize_alignment(run_dir) -> list[dict]:
    """Mean / median / min of every ``alignment_to_foof*`` column, per CSV."""
    out = []
    for path in sorted(Path(run_dir).glob("*.csv")):
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            cols = [c for c in (reader.fieldnames or []) if c.startswith("alignment_to_foof")]
            if not cols:
                continue
            values = {c: [] for c in cols}
            for row in reader:
                for c in cols:
                    v = float(row[c]) if row[c] not in ("", None) else float("nan")
                    if math.isfinite(v):
                        values[c].append(v)
        for c, v in values.items():
            arr = np.array(v)
            out.append(dict(
                file=path.name, column=c, count=arr.size,
                mean=float(arr.mean()) if arr.size else float("nan"),
                median=float(np.median(arr)) if arr.size else float("nan"),
                min=float(arr.min()) if arr.size else float("nan"),
            ))
    return out


# --------------------------------------------------------------------------
# Laplace posterior at the (optionally trained) weights


def laplace_for_config(cfg: ExperimentConfig, seed: int, splits: Splits | None = None):
    """Return ``(LaplaceSpec, net)`` with prior ``prior_precision * I`` and the
    Fisher estimated on ``laplace_points`` training inputs, ``D = N_train``."""
    splits = splits or prepare_data(cfg)
    if cfg.epochs > 0:
        net = train(cfg, seed, splits).net
    else:
        net = build_network(cfg, splits, seed)
    if cfg.laplace_fisher == "full" and net.loss != "ce":
        raise ConfigError("laplace_fisher = full needs loss = ce; use mc for squared error")
    k = min(cfg.laplace_points or splits.train.N, splits.train.N)
    X = splits.train.inputs[:, :k]
    curv = cv.build_curvature(net, X, cfg.laplace_fisher, seed=seed)
    prior = np.full(net.num_params, cfg.prior_precision)
    return lp.LaplaceSpec(prior, curv, float(splits.train.N), seed=seed), net
