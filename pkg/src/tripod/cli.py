"""Command-line entry points: train, eval, traverse, sweep, bench, oracle, dump.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 no checkpoint cleared the PSNR filter (1 for failed oracle checks).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, data, images, metrics, model, oracles
from .model import Checkpoint, ConfigError, NoCheckpointPassed, TrainConfig
from .tensor import NumericalError

log = logging.getLogger("tripod")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NO_CHECKPOINT = 0, 1, 2, 3, 4
DEFAULT_PSNR = 35.0
FLOAT_DIGITS = 10
VERSION = f"v{__version__}"


# -- run configuration ---------------------------------------------------------
@dataclasses.dataclass
class RunConfig:
    """A flat JSON file: every :class:`TrainConfig` key plus the run-level keys below."""

    train: TrainConfig
    dataset: str = "blob"
    out_dir: str | None = None
    psnr_threshold: float = DEFAULT_PSNR

    RUN_KEYS = ("dataset", "out_dir", "psnr_threshold")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        run = {k: d[k] for k in cls.RUN_KEYS if k in d}
        rest = {k: v for k, v in d.items() if k not in cls.RUN_KEYS}
        try:
            train = TrainConfig.from_dict(rest)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(train, **run)
        if cfg.dataset not in data.PROCESSES:
            raise ConfigError(f"unknown dataset {cfg.dataset!r}; choose from {sorted(data.PROCESSES)}")
        if not isinstance(cfg.psnr_threshold, (int, float)):
            raise ConfigError("psnr_threshold must be a number")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls(TrainConfig())
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "dataset": self.dataset, "out_dir": self.out_dir,
                "psnr_threshold": self.psnr_threshold}


def resolve_seed(config_seed: int, flag: int | None) -> int:
    """Flag beats the ``TRIPOD_SEED`` environment variable, which beats the config file."""
    if flag is not None:
        return flag
    env = os.environ.get("TRIPOD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TRIPOD_SEED must be an integer, got {env!r}") from None
    return config_seed


# -- deterministic serialization ---------------------------------------------------
def _fixed(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return round(value, FLOAT_DIGITS)
    if isinstance(value, (np.floating,)):
        return _fixed(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_fixed(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _fixed(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_fixed(v) for v in value]
    return value


def provenance(config_hash: int, seed: int) -> dict:
    return {"config_hash": f"{config_hash:016x}", "seed": seed, "version": VERSION}


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_fixed(payload), indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.{FLOAT_DIGITS}f}"
    return str(v)


def write_csv(path: Path, rows: list[dict], prov: dict, columns: list[str] | None = None) -> None:
    """CSV with the provenance fields appended as constant columns."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*columns, *prov])
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns] + [prov[k] for k in prov])
    path.write_text(buf.getvalue())


def _comment(prov: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in prov.items())


# -- train ---------------------------------------------------------------------------
STEP_COLUMNS = ["step", "loss", "recon", "klm", "nhp", "psnr"]
EVAL_COLUMNS = ["step", "InfoM", "InfoC", "psnr", "n_active"]


def quick_evaluator(dataset: data.Dataset, dtype: str):
    """InfoM/InfoC/PSNR on every configuration of the process (no trained probes)."""
    x = dataset.flat.astype(dtype)

    def evaluate(m: model.Autoencoder) -> dict:
        c, z = m.latents(x)
        p = model.psnr(dataset.flat, m.reconstruct(x))
        report, _ = metrics.evaluate_latents(dataset.sources, c, z, p, full=False)
        return report

    return evaluate


def run_training(cfg: RunConfig, out: Path | None) -> dict:
    """Train, write checkpoints and logs, and return the run summary (selection included)."""
    ds = data.Dataset.build(cfg.dataset)
    train_cfg = cfg.train
    prov = provenance(train_cfg.hash(), train_cfg.seed)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def on_eval(ckpt: Checkpoint, _metrics: dict) -> None:
        if out is not None:
            model.save_checkpoint(ckpt, out / f"ckpt_{ckpt.step:06d}.trpd")

    t0 = time.perf_counter()
    result = model.train(train_cfg, ds, evaluate=quick_evaluator(ds, train_cfg.dtype), on_eval=on_eval)
    elapsed = time.perf_counter() - t0
    summary = {**prov, "dataset": cfg.dataset, "config": train_cfg.to_dict(), "n_checkpoints": len(result.checkpoints),
               "psnr_threshold": cfg.psnr_threshold, "best_psnr": max(e["psnr"] for e in result.eval_log)}
    try:
        idx, ckpt = model.select_checkpoint(result.checkpoints, result.eval_log, cfg.psnr_threshold)
        summary.update(selected_step=ckpt.step, **{f"selected_{k}": v for k, v in result.eval_log[idx].items()
                                                   if k != "step"})
    except NoCheckpointPassed:
        summary["selected_step"] = None
    if out is not None:
        write_csv(out / "steps.csv", result.step_log, prov, STEP_COLUMNS)
        write_csv(out / "evals.csv", result.eval_log, prov, EVAL_COLUMNS)
        write_json(out / "summary.json", summary)
    summary["seconds"] = elapsed
    return summary


def _default_out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir or f"runs/{cfg.train.hash():016x}")


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.train = cfg.train.replace(seed=resolve_seed(cfg.train.seed, args.seed))
    if args.max_updates is not None:
        cfg.train = cfg.train.replace(max_updates=args.max_updates)
    out = Path(args.out) if args.out else _default_out(cfg)
    summary = run_training(cfg, out)
    print(f"trained {summary['config']['max_updates']} updates in {summary['seconds']:.1f}s -> {out}")
    if summary["selected_step"] is None:
        print(f"no checkpoint reached {cfg.psnr_threshold} dB (best {summary['best_psnr']:.2f} dB)")
    else:
        print(f"best InfoM {summary['selected_InfoM']:.4f} at step {summary['selected_step']} "
              f"(PSNR {summary['selected_psnr']:.2f} dB)")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------
def _checkpoint_paths(spec: list[str]) -> list[Path]:
    paths = []
    for s in spec:
        p = Path(s)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.trpd")))
        elif p.exists():
            paths.append(p)
        else:
            raise ConfigError(f"checkpoint not found: {s}")
    if not paths:
        raise ConfigError("no checkpoint files given")
    return paths


def full_report(ckpt: Checkpoint, ds: data.Dataset, seed: int = 0) -> tuple[metrics.MetricsReport, metrics.NmiHeatmap]:
    m = ckpt.model()
    x = ds.flat.astype(ckpt.config.dtype)
    c, z = m.latents(x)
    p = model.psnr(ds.flat, m.reconstruct(x))
    return metrics.evaluate_latents(ds.sources, c, z, p, step=ckpt.step, seed=seed)


def cmd_eval(args) -> int:
    ds = data.Dataset.build(args.dataset)
    paths = _checkpoint_paths(args.checkpoint)
    ckpts = [model.load_checkpoint(p) for p in paths]
    for p, ck in zip(paths, ckpts):
        if ck.n_x != ds.flat.shape[1] or ck.n_s != ds.process.n_s:
            raise ConfigError(f"{p} was trained on {ck.dataset!r}, not compatible with {args.dataset!r}")
    quick = [quick_evaluator(ds, ck.config.dtype)(ck.model()) for ck in ckpts]
    idx, chosen = model.select_checkpoint(ckpts, quick, args.psnr_threshold)
    report, heat = full_report(chosen, ds, seed=args.seed)
    prov = provenance(chosen.config.hash(), chosen.config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**prov, "checkpoint": paths[idx].name, "dataset": args.dataset, "psnr_threshold": args.psnr_threshold,
               **report.to_dict(), "nmi": heat.matrix, "active": heat.active,
               "sources": [name for name, _ in ds.process.sources]}
    write_json(out / "metrics.json", payload)
    write_csv(out / "metrics.csv", [{"checkpoint": paths[idx].name, **report.to_dict()}], prov)
    images.write_ppm(out / "heatmap.ppm", images.heatmap_rgb(heat.matrix, ~heat.active), comment=_comment(prov))
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.to_dict().items()))
    return EXIT_OK


# -- traverse ------------------------------------------------------------------------
def cmd_traverse(args) -> int:
    ckpt = model.load_checkpoint(args.checkpoint)
    ds = data.Dataset.build(ckpt.dataset or args.dataset)
    if not 0 <= args.image_index < len(ds):
        raise ConfigError(f"image index must be in [0, {len(ds)})")
    m = ckpt.model()
    x = ds.flat.astype(ckpt.config.dtype)
    c, z = m.latents(x)
    active = metrics.active_latents(z, c)
    grid, rows = metrics.traversal_image(m, x[args.image_index], z, active, args.steps)
    rgb = np.repeat(images.upscale(grid, args.scale)[:, :, None], 3, axis=2)
    prov = provenance(ckpt.config.hash(), ckpt.config.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    images.write_ppm(out, rgb, comment=_comment(prov) + f"\nrows=latents {rows}")
    print(f"traversal of {len(rows)} active latents {rows} -> {out}")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------------
def parse_grid(spec: str) -> list[dict]:
    """``"lambda_klm=0|1e-3,lambda_nhp=0|0.1"`` -> the Cartesian product as override dicts."""
    axes = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} must look like key=v1|v2")
        key, values = part.split("=", 1)
        parsed = []
        for v in values.split("|"):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        axes.append([(key.strip(), v) for v in parsed])
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_worker(job: tuple[dict, str | None]) -> dict:
    raw, out = job
    cfg = RunConfig.from_dict(raw)
    try:
        summary = run_training(cfg, Path(out) if out else None)
        summary["status"] = "ok" if summary["selected_step"] is not None else "no_checkpoint_passed"
    except NumericalError as exc:
        summary = {"config": cfg.train.to_dict(), "status": f"numerical_error: {exc}", "selected_step": None}
    return summary


def sweep_jobs(base: RunConfig, grid: list[dict], seeds: list[int], out: Path | None) -> list[tuple[dict, str | None]]:
    jobs = []
    for i, overrides in enumerate(grid):
        for seed in seeds:
            raw = {**base.to_dict(), **overrides, "seed": seed}
            RunConfig.from_dict(raw)  # fail fast on bad keys
            run_dir = str(out / f"point{i:03d}_seed{seed}") if out else None
            jobs.append((raw, run_dir))
    return jobs


def run_sweep(jobs: list[tuple[dict, str | None]], workers: int = 1) -> list[dict]:
    if workers <= 1:
        return [_sweep_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_worker, jobs))


def cmd_sweep(args) -> int:
    base = RunConfig.load(args.config)
    grid = parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [resolve_seed(base.train.seed, None)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = sweep_jobs(base, grid, seeds, out)
    summaries = run_sweep(jobs, args.workers)
    keys = sorted({k for g in grid for k in g})
    rows = []
    for (raw, run_dir), s in zip(jobs, summaries):
        rows.append({**{k: raw[k] for k in keys}, "seed": raw["seed"], "status": s["status"],
                     "best_InfoM": s.get("selected_InfoM", ""), "best_InfoC": s.get("selected_InfoC", ""),
                     "selected_step": s.get("selected_step", ""), "best_psnr": s.get("best_psnr", ""),
                     "run_dir": Path(run_dir).name})
    prov = provenance(base.train.hash(), base.train.seed)
    prov["base_seed"] = prov.pop("seed")  # each row carries its own run seed
    write_csv(out / "sweep.csv", rows, prov)
    for r in rows:
        print(" ".join(f"{k}={_fmt(v) if isinstance(v, float) else v}" for k, v in r.items()))
    return EXIT_OK if all(s["status"] == "ok" for s in summaries) else EXIT_NO_CHECKPOINT


# -- bench -----------------------------------------------------------------------------
BENCH_LEGS = {
    "full": {},
    "no_nhp": {"hessian": "off"},
    "no_klm": {"klm": "off"},
    "recon_only": {"klm": "off", "hessian": "off"},
}


def bench(config: TrainConfig, dataset: str = "blob", steps: int = 50, warmup: int = 5) -> dict:
    """Mean seconds per training iteration for each leg configuration, plus the NHP on/off ratio."""
    from .rng import RngState

    ds = data.Dataset.build(dataset)
    x = ds.flat.astype(config.dtype)
    timings = {}
    for name, overrides in BENCH_LEGS.items():
        cfg = config.replace(**overrides)
        rng = RngState(cfg.seed)
        m = model.build_model(cfg, x.shape[1], ds.process.n_s, rng, x.mean(axis=0))
        opt = model.AdamState()
        for i in range(warmup + steps):
            if i == warmup:
                t0 = time.perf_counter()
            batch = x[rng.data.choice(len(x), cfg.n_b, replace=False)]
            model.train_step(m, opt, batch, cfg, rng)
        timings[name] = (time.perf_counter() - t0) / steps
    return {"seconds_per_iteration": timings, "nhp_ratio": timings["full"] / timings["no_nhp"], "steps": steps}


def cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config)
    base = cfg.train
    if base.hessian == "off":
        base = base.replace(hessian="nhp")
    report = bench(base, cfg.dataset, args.steps)
    for name, sec in report["seconds_per_iteration"].items():
        print(f"{name:>11s}: {sec * 1e3:8.2f} ms/iteration")
    print(f"NHP-on / NHP-off ratio: {report['nhp_ratio']:.2f}")
    if args.out:
        write_json(Path(args.out), {**provenance(base.hash(), base.seed), **report})
    return EXIT_OK


# -- oracle ----------------------------------------------------------------------------
def cmd_oracle(args) -> int:
    try:
        results, timings = oracles.run_suites(args.suite.split(","))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for r in results:
        print(r.line())
    for name, sec in timings.items():
        print(f"suite {name}: {sec:.1f}s")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


# -- dump --------------------------------------------------------------------------------
def cmd_dump(args) -> int:
    out = data.dump(data.get_process(args.dataset), args.out)
    print(f"wrote {data.get_process(args.dataset).n_configs} images to {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripod", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=VERSION)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="flat JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default runs/<config hash>)")
    p.add_argument("--max-updates", type=int, help="override max_updates")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for the best passing checkpoint")
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--dataset", default="blob")
    p.add_argument("--psnr-threshold", type=float, default=DEFAULT_PSNR)
    p.add_argument("--seed", type=int, default=0, help="seed for the probe and forest fits")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traverse", help="latent traversal grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--scale", type=int, default=4, help="pixel upscaling factor")
    p.add_argument("--dataset", default="blob", help="used when the checkpoint does not name one")
    p.add_argument("--out", default="traversal.ppm")
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("sweep", help="one run per grid point")
    p.add_argument("--config")
    p.add_argument("--grid", required=True, help='e.g. "lambda_klm=0|1e-3,lambda_nhp=0|0.1"')
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="seconds per iteration by leg")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="numerical oracle suites")
    p.add_argument("--suite", default="all", help="all, or a comma list of " + ", ".join(oracles.SUITES))
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("dump", help="write a dataset as PGM images plus labels.csv")
    p.add_argument("--dataset", default="blob")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoCheckpointPassed as exc:
        print(f"no checkpoint passed: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
