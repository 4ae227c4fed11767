"""Desk-scale comparison of the full objective against naive and ablated variants."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import cli

# Smaller network and a decaying learning rate so every variant clears the
# 35 dB filter within the time budget on one CPU core.
DESK_PRESET: dict = {
    "width": 128,
    "depth": 2,
    "max_updates": 20_000,
    "eval_every": 1_000,
    "lr_decay_from": 0.5,
    "lambda_klm": 1e-2,
    "lambda_nhp": 1e-2,
}

# Zero-weight ablations are run with the leg switched off: same gradients, less work.
VARIANTS: dict[str, dict] = {
    "tripod": {},
    "naive": {"quantizer": "lq", "klm": "klm_naive", "hessian": "vanilla_hp"},
    "no_nhp": {"hessian": "off"},
    "no_klm": {"klm": "off"},
    "fine_fsq": {"n_q": 144},
}


@dataclass
class Comparison:
    runs: dict[str, list[dict]]  # variant -> per-seed summaries
    seconds: float

    def mean_info_m(self, variant: str) -> float:
        vals = [r.get("selected_InfoM") for r in self.runs[variant]]
        return float(np.mean(vals)) if all(v is not None for v in vals) else float("nan")

    def all_pass_filter(self) -> bool:
        return all(r["status"] == "ok" for runs in self.runs.values() for r in runs)

    def ordering_holds(self) -> bool:
        ref = self.mean_info_m("tripod")
        return all(ref >= self.mean_info_m(v) for v in self.runs if v != "tripod")


def default_workers() -> int:
    return int(os.environ.get("TRIPOD_WORKERS", os.cpu_count() or 1))


def run_comparison(seeds=(0, 1, 2), preset: dict | None = None, workers: int | None = None) -> Comparison:
    preset = DESK_PRESET if preset is None else preset
    jobs, names = [], []
    for name, overrides in VARIANTS.items():
        for seed in seeds:
            jobs.append(({**preset, **overrides, "seed": seed, "dataset": "blob"}, None))
            names.append(name)
    t0 = time.perf_counter()
    summaries = cli.run_sweep(jobs, workers or default_workers())
    runs: dict[str, list[dict]] = {name: [] for name in VARIANTS}
    for name, s in zip(names, summaries):
        runs[name].append(s)
    return Comparison(runs, time.perf_counter() - t0)
