"""End-to-end experiment orchestration and machine-readable reports.

Runs the policy/reachability/counting/CQR pipeline over a grid of initial
SoC values, target bands, and start windows; emits a deterministic JSON
report plus CSV plot-data files mirroring the case-study figures.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import evaluate_coverage, fit_conformal
from .market_data import DayPrices, compute_bounds, fit_distribution, load_day_matrix, split_dataset
from .reachability import (
    TargetBand,
    count_feasible_trajectories,
    policy_action_probabilities,
    propagate,
    stopping_time,
    terminal_band_probability,
)
from .thresholds import BatteryParams, run_policy


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, diff-friendly experiment description (key = value with dots)."""

    battery: BatteryParams
    bands: tuple[TargetBand, ...]
    e0_sweep: tuple[float, ...]
    start_steps: tuple[int, ...]
    epsilon: float = 0.1
    k_grid: tuple[tuple[int, int], ...] = ()
    threshold_mode: str = "static"
    bounds_mode: str = "per-hour"
    post_stop_mode: str = "full-control"
    seed: int = 0
    data_path: str | None = None
    synthetic_days: int = 120
    synthetic_mu: float = math.log(30.0)
    synthetic_sigma: float = 0.35
    synthetic_amplitude: float = 0.5
    cqr_epochs: int = 400
    cqr_band: TargetBand | None = None
    workers: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        for e0 in self.e0_sweep:
            if not self.battery.e_min <= e0 <= self.battery.e_max:
                raise ValueError(f"e0 sweep value {e0} outside capacity")
        for n in self.start_steps:
            if not 1 <= n <= self.battery.horizon:
                raise ValueError(f"start step count {n} outside 1..{self.battery.horizon}")

    def canonical_text(self) -> str:
        """Stable key = value rendering used for hashing and provenance."""
        lines = [
            f"battery.e_min = {self.battery.e_min!r}",
            f"battery.e_max = {self.battery.e_max!r}",
            f"battery.rate = {self.battery.rate!r}",
            f"battery.e0 = {self.battery.e0!r}",
            f"battery.horizon = {self.battery.horizon}",
            "bands = " + ", ".join(f"{b.lo!r}:{b.hi!r}" for b in self.bands),
            "e0_sweep = " + ", ".join(repr(v) for v in self.e0_sweep),
            "start_steps = " + ", ".join(str(v) for v in self.start_steps),
            f"epsilon = {self.epsilon!r}",
            "k_grid = " + ", ".join(f"{a}:{b}" for a, b in self.k_grid),
            f"threshold_mode = {self.threshold_mode}",
            f"bounds_mode = {self.bounds_mode}",
            f"post_stop = {self.post_stop_mode}",
            f"seed = {self.seed}",
            f"data.day_matrix = {self.data_path or ''}",
            f"synthetic.n_days = {self.synthetic_days}",
            f"synthetic.mu = {self.synthetic_mu!r}",
            f"synthetic.sigma = {self.synthetic_sigma!r}",
            f"synthetic.amplitude = {self.synthetic_amplitude!r}",
            f"cqr.epochs = {self.cqr_epochs}",
            "cqr.band = "
            + (f"{self.cqr_band.lo!r}:{self.cqr_band.hi!r}" if self.cqr_band else ""),
            f"workers = {self.workers}",
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def _parse_band(text: str) -> TargetBand:
    lo, hi = (float(p) for p in text.split(":"))
    return TargetBand.from_interval(lo, hi)


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key = value config format (# starts a comment)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()

    def get(key, default=None):
        return raw.get(key, default)

    battery = BatteryParams(
        e_min=float(get("battery.e_min", 0.0)),
        e_max=float(get("battery.e_max", 10.0)),
        rate=float(get("battery.rate", 2.0)),
        e0=float(get("battery.e0", 5.0)),
        horizon=int(get("battery.horizon", 24)),
    )
    bands = tuple(
        _parse_band(part.strip())
        for part in get("bands", "5:7, 3:8").split(",")
        if part.strip()
    )
    k_grid = tuple(
        tuple(int(x) for x in part.strip().split(":"))
        for part in get("k_grid", "").split(",")
        if part.strip()
    )
    cqr_band_text = get("cqr.band", "")
    return ExperimentConfig(
        battery=battery,
        bands=bands,
        e0_sweep=tuple(
            float(v) for v in get("e0_sweep", "1, 5, 9").split(",") if v.strip()
        ),
        start_steps=tuple(
            int(v) for v in get("start_steps", "8, 6, 4, 2").split(",") if v.strip()
        ),
        epsilon=float(get("epsilon", 0.1)),
        k_grid=k_grid,
        threshold_mode=get("threshold_mode", "static"),
        bounds_mode=get("bounds_mode", "per-hour"),
        post_stop_mode=get("post_stop", "full-control"),
        seed=int(get("seed", 0)),
        data_path=get("data.day_matrix") or None,
        synthetic_days=int(get("synthetic.n_days", 120)),
        synthetic_mu=float(get("synthetic.mu", math.log(30.0))),
        synthetic_sigma=float(get("synthetic.sigma", 0.35)),
        synthetic_amplitude=float(get("synthetic.amplitude", 0.5)),
        cqr_epochs=int(get("cqr.epochs", 400)),
        cqr_band=_parse_band(cqr_band_text) if cqr_band_text else None,
        workers=int(get("workers", 0)),
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def synthetic_day_matrix(
    n_days: int,
    horizon: int,
    seed: int,
    mu: float = math.log(30.0),
    sigma: float = 0.35,
    amplitude: float = 0.5,
) -> list[DayPrices]:
    """Seeded lognormal day matrix with a sinusoidal intraday level pattern."""
    if n_days < 1 or horizon < 1:
        raise ValueError("n_days and horizon must be positive")
    rng = np.random.default_rng(seed)
    hours = np.arange(horizon)
    level = mu + amplitude * np.sin(2.0 * math.pi * (hours - 4.0) / max(horizon, 2))
    days = []
    for d in range(n_days):
        prices = np.exp(level + sigma * rng.standard_normal(horizon))
        days.append(DayPrices(f"synthetic-{d:04d}", tuple(float(p) for p in prices)))
    return days


@dataclass(frozen=True)
class Report:
    """JSON-serializable experiment report with stable field ordering."""

    payload: dict = field(repr=False)

    def to_json(self) -> str:
        return json.dumps(self.payload, sort_keys=True, indent=2) + "\n"

    def without_timestamp(self) -> dict:
        doc = dict(self.payload)
        doc.pop("created_utc", None)
        return doc


def _window_days(days, n):
    return [DayPrices(d.day_id, d.values[-n:]) for d in days]


def _cell_result(config, train_days, test_days, e0, band, n_steps):
    battery = config.battery
    params = BatteryParams(battery.e_min, battery.e_max, battery.rate, e0, n_steps)
    in_band, total, pct = count_feasible_trajectories(params, n_steps, band)
    cell = {
        "counting": {"in_band": in_band, "total": total, "pct": pct},
    }
    if config.k_grid:
        train_w = _window_days(train_days, n_steps)
        test_w = _window_days(test_days, n_steps)
        bounds = compute_bounds(train_w, 1, config.bounds_mode)
        dist = fit_distribution(train_w)
        policies = {}
        for k_ch, k_dis in config.k_grid:
            probs = policy_action_probabilities(
                params, dist, bounds, k_ch, k_dis, config.threshold_mode
            )
            soc_dist = propagate(params, probs, k_ch, k_dis, mode="augmented")
            p_band = terminal_band_probability(soc_dist, band)
            stop = stopping_time(params, probs, band, config.epsilon, config.post_stop_mode)
            profits = [
                run_policy(day, params, k_ch, k_dis, config.threshold_mode, bounds).profit
                for day in test_w
            ]
            policies[f"k={k_ch}x{k_dis}"] = {
                "p_band": p_band,
                "tau_star": stop.tau_star,
                "profit": {
                    "mean": float(np.mean(profits)),
                    "min": float(np.min(profits)),
                    "max": float(np.max(profits)),
                },
            }
        cell["policies"] = policies
    return cell


def run_experiment(config: ExperimentConfig) -> Report:
    """Execute the full experiment grid and assemble the report.

    Cells run on a thread pool; per-cell failures are recorded in place of the
    cell body rather than aborting the run.  Identical configs and seeds
    reproduce identical reports except for the timestamp.
    """
    if config.data_path:
        days = load_day_matrix(config.data_path)
        if any(len(d.values) != config.battery.horizon for d in days):
            raise ValueError("day matrix horizon does not match battery.horizon")
    else:
        days = synthetic_day_matrix(
            config.synthetic_days,
            config.battery.horizon,
            config.seed,
            config.synthetic_mu,
            config.synthetic_sigma,
            config.synthetic_amplitude,
        )
    split = split_dataset(days, (0.6, 0.2, 0.2), seed=config.seed, shuffled=False)
    train_days, calib_days, test_days = list(split.train), list(split.calib), list(split.test)

    grid = [
        (e0, band, n)
        for e0 in config.e0_sweep
        for band in config.bands
        for n in config.start_steps
    ]

    def run_cell(args):
        e0, band, n = args
        key = f"e0={e0:g}|band=[{band.lo:g},{band.hi:g}]|steps={n}"
        try:
            return key, _cell_result(config, train_days, test_days, e0, band, n)
        except Exception as exc:  # recorded, not fatal
            return key, {"error": f"{type(exc).__name__}: {exc}"}

    workers = config.workers or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        cells = dict(pool.map(run_cell, grid))

    payload = {
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config_hash": config.config_hash(),
        "config": config.canonical_text(),
        "seeds": {"master": config.seed},
        "n_days": {"train": len(train_days), "calib": len(calib_days), "test": len(test_days)},
        "cells": {k: cells[k] for k in sorted(cells)},
    }

    if config.k_grid:
        payload["plot_data"] = _plot_blocks(config, train_days, cells)

    cqr_band = config.cqr_band or config.bands[-1]
    payload["cqr"] = _cqr_block(config, train_days, calib_days, test_days, cqr_band)
    return Report(payload)


def _plot_blocks(config, train_days, cells):
    battery = config.battery
    k_ch, k_dis = config.k_grid[0]
    band = config.bands[0]
    bounds = compute_bounds(train_days, 1, config.bounds_mode)
    dist = fit_distribution(train_days)
    probs = policy_action_probabilities(
        battery, dist, bounds, k_ch, k_dis, config.threshold_mode
    )
    soc_dist = propagate(battery, probs, k_ch, k_dis, mode="augmented")
    heatmap = []
    for t in range(soc_dist.horizon + 1):
        for e, mass in sorted(soc_dist.marginal(t).items()):
            heatmap.append([t, e, mass])
    stop = stopping_time(battery, probs, band, config.epsilon, config.post_stop_mode)
    qt_rows = [[t, q] for t, q in enumerate(stop.big_q, start=1)]
    profit_rows = []
    for key in sorted(cells):
        cell = cells[key]
        for pol_key, pol in sorted(cell.get("policies", {}).items()):
            profit_rows.append([key, pol_key, pol["profit"]["mean"]])
    return {
        "soc_heatmap": heatmap,
        "qt_curve": qt_rows,
        "profit_curve": profit_rows,
        "reference_cell": {"k_ch": k_ch, "k_dis": k_dis, "band": [band.lo, band.hi]},
    }


def _cqr_block(config, train_days, calib_days, test_days, band):
    battery = config.battery
    k_ch, k_dis = config.k_grid[0] if config.k_grid else (3, 3)
    rows = {}
    coverage_curve = []
    bounds = compute_bounds(train_days, 1, config.bounds_mode)
    for e0 in config.e0_sweep:
        params = BatteryParams(battery.e_min, battery.e_max, battery.rate, e0, battery.horizon)
        try:
            model = fit_conformal(
                train_days,
                calib_days,
                params,
                bounds,
                k_ch,
                k_dis,
                config.epsilon,
                config.threshold_mode,
                epochs=config.cqr_epochs,
                seed=config.seed,
            )
            report = evaluate_coverage(
                model, test_days, params, bounds, k_ch, k_dis, band, config.threshold_mode
            )
            rows[f"e0={e0:g}"] = {
                "delta_hat": model.delta_hat,
                "marginal_coverage": report.marginal_coverage,
                "band_certificate_rate": report.band_certificate_rate,
                "mean_interval_width": report.mean_interval_width,
                "n_test": report.n_test,
            }
            coverage_curve.append(
                [e0, report.marginal_coverage, report.band_certificate_rate]
            )
        except Exception as exc:  # recorded, not fatal
            rows[f"e0={e0:g}"] = {"error": f"{type(exc).__name__}: {exc}"}
    return {
        "epsilon": config.epsilon,
        "band": [band.lo, band.hi],
        "k": [k_ch, k_dis],
        "per_e0": rows,
        "coverage_curve": coverage_curve,
    }


PLOT_HEADERS = {
    "soc-heatmap": ("t", "e", "mass"),
    "Qt-curve": ("t", "Q_t"),
    "profit-curve": ("cell", "policy", "mean_profit"),
    "coverage-curve": ("e0", "marginal_coverage", "band_certificate_rate"),
}

_PLOT_BLOCKS = {
    "soc-heatmap": ("plot_data", "soc_heatmap"),
    "Qt-curve": ("plot_data", "qt_curve"),
    "profit-curve": ("plot_data", "profit_curve"),
    "coverage-curve": ("cqr", "coverage_curve"),
}


def emit_plot_data(report: Report, kind: str, path) -> None:
    """Write one plot-data CSV (header documented per kind) from a report."""
    if kind not in PLOT_HEADERS:
        raise ValueError(f"unknown plot kind {kind!r}; valid: {sorted(PLOT_HEADERS)}")
    outer, inner = _PLOT_BLOCKS[kind]
    block = report.payload.get(outer, {}).get(inner)
    if block is None:
        raise ValueError(f"report is missing the {kind} block ({outer}.{inner})")
    lines = [",".join(PLOT_HEADERS[kind])]
    for row in block:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
