"""Batched rollout, pushforward vector field, benchmarking and report output."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .base_ode import IllConditionedError
from .integrators import IntegrationError
from .systems import SystemSpec, TrajectoryDataset, reference_solution
from .training import BaselineModel, DiffeoModel, DivergenceError

FAILURES = (IntegrationError, DivergenceError, NonFiniteError, IllConditionedError, FloatingPointError)
METRICS = ("mse_interp", "mse_gen", "mae_gen", "time_ms")


def rollout(model: DiffeoModel | BaselineModel, y0, times, h: float | None = None) -> np.ndarray:
    """Trajectories in data units: (T, d) for one initial state, (B, T, d) for rows."""
    y0 = np.asarray(y0, dtype=np.float64)
    single = y0.ndim == 1
    rows = np.atleast_2d(y0)
    pred = model.predict(model.transform.apply(rows), np.asarray(times, dtype=np.float64), h)
    out = model.transform.invert(pred.value)
    return out[0] if single else out


def pushforward_dynamics(model: DiffeoModel, q) -> np.ndarray:
    """Learned target field Y(q) = J_F(F^-1(q)) g(F^-1(q)) in model coordinates."""
    q = np.asarray(q, dtype=np.float64)
    x = model.inn.inverse(np.atleast_2d(q)).value
    g = model.base.dynamics_at(x).value
    v = model.inn.jvp(x, g)
    return v[0] if q.ndim == 1 else v


def fine_times(times, factor: int = 10) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    return np.linspace(times[0], times[-1], (times.size - 1) * factor + 1)


def heldout_initial_conditions(train_ics, n: int, seed: int) -> np.ndarray:
    """Random convex combinations of the training initial conditions."""
    train_ics = np.asarray(train_ics, dtype=np.float64)
    w = np.random.default_rng(seed).dirichlet(np.ones(train_ics.shape[0]), size=n)
    return w @ train_ics


def log_space_mae(pred: np.ndarray, truth: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Per-dimension mean |log10 pred - log10 truth|; non-positive values sit at the floor."""
    lp = np.log10(np.maximum(pred, floor))
    lt = np.log10(np.maximum(truth, floor))
    return np.abs(lp - lt).reshape(-1, pred.shape[-1]).mean(axis=0)


def environment_note() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    threads = os.environ.get("DIFFEO_ODE_THREADS") or os.environ.get("OMP_NUM_THREADS") or str(os.cpu_count())
    return {"cpu": cpu, "threads": threads, "python": platform.python_version(), "numpy": np.__version__}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    repeats: int = 5
    environment: dict = field(default_factory=environment_note)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def add(self, method: str, metric: str, value: float, std: float = float("nan"), outcome: str = "ok"):
        self.rows.append({"method": method, "metric": metric, "value": float(value), "std": float(std),
                          "outcome": outcome})

    def get(self, method: str, metric: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["metric"] == metric:
                return r
        raise KeyError((method, metric))

    def deterministic_rows(self) -> list[dict]:
        return [r for r in self.rows if r["metric"] != "time_ms"]


def time_call(fn, repeats: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Mean and std wall-clock in ms over ``repeats`` after ``warmup`` discarded runs."""
    if repeats < 5:
        raise ValueError(f"time_call: need at least 5 repeats, got {repeats}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(samples)), float(np.std(samples))


_REFERENCE_CACHE: dict[tuple, np.ndarray] = {}


def _reference(spec: SystemSpec, times: np.ndarray) -> np.ndarray:
    # repeated benchmarks (sweeps) reuse the same ground truth
    key = (json.dumps(spec.to_dict(), sort_keys=True), times.tobytes())
    if key not in _REFERENCE_CACHE:
        if len(_REFERENCE_CACHE) > 16:
            _REFERENCE_CACHE.clear()
        _REFERENCE_CACHE[key] = reference_solution(spec, times)[0]
    return _REFERENCE_CACHE[key].copy()


def benchmark(methods: dict, dataset: TrajectoryDataset, repeats: int = 5, spec: SystemSpec | None = None,
              n_heldout: int = 16, resolution: int = 10, seed: int = 0, warmup: int = 2,
              log_space: bool = False, timing: bool = True, config: dict | None = None) -> EvalReport:
    """Interpolation / generalisation errors at ``resolution``x the data grid plus rollout timing.

    Without a ``spec`` the ground truth at finer resolution is unavailable and
    errors are measured on the data grid against ``dataset.clean``.
    """
    if repeats < 5:
        raise ValueError(f"benchmark: need at least 5 repeats, got {repeats}")
    train_ics = dataset.clean[:, 0, :]
    held = heldout_initial_conditions(train_ics, n_heldout, seed)
    if spec is not None:
        times = fine_times(dataset.times, resolution)
        truth_i = _reference(spec, times)
        truth_g = _reference(SystemSpec(**{**spec.to_dict(), "initial_conditions": held.tolist()}), times)
    else:
        times = dataset.times
        truth_i = truth_g = dataset.clean
        held = train_ics
    report = EvalReport(repeats=repeats, config_hash=config_hash(config or {}),
                        meta={"heldout_initial_conditions": held.tolist(), "resolution": resolution,
                              "n_times": int(times.size), "seed": seed})
    metrics = list(METRICS) + ([f"log_mae_x{i + 1}" for i in range(dataset.dim)] if log_space else [])
    for name, model in methods.items():
        try:
            pred_i = rollout(model, train_ics, times)
            pred_g = rollout(model, held, times)
            if not (np.all(np.isfinite(pred_i)) and np.all(np.isfinite(pred_g))):
                raise NonFiniteError(f"{name}: non-finite rollout")
        except FAILURES as e:
            flag = getattr(e, "flag", type(e).__name__)
            for metric in metrics:
                report.add(name, metric, float("nan"), float("nan"), flag)
            continue
        mse_i = ((pred_i - truth_i) ** 2).mean(axis=(1, 2))
        mse_g = ((pred_g - truth_g) ** 2).mean(axis=(1, 2))
        mae_g = np.abs(pred_g - truth_g).mean(axis=(1, 2))
        report.add(name, "mse_interp", mse_i.mean(), mse_i.std())
        report.add(name, "mse_gen", mse_g.mean(), mse_g.std())
        report.add(name, "mae_gen", mae_g.mean(), mae_g.std())
        if timing:
            mean_ms, std_ms = time_call(lambda: rollout(model, held, times), repeats, warmup)
        else:
            mean_ms, std_ms = float("nan"), float("nan")
        report.add(name, "time_ms", mean_ms, std_ms)
        if log_space:
            for i, v in enumerate(log_space_mae(pred_i, truth_i)):
                report.add(name, f"log_mae_x{i + 1}", v)
    return report


# ---------------------------------------------------------------- output

REPORT_FIELDS = ("method", "metric", "value", "std", "outcome")


def emit_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (method,metric,value,std,outcome) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for row in report.rows:
                w.writerow({**row, "value": repr(row["value"]), "std": repr(row["std"])})
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"rows": report.rows, "repeats": report.repeats, "environment": report.environment,
                       "config_hash": report.config_hash, "meta": report.meta}, fh, indent=2, sort_keys=True)
    except OSError as e:
        raise OSError(f"could not write report to {path}: {e}") from e
    return csv_path, json_path


def _limits(values: np.ndarray, log: bool) -> tuple[float, float]:
    v = values[np.isfinite(values)]
    if log:
        v = v[v > 0]
        if v.size == 0:
            return 0.0, 1.0
        return float(math.floor(np.log10(v.min()))), float(math.ceil(np.log10(v.max())))
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def emit_plot(trajectories, path, data=None, log_y: bool = False, overlay: bool = False,
              title: str = "", width: int = 640, panel_height: int = 220) -> Path:
    """SVG of generated trajectories (red polylines) over data points (blue circles).

    ``trajectories`` and ``data`` are sequences of ``(times, states[T, d])``.
    One panel per dimension, or a single panel holding every dimension when
    ``overlay`` is set.  With ``log_y`` non-positive values are omitted and the
    axis limits snap to whole decades; each panel records its limits in
    ``data-ymin``/``data-ymax`` (log10 units when ``log_y``).
    """
    path = Path(path)
    trajectories = [(np.asarray(t, float), np.atleast_2d(np.asarray(y, float))) for t, y in trajectories]
    data = [(np.asarray(t, float), np.atleast_2d(np.asarray(y, float))) for t, y in (data or [])]
    series = trajectories + data
    if not series:
        raise ValueError("emit_plot: nothing to plot")
    dim = series[0][1].shape[1]
    panels = [list(range(dim))] if overlay else [[i] for i in range(dim)]
    tmin = min(float(t.min()) for t, _ in series)
    tmax = max(float(t.max()) for t, _ in series)
    tspan = tmax - tmin or 1.0
    margin_l, margin_r, margin_t, margin_b = 60, 15, 25, 25
    height = len(panels) * panel_height
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")
    for p, dims in enumerate(panels):
        vals = np.concatenate([y[:, dims].ravel() for _, y in series])
        lo, hi = _limits(vals, log_y)
        y_top = p * panel_height + margin_t
        ph = panel_height - margin_t - margin_b
        pw = width - margin_l - margin_r

        def sx(t):
            return margin_l + (t - tmin) / tspan * pw

        def sy(v):
            v = np.log10(v) if log_y else v
            return y_top + ph - (v - lo) / ((hi - lo) or 1.0) * ph

        label = "all dims" if overlay else f"x{dims[0] + 1}"
        out.append(f'<g class="panel" data-dims="{",".join(str(d + 1) for d in dims)}" '
                   f'data-scale="{"log" if log_y else "linear"}" data-ymin="{lo!r}" data-ymax="{hi!r}">')
        out.append(f'<rect x="{margin_l}" y="{y_top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
        unit = "1e" if log_y else ""
        out.append(f'<text x="4" y="{y_top + 10}" font-size="10">{unit}{hi:g}</text>')
        out.append(f'<text x="4" y="{y_top + ph}" font-size="10">{unit}{lo:g}</text>')
        out.append(f'<text x="{margin_l + 4}" y="{y_top - 6}" font-size="11">{label}</text>')
        for d in dims:
            for t, y in data:
                for ti, vi in zip(t, y[:, d]):
                    if np.isfinite(vi) and (vi > 0 or not log_y):
                        out.append(f'<circle cx="{sx(ti):.2f}" cy="{sy(vi):.2f}" r="2" fill="blue"/>')
            for t, y in trajectories:
                ok = np.isfinite(y[:, d]) & ((y[:, d] > 0) if log_y else True)
                pts = " ".join(f"{sx(ti):.2f},{sy(vi):.2f}" for ti, vi in zip(t[ok], y[ok, d]))
                out.append(f'<polyline points="{pts}" fill="none" stroke="red" stroke-width="1.2"/>')
        out.append("</g>")
    out.append("</svg>")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"could not write plot to {path}: {e}") from e
    return path
