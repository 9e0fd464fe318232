"""Command-line entry point: gen | train | eval | bench | sweep.

Every run reads an optional flat ``key = value`` config file, applies
command-line overrides, and writes the fully resolved configuration to
``<out>/run.cfg`` so that ``<command> --config <out>/run.cfg`` replays it.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import os

# single-threaded BLAS unless DIFFEO_ODE_THREADS says otherwise; keeps timings stable
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("DIFFEO_ODE_THREADS", "1"))

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .autodiff import NonFiniteError  # noqa: E402
from .base_ode import BaseConfig, IllConditionedError  # noqa: E402
from .evaluation import benchmark, emit_plot, emit_report, fine_times, rollout, time_call  # noqa: E402
from .inn import INNConfig  # noqa: E402
from .integrators import IntegrationError, SolverConfig  # noqa: E402
from .systems import SYSTEMS, SystemSpec, TrajectoryDataset, generate, load_csv, reference_solution  # noqa: E402
from .training import (DivergenceError, TrainConfig, load_model, save_model, train_baseline,  # noqa: E402
                       train_diffeo, write_history)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

# every key a run understands, with its default as written in run.cfg
DEFAULTS: dict[str, str] = {
    "system": "lv3",
    "seed": "0",
    "samples": "",
    "sigma": "",
    "t_end": "",
    "n_traj": "",
    "data": "",
    "model": "diffeo",
    "model_path": "",
    "inn_blocks": "5",
    "inn_hidden": "1500",
    "clamp": "2.0",
    "base": "linear",
    "stable": "false",
    "eps": "1e-3",
    "base_hidden": "30,30,30",
    "lr": "1e-4",
    "iterations": "5000",
    "schedule": "",
    "loss": "mae",
    "augment": "",
    "clip_norm": "",
    "transform": "none",
    "solver": "rk4",
    "h": "",
    "rtol": "1e-5",
    "atol": "1e-5",
    "min_step": "1e-10",
    "max_steps": "1000000",
    "baseline_hidden": "150,150,150,150,150",
    "methods": "diffeo,euler,midpoint,rk4,dopri5",
    "repeats": "5",
    "heldout": "16",
    "resolution": "10",
    "timing": "true",
    "layers": "2..8",
    "hidden": "500,1000,1500,2000,2500",
    "log_plot": "false",
}


NUMERICAL = (IntegrationError, DivergenceError, NonFiniteError, IllConditionedError, FloatingPointError)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config parsing

def read_config(path) -> dict[str, str]:
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("version", "command"):
                continue
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = value
    return cfg


def write_config(cfg: dict[str, str], command: str, path) -> Path:
    path = Path(path)
    lines = [f"# diffeo-ode {__version__}", f"command = {command}", f"version = {__version__}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _opt(cfg, key, cast):
    value = cfg[key].strip()
    return None if value == "" else cast(value)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def parse_range(text: str) -> list[int]:
    """``2..8`` (inclusive) or ``500,1000`` into a list of ints."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return list(_ints(text))


def parse_schedule(text: str) -> list[tuple[int, float]] | None:
    """``500@1e-4,4500@1e-6`` into [(500, 1e-4), (4500, 1e-6)]."""
    if not text.strip():
        return None
    phases = []
    for part in text.split(","):
        n, lr = part.split("@")
        phases.append((int(n), float(lr)))
    return phases


def system_spec(cfg) -> SystemSpec:
    spec = SystemSpec(
        name=cfg["system"],
        seed=int(cfg["seed"]),
        n_samples=_opt(cfg, "samples", int),
        sigma=_opt(cfg, "sigma", float),
    )
    if cfg["t_end"]:
        spec.t_span = (spec.t_span[0], float(cfg["t_end"]))
    if cfg["n_traj"]:
        spec.initial_conditions = spec.initial_conditions[: int(cfg["n_traj"])]
    return spec


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        lr=float(cfg["lr"]), iterations=int(cfg["iterations"]), schedule=parse_schedule(cfg["schedule"]),
        loss=cfg["loss"], augment=_opt(cfg, "augment", int), clip_norm=_opt(cfg, "clip_norm", float),
        transform=cfg["transform"], seed=int(cfg["seed"]),
    )


def inn_config(cfg, blocks=None, hidden=None) -> INNConfig:
    return INNConfig(blocks=int(blocks or cfg["inn_blocks"]), hidden=hidden or _ints(cfg["inn_hidden"]),
                     clamp=float(cfg["clamp"]), seed=int(cfg["seed"]))


def base_config(cfg) -> BaseConfig:
    return BaseConfig(kind=cfg["base"], stable=_bool(cfg["stable"]), eps=float(cfg["eps"]),
                      hidden=_ints(cfg["base_hidden"]), seed=int(cfg["seed"]) + 1)


def solver_config(cfg, method=None) -> SolverConfig:
    return SolverConfig(method=method or cfg["solver"], h=_opt(cfg, "h", float), rtol=float(cfg["rtol"]),
                        atol=float(cfg["atol"]), min_step=float(cfg["min_step"]), max_steps=int(cfg["max_steps"]))


def load_dataset(cfg) -> tuple[TrajectoryDataset, SystemSpec | None]:
    if cfg["data"]:
        return load_csv(cfg["data"]), None
    spec = system_spec(cfg)
    return generate(spec), spec


# ---------------------------------------------------------------- commands

def _write_outcome(out: Path, result) -> None:
    info = {"outcome": result.outcome, "failed_iteration": result.failed_iteration,
            "message": result.message, "final_loss": result.final_loss,
            "iterations": len(result.history)}
    (out / "outcome.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen(cfg, out: Path) -> int:
    ds = generate(system_spec(cfg))
    ds.save_csv(out / "dataset.csv")
    clean = TrajectoryDataset(ds.times, ds.clean, ds.clean, {**ds.meta, "states": "clean"})
    clean.save_csv(out / "dataset_clean.csv")
    return EXIT_OK


def _train_one(cfg, ds):
    tcfg = train_config(cfg)
    if cfg["model"] == "diffeo":
        return train_diffeo(ds, inn_config(cfg), base_config(cfg), tcfg)
    if cfg["model"] == "baseline":
        return train_baseline(ds, solver_config(cfg), _ints(cfg["baseline_hidden"]), tcfg)
    raise UsageError(f"model must be 'diffeo' or 'baseline', got {cfg['model']!r}")


def cmd_train(cfg, out: Path) -> int:
    ds, _ = load_dataset(cfg)
    result = _train_one(cfg, ds)
    save_model(result.model, out / "model.npz")
    write_history(result.history, out / "loss_history.csv")
    _write_outcome(out, result)
    if result.outcome != "ok":
        print(f"training stopped: {result.outcome} at iteration {result.failed_iteration}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _plots(methods: dict, ds: TrajectoryDataset, spec, cfg, out: Path) -> None:
    times = fine_times(ds.times, int(cfg["resolution"]))
    data = [(ds.times, ds.observed[b]) for b in range(ds.n_traj)]
    for name, model in methods.items():
        try:
            gen = rollout(model, ds.clean[:, 0, :], times)
        except NUMERICAL:
            continue
        emit_plot([(times, g) for g in gen], out / f"plot_{name}.svg", data=data,
                  log_y=_bool(cfg["log_plot"]), title=f"{name} on {spec.name if spec else 'external data'}")


def cmd_eval(cfg, out: Path) -> int:
    if not cfg["model_path"]:
        raise UsageError("eval needs model_path (--model-path)")
    model = load_model(cfg["model_path"])
    ds, spec = load_dataset(cfg)
    methods = {model.kind: model}
    report = benchmark(methods, ds, repeats=int(cfg["repeats"]), spec=spec, n_heldout=int(cfg["heldout"]),
                       resolution=int(cfg["resolution"]), seed=int(cfg["seed"]), timing=_bool(cfg["timing"]),
                       config=cfg)
    emit_report(report, out / "report")
    _plots(methods, ds, spec, cfg, out)
    return EXIT_OK


def cmd_bench(cfg, out: Path) -> int:
    ds, spec = load_dataset(cfg)
    methods, outcomes = {}, {}
    for name in [m.strip() for m in cfg["methods"].split(",") if m.strip()]:
        if name == "diffeo":
            result = train_diffeo(ds, inn_config(cfg), base_config(cfg), train_config(cfg))
        else:
            result = train_baseline(ds, solver_config(cfg, name), _ints(cfg["baseline_hidden"]), train_config(cfg))
        outcomes[name] = result.outcome
        write_history(result.history, out / f"loss_history_{name}.csv")
        methods[name] = result.model
    report = benchmark(methods, ds, repeats=int(cfg["repeats"]), spec=spec, n_heldout=int(cfg["heldout"]),
                       resolution=int(cfg["resolution"]), seed=int(cfg["seed"]), timing=_bool(cfg["timing"]),
                       log_space=spec is not None and spec.name.startswith("rober"), config=cfg)
    for row in report.rows:
        if outcomes.get(row["method"], "ok") != "ok":
            row["outcome"] = f"train:{outcomes[row['method']]}"
    emit_report(report, out / "report")
    _plots(methods, ds, spec, cfg, out)
    return EXIT_OK


SWEEP_FIELDS = ("layers", "hidden", "time_ms", "time_std", "mse_interp", "mse_gen", "final_loss", "outcome")


def cmd_sweep(cfg, out: Path) -> int:
    ds, spec = load_dataset(cfg)
    layers, hiddens = parse_range(cfg["layers"]), parse_range(cfg["hidden"])
    rows = []
    for n_layers in layers:
        for hidden in hiddens:
            row = {"layers": n_layers, "hidden": hidden}
            try:
                result = train_diffeo(ds, inn_config(cfg, n_layers, (hidden,)), base_config(cfg), train_config(cfg))
                report = benchmark({"diffeo": result.model}, ds, repeats=int(cfg["repeats"]), spec=spec,
                                   n_heldout=int(cfg["heldout"]), resolution=int(cfg["resolution"]),
                                   seed=int(cfg["seed"]), timing=_bool(cfg["timing"]), config=cfg)
                t = report.get("diffeo", "time_ms")
                row.update(time_ms=t["value"], time_std=t["std"],
                           mse_interp=report.get("diffeo", "mse_interp")["value"],
                           mse_gen=report.get("diffeo", "mse_gen")["value"],
                           final_loss=result.final_loss, outcome=t["outcome"])
            except NUMERICAL as e:
                row.update(time_ms=float("nan"), time_std=float("nan"), mse_interp=float("nan"),
                           mse_gen=float("nan"), final_loss=float("nan"), outcome=type(e).__name__)
            rows.append(row)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(SWEEP_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in SWEEP_FIELDS) + "\n")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffeo-ode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"diffeo-ode {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        for key in DEFAULTS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
    return parser


def resolve(args) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if cfg["system"] not in SYSTEMS and not cfg["data"]:
        raise UsageError(f"unknown system {cfg['system']!r}; choose from {', '.join(SYSTEMS)}")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, args.command, out / "run.cfg")
        (out / "seed").write_text(cfg["seed"] + "\n", encoding="utf-8")
        (out / "VERSION").write_text(__version__ + "\n", encoding="utf-8")
        return COMMANDS[args.command](cfg, out)
    except NUMERICAL as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
