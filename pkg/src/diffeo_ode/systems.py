"""Ground-truth benchmark dynamics, noisy dataset generation and CSV I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .integrators import IntegrationError, SolverConfig, integrate

LV3_IC = [(5, 5, 1), (2, 6, 6), (3, 1, 4), (7, 1, 2), (6, 2, 4), (3, 3, 1), (2, 2, 2), (4, 4, 3), (3, 3, 4), (1, 1, 5)]

# rober rates k1..k5 in
#   x' = -k1 x + k2 y z,  y' = k1 x - k3 y^2 - k4 y z,  z' = k5 y^2
ROBER_RATES = {
    "rober": (0.04, 3e4, 3e4, 1e4, 3e4),
    "rober_matched": (0.04, 3e4, 3e4, 3e4, 3e4),
    "rober_classical": (0.04, 1e4, 3e7, 1e4, 3e7),
}

DEFAULTS = {
    "lv3": dict(params={"c": 0.75}, t_span=(0.0, 7.0), initial_conditions=LV3_IC, sigma=0.05, n_samples=50),
    "lorenz_paper": dict(params={"sigma": 10.0, "rho": 28.0, "beta": 8 / 3}, t_span=(0.0, 2.0),
                         initial_conditions=[(0.15, 0.15, 0.15)], sigma=0.0, n_samples=100),
    "lorenz_standard": dict(params={"sigma": 10.0, "rho": 28.0, "beta": 8 / 3}, t_span=(0.0, 2.0),
                            initial_conditions=[(0.15, 0.15, 0.15)], sigma=0.0, n_samples=100),
}
for _name, _k in ROBER_RATES.items():
    DEFAULTS[_name] = dict(params=dict(zip(("k1", "k2", "k3", "k4", "k5"), _k)), t_span=(0.0, 120.0),
                           initial_conditions=[(1.0, 0.0, 0.0)], sigma=0.0, n_samples=61)

SYSTEMS = tuple(DEFAULTS)


def system_params(name: str, overrides: dict | None = None) -> dict:
    if name not in DEFAULTS:
        raise KeyError(f"unknown system {name!r}; choose from {SYSTEMS}")
    params = dict(DEFAULTS[name]["params"])
    params.update(overrides or {})
    return params


def eval_dynamics(name: str, state, params: dict | None = None) -> np.ndarray:
    """Right-hand side of the named system for a state (or rows of states)."""
    p = system_params(name, params)
    s = np.asarray(state, dtype=np.float64)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    if name == "lv3":
        c = p["c"]
        d = (x * (c - c * y), y * (-c + c * x - c * z), z * (-c + c * y))
    elif name == "lorenz_paper":
        # as printed: y' = x (rho - y) - x
        d = (p["sigma"] * (y - x), x * (p["rho"] - y) - x, x * y - p["beta"] * z)
    elif name == "lorenz_standard":
        d = (p["sigma"] * (y - x), x * (p["rho"] - z) - y, x * y - p["beta"] * z)
    else:
        k1, k2, k3, k4, k5 = (p[k] for k in ("k1", "k2", "k3", "k4", "k5"))
        d = (-k1 * x + k2 * y * z, k1 * x - k3 * y * y - k4 * y * z, k5 * y * y)
    return np.stack(d, axis=-1)


def jacobian(name: str, state, params: dict | None = None) -> np.ndarray:
    """Analytic Jacobian of the rober variants (used by the implicit reference solver)."""
    p = system_params(name, params)
    if name not in ROBER_RATES:
        raise KeyError(f"analytic jacobian only provided for rober variants, not {name!r}")
    x, y, z = np.asarray(state, dtype=np.float64)
    k1, k2, k3, k4, k5 = (p[k] for k in ("k1", "k2", "k3", "k4", "k5"))
    return np.array([
        [-k1, k2 * z, k2 * y],
        [k1, -2 * k3 * y - k4 * z, -k4 * y],
        [0.0, 2 * k5 * y, 0.0],
    ])


@dataclass
class SystemSpec:
    name: str = "lv3"
    params: dict = field(default_factory=dict)
    t_span: tuple[float, float] | None = None
    n_samples: int | None = None
    initial_conditions: list | None = None
    sigma: float | None = None
    seed: int = 0
    reference: str | None = None  # "rk4" | "dopri5" | "radau"; None picks per system

    def __post_init__(self):
        if self.name not in DEFAULTS:
            raise KeyError(f"unknown system {self.name!r}; choose from {SYSTEMS}")
        d = DEFAULTS[self.name]
        self.params = system_params(self.name, self.params)
        self.t_span = tuple(float(t) for t in (self.t_span or d["t_span"]))
        self.n_samples = int(self.n_samples or d["n_samples"])
        ics = self.initial_conditions if self.initial_conditions is not None else d["initial_conditions"]
        self.initial_conditions = [tuple(float(v) for v in ic) for ic in ics]
        self.sigma = float(d["sigma"] if self.sigma is None else self.sigma)
        if self.reference is None:
            self.reference = "radau" if self.name in ROBER_RATES else "rk4"
        if not self.t_span[1] > self.t_span[0]:
            raise ValueError(f"SystemSpec: t span must be positive, got {self.t_span}")
        if self.n_samples < 2:
            raise ValueError(f"SystemSpec: need at least 2 samples, got {self.n_samples}")
        if self.sigma < 0:
            raise ValueError(f"SystemSpec: sigma must be non-negative, got {self.sigma}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_span[0], self.t_span[1], self.n_samples)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_span"] = list(self.t_span)
        d["initial_conditions"] = [list(ic) for ic in self.initial_conditions]
        return d


@dataclass
class TrajectoryDataset:
    times: np.ndarray  # (T,)
    clean: np.ndarray  # (B, T, d)
    observed: np.ndarray  # (B, T, d)
    meta: dict = field(default_factory=dict)

    @property
    def initial_states(self) -> np.ndarray:
        return self.observed[:, 0, :]

    @property
    def noise(self) -> np.ndarray:
        return self.observed - self.clean

    @property
    def n_traj(self) -> int:
        return self.observed.shape[0]

    @property
    def dim(self) -> int:
        return self.observed.shape[2]

    def subset(self, idx) -> "TrajectoryDataset":
        idx = list(idx)
        return TrajectoryDataset(self.times.copy(), self.clean[idx].copy(), self.observed[idx].copy(),
                                 {**self.meta, "subset": idx})

    def save_csv(self, path) -> Path:
        """Observed states as ``traj_id,t,x1..xn`` plus a ``.meta.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["traj_id", "t", *[f"x{i + 1}" for i in range(self.dim)]])
            for b in range(self.n_traj):
                for k, t in enumerate(self.times):
                    w.writerow([b, format(float(t), ".17g"), *[format(float(v), ".17g") for v in self.observed[b, k]]])
        with open(meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
        return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def reference_solution(spec: SystemSpec, times: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Clean states (B, T, 3) at ``times`` (default: the sample grid of ``spec``) and solver settings."""
    times = spec.times if times is None else np.asarray(times, dtype=np.float64)
    y0 = np.array(spec.initial_conditions, dtype=np.float64)
    f = lambda y: eval_dynamics(spec.name, y, spec.params)  # noqa: E731
    if spec.reference == "radau":
        from scipy.integrate import solve_ivp

        settings = {"method": "radau", "rtol": 1e-10, "atol": 1e-14}
        out = []
        for ic in y0:
            sol = solve_ivp(lambda t, y: eval_dynamics(spec.name, y, spec.params), (times[0], times[-1]), ic,
                            method="Radau", t_eval=times, rtol=1e-10, atol=1e-14,
                            jac=lambda t, y: jacobian(spec.name, y, spec.params))
            if not sol.success:
                raise IntegrationError(f"reference solve failed for {spec.name}: {sol.message}", **settings)
            out.append(sol.y.T)
        return np.stack(out), settings
    if spec.reference == "dopri5":
        cfg = SolverConfig("dopri5", rtol=1e-10, atol=1e-10, min_step=1e-12, max_steps=10_000_000)
    elif spec.reference == "rk4":
        h_data = float(np.min(np.diff(times)))
        h = min(h_data / 100, 1e-3)
        # land exactly on every output time
        h = h_data / np.ceil(h_data / h - 1e-9)
        cfg = SolverConfig("rk4", h=h, max_steps=100_000_000)
    else:
        raise ValueError(f"unknown reference solver {spec.reference!r}")
    settings = {"method": cfg.method, "h": cfg.h, "rtol": cfg.rtol, "atol": cfg.atol, "min_step": cfg.min_step}
    ys = integrate(f, y0, times, cfg)  # (T, B, 3)
    return np.transpose(ys, (1, 0, 2)).copy(), settings


def generate(spec: SystemSpec) -> TrajectoryDataset:
    clean, settings = reference_solution(spec)
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma, size=clean.shape) if spec.sigma > 0 else np.zeros_like(clean)
    meta = {"source": "generated", "spec": spec.to_dict(), "seed": spec.seed, "reference_solver": settings}
    if spec.name in ROBER_RATES:
        p = spec.params
        # x + y + z is invariant only when the yz and y^2 rates match pairwise
        meta["conserves_total_mass"] = bool(p["k2"] == p["k4"] and p["k3"] == p["k5"])
    return TrajectoryDataset(spec.times, clean, clean + noise, meta)


def load_csv(path) -> TrajectoryDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 3 or header[0] != "traj_id" or header[1] != "t":
        raise ValueError(f"{path}:1: header must be traj_id,t,x1,...,xn; got {','.join(header)}")
    dim = len(header) - 2
    trajs: dict[str, list] = {}
    order: list[str] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise ValueError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        if row[0] not in trajs:
            trajs[row[0]] = []
            order.append(row[0])
        pts = trajs[row[0]]
        if pts and vals[0] <= pts[-1][0]:
            raise ValueError(f"{path}:{lineno}: times must be strictly increasing within trajectory {row[0]}")
        pts.append(vals)
    if not order:
        raise ValueError(f"{path}: no data rows")
    arrays = [np.array(trajs[k]) for k in order]
    times = arrays[0][:, 0]
    for k, a in zip(order, arrays):
        if a.shape[0] != times.size or not np.array_equal(a[:, 0], times):
            raise ValueError(f"{path}: trajectory {k} does not share the time grid of trajectory {order[0]}")
    observed = np.stack([a[:, 1:] for a in arrays])
    meta = {"source": "external", "path": str(path), "traj_ids": order}
    side = meta_path(path)
    if side.exists():
        with open(side, encoding="utf-8") as fh:
            meta["sidecar"] = json.load(fh)
    return TrajectoryDataset(times, observed.copy(), observed, meta)
