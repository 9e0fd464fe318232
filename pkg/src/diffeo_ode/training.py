"""Losses, Adam, and training loops for diffeomorphism models and direct baselines."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .base_ode import BaseConfig, LinearBase, NeuralBase, build_base
from .inn import INN, INNConfig
from .integrators import IntegrationError, SolverConfig, integrate
from .mlp import MLP, MLPConfig
from .systems import TrajectoryDataset


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, iteration: int | None = None, trajectory: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.trajectory = trajectory


@dataclass
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 5000
    schedule: list[tuple[int, float]] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "mae"
    augment: int | None = None  # extra zero dims; None doubles the state
    clip_norm: float | None = None
    transform: str = "none"  # "none" | "standardize" | "log"
    seed: int = 0

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = [(self.iterations, self.lr)]
        self.schedule = [(int(n), float(lr)) for n, lr in self.schedule]
        if any(n <= 0 for n, _ in self.schedule) or any(lr <= 0 for _, lr in self.schedule):
            raise ValueError(f"TrainConfig: phase iterations and rates must be positive, got {self.schedule}")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"TrainConfig: loss must be 'mae' or 'mse', got {self.loss!r}")
        if self.transform not in ("none", "standardize", "log"):
            raise ValueError(f"TrainConfig: unknown transform {self.transform!r}")

    @classmethod
    def stiff(cls, **kw) -> "TrainConfig":
        return cls(schedule=[(500, 1e-4), (4500, 1e-6)], **kw)

    @property
    def total_iterations(self) -> int:
        return int(np.sum([n for n, _ in self.schedule]))


# ---------------------------------------------------------------- data transforms

@dataclass
class Transform:
    """Per-dimension map applied to observations before fitting."""

    kind: str = "none"
    shift: list[float] = field(default_factory=list)
    scale: list[float] = field(default_factory=list)
    floor: float = 1e-12

    @classmethod
    def fit(cls, kind: str, observed: np.ndarray) -> "Transform":
        if kind == "standardize":
            flat = observed.reshape(-1, observed.shape[-1])
            std = flat.std(axis=0)
            return cls(kind, flat.mean(axis=0).tolist(), np.where(std > 0, std, 1.0).tolist())
        return cls(kind)

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "standardize":
            return (y - np.array(self.shift)) / np.array(self.scale)
        if self.kind == "log":
            return np.log10(np.maximum(y, self.floor))
        return y

    def invert(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "standardize":
            return z * np.array(self.scale) + np.array(self.shift)
        if self.kind == "log":
            return 10.0 ** z
        return z


# ---------------------------------------------------------------- models

def _augment(y0: np.ndarray, dim: int) -> np.ndarray:
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    return np.concatenate([y0, np.zeros((y0.shape[0], dim - y0.shape[1]))], axis=1)


class DiffeoModel:
    """Target flow y(t) = F(x(t)) with x' = g(x) and x(0) = F^-1(y0)."""

    kind = "diffeo"

    def __init__(self, inn: INN, base: LinearBase | NeuralBase, data_dim: int,
                 transform: Transform | None = None, step: float | None = None):
        if inn.dim != base.dim:
            raise ValueError(f"DiffeoModel: INN dim {inn.dim} != base dim {base.dim}")
        if data_dim > inn.dim:
            raise ValueError(f"DiffeoModel: data dim {data_dim} exceeds state dim {inn.dim}")
        self.inn = inn
        self.base = base
        self.data_dim = data_dim
        self.transform = transform or Transform()
        self.step = step

    @property
    def dim(self) -> int:
        return self.inn.dim

    def params(self) -> list[ad.Tensor]:
        return self.inn.params() + self.base.params()

    def augment(self, y0) -> np.ndarray:
        return _augment(y0, self.dim)

    def predict(self, y0, times, h: float | None = None) -> ad.Tensor:
        """Trajectories (B, T, d) in model (transformed) coordinates.

        One inverse pass on the initial states, one base solve for all times,
        one batched forward pass over every (trajectory, time) row.
        """
        x0 = self.inn.inverse(self.augment(y0))
        xs = self.base.solve(x0, times, h if h is not None else self.step)
        b, t, n = xs.shape
        ys = self.inn.forward(ad.reshape(xs, (b * t, n)))
        return ad.reshape(ys[:, : self.data_dim], (b, t, self.data_dim))

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "version": __version__,
            "data_dim": self.data_dim,
            "step": self.step,
            "inn": asdict(self.inn.config),
            "base": asdict(self.base.config),
            "transform": asdict(self.transform),
        }

    def state(self) -> dict[str, np.ndarray]:
        return {**self.inn.state(), **self.base.state()}

    def load_state(self, state) -> None:
        self.inn.load_state(state)
        self.base.load_state(state)


class BaselineModel:
    """Direct neural dynamics y' = f(y) integrated by a classical solver."""

    kind = "baseline"

    def __init__(self, net: MLP, solver: SolverConfig, data_dim: int, transform: Transform | None = None):
        self.net = net
        self.solver = solver
        self.data_dim = data_dim
        self.transform = transform or Transform()

    @property
    def dim(self) -> int:
        return self.net.config.input_dim

    def params(self) -> list[ad.Tensor]:
        return self.net.params()

    def predict(self, y0, times, h: float | None = None) -> ad.Tensor:
        cfg = self.solver
        if h is not None and not cfg.adaptive:
            cfg = SolverConfig(**{**asdict(cfg), "h": h})
        ys = integrate(self.net, ad.Tensor(_augment(y0, self.dim)), times, cfg)  # (T, B, n)
        return ad.transpose(ys, (1, 0, 2))[:, :, : self.data_dim]

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "version": __version__,
            "data_dim": self.data_dim,
            "mlp": asdict(self.net.config),
            "solver": asdict(self.solver),
            "transform": asdict(self.transform),
        }

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for j, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            out[f"net.{j}.w"] = w.value
            out[f"net.{j}.b"] = b.value
        return out

    def load_state(self, state) -> None:
        for j in range(len(self.net.weights)):
            self.net.weights[j].value = np.array(state[f"net.{j}.w"], dtype=np.float64)
            self.net.biases[j].value = np.array(state[f"net.{j}.b"], dtype=np.float64)


def save_model(model: DiffeoModel | BaselineModel, path) -> Path:
    """Write a self-describing ``.npz``: JSON metadata plus every weight array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v) for k, v in model.state().items()}
    meta = np.frombuffer(json.dumps(model.meta(), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=meta, **arrays)
    return path


def load_model(path) -> DiffeoModel | BaselineModel:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        state = {k: z[k] for k in z.files if k != "__meta__"}
    transform = Transform(**meta["transform"])
    if meta["kind"] == "diffeo":
        inn = INN(INNConfig(**meta["inn"]))
        base = build_base(BaseConfig(**meta["base"]))
        model = DiffeoModel(inn, base, meta["data_dim"], transform, meta["step"])
    elif meta["kind"] == "baseline":
        net = MLP.init(MLPConfig(**meta["mlp"]), np.random.default_rng(0))
        model = BaselineModel(net, SolverConfig(**meta["solver"]), meta["data_dim"], transform)
    else:
        raise ValueError(f"{path}: unknown model kind {meta['kind']!r}")
    model.load_state(state)
    return model


# ---------------------------------------------------------------- loss

def _reduce(diff: ad.Tensor, kind: str) -> ad.Tensor:
    return ad.mean(ad.absolute(diff) if kind == "mae" else ad.square(diff))


def loss(model, dataset: TrajectoryDataset, kind: str = "mae", observed: np.ndarray | None = None) -> ad.Tensor:
    """Mean error over trajectories, times and the first d dims.

    ``observed`` overrides dataset.observed (already transformed targets).
    """
    target = dataset.observed if observed is None else observed
    pred = model.predict(target[:, 0, :], dataset.times)
    out = _reduce(pred - target, kind)
    if not np.isfinite(out.value):
        per = [float(np.mean(np.abs(pred.value[b] - target[b]))) for b in range(target.shape[0])]
        bad = next((b for b, v in enumerate(per) if not np.isfinite(v)), None)
        raise DivergenceError(f"non-finite loss (trajectory {bad})", trajectory=bad)
    return out


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads: dict[ad.Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.value = p.value - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


# ---------------------------------------------------------------- training loops

@dataclass
class TrainResult:
    model: DiffeoModel | BaselineModel
    history: list[dict]
    outcome: str = "ok"
    failed_iteration: int | None = None
    message: str = ""
    final_loss: float | None = None


def _fit(model, dataset: TrajectoryDataset, cfg: TrainConfig, catch: tuple = ()) -> TrainResult:
    target = model.transform.apply(dataset.observed)
    params = model.params()
    opt = Adam(params, cfg.schedule[0][1], cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[dict] = []
    it = 0
    for phase, (n_iter, lr) in enumerate(cfg.schedule):
        for _ in range(n_iter):
            try:
                with ad.Tape(params) as tape:
                    value = loss(model, dataset, cfg.loss, observed=target)
            except DivergenceError as e:
                e.iteration = it
                raise DivergenceError(f"training diverged at iteration {it}: {e}", it, e.trajectory) from e
            except catch as e:
                return TrainResult(model, history, e.flag, it, str(e))
            grads = tape.backward(value)
            if cfg.clip_norm is not None:
                clip_gradients(grads, cfg.clip_norm)
            opt.step(grads, lr)
            history.append({"iter": it, "loss": float(value.value), "lr": lr, "phase": phase})
            it += 1
    try:
        final = float(loss(model, dataset, cfg.loss, observed=target).value)
    except catch as e:
        return TrainResult(model, history, e.flag, it, str(e))
    return TrainResult(model, history, final_loss=final)


def _aug_dim(dataset: TrajectoryDataset, cfg: TrainConfig) -> int:
    return dataset.dim + (dataset.dim if cfg.augment is None else cfg.augment)


def build_diffeo(dataset: TrajectoryDataset, inn_cfg: INNConfig, base_cfg: BaseConfig,
                 train_cfg: TrainConfig) -> DiffeoModel:
    n = _aug_dim(dataset, train_cfg)
    inn = INN(INNConfig(**{**asdict(inn_cfg), "dim": n}))
    base = build_base(BaseConfig(**{**asdict(base_cfg), "dim": n}))
    step = float(np.min(np.diff(dataset.times))) if base.kind == "neural" else None
    return DiffeoModel(inn, base, dataset.dim, Transform.fit(train_cfg.transform, dataset.observed), step)


def train_diffeo(dataset: TrajectoryDataset, inn_cfg: INNConfig, base_cfg: BaseConfig,
                 train_cfg: TrainConfig) -> TrainResult:
    model = build_diffeo(dataset, inn_cfg, base_cfg, train_cfg)
    return _fit(model, dataset, train_cfg)


def build_baseline(dataset: TrajectoryDataset, solver_cfg: SolverConfig, mlp_hidden, train_cfg: TrainConfig) -> BaselineModel:
    n = _aug_dim(dataset, train_cfg)
    net = MLP.init(MLPConfig(n, n, tuple(mlp_hidden)), np.random.default_rng(train_cfg.seed))
    return BaselineModel(net, solver_cfg, dataset.dim, Transform.fit(train_cfg.transform, dataset.observed))


def train_baseline(dataset: TrajectoryDataset, solver_cfg: SolverConfig, mlp_hidden=(150,) * 5,
                   train_cfg: TrainConfig | None = None) -> TrainResult:
    """Fit f_w through the solver; integrator failures end the run with an outcome flag."""
    train_cfg = train_cfg or TrainConfig()
    model = build_baseline(dataset, solver_cfg, mlp_hidden, train_cfg)
    return _fit(model, dataset, train_cfg, catch=(IntegrationError,))


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss,lr,phase\n")
        for row in history:
            fh.write(f"{row['iter']},{row['loss']!r},{row['lr']!r},{row['phase']}\n")
    return path
