"""Fully connected networks on top of the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh",)


@dataclass
class MLPConfig:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (1500,)
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        dims = (self.input_dim, self.output_dim, *self.hidden)
        if any(d <= 0 for d in dims):
            raise ValueError(f"MLPConfig: all dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"MLPConfig: unknown activation {self.activation!r}")


@dataclass
class MLP:
    """Dense layers with an activation between them and a linear output."""

    config: MLPConfig
    weights: list[ad.Tensor] = field(default_factory=list)
    biases: list[ad.Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, config: MLPConfig, rng: np.random.Generator, zero_last: bool = False) -> "MLP":
        sizes = (config.input_dim, *config.hidden, config.output_dim)
        net = cls(config)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if zero_last and i == len(sizes) - 2:
                w, b = np.zeros_like(w), np.zeros_like(b)
            net.weights.append(ad.Tensor(w, requires_grad=True))
            net.biases.append(ad.Tensor(b, requires_grad=True))
        return net

    def params(self) -> list[ad.Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        # hidden layers fuse affine map and tanh into one tape node
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.dense(x, w, b, tanh=i < last)
        return x

    def jvp(self, x: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Forward-mode tangent propagation on raw arrays (tanh only)."""
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.value + b.value
            dx = dx @ w.value
            if i < last:
                x = np.tanh(x)
                dx = dx * (1.0 - x * x)
        return x, dx

    def n_params(self) -> int:
        return int(np.sum([p.value.size for p in self.params()]))
