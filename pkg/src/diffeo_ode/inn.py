"""Invertible network built from affine coupling blocks.

Each block splits its input at ``k = n // 2`` into ``u1`` (first k coords)
and ``u2`` and applies

    v1 = u1 * exp(s2(u2)) + t2(u2)
    v2 = u2 * exp(s1(v1)) + t1(v1)

so the inverse is explicit: recover ``u2`` from ``v1`` first, then ``u1``.
Scale outputs pass through ``alpha * tanh(s / alpha)`` which bounds the
exponent without giving up exact invertibility.  Every block is conjugated
by its own fixed coordinate permutation (permute, couple, un-permute), so each
block splits a different set of coordinates while zero subnet outputs still
make the whole map the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mlp import MLP, MLPConfig


@dataclass
class INNConfig:
    dim: int | None = None
    blocks: int = 5
    hidden: tuple[int, ...] = (1500,)
    clamp: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dim is not None and self.dim < 2:
            raise ValueError(f"INNConfig: dim must be >= 2, got {self.dim}")
        if self.blocks < 1:
            raise ValueError(f"INNConfig: need at least one block, got {self.blocks}")
        if self.clamp <= 0:
            raise ValueError(f"INNConfig: clamp must be positive, got {self.clamp}")


class CouplingBlock:
    def __init__(self, dim: int, hidden, clamp: float, rng: np.random.Generator, zero_init: bool = True):
        self.dim = dim
        self.split = dim // 2
        self.clamp = float(clamp)
        k, rest = self.split, dim - self.split
        # s2, t2 read u2 and act on u1; s1, t1 read v1 and act on u2
        self.s2 = MLP.init(MLPConfig(rest, k, hidden), rng, zero_last=zero_init)
        self.t2 = MLP.init(MLPConfig(rest, k, hidden), rng, zero_last=zero_init)
        self.s1 = MLP.init(MLPConfig(k, rest, hidden), rng, zero_last=zero_init)
        self.t1 = MLP.init(MLPConfig(k, rest, hidden), rng, zero_last=zero_init)

    @property
    def subnets(self) -> tuple[MLP, MLP, MLP, MLP]:
        return self.s1, self.s2, self.t1, self.t2

    def params(self) -> list[ad.Tensor]:
        return [p for net in self.subnets for p in net.params()]

    def _scale(self, raw: ad.Tensor) -> ad.Tensor:
        a = self.clamp
        return ad.scale(ad.tanh(ad.scale(raw, 1.0 / a)), a)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        u1, u2 = ad.split(x, self.split)
        v1 = u1 * ad.exp(self._scale(self.s2(u2))) + self.t2(u2)
        v2 = u2 * ad.exp(self._scale(self.s1(v1))) + self.t1(v1)
        return ad.concat([v1, v2])

    def inverse(self, y: ad.Tensor) -> ad.Tensor:
        v1, v2 = ad.split(y, self.split)
        u2 = (v2 - self.t1(v1)) * ad.exp(-self._scale(self.s1(v1)))
        u1 = (v1 - self.t2(u2)) * ad.exp(-self._scale(self.s2(u2)))
        return ad.concat([u1, u2])

    def jvp(self, x: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, a = self.split, self.clamp
        u1, u2 = x[..., :k], x[..., k:]
        du1, du2 = dx[..., :k], dx[..., k:]

        def scaled(net, u, du):
            r, dr = net.jvp(u, du)
            th = np.tanh(r / a)
            return a * th, (1.0 - th * th) * dr

        s, ds = scaled(self.s2, u2, du2)
        t, dt = self.t2.jvp(u2, du2)
        e = np.exp(s)
        v1 = u1 * e + t
        dv1 = du1 * e + u1 * e * ds + dt
        s, ds = scaled(self.s1, v1, dv1)
        t, dt = self.t1.jvp(v1, dv1)
        e = np.exp(s)
        v2 = u2 * e + t
        dv2 = du2 * e + u2 * e * ds + dt
        return np.concatenate([v1, v2], axis=-1), np.concatenate([dv1, dv2], axis=-1)


class INN:
    """Composition of permutation-conjugated coupling blocks; the map F."""

    def __init__(self, config: INNConfig, zero_init: bool = True):
        if config.dim is None:
            raise ValueError("INNConfig: dim must be set before building an INN")
        self.config = config
        self.dim = config.dim
        rng = np.random.default_rng(config.seed)
        self.perms: list[np.ndarray] = []
        self.blocks: list[CouplingBlock] = []
        for _ in range(config.blocks):
            self.perms.append(rng.permutation(config.dim))
            self.blocks.append(CouplingBlock(config.dim, config.hidden, config.clamp, rng, zero_init))
        self.forward_calls = 0
        self.inverse_calls = 0

    def params(self) -> list[ad.Tensor]:
        return [p for b in self.blocks for p in b.params()]

    def _check(self, op: str, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ad.ShapeError(f"INN.{op}: expected last axis of size {self.dim}, got shape {x.shape}")
        return x

    def forward(self, x) -> ad.Tensor:
        x = self._check("forward", x)
        self.forward_calls += 1
        for perm, block in zip(self.perms, self.blocks):
            x = ad.take(block.forward(ad.take(x, perm)), np.argsort(perm))
        return x

    __call__ = forward

    def inverse(self, y) -> ad.Tensor:
        y = self._check("inverse", y)
        self.inverse_calls += 1
        for perm, block in zip(reversed(self.perms), reversed(self.blocks)):
            y = ad.take(block.inverse(ad.take(y, perm)), np.argsort(perm))
        return y

    def jvp(self, x, v) -> np.ndarray:
        """J_F(x) @ v by forward-mode propagation on raw arrays."""
        x = np.asarray(ad.value_of(x), dtype=np.float64)
        v = np.asarray(ad.value_of(v), dtype=np.float64)
        if x.shape[-1] != self.dim or v.shape != x.shape:
            raise ad.ShapeError(f"INN.jvp: expected matching shapes (..., {self.dim}), got {x.shape} and {v.shape}")
        for perm, block in zip(self.perms, self.blocks):
            inv = np.argsort(perm)
            x, v = block.jvp(x[..., perm], v[..., perm])
            x, v = x[..., inv], v[..., inv]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ad.NonFiniteError("INN.jvp: non-finite intermediate value")
        return v

    # ------------------------------------------------------------ serialization

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (perm, block) in enumerate(zip(self.perms, self.blocks)):
            out[f"inn.{i}.perm"] = perm.astype(np.int64)
            for name, net in zip(("s1", "s2", "t1", "t2"), block.subnets):
                for j, (w, b) in enumerate(zip(net.weights, net.biases)):
                    out[f"inn.{i}.{name}.{j}.w"] = w.value
                    out[f"inn.{i}.{name}.{j}.b"] = b.value
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, block in enumerate(self.blocks):
            self.perms[i] = np.asarray(state[f"inn.{i}.perm"], dtype=np.int64)
            for name, net in zip(("s1", "s2", "t1", "t2"), block.subnets):
                for j in range(len(net.weights)):
                    net.weights[j].value = np.array(state[f"inn.{i}.{name}.{j}.w"], dtype=np.float64)
                    net.biases[j].value = np.array(state[f"inn.{i}.{name}.{j}.b"], dtype=np.float64)
