"""Base dynamics x' = g(x): a linear system with closed-form flow, or a small MLP.

The linear base is A = P @ L @ P^-1 where L is real block-diagonal.  With
m = n // 2, coordinates j and j + m of the canonical frame form a rotation-
scaling pair with eigenvalues a_j +/- i b_j; for odd n the last canonical
coordinate carries one real eigenvalue.  The flow is therefore

    x(t) = P @ E(t) @ P^-1 @ x0,
    E_j(t) = exp(a_j t) [[cos b_j t, -sin b_j t], [sin b_j t, cos b_j t]]

which reduces to the eigen-expansion sum_k (l_k . x0) r_k exp(lambda_k t)
when the spectrum is real.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .integrators import NonFiniteState, check_times, fixed_grid, smallest_increment
from .mlp import MLP, MLPConfig


class IllConditionedError(ValueError):
    pass


@dataclass
class BaseConfig:
    kind: str = "linear"  # "linear" | "neural"
    dim: int | None = None
    stable: bool = False
    eps: float = 1e-3
    cond_bound: float = 1e8
    p_noise: float = 1e-2
    hidden: tuple[int, ...] = (30, 30, 30)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("linear", "neural"):
            raise ValueError(f"BaseConfig: kind must be 'linear' or 'neural', got {self.kind!r}")
        if self.dim is not None and self.dim < 1:
            raise ValueError(f"BaseConfig: dim must be positive, got {self.dim}")
        if self.eps <= 0:
            raise ValueError(f"BaseConfig: eps must be positive, got {self.eps}")


def build_base(config: BaseConfig) -> "LinearBase | NeuralBase":
    if config.dim is None:
        raise ValueError("BaseConfig: dim must be set before building a base")
    return LinearBase(config) if config.kind == "linear" else NeuralBase(config)


class LinearBase:
    kind = "linear"

    def __init__(self, config: BaseConfig):
        self.config = config
        n = self.dim = config.dim
        self.m = n // 2
        n_real = self.m + n % 2
        rng = np.random.default_rng(config.seed)
        self.P = ad.Tensor(np.eye(n) + config.p_noise * rng.standard_normal((n, n)), requires_grad=True)
        raw = rng.uniform(-0.5, 0.5, size=n_real)
        # stable: a = -s^2 - eps, so the stored parameter is s
        self.spec_real = ad.Tensor(np.sqrt(np.abs(raw)) if config.stable else raw, requires_grad=True)
        self.spec_imag = ad.Tensor(rng.uniform(-0.5, 0.5, size=self.m), requires_grad=True)

    def params(self) -> list[ad.Tensor]:
        return [self.P, self.spec_real, self.spec_imag]

    # ------------------------------------------------------------ spectrum

    def real_parts(self) -> ad.Tensor:
        """Effective real parts a_j (pairs first, then the odd real eigenvalue)."""
        if self.config.stable:
            return ad.scale(ad.square(self.spec_real), -1.0) - self.config.eps
        return self.spec_real

    def effective_matrix(self) -> np.ndarray:
        n, m = self.dim, self.m
        a = self.real_parts().value
        b = self.spec_imag.value
        L = np.zeros((n, n))
        for j in range(m):
            L[j, j] = L[j + m, j + m] = a[j]
            L[j, j + m] = -b[j]
            L[j + m, j] = b[j]
        if n % 2:
            L[-1, -1] = a[-1]
        P = self.P.value
        return P @ L @ np.linalg.inv(P)

    def _check_conditioning(self) -> None:
        cond = float(np.linalg.cond(self.P.value))
        if not np.isfinite(cond) or cond > self.config.cond_bound:
            raise IllConditionedError(
                f"LinearBase: basis matrix condition number {cond:.3e} exceeds bound {self.config.cond_bound:.1e}"
            )

    def _to_canonical(self, x: ad.Tensor) -> ad.Tensor:
        # rows of x -> rows of P^-1 x
        return ad.transpose(ad.solve(self.P, ad.transpose(x)))

    def _from_canonical(self, z: ad.Tensor) -> ad.Tensor:
        return ad.matmul(z, ad.transpose(self.P))

    # ------------------------------------------------------------ dynamics

    def dynamics_at(self, x) -> ad.Tensor:
        """A @ x for a state vector or a batch of row states."""
        x = ad.as_tensor(x)
        single = x.ndim == 1
        if single:
            x = ad.reshape(x, (1, -1))
        self._check_conditioning()
        z = self._to_canonical(x)
        m = self.m
        a = self.real_parts()
        parts = []
        if m:
            ap, b = a[:m], self.spec_imag
            z1, z2 = z[:, :m], z[:, m:2 * m]
            parts += [ap * z1 - b * z2, b * z1 + ap * z2]
        if self.dim % 2:
            parts.append(a[m:] * z[:, 2 * m:])
        dx = self._from_canonical(ad.concat(parts))
        return ad.reshape(dx, (-1,)) if single else dx

    __call__ = dynamics_at

    def solve(self, x0, times, h: float | None = None) -> ad.Tensor:
        """Closed-form flow for B row initial states: shape (B, T, n)."""
        x0 = ad.as_tensor(x0)
        single = x0.ndim == 1
        if single:
            x0 = ad.reshape(x0, (1, -1))
        times = check_times(times)
        self._check_conditioning()
        m, n = self.m, self.dim
        z0 = self._to_canonical(x0)
        tcol = ad.Tensor(times.reshape(-1, 1))
        a = self.real_parts()
        if m:
            growth = ad.exp(ad.matmul(tcol, ad.reshape(a[:m], (1, m))))
            angle = ad.matmul(tcol, ad.reshape(self.spec_imag, (1, m)))
            ec, es = growth * ad.cos(angle), growth * ad.sin(angle)
        if n % 2:
            real_growth = ad.exp(ad.matmul(tcol, ad.reshape(a[m:], (1, 1))))
        trajs = []
        for i in range(x0.shape[0]):
            zi = z0[i]
            parts = []
            if m:
                z1, z2 = zi[:m], zi[m:2 * m]
                parts += [ec * z1 - es * z2, es * z1 + ec * z2]
            if n % 2:
                parts.append(real_growth * zi[2 * m:])
            trajs.append(self._from_canonical(ad.concat(parts)))
        out = ad.stack(trajs, axis=0)
        return out[0] if single else out

    solve_linear = solve

    # ------------------------------------------------------------ serialization

    def state(self) -> dict[str, np.ndarray]:
        return {"base.P": self.P.value, "base.real": self.spec_real.value, "base.imag": self.spec_imag.value}

    def load_state(self, state) -> None:
        self.P.value = np.array(state["base.P"], dtype=np.float64)
        self.spec_real.value = np.array(state["base.real"], dtype=np.float64)
        self.spec_imag.value = np.array(state["base.imag"], dtype=np.float64)


class NeuralBase:
    kind = "neural"

    def __init__(self, config: BaseConfig):
        self.config = config
        self.dim = config.dim
        self.net = MLP.init(MLPConfig(config.dim, config.dim, config.hidden), np.random.default_rng(config.seed))

    def params(self) -> list[ad.Tensor]:
        return self.net.params()

    def dynamics_at(self, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            return ad.reshape(self.net(ad.reshape(x, (1, -1))), (-1,))
        return self.net(x)

    __call__ = dynamics_at

    def solve(self, x0, times, h: float | None = None) -> ad.Tensor:
        """Euler iterates x_{k+1} = x_k + h g(x_k) sampled at ``times``: (B, T, n).

        ``h`` defaults to the smallest increment of ``times``; off-grid times
        are linearly interpolated between neighbouring grid states.
        """
        x0 = ad.as_tensor(x0)
        single = x0.ndim == 1
        if single:
            x0 = ad.reshape(x0, (1, -1))
        times = check_times(times)
        if h is None:
            h = smallest_increment(times) if times.size > 1 else 1.0
        n_steps, where = fixed_grid(times, h)
        states = [x0]
        x = x0
        for k in range(n_steps):
            x = x + h * self.net(x)
            if not np.all(np.isfinite(x.value)):
                t = times[0] + (k + 1) * h
                raise NonFiniteState(f"NeuralBase: Euler state blew up at t={t:g}", t=t, h=h, steps=k + 1)
            states.append(x)
        out = [states[k] if w == 0.0 else (1.0 - w) * states[k] + w * states[k + 1] for k, w in where]
        traj = ad.transpose(ad.stack(out, axis=0), (1, 0, 2))
        return traj[0] if single else traj

    solve_neural = solve

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for j, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            out[f"base.{j}.w"] = w.value
            out[f"base.{j}.b"] = b.value
        return out

    def load_state(self, state) -> None:
        for j in range(len(self.net.weights)):
            self.net.weights[j].value = np.array(state[f"base.{j}.w"], dtype=np.float64)
            self.net.biases[j].value = np.array(state[f"base.{j}.b"], dtype=np.float64)
