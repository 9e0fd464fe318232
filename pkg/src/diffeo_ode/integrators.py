"""Differentiable explicit integrators: euler, midpoint, rk4, dopri5.

All arithmetic on the state goes through ``+``/``*`` so the same code runs on
plain numpy arrays (reference data) and on autodiff Tensors (training, where
gradients flow back through every stage).  Adaptive step-size decisions use
detached values and are not differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

METHODS = ("euler", "midpoint", "rk4", "dopri5")
FIXED_ORDER = {"euler": 1, "midpoint": 2, "rk4": 4}


class IntegrationError(RuntimeError):
    """Solver failure; ``diagnostics`` carries t, h and step count."""

    flag = "integration_error"

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class StepUnderflow(IntegrationError):
    flag = "step_underflow"


class MaxStepsExceeded(IntegrationError):
    flag = "max_steps_exceeded"


class NonFiniteState(IntegrationError):
    flag = "non_finite_state"


@dataclass
class SolverConfig:
    method: str = "rk4"
    h: float | None = None  # None: smallest output time increment
    rtol: float = 1e-5
    atol: float = 1e-5
    min_step: float = 1e-10
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"SolverConfig: unknown method {self.method!r}; choose from {METHODS}")
        if self.h is not None and self.h <= 0:
            raise ValueError(f"SolverConfig: step h must be positive, got {self.h}")
        if self.rtol <= 0 or self.atol <= 0 or self.min_step <= 0:
            raise ValueError("SolverConfig: rtol, atol and min_step must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method == "dopri5"


def smallest_increment(times) -> float:
    return float(np.min(np.diff(np.asarray(times, dtype=np.float64))))


def check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a non-empty 1-d array of finite values")
    if times[0] < 0:
        raise ValueError(f"times must start at t >= 0, got {times[0]}")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


def _stack(states):
    if any(isinstance(s, ad.Tensor) for s in states):
        return ad.stack(states, axis=0)
    return np.stack(states, axis=0)


def _lincomb(states, coeffs):
    # one tape node when recording; plain arrays stay plain
    if any(isinstance(s, ad.Tensor) for s in states):
        return ad.lincomb(states, coeffs)
    out = coeffs[0] * np.asarray(states[0], dtype=np.float64)
    for c, s in zip(coeffs[1:], states[1:]):
        out = out + c * s
    return out


def _finite(y) -> bool:
    return bool(np.all(np.isfinite(ad.value_of(y))))


# ---------------------------------------------------------------- fixed step

def euler_step(f, y, h):
    return _lincomb([y, f(y)], [1.0, h])


def midpoint_step(f, y, h):
    return _lincomb([y, f(_lincomb([y, f(y)], [1.0, 0.5 * h]))], [1.0, h])


def rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(_lincomb([y, k1], [1.0, 0.5 * h]))
    k3 = f(_lincomb([y, k2], [1.0, 0.5 * h]))
    k4 = f(_lincomb([y, k3], [1.0, h]))
    return _lincomb([y, k1, k2, k3, k4], [1.0, h / 6.0, h / 3.0, h / 3.0, h / 6.0])


_STEPPERS = {"euler": euler_step, "midpoint": midpoint_step, "rk4": rk4_step}


def fixed_grid(times: np.ndarray, h: float) -> tuple[int, list[tuple[int, float]]]:
    """Number of steps and, per output time, (grid index, interpolation weight)."""
    t0 = times[0]
    n = max(0, math.ceil((times[-1] - t0) / h - 1e-9))
    where = []
    for t in times:
        pos = (t - t0) / h
        k = min(int(math.floor(pos + 1e-9)), n)
        w = pos - k
        where.append((k, 0.0 if abs(w) < 1e-9 else w))
    return n, where


def _integrate_fixed(f, y0, times, cfg: SolverConfig):
    h = cfg.h if cfg.h is not None else (smallest_increment(times) if times.size > 1 else 1.0)
    n, where = fixed_grid(times, h)
    if n > cfg.max_steps:
        raise MaxStepsExceeded(f"{cfg.method}: {n} steps exceed max_steps={cfg.max_steps}", t=times[0], h=h, steps=n)
    step = _STEPPERS[cfg.method]
    ys = [y0]
    y = y0
    for k in range(n):
        y = step(f, y, h)
        if not _finite(y):
            raise NonFiniteState(f"{cfg.method}: non-finite state at t={times[0] + (k + 1) * h:g}",
                                 t=times[0] + (k + 1) * h, h=h, steps=k + 1)
        ys.append(y)
    out = [ys[k] if w == 0.0 else _lincomb([ys[k], ys[k + 1]], [1.0 - w, w]) for k, w in where]
    return _stack(out)


# ---------------------------------------------------------------- dopri5

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# fifth- minus fourth-order weights
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# continuous-extension weights for y(t + h/2)
_C_MID = (
    6025192743 / 30085553152 / 2, 0.0, 51252292925 / 65400821598 / 2, -2691868925 / 45128329728 / 2,
    187940372067 / 1594534317056 / 2, -1776094331 / 19743644256 / 2, 11237099 / 235043384 / 2,
)


def _combo(y, h, coeffs, ks):
    pairs = [(h * c, k) for c, k in zip(coeffs, ks) if c != 0.0]
    return _lincomb([y] + [k for _, k in pairs], [1.0] + [c for c, _ in pairs])


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _initial_step(f, y0, f0, rtol, atol) -> float:
    v0, g0 = ad.value_of(y0), ad.value_of(f0)
    sk = atol + rtol * np.abs(v0)
    d0, d1 = _rms(v0 / sk), _rms(g0 / sk)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    g1 = ad.value_of(f(v0 + h0 * g0))
    d2 = _rms((g1 - g0) / sk) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _dense(y0, y1, ymid, f0, f1, h, x: float):
    # quartic through y0, y(h/2), y1 with end slopes f0, f1; x in [0, 1]
    # written around y0 so that a constant solution is reproduced exactly
    x2, x3, x4 = x * x, x ** 3, x ** 4
    weights = (1.0,
               -5.0 * x2 + 14.0 * x3 - 8.0 * x4,
               16.0 * x2 - 32.0 * x3 + 16.0 * x4,
               h * (x - 4.0 * x2 + 5.0 * x3 - 2.0 * x4),
               h * (x2 - 3.0 * x3 + 2.0 * x4))
    return _lincomb([y0, y1 - y0, ymid - y0, f0, f1], weights)


def _integrate_dopri5(f, y0, times, cfg: SolverConfig):
    beta, safe = 0.04, 0.9
    expo1 = 0.2 - beta * 0.75
    fac_lo, fac_hi = 1 / 0.2, 1 / 10.0  # bounds on h/h_new

    t, t_end = float(times[0]), float(times[-1])
    y = y0
    k1 = f(y)
    out = [y0]
    nxt = 1
    if times.size == 1:
        return _stack(out)
    h = min(_initial_step(f, y, k1, cfg.rtol, cfg.atol), t_end - t)
    facold, rejected, steps = 1e-4, False, 0
    while nxt < times.size:
        if steps >= cfg.max_steps:
            raise MaxStepsExceeded(f"dopri5: exceeded max_steps={cfg.max_steps} at t={t:g}", t=t, h=h, steps=steps)
        if h < cfg.min_step:
            raise StepUnderflow(f"dopri5: step {h:.3e} below floor {cfg.min_step:.1e} at t={t:g}", t=t, h=h, steps=steps)
        ks = [k1]
        for i in range(1, 6):
            ks.append(f(_combo(y, h, _A[i], ks)))
        y_new = _combo(y, h, _B, ks)
        k7 = f(y_new)
        ks.append(k7)
        steps += 1
        vy, vn = ad.value_of(y), ad.value_of(y_new)
        if not np.all(np.isfinite(vn)):
            err = math.inf
        else:
            err_vec = h * np.sum([c * ad.value_of(k) for c, k in zip(_E, ks) if c != 0.0], axis=0)
            sc = cfg.atol + cfg.rtol * np.maximum(np.abs(vy), np.abs(vn))
            err = _rms(err_vec / sc)
        if not math.isfinite(err):
            if h <= cfg.min_step * 10:
                raise NonFiniteState(f"dopri5: non-finite state near t={t:g}", t=t, h=h, steps=steps)
            h *= 0.1
            rejected = True
            continue
        fac11 = err ** expo1
        if err <= 1.0:
            fac = max(fac_hi, min(fac_lo, fac11 / (facold ** beta) / safe))
            h_new = h / fac
            if rejected:
                h_new = min(h_new, h)
            facold = max(err, 1e-4)
            t_new = t + h
            ymid = None
            while nxt < times.size and times[nxt] <= t_new + 1e-12 * max(1.0, abs(t_new)):
                x = (times[nxt] - t) / h
                if abs(x - 1.0) < 1e-12:
                    out.append(y_new)
                else:
                    if ymid is None:
                        ymid = _combo(y, h, _C_MID, ks)
                    out.append(_dense(y, y_new, ymid, k1, k7, h, x))
                nxt += 1
            t, y, k1 = t_new, y_new, k7
            rejected = False
            h = min(h_new, max(t_end - t, 0.0)) if t_end - t > 1e-12 * max(1.0, abs(t_end)) else h_new
        else:
            h = h / min(fac_lo, fac11 / safe)
            rejected = True
    return _stack(out)


def integrate(dynamics: Callable, y0, times: Sequence[float], cfg: SolverConfig | None = None):
    """States at ``times`` (times[0] is the initial time), stacked on axis 0."""
    cfg = cfg or SolverConfig()
    times = check_times(times)
    if not _finite(y0):
        raise NonFiniteState("initial state is not finite", t=float(times[0]), h=0.0, steps=0)
    if cfg.adaptive:
        return _integrate_dopri5(dynamics, y0, times, cfg)
    return _integrate_fixed(dynamics, y0, times, cfg)


def order_check(method: str, hs: Sequence[float] = (0.1, 0.05, 0.025, 0.0125), t_end: float = 1.0) -> float:
    """Slope of log(error) vs log(h) on y' = -y, y(0) = 1."""
    errs = []
    for h in hs:
        times = np.linspace(0.0, t_end, int(round(t_end / h)) + 1)
        ys = integrate(lambda y: -y, np.array([1.0]), times, SolverConfig(method=method, h=h))
        errs.append(abs(ys[-1, 0] - math.exp(-t_end)))
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)
