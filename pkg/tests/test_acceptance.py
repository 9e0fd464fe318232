"""End-to-end acceptance checks, one test per criterion.

Each test is marked with its criterion number; the terminal summary prints
one PASS/FAIL line per criterion (see conftest.py).
"""

import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from diffeo_ode import autodiff as ad
from diffeo_ode.base_ode import BaseConfig, LinearBase
from diffeo_ode.cli import main as cli_main
from diffeo_ode.evaluation import benchmark, emit_report, pushforward_dynamics, rollout
from diffeo_ode.inn import INN, CouplingBlock, INNConfig
from diffeo_ode.integrators import SolverConfig, integrate, order_check
from diffeo_ode.systems import LV3_IC, SystemSpec, TrajectoryDataset, generate
from diffeo_ode.training import DiffeoModel, TrainConfig, loss, train_baseline, train_diffeo
from test_autodiff import BINARY, TERNARY, UNARY, weighted

FLAGS = ("step_underflow", "max_steps_exceeded")
ROBER_TRANSFORM = "log"


def lv_spec(**kw):
    return SystemSpec("lv3", initial_conditions=LV3_IC[:3], **kw)


@pytest.mark.criterion(1, "invertibility")
def test_criterion_1_invertibility(record_property):
    start = time.perf_counter()
    worst = 0.0
    for k in range(1000):
        dim = (2, 4, 6, 8)[k % 4]
        rng = np.random.default_rng(k)
        net = INN(INNConfig(dim=dim, blocks=3, hidden=(16,), seed=k), zero_init=False)
        for p in net.params():
            p.value = 0.3 * rng.standard_normal(p.shape)
        x = rng.uniform(-3.0, 3.0, (1, dim))
        worst = max(worst, float(np.max(np.abs(net.inverse(net.forward(x)).value - x))))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max err {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-8 and elapsed < 10.0


@pytest.mark.criterion(2, "gradient fidelity")
def test_criterion_2_gradient_fidelity(record_property):
    start = time.perf_counter()
    op_err = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, y, z = rng.uniform(-1.5, 1.5, (3, 3, 3))
        for fn in UNARY.values():
            op_err = max(op_err, ad.grad_check(lambda a: weighted(fn(a)), [x]))
        for fn in BINARY.values():
            op_err = max(op_err, ad.grad_check(lambda a, b: weighted(fn(a, b)), [x, y]))
        for fn in TERNARY.values():
            op_err = max(op_err, ad.grad_check(lambda a, b, c: weighted(fn(a, b, c)), [x, y, z]))

    rng = np.random.default_rng(4)
    block = CouplingBlock(4, (6,), 2.0, rng, zero_init=False)
    xb = ad.Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    block_err = ad.grad_check_params(lambda: ad.sum(block.forward(xb) * w), block.params())

    rng = np.random.default_rng(2)
    inn = INN(INNConfig(dim=2, blocks=1, hidden=(3,), seed=2), zero_init=False)
    for p in inn.params():
        p.value = 0.4 * rng.standard_normal(p.shape)
    model = DiffeoModel(inn, LinearBase(BaseConfig(dim=2, seed=2)), 2)
    obs = rng.standard_normal((2, 4, 2))
    ds = TrajectoryDataset(np.linspace(0.0, 0.6, 4), obs, obs)
    loss_err = ad.grad_check_params(lambda: loss(model, ds, "mse"), model.params())
    elapsed = time.perf_counter() - start
    record_property("detail", f"ops {op_err:.1e}, block {block_err:.1e}, loss {loss_err:.1e}, {elapsed:.1f} s")
    assert op_err < 1e-5 and block_err < 1e-5 and loss_err < 1e-4 and elapsed < 30.0


@pytest.mark.criterion(3, "closed-form oracle")
def test_criterion_3_closed_form_vs_rk4(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    bases = []
    for _ in range(20):
        base = LinearBase(BaseConfig(dim=4, stable=True))
        base.spec_real.value = np.sqrt(rng.uniform(0.0, 2.0 - 1e-3, 2))
        base.spec_imag.value = rng.uniform(-2.0, 2.0, 2)
        base.P.value = np.eye(4) + 0.3 * rng.standard_normal((4, 4))
        bases.append(base)
    x0 = rng.standard_normal((20, 4))
    times = np.linspace(0.0, 5.0, 11)
    A = np.stack([b.effective_matrix() for b in bases])
    np.testing.assert_allclose(np.einsum("kij,kj->ki", A, x0),
                               np.concatenate([b.dynamics_at(x0[k:k + 1]).value for k, b in enumerate(bases)]),
                               rtol=1e-12, atol=1e-12)
    ref = integrate(lambda y: np.einsum("kij,kj->ki", A, y), x0, times,
                    SolverConfig("rk4", h=1e-4, max_steps=10**6))
    closed = np.stack([b.solve(x0[k], times).value for k, b in enumerate(bases)], axis=1)
    err = float(np.max(np.abs(closed - ref)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max abs err {err:.2e}, {elapsed:.1f} s")
    assert err < 1e-6 and elapsed < 30.0


@pytest.mark.criterion(4, "F-relatedness")
def test_criterion_4_rollout_is_pushforward_flow(record_property):
    start = time.perf_counter()
    ds = generate(lv_spec(t_span=(0.0, 2.0), n_samples=20))
    times = np.linspace(0.0, 2.0, 21)
    worst = 0.0
    for seed in range(10):
        r = train_diffeo(ds, INNConfig(blocks=3, hidden=(16,), seed=seed), BaseConfig(seed=seed),
                         TrainConfig(lr=1e-2, iterations=10))
        full = DiffeoModel(r.model.inn, r.model.base, r.model.dim)
        q0 = full.augment(ds.observed[seed % 3, :1])[0]
        ref = integrate(lambda q: pushforward_dynamics(full, q), q0, times, SolverConfig("rk4", h=5e-3))
        ours = rollout(full, q0, times)
        worst = max(worst, float(np.max(np.abs(ours - ref)) / np.max(np.abs(ref))))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-3 and elapsed < 120.0


@pytest.mark.criterion(5, "stability")
def test_criterion_5_stable_models_converge(record_property):
    start = time.perf_counter()
    ds = generate(lv_spec(n_samples=20))
    lo, hi = ds.observed.min(axis=(0, 1)), ds.observed.max(axis=(0, 1))
    eps = 1e-3
    worst_a, worst_ratio = -np.inf, 0.0
    for seed in range(3):
        r = train_diffeo(ds, INNConfig(blocks=3, hidden=(16,), seed=seed), BaseConfig(stable=True, eps=eps, seed=seed),
                         TrainConfig(lr=1e-2, iterations=30))
        model = DiffeoModel(r.model.inn, r.model.base, r.model.dim)
        a = model.base.real_parts().value
        worst_a = max(worst_a, float(a.max()))
        T = 20.0 / float(np.min(np.abs(a)))
        fixed = model.inn.forward(np.zeros((1, model.dim))).value[0]
        starts = model.augment(np.random.default_rng(seed).uniform(lo, hi, (100, ds.dim)))
        end = rollout(model, starts, [0.0, T])[:, -1]
        ratio = np.linalg.norm(end - fixed, axis=1) / np.linalg.norm(starts - fixed, axis=1)
        worst_ratio = max(worst_ratio, float(ratio.max()))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max a {worst_a:.2e}, max contraction {worst_ratio:.2e}, {elapsed:.1f} s")
    assert worst_a <= -eps and worst_ratio < 0.05 and elapsed < 60.0


@pytest.mark.criterion(6, "integrator orders")
def test_criterion_6_integrator_orders(record_property):
    start = time.perf_counter()
    orders = {m: order_check(m) for m in ("euler", "midpoint", "rk4")}
    times = np.linspace(0.0, 5.0, 11)
    ys = integrate(lambda y: -y, np.array([1.0]), times, SolverConfig("dopri5", rtol=1e-6, atol=1e-6))
    err = float(np.max(np.abs(ys[:, 0] - np.exp(-times))))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{m} {p:.2f}" for m, p in orders.items()) + f", dopri5 err {err:.1e}")
    ok = all(abs(orders[m] - p) <= 0.2 for m, p in (("euler", 1), ("midpoint", 2), ("rk4", 4)))
    assert ok and err < 1e-5 and elapsed < 30.0


@pytest.mark.criterion(7, "desk-scale LV learning")
def test_criterion_7_lv_learning(record_property):
    ds = generate(lv_spec())
    assert ds.n_traj == 3 and ds.times.size == 50
    r = train_diffeo(ds, INNConfig(hidden=(64,)), BaseConfig(), TrainConfig(lr=1e-4, iterations=2000))
    first, last = r.history[0]["loss"], r.final_loss

    t = np.linspace(0.0, 3.0, 30)
    clean = np.array([[1.0], [2.0], [-1.5]])[:, None, :] * np.exp(-t)[None, :, None]
    decay = TrajectoryDataset(t, clean, clean.copy())
    d = train_diffeo(decay, INNConfig(blocks=2, hidden=(16,)), BaseConfig(), TrainConfig(lr=1e-3, iterations=1000))
    fine = np.linspace(0.0, 3.0, 291)
    mse = float(np.mean((rollout(d.model, clean[:, 0], fine) - clean[:, :1, :] * np.exp(-fine)[None, :, None]) ** 2))
    record_property("detail", f"LV loss {first:.3g} -> {last:.3g} ({first / last:.1f}x), decay MSE {mse:.1e}")
    assert r.outcome == "ok" and last <= first / 20 and mse < 1e-4


TIMING_SCRIPT = """
import json
import numpy as np
from diffeo_ode.evaluation import rollout, time_call
from diffeo_ode.base_ode import BaseConfig
from diffeo_ode.inn import INNConfig
from diffeo_ode.integrators import SolverConfig
from diffeo_ode.systems import LV3_IC, SystemSpec, generate
from diffeo_ode.training import TrainConfig, train_baseline, train_diffeo

ds = generate(SystemSpec("lv3", initial_conditions=LV3_IC[:3]))
diffeo = train_diffeo(ds, INNConfig(hidden=(16,)), BaseConfig(), TrainConfig(lr=1e-3, iterations=20)).model
rk4 = train_baseline(ds, SolverConfig("rk4"), (150,) * 5, TrainConfig(lr=1e-4, iterations=2)).model
y0 = ds.observed[0, 0]
out = {}
for name, model in (("diffeo", diffeo), ("rk4", rk4)):
    for n in (100, 1000):
        times = np.linspace(0.0, 7.0, n)
        out[f"{name}_{n}"] = time_call(lambda: rollout(model, y0, times), repeats=20)[0]
print(json.dumps(out))
"""


@pytest.mark.criterion(8, "scaling law")
def test_criterion_8_rollout_scaling(record_property):
    start = time.perf_counter()
    threads = {k: "1" for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "DIFFEO_ODE_THREADS")}
    proc = subprocess.run([sys.executable, "-c", TIMING_SCRIPT], env={**os.environ, **threads},
                          capture_output=True, text=True, check=True)
    ms = json.loads(proc.stdout.strip().splitlines()[-1])
    diffeo_ratio = ms["diffeo_1000"] / ms["diffeo_100"]
    rk4_ratio = ms["rk4_1000"] / ms["rk4_100"]
    speedup = ms["rk4_1000"] / ms["diffeo_1000"]
    elapsed = time.perf_counter() - start
    record_property("detail", f"diffeo 1000/100 {diffeo_ratio:.2f}, rk4 1000/100 {rk4_ratio:.2f}, "
                              f"speedup {speedup:.1f}x, {elapsed:.1f} s")
    assert diffeo_ratio <= 3.0 and rk4_ratio >= 5.0 and speedup >= 5.0 and elapsed < 120.0


@pytest.mark.criterion(9, "stiffness behavior")
def test_criterion_9_rober_dopri5_vs_diffeo(record_property, tmp_path):
    start = time.perf_counter()
    spec = SystemSpec("rober")
    ds = generate(spec)
    cfg = TrainConfig.stiff(transform=ROBER_TRANSFORM)
    diffeo = train_diffeo(ds, INNConfig(hidden=(640,)), BaseConfig(kind="neural"), cfg)
    direct = train_baseline(ds, SolverConfig("dopri5"), (150,) * 5, cfg)
    n_diffeo = sum(p.value.size for p in diffeo.model.params())
    n_direct = sum(p.value.size for p in direct.model.params())
    assert abs(n_diffeo - n_direct) <= 0.01 * n_direct

    report = benchmark({"diffeo_euler": diffeo.model, "dopri5": direct.model}, ds, spec=spec,
                       log_space=True, timing=False)
    if direct.outcome != "ok":
        report.add("dopri5", "train_outcome", float(direct.failed_iteration), outcome=direct.outcome)
    csv_path, _ = emit_report(report, tmp_path / "rober_report")
    assert csv_path.exists()

    flagged = direct.outcome in FLAGS and direct.failed_iteration < 50
    dims = [f"log_mae_x{i + 1}" for i in range(ds.dim)]
    ours = [report.get("diffeo_euler", m)["value"] for m in dims]
    theirs = [report.get("dopri5", m)["value"] for m in dims]
    worse = direct.outcome == "ok" and all(b > a for a, b in zip(ours, theirs))
    elapsed = time.perf_counter() - start
    record_property("detail", f"dopri5 outcome {direct.outcome}, log-MAE diffeo "
                              f"{' '.join(f'{v:.3f}' for v in ours)} vs dopri5 {' '.join(f'{v:.3f}' for v in theirs)}, "
                              f"{elapsed:.0f} s")
    assert (flagged or worse) and elapsed < 1200.0


@pytest.mark.criterion(10, "replay determinism")
def test_criterion_10_replay_determinism(record_property, tmp_path):
    small = ["--n-traj", "3", "--samples", "15", "--inn-blocks", "2", "--inn-hidden", "8", "--heldout", "4",
             "--iterations", "5", "--lr", "1e-3", "--baseline-hidden", "8"]
    compared = 0
    for command, files in (("gen", ("dataset.csv", "dataset_clean.csv")),
                           ("train", ("model.npz", "loss_history.csv", "outcome.json")),
                           ("bench", ("loss_history_diffeo.csv", "loss_history_euler.csv", "plot_diffeo.svg"))):
        first, second = tmp_path / f"{command}_a", tmp_path / f"{command}_b"
        extra = ["--methods", "diffeo,euler"] if command == "bench" else []
        assert cli_main([command, *small, *extra, "--out", str(first)]) == 0
        assert cli_main([command, "--config", str(first / "run.cfg"), "--out", str(second)]) == 0
        for name in files + ("run.cfg", "seed", "VERSION"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), f"{command}/{name}"
            compared += 1
        if command == "bench":
            rows = [[r for r in csv.DictReader(open(d / "report.csv")) if r["metric"] != "time_ms"]
                    for d in (first, second)]
            assert rows[0] == rows[1]
            compared += 1
    record_property("detail", f"{compared} outputs bit-identical on replay")
