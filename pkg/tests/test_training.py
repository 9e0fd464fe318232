import numpy as np
import pytest

from diffeo_ode import autodiff as ad
from diffeo_ode.base_ode import BaseConfig, LinearBase
from diffeo_ode.evaluation import rollout
from diffeo_ode.inn import INN, INNConfig
from diffeo_ode.integrators import SolverConfig
from diffeo_ode.systems import TrajectoryDataset
from diffeo_ode.training import (Adam, DiffeoModel, DivergenceError, TrainConfig, Transform, build_diffeo,
                                 clip_gradients, load_model, loss, save_model, train_baseline, train_diffeo,
                                 write_history)


def decay_dataset(n=30, t_end=3.0):
    t = np.linspace(0.0, t_end, n)
    ics = np.array([[1.0], [2.0], [-1.5]])
    clean = ics[:, None, :] * np.exp(-t)[None, :, None]
    return TrajectoryDataset(t, clean, clean.copy(), {"source": "test"})


def constant_dataset():
    t = np.linspace(0.0, 1.0, 5)
    y = np.tile(np.array([[[1.0, -2.0]], [[0.5, 3.0]]]), (1, 5, 1))
    return TrajectoryDataset(t, y, y.copy())


def identity_model(n=4, d=2):
    inn = INN(INNConfig(dim=n, blocks=2, hidden=(4,)))
    base = LinearBase(BaseConfig(dim=n))
    base.spec_real.value[:] = 0.0
    base.spec_imag.value[:] = 0.0
    base.P.value = np.eye(n)
    return DiffeoModel(inn, base, d)


def tiny_model(seed=0):
    """Dim-2 model with one randomized block, small enough for finite differences."""
    rng = np.random.default_rng(seed)
    inn = INN(INNConfig(dim=2, blocks=1, hidden=(3,), seed=seed), zero_init=False)
    for p in inn.params():
        p.value = 0.4 * rng.standard_normal(p.shape)
    base = LinearBase(BaseConfig(dim=2, seed=seed))
    return DiffeoModel(inn, base, 2)


class Offset:
    """Stub model whose predictions are the targets plus one."""

    def __init__(self, target):
        self.target = target

    def predict(self, y0, times, h=None):
        return ad.Tensor(self.target + 1.0)


def test_identity_model_fits_constants_exactly():
    ds = constant_dataset()
    assert float(loss(identity_model(), ds).value) == 0.0
    assert float(loss(identity_model(), ds, "mse").value) == 0.0


@pytest.mark.parametrize("kind", ["mae", "mse"])
def test_unit_offset_loss_is_one(kind):
    ds = constant_dataset()
    assert float(loss(Offset(ds.observed), ds, kind).value) == 1.0


def test_loss_invariant_under_trajectory_permutation():
    ds = decay_dataset()
    tiny = tiny_model()
    model = DiffeoModel(tiny.inn, tiny.base, 1)
    perm = [2, 0, 1]
    shuffled = TrajectoryDataset(ds.times, ds.clean[perm], ds.observed[perm])
    for kind in ("mae", "mse"):
        a, b = float(loss(model, ds, kind).value), float(loss(model, shuffled, kind).value)
        assert abs(a - b) <= 1e-14 * abs(a)


def test_loss_gradient_matches_finite_differences():
    model = tiny_model(seed=2)
    t = np.linspace(0.0, 0.6, 4)
    y = np.random.default_rng(2).standard_normal((2, 4, 2))
    ds = TrajectoryDataset(t, y, y)
    err = ad.grad_check_params(lambda: loss(model, ds, "mse"), model.params())
    assert err < 1e-4


def test_divergence_names_trajectory():
    ds = constant_dataset()
    bad = ds.observed.copy()
    bad[1, 2, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        loss(Offset(bad), ds)
    assert info.value.trajectory == 1


def test_adam_zero_gradient_is_a_no_op():
    p = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    for _ in range(3):
        opt.step({p: np.zeros(3)})
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])


@pytest.mark.parametrize("lr", [1e-2, 1e-3, 1e-4])
def test_adam_step_descends_quadratic_bowl(lr):
    p = ad.Tensor(np.array([0.8, -1.2]), requires_grad=True)
    with ad.Tape([p]) as tape:
        before = ad.sum(ad.square(p))
    Adam([p], lr=lr).step(tape.backward(before))
    assert float(np.sum(p.value ** 2)) < float(before.value)


def test_adam_first_step_has_size_lr():
    p = ad.Tensor(np.array([0.5]), requires_grad=True)
    Adam([p], lr=1e-3).step({p: np.array([42.0])})
    np.testing.assert_allclose(p.value, [0.5 - 1e-3], rtol=1e-9)


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose(np.hypot(grads["a"], grads["b"]), [1.0])


def test_train_config_schedules():
    cfg = TrainConfig.stiff()
    assert cfg.schedule == [(500, 1e-4), (4500, 1e-6)] and cfg.total_iterations == 5000
    assert TrainConfig(lr=1e-3, iterations=7).schedule == [(7, 1e-3)]
    for bad in (dict(lr=0.0), dict(schedule=[(0, 1e-3)]), dict(loss="huber"), dict(transform="sqrt")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.mark.parametrize("kind", ["none", "standardize", "log"])
def test_transform_round_trip(kind):
    y = np.abs(np.random.default_rng(0).standard_normal((2, 6, 3))) + 1e-3
    tr = Transform.fit(kind, y)
    np.testing.assert_allclose(tr.invert(tr.apply(y)), y, rtol=1e-12)


def test_augmentation_doubles_state():
    ds = decay_dataset()
    model = build_diffeo(ds, INNConfig(blocks=1, hidden=(4,)), BaseConfig(), TrainConfig())
    assert model.dim == 2 and model.data_dim == 1
    np.testing.assert_array_equal(model.augment([[3.0]]), [[3.0, 0.0]])
    assert build_diffeo(ds, INNConfig(blocks=1, hidden=(4,)), BaseConfig(), TrainConfig(augment=3)).dim == 4


def test_neural_base_step_is_data_increment():
    ds = decay_dataset()
    model = build_diffeo(ds, INNConfig(blocks=1, hidden=(4,)), BaseConfig(kind="neural", hidden=(4,)), TrainConfig())
    assert model.step == pytest.approx(ds.times[1] - ds.times[0])


def test_training_is_deterministic():
    ds = decay_dataset()
    cfg = TrainConfig(lr=1e-3, iterations=15)
    a = train_diffeo(ds, INNConfig(blocks=1, hidden=(8,)), BaseConfig(), cfg)
    b = train_diffeo(ds, INNConfig(blocks=1, hidden=(8,)), BaseConfig(), cfg)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for k, v in a.model.state().items():
        assert v.tobytes() == b.model.state()[k].tobytes()


def test_decay_recovered_by_linear_base():
    ds = decay_dataset()
    r = train_diffeo(ds, INNConfig(blocks=2, hidden=(16,)), BaseConfig(), TrainConfig(lr=1e-3, iterations=1000))
    assert r.outcome == "ok"
    pred = rollout(r.model, ds.clean[:, 0], ds.times)
    assert np.mean((pred - ds.clean) ** 2) < 1e-4


def test_euler_baseline_on_decay():
    ds = decay_dataset()
    r = train_baseline(ds, SolverConfig("euler"), (16, 16), TrainConfig(lr=3e-3, iterations=600, loss="mse"))
    assert r.outcome == "ok" and r.final_loss < 1e-3
    cfg = TrainConfig(lr=3e-3, iterations=5, loss="mse")
    h1 = train_baseline(ds, SolverConfig("euler"), (8,), cfg).history
    h2 = train_baseline(ds, SolverConfig("euler"), (8,), cfg).history
    assert h1 == h2


def test_baseline_integration_failure_becomes_outcome():
    ds = decay_dataset()
    r = train_baseline(ds, SolverConfig("rk4", max_steps=5), (4,), TrainConfig(iterations=3))
    assert r.outcome == "max_steps_exceeded" and r.failed_iteration == 0 and r.history == []


@pytest.mark.parametrize("kind", ["linear", "neural"])
def test_model_file_round_trip(tmp_path, kind):
    ds = decay_dataset()
    r = train_diffeo(ds, INNConfig(blocks=2, hidden=(6,)), BaseConfig(kind=kind, hidden=(5,)),
                     TrainConfig(lr=1e-2, iterations=3, transform="standardize"))
    path = save_model(r.model, tmp_path / "m.npz")
    back = load_model(path)
    y0, t = ds.observed[:, 0], ds.times
    assert rollout(back, y0, t).tobytes() == rollout(r.model, y0, t).tobytes()
    assert save_model(back, tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_baseline_file_round_trip(tmp_path):
    ds = decay_dataset()
    r = train_baseline(ds, SolverConfig("midpoint"), (5,), TrainConfig(lr=1e-2, iterations=2))
    back = load_model(save_model(r.model, tmp_path / "b.npz"))
    assert back.solver == r.model.solver
    y0, t = ds.observed[:, 0], ds.times
    assert rollout(back, y0, t).tobytes() == rollout(r.model, y0, t).tobytes()


def test_history_csv(tmp_path):
    ds = decay_dataset()
    r = train_diffeo(ds, INNConfig(blocks=1, hidden=(4,)), BaseConfig(), TrainConfig(schedule=[(2, 1e-3), (1, 1e-4)]))
    lines = write_history(r.history, tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,lr,phase" and len(lines) == 4
    assert lines[-1].startswith("2,") and lines[-1].endswith(",0.0001,1")
