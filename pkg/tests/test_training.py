import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraldmd.checkpoint import checkpoint_read
from neuraldmd.field_net import Layer, NetworkParams
from neuraldmd.gradcheck import model_fd_check
from neuraldmd.model import ModelConfig, NeuralModalModel
from neuraldmd.observation import PixelObservations, VisibilityObservations, fourier_factors, pixel_area
from neuraldmd.training import (
    TrainConfig,
    TrainingDiverged,
    TrainState,
    adam_step,
    fit,
    pixel_loss,
    plateau_schedule,
    vis_chi2,
)

SMALL = dict(modal_hidden=(8, 8), head_hidden=(6,), latent_dim=3)


def small_model(K=1, seed=0, **kw):
    m = NeuralModalModel.create(ModelConfig(n_pairs=K, seed=seed, **{**SMALL, **kw}))
    m.time_window = (0.0, 1.0)
    return m


def random_pixels(n=20, seed=0, times=(0.0, 0.5, 1.0)):
    rng = np.random.default_rng(seed)
    return PixelObservations(
        rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.choice(times, n), rng.normal(size=n), np.ones(n)
    )


def model_pixels(model, n=30, seed=0):
    """Observations equal to the model's own field."""
    obs = random_pixels(n, seed)
    vals = np.array([model.field(obs.coords[i : i + 1], model.to_model_time(obs.t[i]))[0] for i in range(n)])
    return PixelObservations(obs.x, obs.y, obs.t, vals, obs.sigma)


def model_visibilities(model, grid, u, v, t, sigma):
    H, W = grid
    vis = np.empty(len(u), dtype=complex)
    for i in range(len(u)):
        frame = model.render(H, W, model.to_model_time(t[i]))
        Ey, Ex = fourier_factors(u[i : i + 1], v[i : i + 1], H, W)
        vis[i] = pixel_area(H, W) * np.sum((Ey @ frame) * Ex)
    return VisibilityObservations(u, v, t, vis, sigma)


# ---------------------------------------------------------------- losses


def test_pixel_loss_zero_at_perfect_fit():
    m = small_model(K=2, seed=1)
    loss, grads = pixel_loss(m, model_pixels(m))
    assert loss < 1e-28
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-13)


def test_pixel_loss_unit_residual():
    m = small_model(K=0, head_kind="free")
    m.modal_net = NetworkParams([Layer(np.zeros((1, m.modal_net.in_dim)), np.array([2.5]), "identity")])
    m.initial_state.head.raw = np.array([1.0])
    obs = random_pixels()
    obs = PixelObservations(obs.x, obs.y, obs.t, np.full(len(obs), 3.5), obs.sigma)
    assert pixel_loss(m, obs)[0] == pytest.approx(1.0, abs=1e-14)


def test_vis_chi2_perfect_and_unit_fit():
    m = small_model(K=1, seed=2)
    rng = np.random.default_rng(0)
    u, v = rng.normal(scale=2, size=5), rng.normal(scale=2, size=5)
    t = np.array([0.0, 0.0, 0.5, 1.0, 1.0])
    sigma = rng.uniform(0.5, 2.0, 5)
    exact = model_visibilities(m, (6, 6), u, v, t, sigma)
    assert vis_chi2(m, exact, (6, 6))[0] < 1e-26
    shifted = VisibilityObservations(u, v, t, exact.vis + sigma * np.exp(1j * rng.uniform(0, 2 * np.pi, 5)), sigma)
    assert vis_chi2(m, shifted, (6, 6))[0] == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("head_kind", ["mlp", "free"])
def test_pixel_loss_gradients(head_kind):
    m = small_model(K=1, seed=3, head_kind=head_kind)
    errs = model_fd_check(m, lambda mm: pixel_loss(mm, random_pixels(seed=1)))
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("head_kind", ["mlp", "free"])
def test_vis_chi2_gradients(head_kind):
    m = small_model(K=1, seed=4, head_kind=head_kind)
    rng = np.random.default_rng(2)
    obs = VisibilityObservations(
        rng.normal(size=3), rng.normal(size=3), np.array([0.0, 0.0, 0.7]),
        rng.normal(size=3) + 1j * rng.normal(size=3), np.array([0.5, 1.0, 2.0]),
    )
    errs = model_fd_check(m, lambda mm: vis_chi2(mm, obs, (4, 4)))
    assert max(errs.values()) < 1e-4, errs


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = TrainState.create(params, 1e-3)
    state.m["w"][:] = 0.0
    adam_step(state, params, {"w": np.zeros(2)}, 1e-3)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)
    assert state.step == 1


def test_adam_decays_moments():
    params = {"w": np.array([0.0])}
    state = TrainState.create(params, 1e-3)
    adam_step(state, params, {"w": np.array([2.0])}, 1e-3)
    m1, v1 = state.m["w"].copy(), state.v["w"].copy()
    adam_step(state, params, {"w": np.array([0.0])}, 1e-3)
    np.testing.assert_allclose(state.m["w"], 0.9 * m1)
    np.testing.assert_allclose(state.v["w"], 0.999 * v1)


@settings(max_examples=40)
@given(st.floats(1e-3, 1e3), st.booleans(), st.floats(1e-5, 1e-1))
def test_adam_first_step_is_signed_lr(g, negative, lr):
    g = -g if negative else g
    params = {"p": np.array([0.3])}
    state = TrainState.create(params, lr)
    adam_step(state, params, {"p": np.array([g])}, lr)
    np.testing.assert_allclose(params["p"][0] - 0.3, -lr * np.sign(g), rtol=1e-4)


def test_adam_rejects_nonfinite_gradient():
    params = {"modal.W0": np.zeros(2)}
    state = TrainState.create(params, 1e-3)
    with pytest.raises(FloatingPointError, match="modal.W0"):
        adam_step(state, params, {"modal.W0": np.array([np.nan, 0.0])}, 1e-3)


# ---------------------------------------------------------------- schedule


def test_plateau_never_triggers_on_decreasing_loss():
    state = TrainState(lr=1e-3)
    for k in range(2000):
        plateau_schedule(state, 1.0 / (k + 1), patience=500)
    assert state.lr == 1e-3


def test_plateau_halves_at_patience():
    state = TrainState(lr=1e-3)
    lrs = [plateau_schedule(state, 1.0, patience=500) for _ in range(999)]
    assert lrs[498] == 1e-3
    assert lrs[499] == 5e-4
    assert lrs[-1] == 5e-4
    plateau_schedule(state, 1.0, patience=500)
    assert state.lr == 2.5e-4


# ---------------------------------------------------------------- fit


def test_fit_self_recovery_from_identical_model():
    target = small_model(K=1, seed=5)
    obs = model_pixels(target, n=40, seed=3)
    # Adam's first steps move every parameter by about lr even at the optimum;
    # the plateau schedule has to bring it back
    res = fit(small_model(K=1, seed=5), obs, TrainConfig(epochs=300, lr0=1e-4, plateau_patience=20))
    assert res.final_loss < 1e-6


def test_fit_reduces_loss_from_other_seed():
    target = small_model(K=1, seed=5)
    obs = model_pixels(target, n=40, seed=3)
    res = fit(small_model(K=1, seed=9), obs, TrainConfig(epochs=300, lr0=3e-3))
    assert res.history[-1][1] < 0.1 * res.history[0][1]


def test_zero_epochs_is_a_no_op():
    m = small_model(K=2, seed=6)
    before = {k: v.copy() for k, v in m.parameters().items()}
    res = fit(m, random_pixels(), TrainConfig(epochs=0))
    assert res.history == []
    for k, v in res.model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_history_bookkeeping():
    res = fit(small_model(K=1, seed=7), random_pixels(40), TrainConfig(epochs=60, plateau_patience=5, batch_size=16))
    losses = np.array([h[1] for h in res.history])
    lrs = np.array([h[2] for h in res.history])
    assert np.all(np.isfinite(losses))
    assert np.all(np.diff(np.minimum.accumulate(losses)) <= 0)
    assert np.all(np.diff(lrs) <= 0)
    assert [h[0] for h in res.history] == list(range(60))
    best = pixel_loss(res.best_model, random_pixels(40), grads=False)[0]
    assert best <= max(losses) + 1e-12


def test_fit_deterministic():
    cfg = TrainConfig(epochs=15, batch_size=8)
    a = fit(small_model(seed=8), random_pixels(30), cfg)
    b = fit(small_model(seed=8), random_pixels(30), cfg)
    assert a.history == b.history


def test_worker_count_does_not_change_results():
    m = small_model(K=1, seed=9)
    rng = np.random.default_rng(0)
    obs = VisibilityObservations(
        rng.normal(size=12), rng.normal(size=12), np.repeat([0.0, 0.3, 0.6, 1.0], 3),
        rng.normal(size=12) + 1j * rng.normal(size=12), np.ones(12),
    )
    base = dict(epochs=5, loss_kind="visibility", render_grid=(4, 4), chunks=3)
    one = fit(m.copy(), obs, TrainConfig(**base, workers=1))
    four = fit(m.copy(), obs, TrainConfig(**base, workers=4))
    assert one.history == four.history


def test_resume_matches_unbroken_run(tmp_path):
    m = small_model(K=1, seed=10)
    obs = random_pixels(30)
    cfg = TrainConfig(epochs=8, checkpoint_every=4, batch_size=7)
    full = fit(m.copy(), obs, cfg, tmp_path)
    resumed_model, state, _ = checkpoint_read(tmp_path / "checkpoint_4.ndmd")
    rest = fit(resumed_model, obs, cfg, None, state)
    assert full.history[4:] == rest.history
    np.testing.assert_array_equal(full.model.render(5, 5, 0.4), rest.model.render(5, 5, 0.4))
    assert (tmp_path / "loss_history.csv").exists()
    assert (tmp_path / "checkpoint_best.ndmd").exists()


def test_divergence_is_reported():
    m = small_model(K=1, seed=11)
    m.modal_net.layers[0].W[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        fit(m, random_pixels(), TrainConfig(epochs=3))


def test_wrong_observation_kind():
    with pytest.raises(ValueError):
        fit(small_model(), random_pixels(), TrainConfig(epochs=1, loss_kind="visibility"))
    with pytest.raises(ValueError):
        TrainConfig(precision=16)


def test_float32_training_runs():
    res = fit(small_model(K=1, seed=12), random_pixels(), TrainConfig(epochs=5, precision=32))
    assert res.model.dtype == np.float32
    assert all(math.isfinite(h[1]) for h in res.history)
