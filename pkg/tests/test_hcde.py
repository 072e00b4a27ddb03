import numpy as np
import pytest

from hcdelab.datasets import SlowFastSample, WindowConfig
from hcdelab.hcde import (
    Batch,
    HcdeConfig,
    HcdeModel,
    KnotSpline,
    TrainConfig,
    build_fast_path,
    build_model,
    fast_pseudo_times,
    infer_degradation,
    make_batch,
    model_parameters,
    replace_parameters,
    rollout_loss,
    slow_pseudo_times,
    solve_fast_cde,
    solve_slow_cde,
    train_hcde,
    transform_path,
)
from hcdelab.nn import monotonic_sigma_min, parameter_count
from hcdelab.odeint import SolverConfig
from hcdelab.tape import Tape, Tensor, backward_gradients

RNG = np.random.default_rng(7)


def tiny_config(**kw):
    defaults = dict(
        n_states=2, n_inputs=1, slow_dim=2, fast_dim=2, hidden=6,
        transform_dim=3,
        solver=SolverConfig(method="rk4", initial_step=0.05),
        window=WindowConfig(w_s=4, dt_s=2, w_f=3, dt_f=1, stride=1),
    )
    defaults.update(kw)
    return HcdeConfig(**defaults)


def random_sample(cfg, rng, unit_id="u", anchor=10, const=None):
    w = cfg.window

    def draw(shape):
        if const is not None:
            return np.full(shape, const)
        return rng.normal(size=shape)

    return SlowFastSample(
        unit_id=unit_id, anchor_index=anchor, anchor_time=float(anchor),
        slow_x=draw((w.w_s, cfg.n_states)), slow_u=draw((w.w_s, cfg.n_inputs)),
        fast_x=draw((w.w_f, cfg.n_states)), fast_u=draw((w.w_f, cfg.n_inputs)),
        target_x=draw((cfg.n_states,)))


def random_batch(cfg, rng, n=3, **kw):
    return make_batch([random_sample(cfg, rng, anchor=i, **kw)
                       for i in range(10, 10 + n)])


def zero_final_layer(model, component):
    mlp = getattr(model, component)
    upd = {
        f"{component}.w{len(mlp.weights) - 1}":
            Tensor(np.zeros_like(mlp.weights[-1].data), requires_grad=True),
        f"{component}.b{len(mlp.biases) - 1}":
            Tensor(np.zeros_like(mlp.biases[-1].data), requires_grad=True),
    }
    return replace_parameters(model, upd)


# ------------------------------------------------------------- pseudo-time

def test_pseudo_time_axes_share_terminal_point():
    taus = slow_pseudo_times(10)
    ts = fast_pseudo_times(5)
    assert taus[0] == 0.0 and taus[-1] == 1.0
    assert ts[0] == pytest.approx(0.9) and ts[-1] == 1.0
    assert taus[0] < ts[0]  # slow horizon starts long before the fast one


# ----------------------------------------------------------- path transform

def test_transform_zero_network_gives_flat_feature_channels():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=0), "transform")
    batch = random_batch(cfg, np.random.default_rng(0))
    y = transform_path(model, batch)
    knots = y.knots.data
    assert np.all(knots[:, :, :-1] == 0.0)  # features identically zero
    assert np.all(np.diff(knots[0, :, -1]) > 0)  # time channel still varies
    dy = y.derivative(0.5).data
    assert np.allclose(dy[:, :-1], 0.0)
    assert np.allclose(dy[:, -1], 1.0, atol=1e-9)


def test_transform_passthrough_reproduces_channel_spline():
    import dataclasses

    from hcdelab.nn import Mlp
    from hcdelab.paths import eval_path, fit_natural_cubic

    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    # single identity-activation layer copying input channel 0 to feature 0
    d_in = cfg.n_states + cfg.n_inputs + 1
    w = np.zeros((d_in, cfg.transform_dim))
    w[0, 0] = 1.0
    passthrough = Mlp(weights=[Tensor(w, requires_grad=True)],
                      biases=[Tensor(np.zeros(cfg.transform_dim),
                                     requires_grad=True)],
                      activations=["identity"])
    model = dataclasses.replace(model, transform=passthrough)
    batch = random_batch(cfg, np.random.default_rng(1), n=2)
    y = transform_path(model, batch)
    taus = slow_pseudo_times(cfg.window.w_s)
    # feature 0 of Y must reproduce the spline of raw channel 0
    ref = fit_natural_cubic(taus, batch.slow_x[0, :, 0])
    for t in (0.1, 0.4, 0.83):
        value, deriv = eval_path(ref, t)
        assert y.value(t).data[0, 0] == pytest.approx(value[0], abs=1e-12)
        assert y.derivative(t).data[0, 0] == pytest.approx(deriv[0], abs=1e-10)


def test_raw_path_variant_interpolates_observations_exactly():
    cfg_raw = tiny_config(with_path_transform=False)
    model_raw = build_model(cfg_raw, seed=0)
    batch = random_batch(cfg_raw, np.random.default_rng(1))
    y = transform_path(model_raw, batch)
    taus = slow_pseudo_times(cfg_raw.window.w_s)
    expect = np.concatenate([batch.slow_x, batch.slow_u,
                             np.broadcast_to(taus[None, :, None],
                                             (batch.size, 4, 1))], axis=2)
    assert np.array_equal(y.knots.data, expect)
    for i, tau in enumerate(taus):
        np.testing.assert_allclose(y.value(tau).data, expect[:, i, :],
                                   atol=1e-10)


def test_transform_derivative_matches_finite_differences():
    cfg = tiny_config()
    model = build_model(cfg, seed=2)
    batch = random_batch(cfg, np.random.default_rng(2))
    y = transform_path(model, batch)
    h = 1e-6
    for t in (0.2, 0.5, 0.77):
        fd = (y.value(t + h).data - y.value(t - h).data) / (2 * h)
        dy = y.derivative(t).data
        assert np.max(np.abs(dy - fd)) < 1e-5


# ---------------------------------------------------------------- slow CDE

def test_zero_slow_field_keeps_state_constant():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=3), "slow_field")
    batch = random_batch(cfg, np.random.default_rng(3))
    y = transform_path(model, batch)
    states, res = solve_slow_cde(model, y, batch)
    for s in states[1:]:
        assert np.array_equal(s.data, states[0].data)
    assert res.nfe > 0


def test_constant_path_with_time_column_zeroed_keeps_state_constant():
    cfg = tiny_config(with_path_transform=True)
    model = zero_final_layer(build_model(cfg, seed=4), "transform")
    # zero g's columns for the time channel: output layout is
    # (slow_dim x channels) flattened row-major; time is the last channel
    g = model.slow_field
    w1 = g.weights[1].data.copy()
    b1 = g.biases[1].data.copy()
    c = cfg.slow_path_channels
    w1[:, c - 1::c] = 0.0
    b1[c - 1::c] = 0.0
    model = replace_parameters(model, {
        "slow_field.w1": Tensor(w1, requires_grad=True),
        "slow_field.b1": Tensor(b1, requires_grad=True),
    })
    batch = random_batch(cfg, np.random.default_rng(4))
    y = transform_path(model, batch)
    states, _ = solve_slow_cde(model, y, batch)
    drift = np.max(np.abs(states[-1].data - states[0].data))
    assert drift < 1e-12


def test_monotonic_leak_bound_on_slow_increments():
    cfg = tiny_config(with_monotonic=True,
                      solver=SolverConfig(method="rk4", initial_step=0.02))
    model = build_model(cfg, seed=5)
    batch = random_batch(cfg, np.random.default_rng(5), n=4)
    y = transform_path(model, batch)
    states, _ = solve_slow_cde(model, y, batch)
    taus = slow_pseudo_times(cfg.window.w_s)
    leak = abs(monotonic_sigma_min(cfg.gamma))  # ~0.0277 at gamma 10
    for k in range(len(states) - 1):
        dtau = taus[k + 1] - taus[k]
        inc = states[k + 1].data - states[k].data
        assert inc.min() >= -(leak * 1.3) * dtau  # rk4 averaging slack
        assert np.max(np.abs(inc)) <= 1.0 * dtau + 1e-9  # |rate| < 1


def test_without_monotonic_increments_can_go_negative():
    cfg = tiny_config(with_monotonic=False)
    model = build_model(cfg, seed=6)
    batch = random_batch(cfg, np.random.default_rng(6), n=4)
    y = transform_path(model, batch)
    states, _ = solve_slow_cde(model, y, batch)
    incs = np.stack([b.data - a.data for a, b in zip(states[:-1], states[1:])])
    assert incs.min() < 0.0  # no suppression of negative rates


# ---------------------------------------------------------------- fast CDE

def test_zero_fast_field_keeps_latent_constant():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=7), "fast_field")
    batch = random_batch(cfg, np.random.default_rng(7))
    taus = slow_pseudo_times(cfg.window.w_s)
    y = transform_path(model, batch)
    slow_states, _ = solve_slow_cde(model, y, batch)
    x_path = build_fast_path(model, batch, taus, slow_states)
    fast_states, _ = solve_fast_cde(model, x_path, batch, taus, slow_states)
    for z in fast_states[1:]:
        assert np.array_equal(z.data, fast_states[0].data)


def test_flat_slow_trajectory_gives_flat_degradation_channels():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=8), "slow_field")
    model = zero_final_layer(model, "slow_encoder")  # d identically zero
    batch = random_batch(cfg, np.random.default_rng(8))
    taus = slow_pseudo_times(cfg.window.w_s)
    y = transform_path(model, batch)
    slow_states, _ = solve_slow_cde(model, y, batch)
    x_path = build_fast_path(model, batch, taus, slow_states)
    lo = cfg.n_states + cfg.n_inputs
    d_channels = x_path.knots.data[:, :, lo:lo + cfg.slow_dim]
    assert np.all(d_channels == 0.0)
    dy = x_path.derivative(0.95).data
    assert np.allclose(dy[:, lo:lo + cfg.slow_dim], 0.0, atol=1e-12)


def test_fast_encoder_gradients_match_finite_differences():
    cfg = tiny_config()
    model = build_model(cfg, seed=9)
    batch = random_batch(cfg, np.random.default_rng(9), n=2)

    def final_z_sum(m):
        taus = slow_pseudo_times(cfg.window.w_s)
        y = transform_path(m, batch)
        slow_states, _ = solve_slow_cde(m, y, batch)
        x_path = build_fast_path(m, batch, taus, slow_states)
        fast_states, _ = solve_fast_cde(m, x_path, batch, taus, slow_states)
        return fast_states[-1]

    params = model_parameters(model)
    with Tape() as tp:
        from hcdelab.tape import sum_all

        loss = sum_all(final_z_sum(model))
    grads = backward_gradients(tp, loss, params.values())

    h = 1e-5
    for name in ("fast_encoder.w1", "fast_encoder.b0"):
        p = params[name]
        base = p.data.copy()
        flat_idx = [0, base.size - 1]
        for idx in flat_idx:
            pert = base.ravel().copy()
            pert[idx] += h
            p.data = pert.reshape(base.shape)
            up = float(final_z_sum(model).data.sum())
            pert[idx] -= 2 * h
            p.data = pert.reshape(base.shape)
            down = float(final_z_sum(model).data.sum())
            p.data = base
            fd = (up - down) / (2 * h)
            got = grads[p].ravel()[idx]
            assert abs(got - fd) / max(abs(fd), 1e-8) < 1e-3, name


def test_steady_state_flag_drops_latent_from_field_inputs():
    cfg = tiny_config(steady_state=True)
    model = build_model(cfg, seed=10)
    assert model.fast_field.weights[0].shape[0] == cfg.slow_dim
    cfg_dyn = tiny_config(steady_state=False)
    model_dyn = build_model(cfg_dyn, seed=10)
    assert model_dyn.fast_field.weights[0].shape[0] == (
        cfg_dyn.fast_dim + cfg_dyn.slow_dim)
    # forward still works end to end
    batch = random_batch(cfg, np.random.default_rng(10))
    loss, _ = rollout_loss(model, batch)
    assert np.isfinite(loss.data)


# ------------------------------------------------------------ rollout loss

def test_rollout_loss_zero_for_oracle_constant_injection():
    cfg = tiny_config()
    model = build_model(cfg, seed=11)
    # constant data c everywhere; readout wired to output exactly c
    c = 0.37
    model = zero_final_layer(model, "readout")
    b1 = np.full_like(model.readout.biases[1].data, c)
    model = replace_parameters(
        model, {"readout.b1": Tensor(b1, requires_grad=True)})
    batch = random_batch(cfg, np.random.default_rng(11), const=c)
    loss, traj = rollout_loss(model, batch)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(traj.predictions, c)


def test_rollout_loss_closed_form_for_zero_readout():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=12), "readout")
    batch = random_batch(cfg, np.random.default_rng(12), n=4)
    loss, _ = rollout_loss(model, batch)
    targets = np.concatenate([batch.fast_x[:, 1:, :],
                              batch.target_x[:, None, :]], axis=1)
    expect = (targets ** 2).sum() / (batch.size * targets.shape[1])
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)


def test_rollout_loss_quadratic_homogeneity():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=13), "readout")
    rng = np.random.default_rng(13)
    samples = [random_sample(cfg, rng, anchor=i) for i in range(10, 13)]
    batch1 = make_batch(samples)
    doubled = [SlowFastSample(
        unit_id=s.unit_id, anchor_index=s.anchor_index,
        anchor_time=s.anchor_time, slow_x=s.slow_x, slow_u=s.slow_u,
        fast_x=2.0 * s.fast_x, fast_u=s.fast_u, target_x=2.0 * s.target_x)
        for s in samples]
    batch2 = make_batch(doubled)
    # fast targets double; with a zero readout all residuals double
    l1, _ = rollout_loss(model, batch1)
    l2, _ = rollout_loss(model, batch2)
    assert float(l2.data) == pytest.approx(4.0 * float(l1.data), rel=1e-10)


# -------------------------------------------------------- ablation wiring

def test_path_transform_ablation_parameter_accounting():
    # with transform_dim == n_states + n_inputs both variants share every
    # other shape, so the parameter count differs by exactly the transform
    cfg_on = tiny_config(transform_dim=3)  # n_states + n_inputs = 3
    cfg_off = tiny_config(transform_dim=3, with_path_transform=False)
    m_on = build_model(cfg_on, seed=14)
    m_off = build_model(cfg_off, seed=14)
    n_on = sum(t.size for t in model_parameters(m_on).values())
    n_off = sum(t.size for t in model_parameters(m_off).values())
    assert m_off.transform is None
    assert n_on - n_off == parameter_count(m_on.transform)
    names_off = set(model_parameters(m_off))
    assert not any(n.startswith("transform.") for n in names_off)
    # forward pass never references the transform
    batch = random_batch(cfg_off, np.random.default_rng(14))
    loss, _ = rollout_loss(m_off, batch)
    assert np.isfinite(loss.data)


# ---------------------------------------------------------------- training

def test_training_smoke_loss_decreases_majority_of_seeds():
    cfg = tiny_config()
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        samples = [random_sample(cfg, rng, anchor=i) for i in range(50)]
        model = build_model(cfg, seed=seed)
        result = train_hcde(model, samples,
                            TrainConfig(batch_size=16, max_epochs=5,
                                        min_epochs=5), seed=seed)
        losses = [r["train_loss"] for r in result.log]
        decreases = sum(1 for a, b in zip(losses[:-1], losses[1:]) if b < a)
        if decreases >= 3:
            wins += 1
    assert wins >= 3  # stochastic smoke criterion, majority of seeds


def test_training_honors_min_epochs_and_logs():
    cfg = tiny_config()
    rng = np.random.default_rng(15)
    samples = [random_sample(cfg, rng, anchor=i) for i in range(12)]
    model = build_model(cfg, seed=15)
    result = train_hcde(model, samples,
                        TrainConfig(batch_size=8, max_epochs=8, min_epochs=5,
                                    early_stop_patience=1), seed=15)
    assert len(result.log) >= 5
    for row in result.log:
        assert set(row) == {"epoch", "train_loss", "val_loss", "lr",
                            "mean_slow_nfe"}


def test_training_deterministic_given_seed():
    cfg = tiny_config()
    rng = np.random.default_rng(16)
    samples = [random_sample(cfg, rng, anchor=i) for i in range(20)]

    def run():
        model = build_model(cfg, seed=16)
        res = train_hcde(model, samples,
                         TrainConfig(batch_size=8, max_epochs=3, min_epochs=3),
                         seed=16)
        return model_parameters(res.model)

    p1, p2 = run(), run()
    for name in p1:
        assert np.array_equal(p1[name].data, p2[name].data), name


# --------------------------------------------------------------- inference

def test_infer_degradation_zero_field_returns_encoder_values():
    cfg = tiny_config()
    model = zero_final_layer(build_model(cfg, seed=17), "slow_field")
    rng = np.random.default_rng(17)
    samples = [random_sample(cfg, rng, anchor=i) for i in range(6)]
    series = infer_degradation(model, samples)
    batch = make_batch(samples)
    taus = slow_pseudo_times(cfg.window.w_s)
    from hcdelab.nn import mlp_forward

    enc_in = np.concatenate([batch.slow_x[:, 0, :], batch.slow_u[:, 0, :],
                             np.full((batch.size, 1), taus[0])], axis=1)
    expect = mlp_forward(model.slow_encoder, Tensor(enc_in)).data
    assert np.allclose(series.embeddings, expect, atol=1e-12)
    assert series.slow_nfe > 0


def test_infer_degradation_differs_across_anchors_after_training():
    cfg = tiny_config()
    rng = np.random.default_rng(18)
    samples = [random_sample(cfg, rng, anchor=i) for i in range(24)]
    model = build_model(cfg, seed=18)
    res = train_hcde(model, samples,
                     TrainConfig(batch_size=8, max_epochs=3, min_epochs=3),
                     seed=18)
    series = infer_degradation(res.model, samples[:4])
    diffs = np.abs(np.diff(series.embeddings, axis=0)).max()
    assert diffs > 0.0  # non-degenerate embedding map


def test_infer_degradation_rejects_mixed_units():
    cfg = tiny_config()
    rng = np.random.default_rng(19)
    samples = [random_sample(cfg, rng, unit_id="a"),
               random_sample(cfg, rng, unit_id="b")]
    model = build_model(cfg, seed=19)
    with pytest.raises(ValueError):
        infer_degradation(model, samples)
