import numpy as np
import pytest

import sparseflow.alignment as al
import sparseflow.backbone as bb
import sparseflow.flow as fl
import sparseflow.numerics as nm
from sparseflow.errors import DomainError, LengthError, NumericsError
from sparseflow.synthvox import (LatentSequence, Utterance, make_task_spec,
                                 sample_dataset)

import gauss1d


# ---------------------------------------------------------------------------
# schedules and interpolation
# ---------------------------------------------------------------------------


def test_schedule_kinds():
    assert fl.FlowSchedule("linear").kind == "linear"
    assert fl.FlowSchedule("vp").sigma(0.0) == 1.0
    assert fl.FlowSchedule("vp").sigma(1.0) == 0.0
    with pytest.raises(DomainError):
        fl.FlowSchedule("cosine")


def test_interpolate_linear_endpoints():
    rng = np.random.default_rng(0)
    z0, z1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    sched = fl.FlowSchedule("linear")
    assert np.array_equal(fl.interpolate(sched, z0, z1, 0.0), z0)
    assert np.array_equal(fl.interpolate(sched, z0, z1, 1.0), z1)


def test_interpolate_linear_midpoint():
    sched = fl.FlowSchedule("linear")
    z = fl.interpolate(sched, np.zeros((1, 1)), np.full((1, 1), 2.0), 0.5)
    assert z[0, 0] == 1.0


def test_interpolate_vp_endpoints():
    rng = np.random.default_rng(1)
    z0, z1 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    sched = fl.FlowSchedule("vp")
    # sigma(1) = 0: pure data, exactly
    assert np.array_equal(fl.interpolate(sched, z0, z1, 1.0), z1)
    # sigma(0) = 1: pure noise
    assert np.array_equal(fl.interpolate(sched, z0, z1, 0.0), z0)


def test_interpolate_vp_intermediate_norm():
    sched = fl.FlowSchedule("vp")
    t = 0.3
    s = 1 - t
    z = fl.interpolate(sched, np.ones((1, 1)), np.ones((1, 1)), t)
    assert z[0, 0] == pytest.approx(np.sqrt(1 - s * s) + s)


def test_interpolate_rejects_bad_t_and_shapes():
    sched = fl.FlowSchedule("linear")
    with pytest.raises(DomainError):
        fl.interpolate(sched, np.zeros((2, 2)), np.zeros((2, 2)), 1.5)
    with pytest.raises(DomainError):
        fl.interpolate(sched, np.zeros((2, 2)), np.zeros((2, 2)), -0.1)
    with pytest.raises(LengthError):
        fl.interpolate(sched, np.zeros((2, 2)), np.zeros((3, 2)), 0.5)


def test_interpolate_vector_t():
    sched = fl.FlowSchedule("linear")
    z0 = np.zeros((3, 2))
    z1 = np.ones((3, 2)) * 2
    t = np.array([0.0, 0.5, 1.0])
    z = fl.interpolate(sched, z0, z1, t)
    assert np.array_equal(z, np.array([[0, 0], [1, 1], [2, 2.0]]))
    with pytest.raises(DomainError):
        fl.interpolate(sched, z0, z1, np.array([0.0, 0.5, 1.2]))


# ---------------------------------------------------------------------------
# TrainBatch validation
# ---------------------------------------------------------------------------


def _batch(n=6, c=2, t=0.5, prompt=2, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[:prompt] = True
    return fl.TrainBatch(z1=rng.standard_normal((n, c)),
                         z0=rng.standard_normal((n, c)), t=t, prompt_mask=mask)


def test_train_batch_validation():
    with pytest.raises(LengthError):
        fl.TrainBatch(z1=np.zeros((3, 2)), z0=np.zeros((4, 2)), t=0.5,
                      prompt_mask=np.zeros(3, dtype=bool))
    with pytest.raises(LengthError):
        fl.TrainBatch(z1=np.zeros((3, 2)), z0=np.zeros((3, 2)), t=0.5,
                      prompt_mask=np.zeros(4, dtype=bool))
    with pytest.raises(DomainError):
        _batch(t=1.5)
    with pytest.raises(LengthError):
        fl.TrainBatch(z1=np.zeros((3, 2)), z0=np.zeros((3, 2)),
                      t=np.array([0.5, 0.5]), prompt_mask=np.zeros(3, dtype=bool))


# ---------------------------------------------------------------------------
# fm_loss
# ---------------------------------------------------------------------------


def test_fm_loss_zero_when_drift_matches_direction():
    batch = _batch()
    direction = batch.z1 - batch.z0

    def drift(z_t, t):
        return nm.tensor(direction)

    assert fl.fm_loss(drift, batch).item() == 0.0


def test_fm_loss_prompt_perturbation_invariant_bitexact():
    batch = _batch(n=8, prompt=3)
    rng = np.random.default_rng(5)
    base = batch.z1 - batch.z0 + rng.standard_normal(batch.z1.shape)
    poke = base.copy()
    poke[:3] += rng.standard_normal((3, base.shape[1])) * 100.0

    losses = [fl.fm_loss(lambda z, t, out=o: nm.tensor(out), batch).item()
              for o in (base, poke)]
    assert losses[0] == losses[1]


def test_fm_loss_all_prompt_rejected():
    batch = _batch(n=4, prompt=4)
    with pytest.raises(DomainError):
        fl.fm_loss(lambda z, t: nm.tensor(np.zeros((4, 2))), batch)


def test_fm_loss_matches_manual_computation():
    batch = _batch(n=5, c=3, prompt=2, seed=9)
    rng = np.random.default_rng(10)
    out = rng.standard_normal((5, 3))
    loss = fl.fm_loss(lambda z, t: nm.tensor(out), batch).item()
    diff = out - (batch.z1 - batch.z0)
    want = (diff[2:] ** 2).sum() / 3
    assert loss == pytest.approx(want, rel=1e-12)


def test_fm_loss_state_keeps_prompt_frames_clean():
    batch = _batch(n=6, prompt=2, t=0.4)
    seen = {}

    def drift(z_t, t):
        seen["z"] = z_t.data.copy()
        return nm.tensor(np.zeros_like(z_t.data))

    fl.fm_loss(drift, batch)
    assert np.array_equal(seen["z"][:2], batch.z1[:2])
    sched = fl.FlowSchedule("linear")
    want = fl.interpolate(sched, batch.z0, batch.z1, 0.4)
    assert np.array_equal(seen["z"][2:], want[2:])


def test_fm_loss_gradient_reaches_drift_params():
    batch = _batch()
    w = nm.parameter(np.ones((2, 2)) * 0.3)
    with nm.GradTape() as tape:
        loss = fl.fm_loss(lambda z, t: nm.matmul(z, w), batch)
        tape.backward(loss)
    assert w.grad is not None and np.abs(w.grad).max() > 0


def test_fm_loss_vector_t_per_frame():
    n = 4
    rng = np.random.default_rng(3)
    z1, z0 = rng.standard_normal((n, 1)), rng.standard_normal((n, 1))
    t_vec = np.array([0.1, 0.4, 0.7, 0.9])
    batch = fl.TrainBatch(z1=z1, z0=z0, t=t_vec,
                          prompt_mask=np.zeros(n, dtype=bool))
    seen = {}

    def drift(z_t, t):
        seen["z"] = z_t.data.copy()
        return nm.tensor(np.zeros((n, 1)))

    fl.fm_loss(drift, batch)
    want = (1 - t_vec[:, None]) * z0 + t_vec[:, None] * z1
    assert np.allclose(seen["z"], want)


# ---------------------------------------------------------------------------
# Euler integration
# ---------------------------------------------------------------------------


def test_euler_exact_on_constant_field():
    c = np.array([[0.3, -1.2], [2.0, 0.5]])
    z = np.ones((2, 2))
    for steps in (1, 7, 25):
        end = fl.euler_sample(lambda zz, t: np.broadcast_to(c, zz.shape), z, steps)
        assert np.allclose(end, z + c, atol=1e-12)


def test_euler_single_step_is_one_update():
    z = np.zeros((1, 1))
    end = fl.euler_sample(lambda zz, t: np.full_like(zz, 2.0), z, 1)
    assert end[0, 0] == 2.0


def test_euler_linear_field_closed_form():
    z0 = np.array([[1.0], [-2.0]])
    end = fl.euler_sample(lambda zz, t: -zz, z0, 25)
    # explicit Euler on dz/dt = -z contracts by exactly (1 - 1/n)^n
    factor = (1 - 1 / 25) ** 25
    assert np.allclose(end, z0 * factor, rtol=1e-12)
    # the truth e^-1 is bracketed by (1-1/n)^n and (1+1/n)^-n
    lo, hi = factor, (1 + 1 / 25) ** -25
    assert lo < np.exp(-1) < hi
    assert abs(end[0, 0] - np.exp(-1)) <= hi - lo


def test_euler_first_order_convergence():
    z0 = np.array([[1.0]])
    exact = np.exp(-1.0)
    errs = [abs(fl.euler_sample(lambda zz, t: -zz, z0, n)[0, 0] - exact)
            for n in (25, 50, 100, 200)]
    for a, b in zip(errs, errs[1:]):
        assert 1.7 <= a / b <= 2.3


def test_euler_time_grid_is_left_endpoint():
    seen = []

    def drift(zz, t):
        seen.append(t)
        return np.zeros_like(zz)

    fl.euler_sample(drift, np.zeros((1, 1)), 4)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_euler_freeze_mask_pins_frames():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 3))
    mask = np.array([True, False, True, False, False])
    end = fl.euler_sample(lambda zz, t: np.ones_like(zz), z, 8, freeze_mask=mask)
    assert np.array_equal(end[mask], z[mask])
    assert np.allclose(end[~mask], z[~mask] + 1.0, atol=1e-12)


def test_euler_rejects_bad_inputs():
    with pytest.raises(DomainError):
        fl.euler_sample(lambda zz, t: zz, np.zeros((2, 2)), 0)
    with pytest.raises(LengthError):
        fl.euler_sample(lambda zz, t: np.zeros((3, 3)), np.zeros((2, 2)), 2)


def test_euler_nonfinite_drift_diagnostics():
    def drift(zz, t):
        return np.full_like(zz, np.nan) if t > 0.4 else np.ones_like(zz)

    with pytest.raises(NumericsError, match="t=0.5"):
        fl.euler_sample(drift, np.zeros((2, 2)), 10)


def _messy(zz, t):
    return np.sin(3 * zz) + t * zz - 0.7


def test_integrate_endpoint_is_start_plus_delta():
    z = np.random.default_rng(3).standard_normal((6, 4))
    end, delta = fl.integrate(_messy, z, 0.0, 1.0, 13)
    assert np.array_equal(end, z + delta)


def test_integrate_window_chain_telescopes_bitexact():
    z0 = np.random.default_rng(4).standard_normal((6, 4))
    k_windows, substeps = 8, 8
    cur = z0
    deltas = []
    for k in range(k_windows):
        cur, d = fl.integrate(_messy, cur, k / k_windows, (k + 1) / k_windows,
                              substeps)
        deltas.append(d)
    fold = z0
    for d in deltas:
        fold = fold + d
    assert np.array_equal(fold, cur)


def test_integrate_single_window_equals_euler_sample():
    z0 = np.random.default_rng(5).standard_normal((4, 3))
    full = fl.euler_sample(_messy, z0, 25)
    one, _ = fl.integrate(_messy, z0, 0.0, 1.0, 25)
    assert np.array_equal(full, one)


# ---------------------------------------------------------------------------
# 1-D Gaussian oracle task
# ---------------------------------------------------------------------------


def test_oracle_drift_closed_form_point():
    # at t=0.5 the z coefficient vanishes and the drift is the mean shift
    assert gauss1d.oracle_drift(1.0, 0.5) == 2.0


def test_oracle_drift_matches_monte_carlo_conditional_mean():
    # independent check of the closed form: bin (Z1-Z0) around Z_t ~= z
    rng = np.random.default_rng(11)
    z0 = rng.standard_normal(2_000_000)
    z1 = rng.standard_normal(2_000_000) + 2.0
    for z, t in ((1.0, 0.5), (0.2, 0.3), (1.8, 0.7)):
        zt = (1 - t) * z0 + t * z1
        near = np.abs(zt - z) < 0.02
        mc = (z1[near] - z0[near]).mean()
        assert mc == pytest.approx(gauss1d.oracle_drift(z, t), abs=0.03)


@pytest.fixture(scope="module")
def small_drift_net():
    # 2-layer MLP, short schedule: enough for the pointwise check
    return gauss1d.train_drift_net(seed=0, hidden=48, layers=2, steps=1500,
                                   batch=256, lr=1e-2)


def test_trained_drift_at_reference_point(small_drift_net):
    v = small_drift_net(np.array([[1.0]]), 0.5)[0, 0]
    assert abs(v - 2.0) <= 0.1


def test_trained_drift_transport_shifts_mass(small_drift_net):
    z0s = np.random.default_rng(0).standard_normal((2000, 1))
    out = fl.euler_sample(small_drift_net, z0s, 25)
    assert abs(out.mean() - 2.0) < 0.15


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _tiny_train_config(steps=3, **kw) -> fl.TrainConfig:
    cfg = bb.BackboneConfig(layers=1, heads=2, model_dim=16, latent_channels=4,
                            vocab_size=5, alignment_embed_dim=4,
                            indicator_embed_dim=4, time_embed_dim=8)
    defaults = dict(steps=steps, lr=1e-3, warmup_steps=2, batch_size=2,
                    seed=0, loss_every=1, checkpoint_every=2)
    defaults.update(kw)
    return fl.TrainConfig(backbone=cfg, **defaults)


def _tiny_dataset(n_utts=3, channels=4, seed=0) -> list:
    spec = make_task_spec(seed=seed, vocab_size=5, latent_channels=channels,
                          style_count=2)
    return sample_dataset(spec, n_utts, len_range=(2, 4), seed=seed)


def test_train_loop_deterministic():
    cfg = _tiny_train_config()
    data = _tiny_dataset()
    r1 = fl.train_loop(cfg, data)
    r2 = fl.train_loop(cfg, data)
    assert r1.losses == r2.losses
    assert not r1.diverged


def test_train_loop_lr_zero_keeps_params():
    cfg = _tiny_train_config(steps=2, lr=0.0)
    data = _tiny_dataset()
    init = bb.init_backbone(cfg.backbone, seed=cfg.seed)
    res = fl.train_loop(cfg, data)
    for name, p in init.items():
        assert np.array_equal(res.params[name].data, p.data)


def test_adam_validation_and_warmup():
    from sparseflow.optim import Adam

    with pytest.raises(DomainError):
        Adam([nm.parameter(np.ones(2))], lr=-1e-3)
    with pytest.raises(DomainError):
        Adam([nm.tensor(np.ones(2))], lr=1e-3)
    opt = Adam([nm.parameter(np.ones(2))], lr=1.0, warmup_steps=4)
    assert opt.effective_lr() == pytest.approx(0.25)
    opt.t = 3
    assert opt.effective_lr() == pytest.approx(1.0)


def test_adam_minimizes_quadratic():
    from sparseflow.optim import Adam

    p = nm.parameter(np.array([4.0, -3.0]))
    opt = Adam([p], lr=0.2)
    for _ in range(200):
        with nm.GradTape() as tape:
            loss = nm.sum_all(nm.mul(p, p))
            tape.backward(loss)
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_train_loop_loss_decreases_eventually():
    cfg = _tiny_train_config(steps=60, lr=3e-3, loss_every=10)
    data = _tiny_dataset()
    res = fl.train_loop(cfg, data)
    first, last = res.losses[0][1], res.losses[-1][1]
    assert last < first


def test_train_loop_empty_dataset_rejected():
    with pytest.raises(LengthError):
        fl.train_loop(_tiny_train_config(), [])


def test_train_loop_mode_validation():
    with pytest.raises(DomainError):
        _tiny_train_config(mode="hybrid")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_loop_divergence_restores_last_good():
    cfg = _tiny_train_config(steps=5, checkpoint_every=100)
    data = _tiny_dataset()
    # poison one utterance with astronomically large latents: loss overflows
    bad = data[0]
    huge = LatentSequence(frames=bad.latents.frames, channels=bad.latents.channels,
                          values=np.full_like(bad.latents.values, 1e200))
    data[0] = Utterance(tokens=bad.tokens, durations=bad.durations,
                        style_id=bad.style_id, latents=huge)
    init = bb.init_backbone(cfg.backbone, seed=cfg.seed)
    res = fl.train_loop(cfg, data)
    assert res.diverged
    for name, p in init.items():
        assert np.array_equal(res.params[name].data, p.data)


def test_train_loop_writes_checkpoints(tmp_path):
    cfg = _tiny_train_config(steps=4, checkpoint_every=2)
    data = _tiny_dataset()
    fl.train_loop(cfg, data, checkpoint_dir=tmp_path / "ck")
    loaded, meta = nm.load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 4
    assert set(loaded) == set(bb.init_backbone(cfg.backbone, seed=0))


def test_labels_for_mode_shapes():
    data = _tiny_dataset(1)
    utt = data[0]
    n = int(sum(utt.durations))
    rng = np.random.default_rng(0)
    sparse = fl.labels_for_mode("sparse", utt, rng)
    forced = fl.labels_for_mode("forced", utt, rng)
    none = fl.labels_for_mode("none", utt, rng)
    assert sparse.shape == forced.shape == none.shape == (n,)
    assert (none == al.MASK).all()
    assert (sparse != al.MASK).sum() == len(utt.tokens)
    assert (forced != al.MASK).all()
    # inference placement: no rng -> anchors at region centers, deterministic
    c1 = fl.labels_for_mode("sparse", utt, None)
    c2 = fl.labels_for_mode("sparse", utt, None)
    assert np.array_equal(c1, c2)


def test_make_train_batch_contract():
    data = _tiny_dataset(1)
    cfg = _tiny_train_config()
    rng = np.random.default_rng(1)
    batch = fl.make_train_batch(data[0], cfg, rng)
    n = data[0].latents.values.shape[0]
    assert batch.z1.shape == batch.z0.shape == (n, 4)
    assert 1 <= batch.prompt_mask.sum() < n
    assert batch.cond is not None and batch.cond.t == batch.t


def test_stretch_utterance_rerenders_exactly():
    spec = make_task_spec(seed=0, vocab_size=5, latent_channels=4, style_count=2)
    data = sample_dataset(spec, 4, len_range=(3, 5), seed=3)
    for i, utt in enumerate(data):
        rng = np.random.default_rng(i)
        out = fl.stretch_utterance(spec, utt, (0.5, 2.0), rng)
        assert out.tokens == utt.tokens
        assert len(out.durations) == len(utt.durations)
        assert all(d >= 1 for d in out.durations)
        ref = render(spec, out.tokens, out.durations, out.style_id)
        assert np.array_equal(out.latents.values, ref.values)
        # same rng state -> same factors -> same stretched utterance
        again = fl.stretch_utterance(spec, utt, (0.5, 2.0), np.random.default_rng(i))
        assert again.durations == out.durations


def test_stretch_prob_zero_consumes_no_rng():
    data = _tiny_dataset(1)
    cfg = _tiny_train_config()
    spec = make_task_spec(seed=0, vocab_size=5, latent_channels=4, style_count=2)
    cfg_aug0 = _tiny_train_config(stretch_prob=0.0, task=spec)
    b1 = fl.make_train_batch(data[0], cfg, np.random.default_rng(7))
    b2 = fl.make_train_batch(data[0], cfg_aug0, np.random.default_rng(7))
    assert np.array_equal(b1.z0, b2.z0)
    assert np.array_equal(b1.prompt_mask, b2.prompt_mask)
    assert b1.t == b2.t


def test_stretch_config_validation():
    spec = make_task_spec(seed=0, vocab_size=5, latent_channels=4, style_count=2)
    with pytest.raises(DomainError):
        _tiny_train_config(stretch_prob=0.5)  # no task to re-render with
    with pytest.raises(DomainError):
        _tiny_train_config(stretch_prob=1.5, task=spec)
    with pytest.raises(DomainError):
        _tiny_train_config(stretch_prob=0.5, task=spec, stretch_range=(2.0, 0.5))


def test_train_loop_with_stretch_augmentation_deterministic():
    spec = make_task_spec(seed=0, vocab_size=5, latent_channels=4, style_count=2)
    data = sample_dataset(spec, 3, len_range=(2, 4), seed=0)
    cfg = _tiny_train_config(steps=4, stretch_prob=0.7, task=spec)
    r1 = fl.train_loop(cfg, data)
    r2 = fl.train_loop(cfg, data)
    assert r1.losses == r2.losses
    assert not r1.diverged
    assert all(np.isfinite(v) for _, v in r1.losses)


def test_write_loss_csv_roundtrip(tmp_path):
    path = tmp_path / "trace.csv"
    fl.write_loss_csv(path, [(1, 0.5), (10, 0.25)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert lines[1].startswith("1,") and float(lines[1].split(",")[1]) == 0.5
    assert len(lines) == 3
