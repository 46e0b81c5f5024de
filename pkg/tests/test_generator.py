"""Tests for the noise schedule, denoiser and DDIM sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mindloop import tensor as T
from mindloop.diffusion import (
    Denoiser,
    DiffusionGenerator,
    cross_attention,
    forward_diffuse,
    make_schedule,
    reverse_sample,
    sample_taus,
    train_denoiser,
)
from mindloop.errors import ContractError
from mindloop.tensor import Tensor


# schedule ----------------------------------------------------------------


def test_schedule_invariants():
    sch = make_schedule()
    assert sch.n_steps == 50
    assert sch.alpha_bars[0] == 1.0
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert np.all((sch.betas > 0) & (sch.betas < 1))
    assert np.allclose(sch.alphas, 1.0 - sch.betas)
    # cumulative products against a direct running-product oracle
    prod = 1.0
    for t in range(1, sch.n_steps + 1):
        prod *= 1.0 - sch.betas[t - 1]
        assert abs(sch.alpha_bars[t] - prod) < 1e-12


def test_default_schedule_terminal_alpha_bar_frozen_value():
    # product of (1 - beta) over the default 50-step linear ramp
    sch = make_schedule()
    assert abs(sch.alpha_bars[-1] - 0.602951597329715) < 1e-12


def test_schedule_rejects_bad_parameters():
    with pytest.raises(ContractError):
        make_schedule(n_steps=0)
    with pytest.raises(ContractError):
        make_schedule(beta_start=0.0)
    with pytest.raises(ContractError):
        make_schedule(beta_start=0.5, beta_end=0.2)
    with pytest.raises(ContractError):
        make_schedule(beta_end=1.0)


@given(st.integers(min_value=1, max_value=200))
@settings(max_examples=30, deadline=None)
def test_alpha_bars_stay_in_unit_interval(n):
    sch = make_schedule(n_steps=n)
    assert len(sch.alpha_bars) == n + 1
    assert np.all(sch.alpha_bars > 0)
    assert np.all(sch.alpha_bars <= 1)


# forward process ---------------------------------------------------------


def test_forward_diffuse_recovers_injected_noise():
    sch = make_schedule()
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((4, 8, 8))
    eps = rng.standard_normal((4, 8, 8))
    for t in (1, 13, 50):
        z_t = forward_diffuse(z0, t, eps, sch).data
        ab = sch.alpha_bars[t]
        recovered = (z_t - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)
        assert np.abs(recovered - eps).max() < 1e-6


def test_forward_diffuse_at_zero_returns_signal():
    sch = make_schedule()
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((4, 8, 8))
    out = forward_diffuse(z0, 0, rng.standard_normal((4, 8, 8)), sch).data
    assert np.allclose(out, z0, atol=1e-12)


def test_forward_diffuse_contracts():
    sch = make_schedule()
    z = np.zeros((4, 8, 8))
    with pytest.raises(ContractError):
        forward_diffuse(z, 51, z, sch)
    with pytest.raises(ContractError):
        forward_diffuse(z, -1, z, sch)
    with pytest.raises(ContractError):
        forward_diffuse(z, 5, np.zeros((4, 8, 7)), sch)


def test_forward_diffusion_preserves_unit_variance():
    # standard-normal signal in, ~unit variance out at any timestep
    sch = make_schedule()
    rng = np.random.default_rng(2)
    shape = (4, 8, 8)
    for t in (1, 25, 50):
        samples = np.stack([
            forward_diffuse(rng.standard_normal(shape), t,
                            rng.standard_normal(shape), sch).data
            for _ in range(40)
        ])
        # 40 draws x 256 entries = 10240 samples of the marginal
        assert abs(samples.var() - 1.0) < 0.05


# attention ---------------------------------------------------------------


def test_attention_matches_hand_computed_values():
    phi = Tensor(np.array([[1.0, 0.0]]))
    ctx = Tensor(np.eye(2))
    eye = Tensor(np.eye(2))
    wv = Tensor(np.diag([2.0, 4.0]))
    out = cross_attention(phi, ctx, eye, eye, wv)
    assert out.shape == (1, 2)
    assert abs(out.data[0, 0] - 1.3395230986533138) < 1e-12
    assert abs(out.data[0, 1] - 1.3209538026933725) < 1e-12


def test_attention_rows_are_convex_mixtures_of_values():
    rng = np.random.default_rng(3)
    phi = Tensor(rng.standard_normal((5, 6)))
    ctx = Tensor(rng.standard_normal((7, 4)))
    wq = Tensor(rng.standard_normal((6, 8)))
    wk = Tensor(rng.standard_normal((4, 8)))
    wv = Tensor(rng.standard_normal((4, 3)))
    out = cross_attention(phi, ctx, wq, wk, wv).data
    v = ctx.data @ wv.data
    lo, hi = v.min(axis=0), v.max(axis=0)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_attention_shape_contracts():
    with pytest.raises(ContractError):
        cross_attention(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))),
                        Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.eye(2)))
    with pytest.raises(ContractError):
        cross_attention(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2))),
                        Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                        Tensor(np.eye(2)))


# sampling ----------------------------------------------------------------


def test_tau_sequences_are_clean():
    assert sample_taus(50, 10) == [50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0]
    assert sample_taus(30, 10) == [30, 27, 24, 21, 18, 15, 12, 9, 6, 3, 0]
    assert sample_taus(1, 1) == [1, 0]


@given(st.integers(min_value=1, max_value=120), st.data())
@settings(max_examples=50, deadline=None)
def test_tau_sequence_properties(t_start, data):
    n = data.draw(st.integers(min_value=1, max_value=t_start))
    taus = sample_taus(t_start, n)
    assert taus[0] == t_start
    assert taus[-1] == 0
    assert all(a > b for a, b in zip(taus, taus[1:]))
    assert len(taus) <= n + 1


def test_sampling_is_deterministic(toy_world):
    w = toy_world
    rng = np.random.default_rng(4)
    z_init = rng.standard_normal((4, 8, 8))
    cond = w.conditions[0]
    a = reverse_sample(w.denoiser, w.schedule, cond, z_init)
    b = reverse_sample(w.denoiser, w.schedule, cond, z_init)
    assert np.array_equal(a.data, b.data)


def test_reverse_sample_matches_manual_ddim_recursion(toy_world):
    w = toy_world
    rng = np.random.default_rng(5)
    z_init = rng.standard_normal((4, 8, 8))
    out = reverse_sample(w.denoiser, w.schedule, w.conditions[1], z_init)
    n = w.schedule.n_steps
    z = Tensor(z_init)
    taus = sample_taus(n, 10)
    for t, s in zip(taus, taus[1:]):
        eps = w.denoiser.predict(z, t, w.conditions[1])
        ab_t, ab_s = w.schedule.alpha_bars[t], w.schedule.alpha_bars[s]
        z0 = T.scale(T.sub(z, T.scale(eps, np.sqrt(1 - ab_t))), 1 / np.sqrt(ab_t))
        z = T.add(T.scale(z0, np.sqrt(ab_s)), T.scale(eps, np.sqrt(1 - ab_s)))
    assert np.allclose(out.data, z.data, atol=1e-12)


def test_predict_contract_errors(toy_world):
    den = toy_world.denoiser
    c = toy_world.conditions[0]
    with pytest.raises(ContractError):
        den.predict(np.zeros((4, 8, 8)), 51, c)
    with pytest.raises(ContractError):
        den.predict(np.zeros((3, 8, 8)), 5, c)
    with pytest.raises(ContractError):
        den.predict(np.zeros((4, 8, 8)), 5, np.zeros((8, 16)))


# training ----------------------------------------------------------------


def test_training_reduces_noise_prediction_error(toy_world):
    losses = toy_world.denoiser_trace.epoch_losses
    assert np.mean(losses[-3:]) < 0.5 * losses[0]


def test_training_is_seed_reproducible(toy_world):
    w = toy_world
    a = Denoiser(seed=9)
    b = Denoiser(seed=9)
    train_denoiser(a, w.schedule, w.latents[:12], w.conditions[:12], epochs=2, seed=4)
    train_denoiser(b, w.schedule, w.latents[:12], w.conditions[:12], epochs=2, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_training_input_contracts(toy_world):
    w = toy_world
    den = Denoiser(seed=0)
    with pytest.raises(ContractError):
        train_denoiser(den, w.schedule, [], [], epochs=1)
    with pytest.raises(ContractError):
        train_denoiser(den, w.schedule, w.latents[:2], w.conditions[:3], epochs=1)
    with pytest.raises(ContractError):
        train_denoiser(den, make_schedule(n_steps=10), w.latents[:2],
                       w.conditions[:2], epochs=1)


def test_denoiser_checkpoint_round_trip(tmp_path, toy_world):
    w = toy_world
    path = tmp_path / "denoiser.ckpt"
    w.denoiser.save(path)
    back = Denoiser.load(path)
    rng = np.random.default_rng(6)
    z = rng.standard_normal((4, 8, 8))
    assert np.array_equal(back.predict(z, 17, w.conditions[0]).data,
                          w.denoiser.predict(z, 17, w.conditions[0]).data)


# conditional generation quality ------------------------------------------


def _class_centroids(w):
    """Mean final embedding of the train images, one centroid per class."""
    sums, counts = {}, {}
    for item in w.dataset.train:
        emb = w.visual_encoder.embed(item.stimulus.pixels).data
        cid = item.stimulus.class_id
        sums[cid] = sums.get(cid, 0.0) + emb
        counts[cid] = counts.get(cid, 0) + 1
    return {cid: sums[cid] / counts[cid] for cid in sums}


def _nearest_class(centroids, emb):
    return min(centroids, key=lambda cid: np.linalg.norm(centroids[cid] - emb))


def test_draft_class_matches_stimulus_class(toy_world):
    # drafts generated from true caption and renoised true latent land in
    # the right class for most items, by nearest class centroid in the
    # final embedding space
    w = toy_world
    gen = DiffusionGenerator(w.denoiser, w.schedule, w.autoencoder)
    centroids = _class_centroids(w)
    rng = np.random.default_rng(99)
    hits = 0
    for item in w.dataset.test:
        cond = w.text_encoder.encode(item.stimulus.caption_tokens)
        z0 = w.autoencoder.to_latent(item.stimulus.pixels).data
        z_t = forward_diffuse(z0, w.schedule.n_steps,
                              rng.standard_normal(z0.shape), w.schedule)
        img = gen.generate(cond, z_t)
        emb = w.visual_encoder.embed(img).data
        hits += _nearest_class(centroids, emb) == item.stimulus.class_id
    assert hits / len(w.dataset.test) >= 0.7
