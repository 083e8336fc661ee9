import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import held_out_states_actions, train_identity_setup
from mcatlab.errors import StateError
from mcatlab.models import (
    LOGVAR_HIGH,
    LOGVAR_LOW,
    ActionTranslator,
    ContextEncoder,
    GaussianDynamics,
    RewardPredictor,
    SegmentBatch,
    TransitionBatch,
    contrastive_loss,
    forward_loss,
    gaussian_nll,
    history_window,
    sample_contrastive_pairs,
    task_feature,
    translation_loss,
    translation_loss_with_reward,
    window_width,
)
from mcatlab.numkit import adam_init, adam_step, gradient_check, seeded_rng

S, A, Z, K, M = 4, 2, 3, 3, 2
W = window_width(S, A, K)


def digest(net) -> bytes:
    h = hashlib.sha256()
    for p in net.params():
        h.update(p.tobytes())
    return h.digest()


def make_models(seed=0, hidden=(10,)):
    enc = ContextEncoder(W, Z, hidden=hidden, rng=seeded_rng(seed, 1))
    dyn = GaussianDynamics(S, A, Z, hidden=hidden, rng=seeded_rng(seed, 2))
    trans = ActionTranslator(S, A, Z, hidden=hidden, rng=seeded_rng(seed, 3))
    rmodel = RewardPredictor(S, A, Z, hidden=hidden, rng=seeded_rng(seed, 4))
    return enc, dyn, trans, rmodel


def make_segment(seed=0, batch=5):
    rng = seeded_rng(seed, 5)
    return SegmentBatch(
        windows=rng.normal(size=(batch, W)),
        states=rng.normal(size=(batch, M + 1, S)),
        actions=rng.normal(size=(batch, M, A)),
        task_ids=rng.integers(0, 2, size=batch),
    )


def make_transitions(seed=0, batch=6):
    rng = seeded_rng(seed, 6)
    return TransitionBatch(
        states=rng.normal(size=(batch, S)),
        actions=rng.uniform(-1, 1, size=(batch, A)),
        next_states=rng.normal(size=(batch, S)),
        rewards=rng.normal(size=batch),
    )


# --- history windows ---


def test_history_window_layout_and_padding():
    obs = np.arange(5 * S, dtype=float).reshape(5, S)
    actions = np.arange(4 * A, dtype=float).reshape(4, A)
    w0 = history_window(obs, actions, 0, K)
    assert np.array_equal(w0, np.zeros(W))
    w1 = history_window(obs, actions, 1, K)
    # one pair present, right-aligned: leading 2 slots zero
    assert np.array_equal(w1[: 2 * (S + A)], np.zeros(2 * (S + A)))
    assert np.array_equal(w1[2 * (S + A) : 2 * (S + A) + S], obs[1] - obs[0])
    assert np.array_equal(w1[2 * (S + A) + S :], actions[0])
    w3 = history_window(obs, actions, 3, K)
    assert np.array_equal(w3[:S], obs[1] - obs[0])
    assert np.array_equal(w3[-A:], actions[2])


# --- context encoder ---


def test_encode_zero_window_finite():
    enc, *_ = make_models()
    z = enc.encode(np.zeros((1, W)))
    assert z.shape == (1, Z)
    assert np.isfinite(z).all()


def test_encode_identical_windows_identical_z():
    enc, *_ = make_models()
    win = seeded_rng(1).normal(size=(1, W))
    z1 = enc.encode(np.repeat(win, 3, axis=0))
    assert np.array_equal(z1[0], z1[1]) and np.array_equal(z1[0], z1[2])


def test_encoder_norm_gradient_finite_differences():
    enc, *_ = make_models()
    windows = seeded_rng(2).normal(size=(4, W))

    def loss_fn(params):
        enc.net.set_params(params)
        z = enc.encode(windows)
        grads = enc.backward(2.0 * z)
        return float((z * z).sum()), grads

    report = gradient_check(loss_fn, enc.net.params(), tolerance=1e-4)
    assert report.passed, report


# --- gaussian NLL and forward loss ---


def test_gaussian_nll_zero_residual_unit_variance():
    d = 5
    mu = seeded_rng(3).normal(size=(2, d))
    nll, dmu, dlv = gaussian_nll(mu, np.zeros((2, d)), mu.copy())
    assert np.allclose(nll, 0.5 * d * np.log(2 * np.pi))
    assert np.allclose(dmu, 0.0)


def test_gaussian_nll_residual_doubling():
    delta = seeded_rng(4).normal(size=(1, 3))
    target = np.zeros((1, 3))
    nll1, _, _ = gaussian_nll(delta, np.zeros((1, 3)), target)
    nll2, _, _ = gaussian_nll(2.0 * delta, np.zeros((1, 3)), target)
    assert np.isclose(nll2[0] - nll1[0], 1.5 * float(delta @ delta.T))


def test_logvar_clamp_bounds():
    _, dyn, *_ = make_models()
    rng = seeded_rng(5)
    _, logvar = dyn.predict(rng.normal(size=(8, S)) * 50, rng.normal(size=(8, A)) * 50, rng.normal(size=(8, Z)) * 50)
    assert np.all(logvar >= LOGVAR_LOW) and np.all(logvar <= LOGVAR_HIGH)


@given(st.integers(min_value=0, max_value=10**6))
@settings(max_examples=30, deadline=None)
def test_logvar_clamp_property(seed):
    _, dyn, *_ = make_models(seed=seed % 17)
    rng = seeded_rng(seed)
    scale = rng.uniform(0.1, 100.0)
    _, logvar = dyn.predict(
        rng.normal(size=(3, S)) * scale, rng.normal(size=(3, A)) * scale, rng.normal(size=(3, Z)) * scale
    )
    assert np.all(logvar >= LOGVAR_LOW) and np.all(logvar <= LOGVAR_HIGH)


def test_forward_loss_gradients_finite_differences():
    enc, dyn, *_ = make_models()
    seg = make_segment()

    def loss_enc(params):
        enc.net.set_params(params)
        res = forward_loss(enc, dyn, seg)
        return res.loss, res.encoder_grads

    def loss_dyn(params):
        dyn.net.set_params(params)
        res = forward_loss(enc, dyn, seg)
        return res.loss, res.dynamics_grads

    assert gradient_check(loss_enc, enc.net.params(), tolerance=1e-4).passed
    assert gradient_check(loss_dyn, dyn.net.params(), tolerance=1e-4).passed


def test_forward_loss_never_touches_translator():
    enc, dyn, trans, _ = make_models()
    before = digest(trans.net)
    res = forward_loss(enc, dyn, make_segment())
    adam_step(enc.net.params(), res.encoder_grads, adam_init(enc.net.params(), 1e-3))
    adam_step(dyn.net.params(), res.dynamics_grads, adam_init(dyn.net.params(), 1e-3))
    assert digest(trans.net) == before


# --- contrastive loss ---


def test_contrastive_identical_same_task_zero():
    z = np.ones((2, Z))
    loss, dz = contrastive_loss(z, np.array([0, 0]), margin=1.0, pairs=[(0, 1)])
    assert loss == 0.0
    assert np.allclose(dz, 0.0)


def test_contrastive_cross_task_beyond_margin_zero():
    z = np.array([[0.0] * Z, [5.0] * Z])
    loss, dz = contrastive_loss(z, np.array([0, 1]), margin=1.0, pairs=[(0, 1)])
    assert loss == 0.0
    assert np.allclose(dz, 0.0)


def test_contrastive_same_task_half_distance():
    z = np.zeros((2, Z))
    z[1, 0] = 0.5
    loss, _ = contrastive_loss(z, np.array([0, 0]), margin=1.0, pairs=[(0, 1)])
    assert np.isclose(loss, 0.25)


def test_contrastive_pairs_disjoint_without_replacement():
    pairs = sample_contrastive_pairs(seeded_rng(6), 10)
    flat = [i for pair in pairs for i in pair]
    assert len(pairs) == 5
    assert len(set(flat)) == len(flat)


def test_contrastive_gradient_through_encoder():
    enc, *_ = make_models()
    windows = seeded_rng(7).normal(size=(6, W))
    task_ids = np.array([0, 0, 1, 1, 0, 1])
    pairs = [(0, 1), (2, 3), (4, 5), (0, 2)]

    def loss_fn(params):
        enc.net.set_params(params)
        z = enc.encode(windows)
        loss, dz = contrastive_loss(z, task_ids, margin=1.0, pairs=pairs)
        return loss, enc.backward(dz)

    assert gradient_check(loss_fn, enc.net.params(), tolerance=1e-4).passed


# --- task features ---


def test_task_feature_single_window():
    enc, *_ = make_models()
    win = seeded_rng(8).normal(size=(1, W))
    feat = task_feature(enc, win, n_samples=10, rng=seeded_rng(9))
    assert np.allclose(feat, enc.encode(win)[0])


def test_task_feature_identical_windows():
    enc, *_ = make_models()
    win = np.repeat(seeded_rng(10).normal(size=(1, W)), 7, axis=0)
    feat = task_feature(enc, win, n_samples=4, rng=seeded_rng(11))
    assert np.allclose(feat, enc.encode(win[:1])[0])


def test_task_feature_deterministic_and_empty_error():
    enc, *_ = make_models()
    wins = seeded_rng(12).normal(size=(20, W))
    f1 = task_feature(enc, wins, 8, seeded_rng(13))
    f2 = task_feature(enc, wins, 8, seeded_rng(13))
    assert np.array_equal(f1, f2)
    with pytest.raises(StateError):
        task_feature(enc, np.zeros((0, W)), 4, seeded_rng(14))


# --- action translator ---


def test_translate_output_within_bounds():
    _, _, trans, _ = make_models()
    rng = seeded_rng(15)
    out = trans.translate(
        rng.normal(size=(50, S)) * 10, rng.normal(size=(50, A)) * 10, rng.normal(size=Z), rng.normal(size=Z)
    )
    assert np.all(out > -1.0) and np.all(out < 1.0)


def test_translation_loss_freezes_context_and_forward():
    enc, dyn, trans, rmodel = make_models()
    batch = make_transitions()
    z = seeded_rng(16).normal(size=Z)
    before = (digest(enc.net), digest(dyn.net), digest(rmodel.net))
    res = translation_loss(dyn, trans, batch, z, z)
    adam_step(trans.net.params(), res.translator_grads, adam_init(trans.net.params(), 1e-3))
    assert (digest(enc.net), digest(dyn.net), digest(rmodel.net)) == before


def test_translation_loss_gradient_finite_differences():
    _, dyn, trans, _ = make_models()
    batch = make_transitions()
    z_src = seeded_rng(17).normal(size=Z)
    z_tgt = seeded_rng(18).normal(size=Z)

    def loss_fn(params):
        trans.net.set_params(params)
        res = translation_loss(dyn, trans, batch, z_src, z_tgt)
        return res.loss, res.translator_grads

    assert gradient_check(loss_fn, trans.net.params(), tolerance=1e-4).passed


class _IdentityTranslator:
    """Test double returning the source action unchanged."""

    def translate(self, states, actions, z_src, z_tgt):
        return np.atleast_2d(actions)

    def backward(self, dout):
        return []


def test_translation_loss_identity_substitution_equals_single_step_nll():
    # with an identity translator, L_trans is exactly the forward model's
    # single-step NLL on the same transitions and target context
    _, dyn, _, _ = make_models()
    batch = make_transitions()
    z = seeded_rng(19).normal(size=Z)
    res = translation_loss(dyn, _IdentityTranslator(), batch, z, z)
    mu, logvar = dyn.predict(batch.states, batch.actions, np.broadcast_to(z, (batch.states.shape[0], Z)))
    nll, _, _ = gaussian_nll(mu, logvar, batch.next_states - batch.states)
    assert np.isclose(res.loss, float(nll.mean()))


# --- reward-augmented translation ---


def test_lambda_default_is_ten():
    import inspect

    sig = inspect.signature(translation_loss_with_reward)
    assert sig.parameters["lam"].default == 10.0


class _ExactRewardModel:
    """Test double predicting the batch rewards exactly."""

    state_dim, action_dim = S, A

    def __init__(self, rewards):
        self.rewards = rewards
        self._b = len(rewards)

    def predict(self, states, actions, zs):
        return self.rewards.copy()

    def backward(self, dout):
        return [], np.zeros((self._b, S + A + Z))


def test_reward_augmented_exact_model_lambda_zero():
    _, dyn, trans, _ = make_models()
    batch = make_transitions()
    z = seeded_rng(20).normal(size=Z)
    res = translation_loss_with_reward(dyn, _ExactRewardModel(batch.rewards), trans, batch, z, z, lam=0.0)
    assert res.loss == 0.0


def test_reward_augmented_lambda_scaling_identity():
    # L_trans,r(lam) = reward_term + lam * nll_term, so the ratio to L_trans
    # satisfies ratio(lam) - lam == reward_term / nll_term for every lam
    _, dyn, trans, rmodel = make_models()
    batch = make_transitions()
    z = seeded_rng(21).normal(size=Z)
    base = translation_loss(dyn, trans, batch, z, z).loss
    offsets = []
    for lam in (1.0, 10.0, 100.0):
        loss = translation_loss_with_reward(dyn, rmodel, trans, batch, z, z, lam=lam).loss
        offsets.append(loss / base - lam)
    assert np.allclose(offsets, offsets[0], atol=1e-9)


def test_reward_augmented_gradient_finite_differences():
    # seed picked so no relu/abs kink sits within the finite-difference step
    _, dyn, trans, rmodel = make_models(seed=1)
    batch = make_transitions(seed=1)
    batch = TransitionBatch(batch.states, batch.actions, batch.next_states, batch.rewards + 3.0)
    z_src = seeded_rng(22).normal(size=Z)
    z_tgt = seeded_rng(23).normal(size=Z)

    def loss_fn(params):
        trans.net.set_params(params)
        res = translation_loss_with_reward(dyn, rmodel, trans, batch, z_src, z_tgt, lam=10.0)
        return res.loss, res.translator_grads

    assert gradient_check(loss_fn, trans.net.params(), tolerance=1e-4).passed


def test_reward_augmented_freezes_dynamics_and_reward_model():
    _, dyn, trans, rmodel = make_models()
    batch = make_transitions()
    z = seeded_rng(24).normal(size=Z)
    before = (digest(dyn.net), digest(rmodel.net))
    res = translation_loss_with_reward(dyn, rmodel, trans, batch, z, z)
    adam_step(trans.net.params(), res.translator_grads, adam_init(trans.net.params(), 1e-3))
    assert (digest(dyn.net), digest(rmodel.net)) == before


# --- trained identity oracle (converged translator on identical tasks) ---


def test_converged_identity_translator_within_tolerance(identity_transfer_setup):
    trained, _ = identity_transfer_setup
    states, actions = held_out_states_actions(99)
    z = trained.features[0]
    out = trained.translator.translate(states, actions, z, z)
    assert np.abs(out - actions).max() < 0.05


class _NoisyTranslator:
    def __init__(self, base, noise):
        self.base = base
        self.noise = noise

    def translate(self, states, actions, z_src, z_tgt):
        return np.clip(self.base.translate(states, actions, z_src, z_tgt) + self.noise, -1.0, 1.0)

    def backward(self, dout):
        return self.base.backward(dout)


@pytest.mark.slow
def test_translation_loss_noise_monotonicity_three_seeds(identity_transfer_setup):
    # a converged setup: corrupting the translated action raises mean L_trans
    setups = [identity_transfer_setup] + [train_identity_setup(s, 1200, 1200, 128) for s in (1, 2)]
    for seed, (trained, data) in enumerate(setups):
        batch = data.sample_transitions(256, seeded_rng(30 + seed))
        z = trained.features[0]
        clean = translation_loss(trained.dynamics, trained.translator, batch, z, z).loss
        noise = seeded_rng(40 + seed).normal(0.0, 0.3, size=(256, A))
        noisy = translation_loss(trained.dynamics, _NoisyTranslator(trained.translator, noise), batch, z, z).loss
        assert noisy > clean, f"seed {seed}: {noisy} <= {clean}"
