"""Finite-difference gradient suite: every implemented loss is checked on ten
random minibatches at < 1e-4 max relative error. Seeds are fixed so no hinge
or relu kink sits within the finite-difference step.
"""

import numpy as np
import pytest

from mcatlab.models import (
    ActionTranslator,
    ContextEncoder,
    GaussianDynamics,
    RewardPredictor,
    SegmentBatch,
    TransitionBatch,
    contrastive_loss,
    forward_loss,
    sample_contrastive_pairs,
    translation_loss,
    translation_loss_with_reward,
    window_width,
)
from mcatlab.numkit import gradient_check, seeded_rng
from mcatlab.rl import ActorCritic, actor_loss, sil_loss, td3_critic_loss

S, A, Z, K, M = 3, 2, 2, 2, 2
W = window_width(S, A, K)
HIDDEN = (6,)
N_BATCHES = 10
TOL = 1e-4


def models_for(case: int):
    enc = ContextEncoder(W, Z, hidden=HIDDEN, rng=seeded_rng(case, 1))
    dyn = GaussianDynamics(S, A, Z, hidden=HIDDEN, rng=seeded_rng(case, 2))
    trans = ActionTranslator(S, A, Z, hidden=HIDDEN, rng=seeded_rng(case, 3))
    rmodel = RewardPredictor(S, A, Z, hidden=HIDDEN, rng=seeded_rng(case, 4))
    ac = ActorCritic(S, A, Z, actor_hidden=HIDDEN, critic_hidden=HIDDEN, rng=seeded_rng(case, 5))
    return enc, dyn, trans, rmodel, ac


def segment_for(case: int, batch=4):
    rng = seeded_rng(case, 6)
    return SegmentBatch(
        windows=rng.normal(size=(batch, W)),
        states=rng.normal(size=(batch, M + 1, S)),
        actions=rng.uniform(-1, 1, size=(batch, M, A)),
        task_ids=rng.integers(0, 2, size=batch),
    )


def transitions_for(case: int, batch=4):
    rng = seeded_rng(case, 7)
    return TransitionBatch(
        states=rng.normal(size=(batch, S)),
        actions=rng.uniform(-1, 1, size=(batch, A)),
        next_states=rng.normal(size=(batch, S)),
        rewards=rng.normal(size=batch) + 3.0,  # keep |r - r_hat| off its kink
    )


CASES = list(range(N_BATCHES))


@pytest.mark.parametrize("case", CASES)
def test_forward_loss_gradients(case):
    enc, dyn, *_ = models_for(case)
    seg = segment_for(case)

    def wrt_encoder(params):
        enc.net.set_params(params)
        res = forward_loss(enc, dyn, seg)
        return res.loss, res.encoder_grads

    def wrt_dynamics(params):
        dyn.net.set_params(params)
        res = forward_loss(enc, dyn, seg)
        return res.loss, res.dynamics_grads

    r1 = gradient_check(wrt_encoder, enc.net.params(), tolerance=TOL)
    r2 = gradient_check(wrt_dynamics, dyn.net.params(), tolerance=TOL)
    assert r1.passed and r2.passed, (r1.max_rel_error, r2.max_rel_error)


@pytest.mark.parametrize("case", CASES)
def test_contrastive_loss_gradients(case):
    enc, *_ = models_for(case)
    seg = segment_for(case, batch=6)
    pairs = sample_contrastive_pairs(seeded_rng(case, 8), 6)
    # nudge the margin away from every pair distance so the hinge boundary is
    # never within the finite-difference step
    z0 = enc.encode(seg.windows)
    dists = [float(np.linalg.norm(z0[i] - z0[j])) for i, j in pairs]
    margin = 1.0
    while any(abs(d - margin) < 5e-3 for d in dists):
        margin += 0.01

    def loss_fn(params):
        enc.net.set_params(params)
        z = enc.encode(seg.windows)
        loss, dz = contrastive_loss(z, seg.task_ids, margin=margin, pairs=pairs)
        return loss, enc.backward(dz)

    report = gradient_check(loss_fn, enc.net.params(), tolerance=TOL)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("case", CASES)
def test_translation_loss_gradients(case):
    _, dyn, trans, _, _ = models_for(case)
    batch = transitions_for(case)
    z_src = seeded_rng(case, 9).normal(size=Z)
    z_tgt = seeded_rng(case, 10).normal(size=Z)

    def loss_fn(params):
        trans.net.set_params(params)
        res = translation_loss(dyn, trans, batch, z_src, z_tgt)
        return res.loss, res.translator_grads

    report = gradient_check(loss_fn, trans.net.params(), tolerance=TOL)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("case", CASES)
def test_reward_augmented_translation_gradients(case):
    _, dyn, trans, rmodel, _ = models_for(case)
    batch = transitions_for(case)
    z_src = seeded_rng(case, 11).normal(size=Z)
    z_tgt = seeded_rng(case, 12).normal(size=Z)

    def loss_fn(params):
        trans.net.set_params(params)
        res = translation_loss_with_reward(dyn, rmodel, trans, batch, z_src, z_tgt, lam=10.0)
        return res.loss, res.translator_grads

    report = gradient_check(loss_fn, trans.net.params(), tolerance=TOL)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("case", CASES)
def test_td3_critic_loss_gradients(case):
    *_, ac = models_for(case)
    rng = seeded_rng(case, 13)
    batch = {
        "states": rng.normal(size=(4, S)),
        "actions": rng.uniform(-1, 1, size=(4, A)),
    }
    z = rng.normal(size=(4, Z))
    y = rng.normal(size=4)

    def wrt_q1(params):
        ac.q1.set_params(params)
        loss, g1, _ = td3_critic_loss(ac, batch, z, y)
        return loss, g1

    def wrt_q2(params):
        ac.q2.set_params(params)
        loss, _, g2 = td3_critic_loss(ac, batch, z, y)
        return loss, g2

    r1 = gradient_check(wrt_q1, ac.q1.params(), tolerance=TOL)
    r2 = gradient_check(wrt_q2, ac.q2.params(), tolerance=TOL)
    assert r1.passed and r2.passed, (r1.max_rel_error, r2.max_rel_error)


@pytest.mark.parametrize("case", CASES)
def test_sil_loss_gradients(case):
    *_, ac = models_for(case)
    rng = seeded_rng(case, 14)
    batch = {
        "states": rng.normal(size=(4, S)),
        "actions": rng.uniform(-1, 1, size=(4, A)),
        # returns far above untrained critic outputs: hinge active, kink distant
        "returns": rng.normal(size=4) + 3.0,
    }
    z = rng.normal(size=(4, Z))

    def loss_fn(params):
        ac.q1.set_params(params)
        loss, g1, _ = sil_loss(ac, batch, z)
        return loss, g1

    report = gradient_check(loss_fn, ac.q1.params(), tolerance=TOL)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("case", CASES)
def test_actor_objective_gradients(case):
    *_, ac = models_for(case)
    rng = seeded_rng(case, 15)
    states = rng.normal(size=(4, S))
    z = rng.normal(size=(4, Z))

    def loss_fn(params):
        ac.actor.set_params(params)
        return actor_loss(ac, states, z)

    report = gradient_check(loss_fn, ac.actor.params(), tolerance=TOL)
    assert report.passed, report.max_rel_error
