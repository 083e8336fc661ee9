import numpy as np
import pytest

from mcatlab.envs import PointMassEnv, PointMassParams, random_action_policy
from mcatlab.mcat import FixedDatasetSettings, collect_dataset, train_transfer_models
from mcatlab.numkit import seeded_rng

IDENTITY_PARAMS = PointMassParams(dt=0.08)
IDENTITY_K = 6


def train_identity_setup(seed: int, cf_steps: int, h_steps: int, batch: int):
    """Context/forward/translator trained on two datasets from one task, so a
    converged translator is the identity on actions."""
    env = PointMassEnv(IDENTITY_PARAMS, horizon=60)
    settings = FixedDatasetSettings(
        z_dim=4,
        history_k=IDENTITY_K,
        future_m=5,
        context_hidden=(32, 16),
        forward_hidden=(96, 96),
        translator_hidden=(48, 48),
        cf_steps=cf_steps,
        cf_batch=batch,
        cf_lr=1e-3,
        cf_lr_final=1e-4,
        h_steps=h_steps,
        h_batch=batch,
        h_lr=1e-3,
        h_lr_final=1e-4,
        feature_samples=256,
        contrastive_enabled=False,
    )
    rng = seeded_rng(seed, 50)
    d0 = collect_dataset(env, random_action_policy(rng), 70, rng, IDENTITY_K)
    d1 = collect_dataset(env, random_action_policy(rng), 70, rng, IDENTITY_K)
    trained = train_transfer_models([d0, d1], settings, seed=seed)
    return trained, d0


@pytest.fixture(scope="session")
def identity_transfer_setup():
    """Well-converged identity setup (seed 0); shared across test modules."""
    return train_identity_setup(0, cf_steps=4000, h_steps=4000, batch=224)


def held_out_states_actions(seed: int, n: int = 300, action_scale: float = 0.9):
    rng = seeded_rng(seed)
    states = np.column_stack([rng.uniform(-1, 1, size=(n, 2)), rng.uniform(-0.2, 0.2, size=(n, 2))])
    actions = rng.uniform(-action_scale, action_scale, size=(n, 2))
    return states, actions
