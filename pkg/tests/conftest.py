import numpy as np
import pytest

from abductive_dpo.lm import LmConfig, LmPolicy, clone_frozen

MICRO = LmConfig(vocab_size=6, context_len=12, embed_dim=8, num_layers=1, num_heads=2, seed=0, init_std=0.3)


def perturbed(policy: LmPolicy, scale: float, seed: int) -> LmPolicy:
    rng = np.random.default_rng(seed)
    state = {k: v + rng.normal(0, scale, size=v.shape) for k, v in policy.state_dict().items()}
    return LmPolicy(policy.config, state)


@pytest.fixture
def micro_policy():
    return LmPolicy(MICRO)


@pytest.fixture
def micro_pair():
    """(trainable policy, frozen reference) with different weights."""
    ref = LmPolicy(MICRO)
    return perturbed(ref, 0.2, 1), clone_frozen(ref)
