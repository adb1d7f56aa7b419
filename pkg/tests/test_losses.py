import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abductive_dpo import tensor as T
from abductive_dpo.gradcheck import PROMPTS, RESP, check_losses
from abductive_dpo.lm import batch_log_prob_sums, clone_frozen
from abductive_dpo.losses import (
    LN2,
    LossSpec,
    PromptPair,
    ResponsePair,
    adpo_loss,
    adpop_loss,
    compute_psi,
    dpo_from_psi,
    dpo_loss,
    dpop_loss,
    loss_for_spec,
    multi_loss,
    preference_loss,
)

RESP_BATCH = [ResponsePair([1, 2], [3, 4], [5]), ResponsePair([0], [2], [1, 1])]
PROMPT_BATCH = [PromptPair([1, 2], [2, 1], [3]), PromptPair([4], [5, 0], [1, 2])]


def test_psi_zero_for_identical_policies(micro_policy):
    ref = clone_frozen(micro_policy)
    assert compute_psi(micro_policy, ref, [1, 2], [3]).value.item() == 0.0


def test_psi_matches_two_log_prob_calls(micro_pair):
    pol, ref = micro_pair
    psi = compute_psi(pol, ref, [1, 2], [3, 4]).value.item()
    want = batch_log_prob_sums(pol, [[1, 2]], [[3, 4]])[0] - batch_log_prob_sums(ref, [[1, 2]], [[3, 4]])[0]
    assert psi == pytest.approx(want, abs=1e-12)


def test_psi_difference_is_antisymmetric(micro_pair):
    pol, ref = micro_pair
    a = compute_psi(pol, ref, [1], [2]).value.item()
    b = compute_psi(pol, ref, [1], [3]).value.item()
    assert a - b == -(b - a)


def test_psi_requires_frozen_reference(micro_pair):
    pol, _ = micro_pair
    with pytest.raises(ValueError):
        compute_psi(pol, pol, [1], [2])


def test_equal_psi_gives_ln2():
    assert dpo_from_psi(0.7, 0.7, 0.1) == pytest.approx(math.log(2), abs=1e-15)


def test_scalar_reference_value():
    # -ln sigmoid(1) = ln(1 + e^-1)
    assert dpo_from_psi(10.0, 0.0, 0.1) == pytest.approx(0.31326168751822286, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 3), st.floats(-50, 50))
def test_only_psi_differences_matter(delta, beta, shift):
    assert dpo_from_psi(delta + shift, shift, beta) == pytest.approx(dpo_from_psi(delta, 0.0, beta), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 10))
def test_loss_strictly_decreases_in_margin(delta, step):
    assert dpo_from_psi(delta + step, 0.0, 0.5) < dpo_from_psi(delta, 0.0, 0.5)


def test_all_losses_are_ln2_at_the_reference(micro_policy):
    ref = clone_frozen(micro_policy)
    values = [
        dpo_loss(micro_policy, ref, RESP_BATCH),
        adpo_loss(micro_policy, ref, PROMPT_BATCH),
        dpop_loss(micro_policy, ref, RESP_BATCH, 0.1, 5.0),
        adpop_loss(micro_policy, ref, PROMPT_BATCH, 0.1, 5.0),
        multi_loss(micro_policy, ref, RESP_BATCH, PROMPT_BATCH, LossSpec("dpop", "multitask", 0.1, 0.3, 2.0)),
    ]
    for v in values:
        assert abs(v.item() - LN2) <= 1e-12


def test_adpo_is_dpo_form_on_prompt_psi(micro_pair):
    pol, ref = micro_pair
    psi_w = [compute_psi(pol, ref, p.x_w, p.y).value.item() for p in PROMPT_BATCH]
    psi_l = [compute_psi(pol, ref, p.x_l, p.y).value.item() for p in PROMPT_BATCH]
    assert adpo_loss(pol, ref, PROMPT_BATCH, 0.3).item() == pytest.approx(dpo_from_psi(psi_w, psi_l, 0.3), abs=1e-12)


def test_dpop_without_penalty_is_dpo(micro_pair):
    pol, ref = micro_pair
    assert dpop_loss(pol, ref, RESP_BATCH, 0.1, 0.0).item() == dpo_loss(pol, ref, RESP_BATCH, 0.1).item()
    assert adpop_loss(pol, ref, PROMPT_BATCH, 0.1, 0.0).item() == adpo_loss(pol, ref, PROMPT_BATCH, 0.1).item()


def _hinge_case(micro_pair, preferred_up: bool):
    """Batch of one pair where the preferred sequence moved up (or down) vs the reference."""
    pol, ref = micro_pair
    for x in range(6):
        for a in range(6):
            for b in range(6):
                if a == b:
                    continue
                psi = compute_psi(pol, ref, [x], [a]).value.item()
                if (psi > 0) == preferred_up and abs(psi) > 1e-6:
                    return pol, ref, [ResponsePair([x], [a], [b])], [PromptPair([a], [b], [x])]
    pytest.skip("no suitable pair in the micro model")


def test_inactive_hinge_leaves_dpo_unchanged(micro_pair):
    pol, ref, resp, _ = _hinge_case(micro_pair, preferred_up=True)
    assert dpop_loss(pol, ref, resp, 0.1, 3.0).item() == dpo_loss(pol, ref, resp, 0.1).item()


def test_active_hinge_raises_the_loss(micro_pair):
    pol, ref, resp, _ = _hinge_case(micro_pair, preferred_up=False)
    assert dpop_loss(pol, ref, resp, 0.1, 3.0).item() > dpo_loss(pol, ref, resp, 0.1).item()


def test_abductive_hinge_watches_the_preferred_prompt(micro_pair):
    pol, ref = micro_pair
    item = PromptPair([1, 2], [2, 1], [3])
    psi_w = compute_psi(pol, ref, item.x_w, item.y).value.item()
    psi_l = compute_psi(pol, ref, item.x_l, item.y).value.item()
    z = 0.1 * (psi_w - psi_l) - 2.0 * max(0.0, -psi_w)
    assert adpop_loss(pol, ref, [item], 0.1, 2.0).item() == pytest.approx(math.log1p(math.exp(-z)), abs=1e-12)


def test_negative_penalty_rejected(micro_pair):
    pol, ref = micro_pair
    with pytest.raises(ValueError):
        dpop_loss(pol, ref, RESP_BATCH, 0.1, -1.0)
    with pytest.raises(ValueError):
        adpop_loss(pol, ref, PROMPT_BATCH, 0.1, -1.0)


def test_empty_batch_rejected(micro_pair):
    pol, ref = micro_pair
    with pytest.raises(ValueError):
        dpo_loss(pol, ref, [])
    with pytest.raises(ValueError):
        adpo_loss(pol, ref, [])


@pytest.mark.parametrize("objective", ["dpo", "dpop"])
def test_multitask_boundaries_bit_match(micro_pair, objective):
    pol, ref = micro_pair
    ld = 1.5 if objective == "dpop" else 0.0
    std = dpop_loss(pol, ref, RESP_BATCH, 0.1, ld).item()
    abd = adpop_loss(pol, ref, PROMPT_BATCH, 0.1, ld).item()
    at1 = multi_loss(pol, ref, RESP_BATCH, PROMPT_BATCH, LossSpec(objective, "multitask", 0.1, 1.0, ld)).item()
    at0 = multi_loss(pol, ref, RESP_BATCH, PROMPT_BATCH, LossSpec(objective, "multitask", 0.1, 0.0, ld)).item()
    half = multi_loss(pol, ref, RESP_BATCH, PROMPT_BATCH, LossSpec(objective, "multitask", 0.1, 0.5, ld)).item()
    assert at1 == std and at0 == abd
    assert half == pytest.approx((std + abd) / 2, abs=1e-14)


def test_boundary_lambda_needs_only_one_batch(micro_pair):
    pol, ref = micro_pair
    spec = LossSpec(direction="multitask", lambda_multi=1.0)
    assert multi_loss(pol, ref, RESP_BATCH, [], spec).item() == dpo_loss(pol, ref, RESP_BATCH).item()


def test_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(lambda_multi=1.5)
    with pytest.raises(ValueError):
        LossSpec(objective="ipo")
    with pytest.raises(ValueError):
        LossSpec(beta=0.0)
    with pytest.raises(ValueError):
        LossSpec(lambda_dpop=-0.1)


def test_dispatch_matches_direct_calls(micro_pair):
    pol, ref = micro_pair
    assert loss_for_spec(pol, ref, LossSpec(), RESP_BATCH).item() == dpo_loss(pol, ref, RESP_BATCH).item()
    spec = LossSpec(direction="abductive")
    assert loss_for_spec(pol, ref, spec, prompt_batch=PROMPT_BATCH).item() == adpo_loss(pol, ref, PROMPT_BATCH).item()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(0.05, 2), st.floats(0, 3))
def test_losses_are_non_negative(vals, beta, ld):
    lw, ll, rw, rl = (T.Tensor(np.array([v])) for v in vals)
    assert preference_loss(lw, ll, rw.data, rl.data, beta, ld).item() >= 0.0


def test_loss_gradients_match_finite_differences():
    for res in check_losses():
        assert res.max_rel_error <= 1e-4, res


def test_gradcheck_fixture_exercises_the_hinge():
    from abductive_dpo.gradcheck import _micro_pair

    pol, ref = _micro_pair()
    active = [
        batch_log_prob_sums(ref, [p.x], [p.y_w])[0] > batch_log_prob_sums(pol, [p.x], [p.y_w])[0] for p in RESP
    ] + [
        batch_log_prob_sums(ref, [p.x_w], [p.y])[0] > batch_log_prob_sums(pol, [p.x_w], [p.y])[0] for p in PROMPTS
    ]
    assert any(active)
