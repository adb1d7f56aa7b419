"""Preference objectives: DPO, DPOP and their abductive and multitask forms.

Conventions
-----------
A *response pair* is ``(x, y_w, y_l)``: one prompt, a preferred and a rejected
response.  A *prompt pair* is ``(x_w, x_l, y)``: one response and the prompt it
supports better (``x_w``) versus worse (``x_l``).  The abductive losses are the
standard ones with the roles of prompt and response swapped, so they reuse the
same margin code and only differ in which log-likelihoods they compare.

All losses consume *summed* log-likelihoods and reduce over the batch by the
arithmetic mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .lm import LmPolicy, batch_log_prob_sums
from .tensor import Tensor

OBJECTIVES = ("dpo", "dpop")
DIRECTIONS = ("standard", "abductive", "multitask")


class ResponsePair(NamedTuple):
    x: Sequence[int]
    y_w: Sequence[int]
    y_l: Sequence[int]


class PromptPair(NamedTuple):
    x_w: Sequence[int]
    x_l: Sequence[int]
    y: Sequence[int]


@dataclass(frozen=True)
class LossSpec:
    objective: str = "dpo"
    direction: str = "standard"
    beta: float = 0.1
    lambda_multi: float = 0.5
    lambda_dpop: float = 0.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 <= self.lambda_multi <= 1.0:
            raise ValueError("lambda_multi must lie in [0, 1]")
        if self.lambda_dpop < 0:
            raise ValueError("lambda_dpop must be non-negative")


@dataclass
class PsiScore:
    """log pi_theta(y|x) - log pi_ref(y|x) as a graph node."""

    value: Tensor
    x_id: str | None = None
    y_id: str | None = None

    def item(self) -> float:
        return self.value.item()


def _check_ref(ref: LmPolicy):
    if not ref.frozen:
        raise ValueError("reference policy must be frozen (use clone_frozen)")


def compute_psi(policy: LmPolicy, ref: LmPolicy, x, y, x_id=None, y_id=None) -> PsiScore:
    _check_ref(ref)
    lp = policy.log_prob_sums([x], [y])
    ref_lp = batch_log_prob_sums(ref, [x], [y])
    return PsiScore(T.reshape(T.sub(lp, T.Tensor(ref_lp)), ()), x_id, y_id)


# ------------------------------------------------------------ margin-level losses


def preference_loss(
    logp_w: Tensor,
    logp_l: Tensor,
    ref_w,
    ref_l,
    beta: float,
    lambda_dpop: float = 0.0,
) -> Tensor:
    """Mean of -log sigma(beta*(psi_w - psi_l) - lambda_dpop*max(0, ref_w - logp_w)).

    ``logp_*`` are policy log-likelihood vectors (graph nodes); ``ref_*`` are the
    matching reference log-likelihoods (constants).  With ``lambda_dpop == 0``
    this is exactly the DPO loss; ``w``/``l`` index whatever was preferred, so the
    same function serves both directions.
    """
    if lambda_dpop < 0:
        raise ValueError("lambda_dpop must be non-negative")
    if logp_w.shape != logp_l.shape or logp_w.data.size == 0:
        raise T.ShapeError("preference_loss", logp_w.shape, logp_l.shape)
    ref_w = T.Tensor(np.asarray(ref_w, dtype=np.float64).reshape(logp_w.shape))
    ref_l = T.Tensor(np.asarray(ref_l, dtype=np.float64).reshape(logp_l.shape))
    psi_w = T.sub(logp_w, ref_w)
    psi_l = T.sub(logp_l, ref_l)
    z = T.scalar_mul(T.sub(psi_w, psi_l), beta)
    if lambda_dpop:
        z = T.sub(z, T.scalar_mul(T.max_with_zero(T.sub(ref_w, logp_w)), lambda_dpop))
    return T.scalar_mul(T.mean(T.log_sigmoid(z)), -1.0)


def dpo_from_psi(psi_w, psi_l, beta: float) -> float:
    """Plain-float DPO loss for given psi values (no graph); used for checks."""
    d = beta * (np.asarray(psi_w, dtype=np.float64) - np.asarray(psi_l, dtype=np.float64))
    return float(np.mean(np.logaddexp(0.0, -d)))


# ------------------------------------------------------------ batch-level losses


def _require_items(batch, kind):
    if len(batch) == 0:
        raise ValueError(f"empty batch of {kind}")


def _score(policy, ref, xs, ys):
    _check_ref(ref)
    return policy.log_prob_sums(xs, ys), batch_log_prob_sums(ref, xs, ys)


def _response_side(policy, ref, batch: Sequence[ResponsePair], beta, lambda_dpop):
    _require_items(batch, "response pairs")
    n = len(batch)
    xs = [p.x for p in batch] * 2
    ys = [p.y_w for p in batch] + [p.y_l for p in batch]
    lp, ref_lp = _score(policy, ref, xs, ys)
    return preference_loss(
        T.index(lp, slice(0, n)), T.index(lp, slice(n, 2 * n)), ref_lp[:n], ref_lp[n:], beta, lambda_dpop
    )


def _prompt_side(policy, ref, batch: Sequence[PromptPair], beta, lambda_dpop):
    _require_items(batch, "prompt pairs")
    n = len(batch)
    xs = [p.x_w for p in batch] + [p.x_l for p in batch]
    ys = [p.y for p in batch] * 2
    lp, ref_lp = _score(policy, ref, xs, ys)
    return preference_loss(
        T.index(lp, slice(0, n)), T.index(lp, slice(n, 2 * n)), ref_lp[:n], ref_lp[n:], beta, lambda_dpop
    )


def dpo_loss(policy, ref, batch: Sequence[ResponsePair], beta: float = 0.1) -> Tensor:
    return _response_side(policy, ref, batch, beta, 0.0)


def adpo_loss(policy, ref, batch: Sequence[PromptPair], beta: float = 0.1) -> Tensor:
    return _prompt_side(policy, ref, batch, beta, 0.0)


def dpop_loss(policy, ref, batch: Sequence[ResponsePair], beta: float = 0.1, lambda_dpop: float = 0.0) -> Tensor:
    if lambda_dpop < 0:
        raise ValueError("lambda_dpop must be non-negative")
    return _response_side(policy, ref, batch, beta, lambda_dpop)


def adpop_loss(policy, ref, batch: Sequence[PromptPair], beta: float = 0.1, lambda_dpop: float = 0.0) -> Tensor:
    """Role-swapped DPOP: the hinge guards log pi(y | x_w) against the reference."""
    if lambda_dpop < 0:
        raise ValueError("lambda_dpop must be non-negative")
    return _prompt_side(policy, ref, batch, beta, lambda_dpop)


def combine_multitask(standard: Tensor | None, abductive: Tensor | None, lam: float) -> Tensor:
    """lam * standard + (1 - lam) * abductive; the boundaries return one side untouched."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda_multi must lie in [0, 1]")
    if lam == 1.0:
        return standard
    if lam == 0.0:
        return abductive
    return T.add(T.scalar_mul(standard, lam), T.scalar_mul(abductive, 1.0 - lam))


def multi_loss(policy, ref, resp_batch, prompt_batch, spec: LossSpec) -> Tensor:
    lam = spec.lambda_multi
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda_multi must lie in [0, 1]")
    ld = spec.lambda_dpop if spec.objective == "dpop" else 0.0
    std = _response_side(policy, ref, resp_batch, spec.beta, ld) if lam > 0 else None
    abd = _prompt_side(policy, ref, prompt_batch, spec.beta, ld) if lam < 1 else None
    return combine_multitask(std, abd, lam)


def loss_for_spec(policy, ref, spec: LossSpec, resp_batch=(), prompt_batch=()) -> Tensor:
    """Dispatch on ``spec.direction`` / ``spec.objective``."""
    ld = spec.lambda_dpop if spec.objective == "dpop" else 0.0
    if spec.direction == "standard":
        return _response_side(policy, ref, resp_batch, spec.beta, ld)
    if spec.direction == "abductive":
        return _prompt_side(policy, ref, prompt_batch, spec.beta, ld)
    return multi_loss(policy, ref, resp_batch, prompt_batch, spec)


LN2 = math.log(2.0)
