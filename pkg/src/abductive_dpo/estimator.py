"""scikit-learn style wrapper around preference fine-tuning.

``X`` is a sequence of :class:`~abductive_dpo.datagen.AbductiveRecord` (or their
JSON dicts); there is no separate ``y`` because the preference lives inside each
record.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evalkit import _margins
from .lm import clone_frozen, clone_trainable
from .losses import LossSpec
from .trainer import AdamConfig, TrainConfig, finetune
from .validation import check_policy, check_positive_int, check_records, check_scalar


class PreferenceFineTuner(BaseEstimator):
    """Fine-tune a copy of ``base`` with a DPO-family objective.

    After ``fit``: ``policy_`` (trained), ``reference_`` (frozen copy of base),
    ``dynamics_`` (per-step log) and ``n_records_``.
    """

    def __init__(
        self,
        base=None,
        objective="dpo",
        direction="standard",
        beta=0.1,
        lambda_multi=0.5,
        lambda_dpop=0.0,
        epochs=5,
        lr=2e-3,
        batch_size=8,
        grad_accum=1,
        max_grad_norm=1.0,
        warmup_ratio=0.1,
        weight_decay=0.01,
        random_state=0,
    ):
        self.base = base
        self.objective = objective
        self.direction = direction
        self.beta = beta
        self.lambda_multi = lambda_multi
        self.lambda_dpop = lambda_dpop
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.max_grad_norm = max_grad_norm
        self.warmup_ratio = warmup_ratio
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        spec = LossSpec(
            objective=self.objective,
            direction=self.direction,
            beta=check_scalar(self.beta, "beta", lo=0.0, closed=False),
            lambda_multi=check_scalar(self.lambda_multi, "lambda_multi", lo=0.0, hi=1.0),
            lambda_dpop=check_scalar(self.lambda_dpop, "lambda_dpop", lo=0.0),
        )
        return TrainConfig(
            loss=spec,
            epochs=check_positive_int(self.epochs, "epochs"),
            lr=check_scalar(self.lr, "lr", lo=0.0),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            grad_accum=check_positive_int(self.grad_accum, "grad_accum"),
            max_grad_norm=check_scalar(self.max_grad_norm, "max_grad_norm", lo=0.0, closed=False),
            warmup_ratio=check_scalar(self.warmup_ratio, "warmup_ratio", lo=0.0, hi=1.0),
            adam=AdamConfig(weight_decay=check_scalar(self.weight_decay, "weight_decay", lo=0.0)),
            seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        base = check_policy(self.base, name="base")
        records = check_records(X, vocab_size=base.config.vocab_size)
        cfg = self._train_config()
        self.reference_ = clone_frozen(base)
        self.policy_, self.dynamics_ = finetune(clone_trainable(base), self.reference_, records, cfg)
        self.n_records_ = len(records)
        return self

    def decision_function(self, X) -> np.ndarray:
        """(n, 2) margins in nats/token: standard then abductive.  Positive means correct."""
        check_is_fitted(self, "policy_")
        records = check_records(X, vocab_size=self.policy_.config.vocab_size)
        std, abd = _margins(self.policy_, records)
        return np.stack([std, abd], axis=1)

    def predict(self, X) -> np.ndarray:
        """(n, 2) booleans: does the policy rank each pair the preferred way."""
        return self.decision_function(X) > 0

    def score(self, X, y=None) -> float:
        """Accuracy on the metric the objective targets; the mean of both for multitask."""
        acc = self.predict(X).mean(axis=0)
        if self.direction == "standard":
            return float(acc[0])
        if self.direction == "abductive":
            return float(acc[1])
        return float(acc.mean())
