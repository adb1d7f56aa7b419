"""Accuracy metrics, the abductive-policy oracle, and ablation runners."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .lm import LmPolicy, batch_avg_log_lik, batch_log_prob_sums, clone_frozen, clone_trainable
from .trainer import TrainConfig, finetune


@dataclass
class ItemResult:
    id: str
    std_correct: bool
    abd_correct: bool
    std_margin: float
    abd_margin: float


@dataclass
class EvalReport:
    accuracy: float
    abductive_accuracy: float
    n_items: int
    per_item: list[ItemResult] = field(default_factory=list)

    def to_json(self, per_item: bool = True) -> str:
        d = asdict(self)
        if not per_item:
            d.pop("per_item")
        return json.dumps(d, sort_keys=False)


def _require(dataset):
    records = list(dataset)
    if not records:
        raise ValueError("empty evaluation dataset")
    return records


def _margins(policy: LmPolicy, records, score=batch_avg_log_lik):
    x = [r.original_prompt for r in records]
    xm = [r.modified_prompt for r in records]
    yw = [r.right_answer for r in records]
    yl = [r.hallucinated_answer for r in records]
    n = len(records)
    s = score(policy, x + x + xm, yw + yl + yl)
    std = s[:n] - s[n : 2 * n]
    abd = s[2 * n :] - s[n : 2 * n]
    return std, abd


def evaluate(policy: LmPolicy, dataset) -> EvalReport:
    """Both accuracies with per-item detail.  Ties count as incorrect."""
    records = _require(dataset)
    std, abd = _margins(policy, records)
    items = [
        ItemResult(r.id, bool(s > 0), bool(a > 0), float(s), float(a))
        for r, s, a in zip(records, std, abd)
    ]
    return EvalReport(
        accuracy=float(np.mean([i.std_correct for i in items])),
        abductive_accuracy=float(np.mean([i.abd_correct for i in items])),
        n_items=len(items),
        per_item=items,
    )


def accuracy(policy: LmPolicy, dataset) -> float:
    """Share of items where ALL(right | original) > ALL(hallucinated | original)."""
    std, _ = _margins(policy, _require(dataset))
    return float(np.mean(std > 0))


def abductive_accuracy(policy: LmPolicy, dataset, normalize: bool = True) -> float:
    """Share of items where ALL(hallucinated | modified) > ALL(hallucinated | original)."""
    score = batch_avg_log_lik if normalize else batch_log_prob_sums
    _, abd = _margins(policy, _require(dataset), score)
    return float(np.mean(abd > 0))


# ---------------------------------------------------------------- abductive policy


class UnreachableResponse(ValueError):
    pass


@dataclass
class EnumeratedWorld:
    """Small prompt set with a prior and every response up to ``max_len`` tokens."""

    prompts: list[list[int]]
    prior: np.ndarray
    vocab: Sequence[int]
    max_len: int
    responses: list[tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if len(self.prompts) == 0 or len(self.prompts) > 8:
            raise ValueError("prompt support must hold between 1 and 8 prompts")
        if len(self.vocab) > 4 or not 1 <= self.max_len <= 3:
            raise ValueError("enumeration limited to vocab <= 4 and length <= 3")
        if self.prior.shape != (len(self.prompts),) or np.any(self.prior < 0):
            raise ValueError("prior must be a non-negative vector over prompts")
        if abs(self.prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1")
        self.responses = [
            tuple(int(t) for t in seq)
            for n in range(1, self.max_len + 1)
            for seq in itertools.product(self.vocab, repeat=n)
        ]

    @classmethod
    def uniform(cls, prompts, vocab, max_len) -> "EnumeratedWorld":
        k = len(prompts)
        return cls([list(p) for p in prompts], np.full(k, 1.0 / k), list(vocab), max_len)


def likelihood_table(policy: LmPolicy, world: EnumeratedWorld) -> np.ndarray:
    """pi(y | x) for every prompt (rows) and enumerated response (columns)."""
    xs, ys = [], []
    for x in world.prompts:
        for y in world.responses:
            xs.append(x)
            ys.append(list(y))
    lp = batch_log_prob_sums(policy, xs, ys)
    return np.exp(lp).reshape(len(world.prompts), len(world.responses))


def abductive_policy_oracle(policy: LmPolicy, world: EnumeratedWorld, prior=None) -> np.ndarray:
    """Bayes-inverted table pi~(x | y) = pi(y|x) p(x) / q(y), shape (|Y|, |X|).

    ``q(y) = sum_x pi(y|x) p(x)`` is computed over the whole prompt support.
    """
    p = world.prior if prior is None else np.asarray(prior, dtype=np.float64)
    lik = likelihood_table(policy, world)
    joint = lik * p[:, None]
    q = joint.sum(axis=0)
    if np.any(q <= 0):
        raise UnreachableResponse("some enumerated response has zero marginal probability")
    return (joint / q).T


def abductive_pair_margin(tilde_theta, tilde_ref, beta: float, iw: int, il: int, jy: int) -> float:
    """beta * [log(pi~_theta(x_w|y)/pi~_ref(x_w|y)) - log(pi~_theta(x_l|y)/pi~_ref(x_l|y))]."""
    return beta * (
        (math.log(tilde_theta[jy, iw]) - math.log(tilde_ref[jy, iw]))
        - (math.log(tilde_theta[jy, il]) - math.log(tilde_ref[jy, il]))
    )


def psi_pair_margin(policy, ref, beta, x_w, x_l, y) -> float:
    """beta * [psi(x_w, y) - psi(x_l, y)] with psi from direct log-likelihoods."""
    lp = batch_log_prob_sums(policy, [x_w, x_l], [y, y])
    lr = batch_log_prob_sums(ref, [x_w, x_l], [y, y])
    return beta * ((lp[0] - lr[0]) - (lp[1] - lr[1]))


def verify_prop1(
    policy: LmPolicy,
    ref: LmPolicy,
    world: EnumeratedWorld,
    beta: float,
    pairs: Sequence[tuple[int, int, int]],
    ref_prior=None,
) -> float:
    """Max |abductive-policy margin - swapped-psi margin| over ``pairs``.

    ``pairs`` holds ``(i_w, i_l, j_y)`` indices into the world's prompts and
    responses.  ``ref_prior`` lets the reference use a different prompt marginal,
    which breaks the equivalence.
    """
    tt = abductive_policy_oracle(policy, world)
    tr = abductive_policy_oracle(ref, world, prior=ref_prior)
    worst = 0.0
    for iw, il, jy in pairs:
        a = abductive_pair_margin(tt, tr, beta, iw, il, jy)
        b = psi_pair_margin(policy, ref, beta, world.prompts[iw], world.prompts[il], list(world.responses[jy]))
        worst = max(worst, abs(a - b))
    return worst


# ---------------------------------------------------------------- ablations

LAMBDA_COLUMNS = ("lambda", "accuracy", "abductive_accuracy")
DELTA_COLUMNS = ("delta_train", "delta_eval", "epoch", "accuracy", "abductive_accuracy")
DPOP_COLUMNS = ("lambda_dpop", "accuracy", "abductive_accuracy")


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _finetune_eval(base: LmPolicy, train, cfg: TrainConfig, evals: dict, on_epoch_rows=None):
    """Fine-tune a fresh copy of ``base``; return the final reports on every eval set."""
    policy, ref = clone_trainable(base), clone_frozen(base)
    hook = None
    if on_epoch_rows is not None:
        def hook(epoch, pol):
            on_epoch_rows(epoch, {k: evaluate(pol, v) for k, v in evals.items()})
    finetune(policy, ref, train, cfg, on_epoch=hook)
    return {k: evaluate(policy, v) for k, v in evals.items()}


def _check_grid(grid, lo=0.0, hi=1.0, what="lambda"):
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError(f"empty {what} grid")
    if any(not lo <= g <= hi for g in grid):
        raise ValueError(f"{what} grid must lie in [{lo}, {hi}]")
    return grid


def run_lambda_ablation(base: LmPolicy, train, eval_set, cfg: TrainConfig, grid=(0.0, 0.25, 0.5, 0.75, 1.0), path=None):
    """One multitask fine-tune per lambda, all from the same base and seed."""
    rows = []
    for lam in _check_grid(grid):
        spec = replace(cfg.loss, direction="multitask", lambda_multi=lam)
        rep = _finetune_eval(base, train, replace(cfg, loss=spec), {"eval": eval_set})["eval"]
        rows.append({"lambda": lam, "accuracy": rep.accuracy, "abductive_accuracy": rep.abductive_accuracy})
    if path is not None:
        write_csv(path, LAMBDA_COLUMNS, rows)
    return rows


def run_delta_ablation(base: LmPolicy, datasets: dict, cfg: TrainConfig, path=None):
    """Train on each delta's train split, score every delta's eval split after each epoch.

    ``datasets`` maps delta to ``(train, eval)``.
    """
    if not datasets:
        raise ValueError("no datasets given")
    deltas = sorted(datasets)
    evals = {d: datasets[d][1] for d in deltas}
    rows = []
    for dt in deltas:
        def record(epoch, reports, dt=dt):
            for de in deltas:
                rows.append({
                    "delta_train": dt, "delta_eval": de, "epoch": epoch,
                    "accuracy": reports[de].accuracy, "abductive_accuracy": reports[de].abductive_accuracy,
                })
        _finetune_eval(base, datasets[dt][0], cfg, evals, on_epoch_rows=record)
    if path is not None:
        write_csv(path, DELTA_COLUMNS, rows)
    return rows


def run_dpop_penalty_ablation(base: LmPolicy, train, eval_set, cfg: TrainConfig, grid=(0.0, 0.25, 0.5, 0.75, 1.0), path=None):
    """Sweep the DPOP hinge weight with the direction and lambda of ``cfg.loss``."""
    rows = []
    for ld in _check_grid(grid, 0.0, math.inf, "lambda_dpop"):
        spec = replace(cfg.loss, objective="dpop", lambda_dpop=ld)
        rep = _finetune_eval(base, train, replace(cfg, loss=spec), {"eval": eval_set})["eval"]
        rows.append({"lambda_dpop": ld, "accuracy": rep.accuracy, "abductive_accuracy": rep.abductive_accuracy})
    if path is not None:
        write_csv(path, DPOP_COLUMNS, rows)
    return rows
