"""Central finite-difference checks for ops, the LM and the preference losses.

Relative error is ``|autodiff - fd| / max(1, |fd|)`` with step
``h = 1e-4 * max(1, |x|)`` per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .lm import LmConfig, LmPolicy, clone_frozen
from .losses import PromptPair, ResponsePair, adpo_loss, adpop_loss, dpo_loss, dpop_loss, multi_loss, LossSpec

RTOL = 1e-4


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h_scale: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated and restored)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        h = h_scale * max(1.0, abs(old))
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(auto: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd)))) if fd.size else 0.0


def check_function(build: Callable[[Sequence[T.Tensor]], T.Tensor], arrays: Sequence[np.ndarray]) -> float:
    """Max relative error of d build(leaves)/d leaves over all leaves."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    root = build(leaves)
    T.backward(root)
    worst = 0.0
    for leaf in leaves:
        def f():
            with T.no_grad():
                return build(leaves).item()
        fd = numeric_grad(f, leaf.data)
        auto = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, rel_error(auto, fd))
    return worst


# ---------------------------------------------------------------- op registry


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo + x, x)


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum(T.mul(out, T.Tensor(w)))


def _case(op, make_inputs):
    """Wrap an op as (rng -> (build, arrays)) where build reduces to a scalar."""

    def draw(rng):
        arrays, extra = make_inputs(rng)
        probe = op(*[T.Tensor(a) for a in arrays], **extra)
        w = rng.normal(size=probe.shape)
        return (lambda leaves: _weighted(op(*leaves, **extra), w)), arrays

    return draw


def _ids(rng, shape, hi):
    return rng.integers(0, hi, size=shape)


OP_CASES: dict[str, Callable] = {
    "add": _case(T.add, lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], {})),
    "sub": _case(T.sub, lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {})),
    "mul": _case(T.mul, lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], {})),
    "scalar_mul": _case(lambda a: T.scalar_mul(a, -1.7), lambda r: ([r.normal(size=(5,))], {})),
    "matmul": _case(T.matmul, lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], {})),
    "matmul_batched": _case(T.matmul, lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))], {})),
    "embedding_gather": _case(
        lambda w, ids=None: T.embedding_gather(w, ids), lambda r: ([r.normal(size=(6, 3))], {"ids": _ids(r, (2, 4), 6)})
    ),
    "layer_norm": _case(T.layer_norm, lambda r: ([r.normal(size=(3, 5)), r.normal(size=(5,)), r.normal(size=(5,))], {})),
    "gelu": _case(T.gelu, lambda r: ([r.normal(size=(4, 3)) * 2], {})),
    "tanh": _case(T.tanh, lambda r: ([r.normal(size=(4, 3))], {})),
    "exp": _case(T.exp, lambda r: ([r.normal(size=(4,))], {})),
    "log_softmax": _case(lambda a: T.log_softmax(a, axis=-1), lambda r: ([r.normal(size=(3, 5)) * 3], {})),
    "log_softmax_axis0": _case(lambda a: T.log_softmax(a, axis=0), lambda r: ([r.normal(size=(3, 5))], {})),
    "softmax": _case(lambda a: T.softmax(a, axis=-1), lambda r: ([r.normal(size=(3, 5))], {})),
    "gather_logprob": _case(
        lambda a, ids=None: T.gather_logprob(a, ids), lambda r: ([r.normal(size=(2, 3, 5))], {"ids": _ids(r, (2, 3), 5)})
    ),
    "sum": _case(lambda a: T.sum(a, axis=1), lambda r: ([r.normal(size=(3, 4))], {})),
    "mean": _case(lambda a: T.mean(a, axis=0), lambda r: ([r.normal(size=(3, 4))], {})),
    "max_with_zero": _case(T.max_with_zero, lambda r: ([_away_from_zero(r, (6,))], {})),
    "sigmoid": _case(T.sigmoid, lambda r: ([r.normal(size=(6,)) * 4], {})),
    "log_sigmoid": _case(T.log_sigmoid, lambda r: ([r.normal(size=(6,)) * 4], {})),
    "reshape": _case(lambda a: T.reshape(a, (4, 3)), lambda r: ([r.normal(size=(3, 4))], {})),
    "transpose": _case(lambda a: T.transpose(a, (1, 2, 0)), lambda r: ([r.normal(size=(2, 3, 4))], {})),
    "index": _case(lambda a: T.index(a, slice(1, 3)), lambda r: ([r.normal(size=(4, 2))], {})),
    "stack": _case(lambda a, b: T.stack([a, b]), lambda r: ([r.normal(size=(3,)), r.normal(size=(3,))], {})),
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    trials: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= RTOL


def check_ops(trials: int = 100, seed: int = 0, cases: dict | None = None) -> list[CheckResult]:
    cases = OP_CASES if cases is None else cases
    out = []
    for name, draw in cases.items():
        rng = np.random.default_rng([seed, len(name)])
        worst = 0.0
        for _ in range(trials):
            build, arrays = draw(rng)
            worst = max(worst, check_function(build, arrays))
        out.append(CheckResult(name, worst, trials))
    return out


# ---------------------------------------------------------------- lm and losses

MICRO = LmConfig(vocab_size=5, context_len=8, embed_dim=8, num_layers=1, num_heads=2, seed=3, init_std=0.5)


def _param_error(policy: LmPolicy, objective: Callable[[], T.Tensor]) -> float:
    policy.zero_grad()
    T.backward(objective())
    worst = 0.0
    for p in policy.parameters():
        def f():
            with T.no_grad():
                return objective().item()
        fd = numeric_grad(f, p.data)
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_error(auto, fd))
    return worst


def _micro_pair(seed: int = 3):
    ref = LmPolicy(MICRO)
    rng = np.random.default_rng(seed)
    state = {k: v + rng.normal(0, 0.3, size=v.shape) for k, v in ref.state_dict().items()}
    pol = LmPolicy(MICRO, state)
    return pol, clone_frozen(ref)


def check_lm(config: LmConfig = MICRO) -> list[CheckResult]:
    pol = LmPolicy(config)
    xs = [[1, 2], [3], [4, 0, 1]]
    ys = [[4, 0], [2, 2, 1], [3]]
    err = _param_error(pol, lambda: T.sum(pol.log_prob_sums(xs, ys)))
    return [CheckResult("log_prob_sum", err, 1)]


RESP = [ResponsePair([1, 2], [3, 4], [0, 1]), ResponsePair([2], [1], [4, 4])]
PROMPTS = [PromptPair([1, 2], [2, 1], [3, 4]), PromptPair([3, 0], [4], [1])]


def check_losses(lambda_dpop: float = 2.0) -> list[CheckResult]:
    pol, ref = _micro_pair()
    beta = 1.0  # large beta keeps the loss far from flat so errors are visible
    objectives = {
        "dpo": lambda: dpo_loss(pol, ref, RESP, beta),
        "adpo": lambda: adpo_loss(pol, ref, PROMPTS, beta),
        "dpop": lambda: dpop_loss(pol, ref, RESP, beta, lambda_dpop),
        "adpop": lambda: adpop_loss(pol, ref, PROMPTS, beta, lambda_dpop),
        "multi": lambda: multi_loss(pol, ref, RESP, PROMPTS, LossSpec("dpop", "multitask", beta, 0.3, lambda_dpop)),
    }
    return [CheckResult(name, _param_error(pol, fn), 1) for name, fn in objectives.items()]


def run(scope: str, trials: int = 100, seed: int = 0) -> list[CheckResult]:
    if scope == "ops":
        return check_ops(trials, seed)
    if scope == "lm":
        return check_lm()
    if scope == "losses":
        return check_losses()
    raise ValueError(f"unknown gradcheck scope {scope!r}")
