"""Tiny causal transformer exposing conditional log-likelihoods log pi(y|x)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "abductive-dpo/lm-checkpoint"
CHECKPOINT_VERSION = 1


class ContextOverflow(ValueError):
    pass


class FrozenPolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 64
    context_len: int = 64
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "embed_dim", "num_layers", "num_heads"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"LmConfig.{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def _as_ids(seq, vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(getattr(seq, "ids", seq), dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"{what} has token ids outside [0, {vocab_size})")
    return ids


class LmPolicy:
    """Pre-LayerNorm decoder-only transformer with learned positions.

    ``params`` maps names to leaf tensors.  A frozen policy holds leaves with
    ``requires_grad=False`` and refuses in-place parameter updates.
    """

    def __init__(self, config: LmConfig, params: dict[str, np.ndarray] | None = None, frozen: bool = False):
        self.config = config
        self.frozen = frozen
        arrays = params if params is not None else self._init_params(config)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64, copy=True), requires_grad=not frozen)
            for k, v in arrays.items()
        }
        expected = set(self._init_params(config, shapes_only=True))
        if set(self.params) != expected:
            raise ValueError(f"parameter names do not match config: {sorted(set(self.params) ^ expected)}")

    @staticmethod
    def _init_params(cfg: LmConfig, shapes_only: bool = False) -> dict[str, np.ndarray]:
        d, v, c = cfg.embed_dim, cfg.vocab_size, cfg.context_len
        shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (c, d)}
        for i in range(cfg.num_layers):
            p = f"h{i}."
            shapes.update({
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
                p + "w_o": (d, d), p + "b_o": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "w_fc": (d, 4 * d), p + "b_fc": (4 * d,),
                p + "w_proj": (4 * d, d), p + "b_proj": (d,),
            })
        shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_out": (d, v), "b_out": (v,)})
        if shapes_only:
            return shapes
        rng = np.random.default_rng(cfg.seed)
        out = {}
        for name, shp in shapes.items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                out[name] = np.ones(shp)
            elif leaf.startswith("b_") or leaf.endswith("_b"):
                out[name] = np.zeros(shp)
            else:
                out[name] = rng.normal(0.0, cfg.init_std, size=shp)
        return out

    # ------------------------------------------------------------ forward

    def logits(self, ids: np.ndarray) -> Tensor:
        """Next-token logits for a (B, L) batch of token ids -> (B, L, V)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        cfg, P = self.config, self.params
        b, n = ids.shape
        if n > cfg.context_len:
            raise ContextOverflow(f"sequence length {n} exceeds context_len {cfg.context_len}")
        d, h = cfg.embed_dim, cfg.num_heads
        hd = d // h
        x = T.add(T.embedding_gather(P["tok_emb"], ids), T.index(P["pos_emb"], slice(0, n)))
        mask = T.Tensor(np.triu(np.full((n, n), -1e9), k=1))
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.num_layers):
            p = f"h{i}."
            a = T.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"])
            qkv = T.add(T.matmul(a, P[p + "w_qkv"]), P[p + "b_qkv"])
            qkv = T.transpose(T.reshape(qkv, (b, n, 3, h, hd)), (2, 0, 3, 1, 4))
            q = T.index(qkv, 0)
            k = T.index(qkv, 1)
            v = T.index(qkv, 2)
            att = T.add(T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), mask)
            att = T.softmax(att, axis=-1)
            y = T.matmul(att, v)
            y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, n, d))
            x = T.add(x, T.add(T.matmul(y, P[p + "w_o"]), P[p + "b_o"]))
            m = T.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"])
            m = T.gelu(T.add(T.matmul(m, P[p + "w_fc"]), P[p + "b_fc"]))
            x = T.add(x, T.add(T.matmul(m, P[p + "w_proj"]), P[p + "b_proj"]))
        x = T.layer_norm(x, P["lnf_g"], P["lnf_b"])
        return T.add(T.matmul(x, P["w_out"]), P["b_out"])

    def _pack(self, xs: Sequence, ys: Sequence):
        """Right-pad x+y pairs; returns ids, targets, and a 0/1 weight on y positions."""
        v = self.config.vocab_size
        xs = [_as_ids(x, v, "prompt") for x in xs]
        ys = [_as_ids(y, v, "response") for y in ys]
        if len(xs) != len(ys):
            raise ValueError("prompt and response batches differ in length")
        lens = [len(x) + len(y) for x, y in zip(xs, ys)]
        n = max(lens) - 1
        if max(lens) > self.config.context_len:
            raise ContextOverflow(
                f"prompt+response length {max(lens)} exceeds context_len {self.config.context_len}"
            )
        ids = np.zeros((len(xs), n), dtype=np.int64)
        tgt = np.zeros((len(xs), n), dtype=np.int64)
        w = np.zeros((len(xs), n))
        for r, (x, y) in enumerate(zip(xs, ys)):
            full = np.concatenate([x, y])
            ids[r, : len(full) - 1] = full[:-1]
            tgt[r, : len(full) - 1] = full[1:]
            w[r, len(x) - 1 : len(full) - 1] = 1.0
        return ids, tgt, w

    def log_prob_sums(self, xs: Sequence, ys: Sequence) -> Tensor:
        """Vector of sum_t log pi(y_t | x, y_<t) for each (x, y) in the batch."""
        ids, tgt, w = self._pack(xs, ys)
        lp = T.gather_logprob(T.log_softmax(self.logits(ids), axis=-1), tgt)
        return T.sum(T.mul(lp, T.Tensor(w)), axis=1)

    def next_token_logprobs(self, ids) -> np.ndarray:
        with T.no_grad():
            return T.log_softmax(self.logits(ids), axis=-1).data

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if self.frozen:
            raise FrozenPolicyError("cannot load parameters into a frozen policy")
        for k, arr in state.items():
            if self.params[k].shape != np.shape(arr):
                raise T.ShapeError("load_state_dict", self.params[k].shape, np.shape(arr))
            self.params[k].data = np.array(arr, dtype=np.float64, copy=True)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ persistence

    def save(self, path):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "frozen": self.frozen,
            "params": {
                k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                for k, t in sorted(self.params.items())
            },
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "LmPolicy":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an LM checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        cfg = LmConfig(**payload["config"])
        params = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in payload["params"].items()
        }
        return cls(cfg, params, frozen=payload.get("frozen", False))


def log_prob_sum(policy: LmPolicy, x, y) -> Tensor:
    """Scalar sum_t log pi(y_t | x, y_<t) in nats."""
    return T.reshape(policy.log_prob_sums([x], [y]), ())


def avg_log_lik(policy: LmPolicy, x, y) -> Tensor:
    """Per-token average log-likelihood of ``y`` given ``x``."""
    n = len(_as_ids(y, policy.config.vocab_size, "response"))
    return T.scalar_mul(log_prob_sum(policy, x, y), 1.0 / n)


def batch_log_prob_sums(policy: LmPolicy, xs, ys, chunk: int = 256) -> np.ndarray:
    """Graph-free evaluation of many (x, y) pairs; returns a float array."""
    out = []
    with T.no_grad():
        for i in range(0, len(xs), chunk):
            out.append(policy.log_prob_sums(xs[i : i + chunk], ys[i : i + chunk]).data)
    return np.concatenate(out) if out else np.zeros(0)


def batch_avg_log_lik(policy: LmPolicy, xs, ys, chunk: int = 256) -> np.ndarray:
    lens = np.array([len(getattr(y, "ids", y)) for y in ys], dtype=np.float64)
    return batch_log_prob_sums(policy, xs, ys, chunk) / lens


def clone_frozen(policy: LmPolicy) -> LmPolicy:
    """Deep copy with frozen semantics; values are bit-identical at copy time."""
    return LmPolicy(policy.config, policy.state_dict(), frozen=True)


def clone_trainable(policy: LmPolicy) -> LmPolicy:
    return LmPolicy(policy.config, policy.state_dict(), frozen=False)


def sample_greedy(policy: LmPolicy, x, max_len: int, end_token: int | None = None) -> list[int]:
    """Argmax decoding from prompt ``x``; stops at ``end_token`` (included) or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = list(_as_ids(x, policy.config.vocab_size, "prompt"))
    out: list[int] = []
    while len(out) < max_len and len(ids) < policy.config.context_len:
        lp = policy.next_token_logprobs(np.array(ids)[None, :])[0, -1]
        tok = int(np.argmax(lp))
        out.append(tok)
        ids.append(tok)
        if end_token is not None and tok == end_token:
            break
    return out


def uniform_policy(config: LmConfig) -> LmPolicy:
    """Policy whose logits are identically zero (every next-token law is uniform)."""
    pol = LmPolicy(config)
    state = pol.state_dict()
    state["w_out"][:] = 0.0
    state["b_out"][:] = 0.0
    pol.load_state_dict(state)
    return pol


__all__ = [
    "ContextOverflow",
    "FrozenPolicyError",
    "LmConfig",
    "LmPolicy",
    "avg_log_lik",
    "batch_avg_log_lik",
    "batch_log_prob_sums",
    "clone_frozen",
    "clone_trainable",
    "log_prob_sum",
    "sample_greedy",
    "uniform_policy",
]
