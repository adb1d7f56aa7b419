"""Synthetic abductive QA corpus and the three-stage validation pipeline.

The world is a set of ``(relation, entity) -> value`` facts.  A prompt lists a few
facts and asks for one of them::

    BOS  r1 e3 v7  r2 e1 v4  r1 e5 v2  Q r1 e5 SEP   ->   v2 EOS

Every ``(relation, entity)`` also has a *prior* value.  The pre-training corpus
answers from the prior regardless of what the prompt says, so the resulting base
model hallucinates the prior whenever the context disagrees with it.  Editing the
queried fact so that it states the prior turns the hallucination into the right
answer; that edited prompt is the preferred prompt of the abductive pair.

The base model cannot judge which prompt supports an answer, so likelihood
margins come from a separate *reader* model trained on context-grounded text.
The reader has a habit of blurting out a handful of generic values, which makes
its margins small whenever the hallucinated value is one of them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lm import LmPolicy, batch_avg_log_lik
from .losses import PromptPair, ResponsePair

PAD, BOS, EOS, SEP, Q = 0, 1, 2, 3, 4
N_SPECIAL = 5

_ENTITY_NAMES = [
    "Ada", "Bram", "Cleo", "Dov", "Esme", "Finn", "Gia", "Hugo", "Ines", "Jonas", "Kaia", "Lev",
    "Mira", "Nils", "Odile", "Pavel", "Quinn", "Rosa", "Sven", "Tove", "Ugo", "Vera", "Wim", "Xena",
]
_VALUE_NAMES = [
    "Austria", "Brazil", "Canada", "Denmark", "Egypt", "France", "Ghana", "Hungary", "India", "Japan",
    "Kenya", "Latvia", "Mexico", "Norway", "Oman", "Peru", "Qatar", "Russia", "Spain", "Turkey",
    "Uganda", "Vietnam", "Wales", "Yemen", "Zambia", "Chile", "Fiji", "Iran",
]
_RELATION_NAMES = ["born_in", "lives_in", "studied_in", "works_in", "married_in", "retired_in"]


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    num_templates: int = 2
    num_entities: int = 16
    num_values: int = 24
    num_generic: int = 8
    facts_per_prompt: int = 3
    num_candidates: int = 2400
    pretrain_size: int = 4000
    reader_size: int = 4000
    generic_rate: float = 0.5
    authentic_rate: float = 0.75
    delta: float = 0.1
    all_threshold: float = -0.35
    seed: int = 0

    def __post_init__(self):
        if self.num_templates <= 0:
            raise GenerationError("num_templates must be positive")
        if self.num_templates > len(_RELATION_NAMES):
            raise GenerationError(f"at most {len(_RELATION_NAMES)} templates are available")
        if not 2 <= self.num_entities <= len(_ENTITY_NAMES):
            raise GenerationError(f"num_entities must lie in [2, {len(_ENTITY_NAMES)}]")
        if not 3 <= self.num_values <= len(_VALUE_NAMES):
            raise GenerationError(f"num_values must lie in [3, {len(_VALUE_NAMES)}]")
        if not 0 <= self.num_generic < self.num_values:
            raise GenerationError("num_generic must lie in [0, num_values)")
        if self.facts_per_prompt < 1 or self.facts_per_prompt > self.num_entities:
            raise GenerationError("facts_per_prompt must lie in [1, num_entities]")
        if self.delta < 0:
            raise GenerationError("delta must be non-negative")
        for name in ("generic_rate", "authentic_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GenerationError(f"{name} must lie in [0, 1]")
        if self.num_candidates < 10:
            raise GenerationError("num_candidates must be at least 10")

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.num_templates + self.num_entities + self.num_values

    @property
    def prompt_len(self) -> int:
        return 1 + 3 * self.facts_per_prompt + 4

    @property
    def seq_len(self) -> int:
        return self.prompt_len + 2


@dataclass
class AbductiveRecord:
    id: str
    original_prompt: list[int]
    modified_prompt: list[int]
    right_answer: list[int]
    hallucinated_answer: list[int]
    margin: float = float("nan")
    text_original: str = ""
    text_modified: str = ""

    def response_pair(self) -> ResponsePair:
        return ResponsePair(self.original_prompt, self.right_answer, self.hallucinated_answer)

    def prompt_pair(self) -> PromptPair:
        # the rejected prompt and the shared response are the very objects used by
        # the standard view: (x_l, y) is (x, y_l)
        return PromptPair(self.modified_prompt, self.original_prompt, self.hallucinated_answer)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "original_prompt": list(map(int, self.original_prompt)),
            "modified_prompt": list(map(int, self.modified_prompt)),
            "right_answer": list(map(int, self.right_answer)),
            "hallucinated_answer": list(map(int, self.hallucinated_answer)),
            "margin": None if math.isnan(self.margin) else float(self.margin),
            "text_original": self.text_original,
            "text_modified": self.text_modified,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AbductiveRecord":
        missing = {"id", "original_prompt", "modified_prompt", "right_answer", "hallucinated_answer"} - set(obj)
        if missing:
            raise ValueError(f"record is missing keys {sorted(missing)}")
        return cls(
            id=str(obj["id"]),
            original_prompt=[int(t) for t in obj["original_prompt"]],
            modified_prompt=[int(t) for t in obj["modified_prompt"]],
            right_answer=[int(t) for t in obj["right_answer"]],
            hallucinated_answer=[int(t) for t in obj["hallucinated_answer"]],
            margin=float("nan") if obj.get("margin") is None else float(obj["margin"]),
            text_original=obj.get("text_original", ""),
            text_modified=obj.get("text_modified", ""),
        )


@dataclass
class World:
    """Token layout plus the latent priors the generator draws from."""

    cfg: GenConfig
    prior: np.ndarray  # (templates, entities) -> value index
    prior_strength: np.ndarray  # (templates, entities) in (0, 1)
    generic: np.ndarray  # value indices the reader over-produces

    def rel_tok(self, r: int) -> int:
        return N_SPECIAL + r

    def ent_tok(self, e: int) -> int:
        return N_SPECIAL + self.cfg.num_templates + e

    def val_tok(self, v: int) -> int:
        return N_SPECIAL + self.cfg.num_templates + self.cfg.num_entities + v

    def val_of_tok(self, tok: int) -> int:
        return tok - self.val_tok(0)

    def prompt(self, facts: Sequence[tuple[int, int, int]], query: tuple[int, int]) -> list[int]:
        ids = [BOS]
        for r, e, v in facts:
            ids += [self.rel_tok(r), self.ent_tok(e), self.val_tok(v)]
        ids += [Q, self.rel_tok(query[0]), self.ent_tok(query[1]), SEP]
        return ids

    def answer(self, v: int) -> list[int]:
        return [self.val_tok(v), EOS]

    def render(self, ids: Iterable[int]) -> str:
        cfg = self.cfg
        words = []
        for t in ids:
            t = int(t)
            if t < N_SPECIAL:
                words.append(["<pad>", "<s>", "</s>", "?", "Q:"][t])
            elif t < N_SPECIAL + cfg.num_templates:
                words.append(_RELATION_NAMES[t - N_SPECIAL])
            elif t < N_SPECIAL + cfg.num_templates + cfg.num_entities:
                words.append(_ENTITY_NAMES[t - N_SPECIAL - cfg.num_templates])
            else:
                words.append(_VALUE_NAMES[self.val_of_tok(t)])
        return " ".join(words)


def make_world(cfg: GenConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 1])
    prior = rng.integers(0, cfg.num_values, size=(cfg.num_templates, cfg.num_entities))
    strength = rng.uniform(0.55, 0.95, size=prior.shape)
    generic = np.sort(rng.choice(cfg.num_values, size=cfg.num_generic, replace=False))
    return World(cfg, prior, strength, generic)


def _random_facts(rng, world: World, query: tuple[int, int], query_value: int):
    cfg = world.cfg
    others = [e for e in range(cfg.num_entities) if e != query[1]]
    picked = rng.choice(len(others), size=cfg.facts_per_prompt - 1, replace=False)
    facts = [(int(rng.integers(cfg.num_templates)), others[i], int(rng.integers(cfg.num_values))) for i in picked]
    slot = int(rng.integers(cfg.facts_per_prompt))
    facts.insert(slot, (query[0], query[1], query_value))
    return facts, slot


@dataclass
class Corpus:
    """Output of :func:`synthesize_corpus`."""

    world: World
    candidates: list[AbductiveRecord]
    pretrain: list[tuple[list[int], list[int]]] = field(default_factory=list)
    reader: list[tuple[list[int], list[int]]] = field(default_factory=list)
    edit_slot: dict[str, int] = field(default_factory=dict)


def synthesize_corpus(cfg: GenConfig) -> Corpus:
    """Draw candidate records plus the two MLE corpora (base and reader).

    Deterministic in ``cfg``.  Raises :class:`GenerationError` when fewer than 10
    candidates can be produced.
    """
    world = make_world(cfg)
    nv = cfg.num_values

    def query(rng):
        return int(rng.integers(cfg.num_templates)), int(rng.integers(cfg.num_entities))

    # one stream per part, so resizing one corpus leaves the others untouched
    rng = np.random.default_rng([cfg.seed, 2])
    pretrain = []
    for _ in range(cfg.pretrain_size):
        q = query(rng)
        facts, _ = _random_facts(rng, world, q, int(rng.integers(nv)))
        if rng.random() < world.prior_strength[q]:
            v = int(world.prior[q])
        else:
            v = int(rng.integers(nv))
        pretrain.append((world.prompt(facts, q), world.answer(v)))

    reader = []
    rng = np.random.default_rng([cfg.seed, 3])
    for _ in range(cfg.reader_size):
        q = query(rng)
        v_ctx = int(rng.integers(nv))
        facts, _ = _random_facts(rng, world, q, v_ctx)
        v = v_ctx
        if cfg.num_generic and rng.random() < cfg.generic_rate:
            v = int(rng.choice(world.generic))
        reader.append((world.prompt(facts, q), world.answer(v)))

    candidates, slots = [], {}
    rng = np.random.default_rng([cfg.seed, 4])
    width = len(str(cfg.num_candidates))
    for i in range(cfg.num_candidates):
        q = query(rng)
        prior = int(world.prior[q])
        # most proposals use the memorised prior; the rest are invented and
        # should fail hallucination verification
        v_h = prior if rng.random() < cfg.authentic_rate else int(rng.integers(nv))
        v_true = int(rng.integers(nv - 1))
        v_true += v_true >= v_h
        facts, slot = _random_facts(rng, world, q, v_true)
        modified = list(facts)
        modified[slot] = (q[0], q[1], v_h)
        x_orig = world.prompt(facts, q)
        x_mod = world.prompt(modified, q)
        rid = f"c{i:0{width}d}"
        candidates.append(
            AbductiveRecord(
                id=rid,
                original_prompt=x_orig,
                modified_prompt=x_mod,
                right_answer=world.answer(v_true),
                hallucinated_answer=world.answer(v_h),
                text_original=world.render(x_orig),
                text_modified=world.render(x_mod),
            )
        )
        slots[rid] = 1 + 3 * slot + 2
    return Corpus(world, candidates, pretrain, reader, slots)


def stage1_filter(base: LmPolicy, candidates: Sequence[AbductiveRecord], all_threshold: float) -> list[AbductiveRecord]:
    """Keep records whose hallucinated answer the base model finds likely on the original prompt."""
    if not candidates:
        return []
    if math.isinf(all_threshold):
        return list(candidates) if all_threshold < 0 else []
    all_ = batch_avg_log_lik(base, [c.original_prompt for c in candidates], [c.hallucinated_answer for c in candidates])
    return [c for c, a in zip(candidates, all_) if a >= all_threshold]


def likelihood_margins(scorer: LmPolicy, records: Sequence[AbductiveRecord]) -> np.ndarray:
    """ALL(hallucination | modified) - ALL(hallucination | original), per record."""
    if not records:
        return np.zeros(0)
    ys = [r.hallucinated_answer for r in records]
    mod = batch_avg_log_lik(scorer, [r.modified_prompt for r in records], ys)
    orig = batch_avg_log_lik(scorer, [r.original_prompt for r in records], ys)
    return mod - orig


def stage2_filter(scorer: LmPolicy, candidates: Sequence[AbductiveRecord], delta: float) -> list[AbductiveRecord]:
    """Keep records whose hallucination is at least ``delta`` nats/token more likely
    under the modified prompt; the margin is stored on each returned copy."""
    if delta < 0:
        raise GenerationError("delta must be non-negative")
    margins = likelihood_margins(scorer, candidates)
    out = []
    for c, m in zip(candidates, margins):
        if m >= delta:
            r = AbductiveRecord(**{**asdict(c), "margin": float(m)})
            out.append(r)
    return out


def stage3_check(record: AbductiveRecord, world: World) -> bool:
    """Construction-time contextual reasonableness.

    The modified prompt must state the hallucinated value for the queried fact,
    the original must state the right answer, and the two prompts must differ in
    exactly one token.
    """
    x, xm = record.original_prompt, record.modified_prompt
    if len(x) != len(xm) or x[-4:] != xm[-4:]:
        return False
    diff = [i for i, (a, b) in enumerate(zip(x, xm)) if a != b]
    if len(diff) != 1:
        return False
    rel, ent = x[-3], x[-2]
    facts = [tuple(x[i : i + 3]) for i in range(1, len(x) - 4, 3)]
    mfacts = [tuple(xm[i : i + 3]) for i in range(1, len(xm) - 4, 3)]
    told = [f[2] for f in facts if f[0] == rel and f[1] == ent]
    mtold = [f[2] for f in mfacts if f[0] == rel and f[1] == ent]
    return (
        told == [record.right_answer[0]]
        and mtold == [record.hallucinated_answer[0]]
        and record.right_answer != record.hallucinated_answer
    )


def in_train_split(record_id: str, split_ratio: float, seed: int) -> bool:
    """Hash-based assignment, so any subset of a pool splits consistently."""
    h = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64 < split_ratio


def split_records(records: Sequence[AbductiveRecord], split_ratio: float, seed: int):
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    train, held = [], []
    for r in records:
        (train if in_train_split(r.id, split_ratio, seed) else held).append(r)
    return train, held


def write_jsonl(path, records: Iterable[AbductiveRecord]):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    tmp.replace(path)


def read_jsonl(path) -> list[AbductiveRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(AbductiveRecord.from_json(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def emit_dataset(records: Sequence[AbductiveRecord], out_dir, split_ratio: float = 0.8, seed: int = 0):
    """Write ``train.jsonl`` and ``eval.jsonl``; returns their paths."""
    train, held = split_records(records, split_ratio, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = out_dir / "train.jsonl", out_dir / "eval.jsonl"
    write_jsonl(paths[0], train)
    write_jsonl(paths[1], held)
    return paths


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
