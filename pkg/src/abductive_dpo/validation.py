"""Input checks shared by the estimator wrapper and the command line."""

from __future__ import annotations

import math
from typing import Iterable

from .datagen import AbductiveRecord
from .lm import LmPolicy


def check_records(X, *, min_records: int = 1, vocab_size: int | None = None) -> list[AbductiveRecord]:
    """Coerce ``X`` to a list of records.

    Accepts records or their JSON dicts.  Raises ``TypeError`` for anything else
    and ``ValueError`` for empty input, duplicate ids, or broken invariants.
    """
    if isinstance(X, (str, bytes)) or not isinstance(X, Iterable):
        raise TypeError(f"expected an iterable of records, got {type(X).__name__}")
    out = []
    for i, r in enumerate(X):
        if isinstance(r, dict):
            r = AbductiveRecord.from_json(r)
        elif not isinstance(r, AbductiveRecord):
            raise TypeError(f"item {i} is a {type(r).__name__}, not an AbductiveRecord")
        out.append(r)
    if len(out) < min_records:
        raise ValueError(f"need at least {min_records} record(s), got {len(out)}")
    seen = set()
    for r in out:
        if r.id in seen:
            raise ValueError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        if r.original_prompt == r.modified_prompt:
            raise ValueError(f"record {r.id!r}: prompts are identical")
        if r.right_answer == r.hallucinated_answer:
            raise ValueError(f"record {r.id!r}: answers are identical")
        if not (r.original_prompt and r.modified_prompt and r.right_answer and r.hallucinated_answer):
            raise ValueError(f"record {r.id!r}: empty token sequence")
        if vocab_size is not None:
            toks = r.original_prompt + r.modified_prompt + r.right_answer + r.hallucinated_answer
            bad = [t for t in toks if not 0 <= t < vocab_size]
            if bad:
                raise ValueError(f"record {r.id!r}: token {bad[0]} outside vocabulary of {vocab_size}")
    return out


def check_policy(policy, *, name: str = "policy") -> LmPolicy:
    if not isinstance(policy, LmPolicy):
        raise TypeError(f"{name} must be an LmPolicy, got {type(policy).__name__}")
    return policy


def check_scalar(value, name: str, *, lo: float = -math.inf, hi: float = math.inf, closed: bool = True) -> float:
    """Finite float in [lo, hi] (or (lo, hi) when ``closed`` is false)."""
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise TypeError(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite, got {v}")
    ok = lo <= v <= hi if closed else lo < v < hi
    if not ok:
        brackets = "[]" if closed else "()"
        raise ValueError(f"{name}={v} outside {brackets[0]}{lo}, {hi}{brackets[1]}")
    return v


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive int, got {value!r}")
    return value
