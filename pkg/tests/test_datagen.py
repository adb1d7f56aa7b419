import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abductive_dpo.datagen import (
    AbductiveRecord,
    GenConfig,
    GenerationError,
    emit_dataset,
    file_sha256,
    likelihood_margins,
    read_jsonl,
    split_records,
    stage1_filter,
    stage2_filter,
    stage3_check,
    synthesize_corpus,
    write_jsonl,
)
from abductive_dpo.lm import LmConfig, LmPolicy, avg_log_lik
from abductive_dpo.pipeline import Pools, build_pools

SMALL = GenConfig(num_candidates=60, pretrain_size=50, reader_size=50, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return synthesize_corpus(SMALL)


@pytest.fixture(scope="module")
def scorer():
    return LmPolicy(LmConfig(vocab_size=SMALL.vocab_size, context_len=SMALL.seq_len, embed_dim=8,
                             num_layers=1, num_heads=2, seed=4, init_std=0.5))


def test_corpus_is_deterministic(corpus):
    again = synthesize_corpus(SMALL)
    assert [r.to_json() for r in again.candidates] == [r.to_json() for r in corpus.candidates]
    assert again.pretrain == corpus.pretrain and again.reader == corpus.reader


def test_prompts_differ_in_exactly_the_edited_slot(corpus):
    for r in corpus.candidates:
        diff = [i for i, (a, b) in enumerate(zip(r.original_prompt, r.modified_prompt)) if a != b]
        assert diff == [corpus.edit_slot[r.id]]
        assert r.right_answer != r.hallucinated_answer


def test_every_candidate_passes_stage3(corpus):
    assert all(stage3_check(r, corpus.world) for r in corpus.candidates)


def test_stage3_rejects_broken_records(corpus):
    r = corpus.candidates[0]
    same = AbductiveRecord(**{**r.to_json(), "modified_prompt": list(r.original_prompt)})
    assert not stage3_check(same, corpus.world)
    two = list(r.modified_prompt)
    k = next(i for i in range(1, len(two) - 4, 3) if i + 2 != corpus.edit_slot[r.id])
    two[k + 2] = r.hallucinated_answer[0]  # a second edit elsewhere
    assert not stage3_check(AbductiveRecord(**{**r.to_json(), "modified_prompt": two}), corpus.world)
    swapped = AbductiveRecord(**{**r.to_json(), "right_answer": r.hallucinated_answer})
    assert not stage3_check(swapped, corpus.world)


def test_rendering_is_readable(corpus):
    r = corpus.candidates[0]
    assert r.text_original.startswith("<s>") and " Q: " in r.text_original
    assert r.text_original != r.text_modified


@pytest.mark.parametrize("bad", [{"generic_rate": 1.5}, {"authentic_rate": -0.1}])
def test_rates_must_be_probabilities(bad):
    with pytest.raises(GenerationError):
        GenConfig(**bad)


@pytest.mark.parametrize("bad", [{"num_templates": 0}, {"num_candidates": 5}, {"delta": -0.1}])
def test_invalid_configs(bad):
    with pytest.raises(GenerationError):
        GenConfig(**bad)


def test_stage1_infinite_thresholds(corpus, scorer):
    assert stage1_filter(scorer, corpus.candidates, -np.inf) == corpus.candidates
    assert stage1_filter(scorer, corpus.candidates, np.inf) == []


def test_stage1_matches_per_record_recomputation(corpus, scorer):
    alls = [avg_log_lik(scorer, r.original_prompt, r.hallucinated_answer).item() for r in corpus.candidates]
    thr = float(np.median(alls))
    want = [r.id for r, a in zip(corpus.candidates, alls) if a >= thr]
    assert [r.id for r in stage1_filter(scorer, corpus.candidates, thr)] == want


def test_stage2_margin_direction(corpus, scorer):
    kept = stage2_filter(scorer, corpus.candidates, 0.0)
    for r in kept:
        mod = avg_log_lik(scorer, r.modified_prompt, r.hallucinated_answer).item()
        orig = avg_log_lik(scorer, r.original_prompt, r.hallucinated_answer).item()
        assert r.margin == pytest.approx(mod - orig, abs=1e-12) and r.margin >= 0.0


def test_stage2_is_monotone_in_delta(corpus, scorer):
    small = {r.id for r in stage2_filter(scorer, corpus.candidates, 0.01)}
    large = {r.id for r in stage2_filter(scorer, corpus.candidates, 0.1)}
    assert large <= small


def test_stage2_rejects_negative_delta(corpus, scorer):
    with pytest.raises(GenerationError):
        stage2_filter(scorer, corpus.candidates, -1.0)


def test_views_share_the_rejected_pair(corpus):
    r = corpus.candidates[0]
    x, _, y_l = r.response_pair()
    x_w, x_l, y = r.prompt_pair()
    assert x_l is x and y is y_l and x_w == r.modified_prompt


def test_emit_round_trip_and_split(tmp_path, corpus):
    records = corpus.candidates
    train_path, eval_path = emit_dataset(records, tmp_path, 0.75, seed=1)
    train, held = read_jsonl(train_path), read_jsonl(eval_path)
    assert len(train) + len(held) == len(records)
    assert not {r.id for r in train} & {r.id for r in held}
    by_id = {r.id: r.to_json() for r in records}
    for r in train + held:
        assert r.to_json() == by_id[r.id]


def test_jsonl_schema_and_key_order(tmp_path, corpus):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, corpus.candidates[:3])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    keys = list(json.loads(lines[0]))
    assert keys == ["id", "original_prompt", "modified_prompt", "right_answer", "hallucinated_answer",
                    "margin", "text_original", "text_modified"]


def test_emission_is_reproducible(tmp_path, corpus):
    a = emit_dataset(corpus.candidates, tmp_path / "a", 0.8, 0)
    b = emit_dataset(corpus.candidates, tmp_path / "b", 0.8, 0)
    assert [file_sha256(p) for p in a] == [file_sha256(p) for p in b]


@pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5])
def test_bad_split_ratio(ratio, corpus):
    with pytest.raises(ValueError):
        split_records(corpus.candidates, ratio, 0)


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(0, 59), min_size=1), st.floats(0.1, 0.9))
def test_split_of_a_subset_is_the_subset_of_the_split(corpus, idx, ratio):
    sub = [corpus.candidates[i] for i in sorted(idx)]
    train_all, _ = split_records(corpus.candidates, ratio, 7)
    train_sub, _ = split_records(sub, ratio, 7)
    assert {r.id for r in train_sub} == {r.id for r in train_all} & {r.id for r in sub}


def test_malformed_jsonl_names_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        read_jsonl(path)


def test_pools_keep_the_margin_invariant(corpus, scorer):
    pools = build_pools(corpus, scorer, scorer, 0.5, 0)
    margins = likelihood_margins(scorer, pools.train + pools.eval)
    np.testing.assert_allclose([r.margin for r in pools.train + pools.eval], margins, atol=1e-12)
    for delta in (0.0, 0.05):
        tr, ev = pools.filtered(delta)
        assert all(r.margin >= delta for r in tr + ev)
    with pytest.raises(ValueError):
        Pools().filtered(-1.0)
