import math

import numpy as np
import pytest

from abductive_dpo import tensor as T
from abductive_dpo import trainer as tr
from abductive_dpo.datagen import GenConfig, synthesize_corpus
from abductive_dpo.lm import LmConfig, LmPolicy, batch_log_prob_sums, clone_frozen, clone_trainable
from abductive_dpo.losses import LossSpec, ResponsePair
from abductive_dpo.trainer import (
    DYNAMICS_COLUMNS,
    AdamConfig,
    DatasetMismatch,
    DynamicsLog,
    TrainConfig,
    TrainingDiverged,
    clip_gradients,
    corpus_nll,
    finetune,
    lr_at,
    pretrain_mle,
)

GEN = GenConfig(num_candidates=40, pretrain_size=40, reader_size=10, seed=5)


@pytest.fixture(scope="module")
def records():
    return synthesize_corpus(GEN).candidates[:24]


def small_policy(seed=0):
    return LmPolicy(LmConfig(vocab_size=GEN.vocab_size, context_len=GEN.seq_len, embed_dim=8,
                             num_layers=1, num_heads=2, seed=seed, init_std=0.3))


def run(records, **kw):
    base = small_policy()
    cfg = TrainConfig(**{"epochs": 2, "lr": 1e-2, "batch_size": 8, **kw})
    return finetune(clone_trainable(base), clone_frozen(base), records, cfg)


def test_lambda_one_reproduces_dpo_bitwise(records):
    pol_a, dyn_a = run(records, loss=LossSpec(direction="standard"))
    pol_b, dyn_b = run(records, loss=LossSpec(direction="multitask", lambda_multi=1.0))
    assert dyn_a.rows == dyn_b.rows
    assert pol_a.fingerprint() == pol_b.fingerprint()


def test_zero_lr_changes_nothing(records):
    base = small_policy()
    pol, dyn = finetune(clone_trainable(base), clone_frozen(base), records,
                        TrainConfig(epochs=3, lr=0.0, batch_size=8))
    assert pol.fingerprint() == base.fingerprint()
    means = [m["loss"] for m in dyn.epoch_means()]
    assert means == pytest.approx([means[0]] * 3, abs=1e-12)


def test_one_step_raises_the_margin():
    base = small_policy(3)
    ref = clone_frozen(base)
    pair = ResponsePair([1, 2, 3], [10, 2], [11, 2])

    class Rec:
        id = "r"

        def response_pair(self):
            return pair

        def prompt_pair(self):
            return (pair.x, pair.x, pair.y_l)

    def margin(p):
        lp = batch_log_prob_sums(p, [pair.x, pair.x], [pair.y_w, pair.y_l])
        lr = batch_log_prob_sums(ref, [pair.x, pair.x], [pair.y_w, pair.y_l])
        return (lp[0] - lr[0]) - (lp[1] - lr[1])

    pol = clone_trainable(base)
    finetune(pol, ref, [Rec()], TrainConfig(epochs=1, lr=1e-4, batch_size=1, warmup_ratio=0.0))
    assert margin(pol) > margin(base) == 0.0


def test_reference_is_never_touched(records):
    base = small_policy()
    ref = clone_frozen(base)
    fp = ref.fingerprint()
    finetune(clone_trainable(base), ref, records, TrainConfig(epochs=2, lr=1e-2, batch_size=8,
                                                              loss=LossSpec(direction="multitask")))
    assert ref.fingerprint() == fp


def test_rejected_trajectories_coincide(records):
    _, dyn = run(records, loss=LossSpec(direction="abductive"))
    assert np.array_equal(dyn.column("logp_rejected_std"), dyn.column("logp_rejected_abd"))


def test_fine_tuning_is_deterministic(records):
    a, da = run(records, loss=LossSpec(direction="multitask"), seed=4)
    b, db = run(records, loss=LossSpec(direction="multitask"), seed=4)
    assert a.fingerprint() == b.fingerprint() and da.rows == db.rows


def test_dynamics_row_count_and_csv(tmp_path, records):
    _, dyn = run(records, batch_size=5, grad_accum=2, epochs=3)
    steps = math.ceil(math.ceil(len(records) / 5) / 2)
    assert len(dyn) == 3 * steps
    path = tmp_path / "d.csv"
    dyn.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(DYNAMICS_COLUMNS)
    assert DynamicsLog.from_csv(path).rows == dyn.rows
    assert [m["epoch"] for m in dyn.epoch_means()] == [1, 2, 3]


def test_dynamics_steps_must_increase():
    log = DynamicsLog()
    row = dict.fromkeys(DYNAMICS_COLUMNS, 0.0)
    log.append(**{**row, "step": 0})
    with pytest.raises(ValueError):
        log.append(**{**row, "step": 0})


def test_records_without_views_are_rejected():
    base = small_policy()
    with pytest.raises(DatasetMismatch):
        finetune(clone_trainable(base), clone_frozen(base), [("x", "y")], TrainConfig())


def test_reference_must_be_frozen(records):
    base = small_policy()
    with pytest.raises(ValueError):
        finetune(clone_trainable(base), clone_trainable(base), records, TrainConfig())


def test_numeric_fault_becomes_divergence(monkeypatch, records):
    def boom(*a, **k):
        raise T.NumericFault("loss is nan")

    monkeypatch.setattr(tr, "batch_objective", boom)
    with pytest.raises(TrainingDiverged):
        run(records)


def test_warmup_schedule():
    lrs = [lr_at(s, 20, 1.0, 0.1) for s in range(20)]
    assert lrs[:3] == [0.5, 1.0, 1.0] and lrs[-1] == 1.0
    assert lr_at(5, 20, 1.0, 0.0) == 1.0


def test_clipping_caps_the_norm():
    p = T.Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.array([3.0, 4.0, 0.0, 0.0])
    assert clip_gradients([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, abs=1e-6)


def test_config_validation():
    for bad in ({"epochs": 0}, {"lr": -1.0}, {"warmup_ratio": 1.5}, {"max_grad_norm": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nonsense": 1})
    cfg = TrainConfig.from_dict({"loss": {"direction": "abductive"}, "adam": {"weight_decay": 0.0}, "grad_accum": 4})
    assert cfg.loss.direction == "abductive" and cfg.adam == AdamConfig(weight_decay=0.0)
    assert cfg.effective_batch == 4 * cfg.batch_size


# ---------------------------------------------------------------- MLE


def test_mle_loss_non_increasing_with_tiny_lr():
    corpus = [([1 + i % 4], [5 + i % 3, 2]) for i in range(10)]
    losses = pretrain_mle(small_policy(), corpus, TrainConfig(epochs=15, lr=1e-3, batch_size=10, warmup_ratio=0.0))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_mle_halves_the_loss():
    corpus = synthesize_corpus(GEN).pretrain
    pol = small_policy()
    before = corpus_nll(pol, corpus)
    pretrain_mle(pol, corpus, TrainConfig(epochs=40, lr=1e-2, batch_size=20))
    assert corpus_nll(pol, corpus) <= 0.5 * before


def test_mle_is_bit_reproducible():
    corpus = synthesize_corpus(GEN).pretrain[:20]
    a, b = small_policy(), small_policy()
    cfg = TrainConfig(epochs=2, lr=1e-2, batch_size=4, seed=9)
    pretrain_mle(a, corpus, cfg)
    pretrain_mle(b, corpus, cfg)
    assert a.fingerprint() == b.fingerprint()


def test_mle_recovers_empirical_frequencies():
    # three of four continuations are token 5, so p(5 | prompt) should approach 0.75
    corpus = [([1, 2], [5]), ([1, 2], [5]), ([1, 2], [5]), ([1, 2], [6])]
    pol = small_policy(1)
    pretrain_mle(pol, corpus, TrainConfig(epochs=300, lr=1e-2, batch_size=4, warmup_ratio=0.0,
                                          adam=AdamConfig(weight_decay=0.0)))
    p = np.exp(pol.next_token_logprobs(np.array([[1, 2]]))[0, -1])
    assert p[5] == pytest.approx(0.75, abs=0.02) and p[6] == pytest.approx(0.25, abs=0.02)


def test_mle_refuses_frozen_or_empty():
    with pytest.raises(ValueError):
        pretrain_mle(clone_frozen(small_policy()), [([1], [2])], TrainConfig())
    with pytest.raises(ValueError):
        pretrain_mle(small_policy(), [], TrainConfig())
