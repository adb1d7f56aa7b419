"""End-to-end dataset construction: corpus, base and reader models, the three stages.

Records are assigned to train or eval by a hash of their id *before* the margin
filter, so datasets built with different deltas never leak eval items into each
other's training split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .datagen import (
    AbductiveRecord,
    Corpus,
    GenConfig,
    likelihood_margins,
    split_records,
    stage1_filter,
    stage3_check,
    synthesize_corpus,
)
from .lm import LmConfig, LmPolicy
from .trainer import TrainConfig, pretrain_mle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MleConfig:
    base_epochs: int = 6
    reader_epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 32
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2

    def lm_config(self, gen: GenConfig, seed: int) -> LmConfig:
        return LmConfig(
            vocab_size=gen.vocab_size,
            context_len=gen.seq_len,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            seed=seed,
        )

    def train_config(self, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, lr=self.lr, batch_size=self.batch_size, seed=seed)


def pretrain_base(corpus: Corpus, mle: MleConfig) -> LmPolicy:
    """The hallucinating model: MLE on the prior-skewed corpus."""
    seed = corpus.world.cfg.seed
    base = LmPolicy(mle.lm_config(corpus.world.cfg, seed))
    pretrain_mle(base, corpus.pretrain, mle.train_config(mle.base_epochs, seed))
    return base


def pretrain_reader(corpus: Corpus, mle: MleConfig) -> LmPolicy:
    """The margin scorer: MLE on the context-grounded corpus."""
    seed = corpus.world.cfg.seed + 1
    reader = LmPolicy(mle.lm_config(corpus.world.cfg, seed))
    pretrain_mle(reader, corpus.reader, mle.train_config(mle.reader_epochs, seed))
    return reader


@dataclass
class Pools:
    """Stage-1 and stage-3 survivors with their margins, split into train and eval."""

    train: list[AbductiveRecord] = field(default_factory=list)
    eval: list[AbductiveRecord] = field(default_factory=list)
    n_candidates: int = 0
    n_stage1: int = 0

    def filtered(self, delta: float) -> tuple[list[AbductiveRecord], list[AbductiveRecord]]:
        """Stage 2 at ``delta``; margins were computed once when the pools were built."""
        if delta < 0:
            raise ValueError("delta must be non-negative")
        return [r for r in self.train if r.margin >= delta], [r for r in self.eval if r.margin >= delta]


def build_pools(corpus: Corpus, base: LmPolicy, scorer: LmPolicy, split_ratio: float = 0.8, split_seed: int = 0) -> Pools:
    cfg = corpus.world.cfg
    s1 = stage1_filter(base, corpus.candidates, cfg.all_threshold)
    s3 = [r for r in s1 if stage3_check(r, corpus.world)]
    margins = likelihood_margins(scorer, s3)
    scored = [replace(r, margin=float(m)) for r, m in zip(s3, margins)]
    train, held = split_records(scored, split_ratio, split_seed)
    log.info("candidates %d, stage 1 kept %d, pools %d/%d", len(corpus.candidates), len(s1), len(train), len(held))
    return Pools(train, held, len(corpus.candidates), len(s1))


@dataclass
class Built:
    corpus: Corpus
    base: LmPolicy
    reader: LmPolicy
    pools: Pools


def build(gen: GenConfig, mle: MleConfig = MleConfig(), split_ratio: float = 0.8, split_seed: int = 0,
          base: LmPolicy | None = None, reader: LmPolicy | None = None) -> Built:
    """Run everything; pre-trained ``base`` or ``reader`` checkpoints are reused when given."""
    corpus = synthesize_corpus(gen)
    if base is None:
        log.info("pre-training base model")
        base = pretrain_base(corpus, mle)
    if reader is None:
        log.info("pre-training reader model")
        reader = pretrain_reader(corpus, mle)
    return Built(corpus, base, reader, build_pools(corpus, base, reader, split_ratio, split_seed))
