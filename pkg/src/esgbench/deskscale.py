"""Desk-scale base model: a tiny pretrained causal LM the adapters fine-tune.

The benchmark's full-scale path starts from a multi-billion-parameter
pretrained model; at desk scale we stand up our own base by pretraining the
tiny transformer on generator-fresh prompt/label sequences from the same
distribution (never the fine-tuning split itself). Everything is seeded, so
the base is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Domain, LabeledExample
from .harness import ModelHandle, PromptRecord, _encode_record, build_prompt
from .synth import make_examples
from .tinylm import (
    PAD,
    AdamW,
    TinyCausalLM,
    TinyLMConfig,
    TinyTokenizer,
    clip_grads,
    cosine_lr,
)


@dataclass(frozen=True)
class PretrainConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_mlp: int = 256
    n_ctx: int = 96
    max_vocab: int = 512
    steps: int = 600
    batch_size: int = 16
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.05
    max_grad_norm: float = 1.0
    seed: int = 0


def _pad_batch(encoded: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Right-pad ids with PAD; the mask already marks scored positions."""
    width = max(len(ids) for ids, _ in encoded)
    ids = np.full((len(encoded), width), PAD, dtype=np.int64)
    mask = np.zeros((len(encoded), width), dtype=bool)
    for i, (seq, m) in enumerate(encoded):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = m
    return ids, mask


def pretrain_lm(
    model: TinyCausalLM,
    encoded: Sequence[tuple[np.ndarray, np.ndarray]],
    steps: int,
    batch_size: int,
    learning_rate: float,
    warmup_ratio: float = 0.05,
    max_grad_norm: float = 1.0,
    seed: int = 0,
) -> list[float]:
    """Full-parameter LM training on pre-encoded sequences; returns step losses."""
    rng = np.random.Generator(np.random.PCG64(seed))
    optimizer = AdamW(lr=learning_rate, weight_decay=0.0)
    losses = []
    for step in range(1, steps + 1):
        picks = rng.integers(0, len(encoded), size=batch_size)
        ids, mask = _pad_batch([encoded[int(i)] for i in picks])
        loss, grads = model.loss_and_grads(ids, mask, adapters=None, train_base=True)
        clip_grads(grads, max_grad_norm)
        lr = cosine_lr(step, steps, learning_rate, warmup_ratio)
        optimizer.step(model.params, grads, lr)
        losses.append(loss)
    return losses


def lm_sequences(
    records: Sequence[PromptRecord],
    tokenizer: TinyTokenizer,
    max_len: int,
    full_sequence_loss: bool = True,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Encode prompt records; pretraining scores every non-pad position."""
    out = []
    for rec in records:
        ids, mask = _encode_record(rec, tokenizer, max_len)
        if full_sequence_loss:
            mask = np.ones_like(mask)
        out.append((ids, mask))
    return out


def build_desk_base(
    domain: Domain,
    cfg: PretrainConfig = PretrainConfig(),
    corpus_texts: Sequence[str] = (),
    pretrain_pool: int = 1024,
) -> ModelHandle:
    """Pretrained tiny base for a domain.

    The tokenizer trains on the prompt-formatted pretraining pool plus any
    caller-supplied corpus texts, so fine-tuning sees no unknown words. The
    pool is drawn from the synthetic generator with a seed derived from the
    pretraining seed; it is disjoint from any split a caller makes with a
    different seed.
    """
    pool = make_examples(pretrain_pool, domain, seed=cfg.seed + 104729)
    records = [build_prompt(ex, mode="training") for ex in pool]
    texts = [r.prompt for r in records] + list(corpus_texts)
    tokenizer = TinyTokenizer.train(texts, max_vocab=cfg.max_vocab)
    model = TinyCausalLM.init(
        TinyLMConfig(
            vocab_size=tokenizer.vocab_size,
            d_model=cfg.d_model,
            n_heads=cfg.n_heads,
            n_layers=cfg.n_layers,
            d_mlp=cfg.d_mlp,
            n_ctx=cfg.n_ctx,
        ),
        seed=cfg.seed,
    )
    encoded = lm_sequences(records, tokenizer, max_len=cfg.n_ctx)
    pretrain_lm(
        model,
        encoded,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        warmup_ratio=cfg.warmup_ratio,
        max_grad_norm=cfg.max_grad_norm,
        seed=cfg.seed,
    )
    return ModelHandle(model=model, tokenizer=tokenizer)
