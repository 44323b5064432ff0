"""Prompt construction, adapter fine-tuning, generation, label extraction.

The run configuration defaults to the benchmark's published table of
hyperparameters (4-bit nf4 base with nested quantization, rank-64 adapters,
effective batch 8, cosine schedule with 3% warmup, gradient clipping at 0.3).
The ``optimizer`` key accepts the table's ``paged_adamw_32bit`` name and maps
it to a standard AdamW; optimizer-state paging is out of scope here.

Fine-tuning touches only adapter matrices: the base model's parameter arrays
are never written, which the training log's before/after weight hash records.
Reference runs compute in float64; the fp16/bf16 flags are validated and
echoed with a precision note rather than changing the arithmetic.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Domain, LabeledExample, relabel_to_text
from .metrics import WeightedReport, weighted_report
from .quantlora import (
    LoraAdapter,
    build_nf4_codebook,
    dequantize_tensor,
    init_adapter,
    quantize_block,
    quantize_tensor,
)
from .tinylm import (
    BOS,
    EOS,
    AdamW,
    TinyCausalLM,
    TinyTokenizer,
    clip_grads,
    cosine_lr,
)

ADAPTER_FORMAT_VERSION = 1

PROMPT_TEMPLATE = (
    "Analyze the following text and decide whether it is about {topic}. "
    "Return the label.\nText: {text}\nLabel: "
)

DOMAIN_TOPICS = {
    Domain.ENVIRONMENTAL: "environmental topics",
    Domain.SOCIAL: "social topics",
    Domain.GOVERNANCE: "governance topics",
}

ABSTAIN_KEYWORD = "none"


class HarnessError(ValueError):
    pass


class EmptyTrainingSet(HarnessError):
    pass


class EmptyTestSet(HarnessError):
    pass


class TokenizationOverflow(HarnessError):
    pass


class NonFiniteLoss(HarnessError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QloraRunConfig:
    load_4bit: bool = True
    double_quant: bool = True
    quant_type: str = "nf4"
    per_device_batch: int = 1
    grad_accum_steps: int = 8
    learning_rate: float = 2.0e-4
    weight_decay: float = 0.001
    task: str = "CAUSAL_LM"
    epochs: int = 3
    lora_r: int = 64
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    optimizer: str = "paged_adamw_32bit"
    warmup_ratio: float = 0.03
    max_grad_norm: float = 0.3
    lr_schedule: str = "cosine"
    fp16: bool = True
    bf16: bool = False
    max_seq_len: int = 1024

    def __post_init__(self):
        if self.quant_type != "nf4":
            raise HarnessError(f"quant_type must be 'nf4', got {self.quant_type!r}")
        if self.per_device_batch < 1 or self.grad_accum_steps < 1:
            raise HarnessError("batch and accumulation steps must be >= 1")
        if self.learning_rate <= 0:
            raise HarnessError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise HarnessError("weight_decay must be non-negative")
        if self.epochs < 1:
            raise HarnessError("epochs must be >= 1")
        if self.lora_r < 1:
            raise HarnessError("lora_r must be >= 1")
        if self.lora_alpha <= 0:
            raise HarnessError("lora_alpha must be positive")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise HarnessError("lora_dropout must be in [0, 1)")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise HarnessError("warmup_ratio must be in [0, 1)")
        if self.max_grad_norm <= 0:
            raise HarnessError("max_grad_norm must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise HarnessError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.fp16 and self.bf16:
            raise HarnessError("fp16 and bf16 are mutually exclusive")
        if self.max_seq_len < 8:
            raise HarnessError("max_seq_len too small")

    def fingerprint(self) -> dict:
        values = asdict(self)
        digest = hashlib.sha256(
            json.dumps(values, sort_keys=True).encode()
        ).hexdigest()
        return values | {"config_sha256": digest}


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 8
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise HarnessError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise HarnessError("temperature must be non-negative")


@dataclass(frozen=True)
class PromptRecord:
    prompt: str
    completion: str
    domain: Domain


@dataclass
class ModelHandle:
    """A causal LM plus its tokenizer; anything with this surface plugs in."""

    model: TinyCausalLM
    tokenizer: TinyTokenizer


def build_prompt(example: LabeledExample, mode: str = "training") -> PromptRecord:
    if mode not in ("training", "inference"):
        raise HarnessError(f"mode must be training|inference, got {mode!r}")
    head = PROMPT_TEMPLATE.format(topic=DOMAIN_TOPICS[example.domain], text=example.text)
    if mode == "training":
        answer = relabel_to_text(example.label, example.domain)
        return PromptRecord(prompt=head + answer, completion=answer, domain=example.domain)
    return PromptRecord(prompt=head, completion="", domain=example.domain)


def _encode_record(
    record: PromptRecord, tokenizer: TinyTokenizer, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and completion mask, truncating the document body from the
    left when the sequence would overflow. The instruction and answer cue are
    never truncated."""
    head = PROMPT_TEMPLATE.format(topic=DOMAIN_TOPICS[record.domain], text="\x00")
    prefix_str, suffix_str = head.split("\x00")
    body_str = record.prompt[len(prefix_str) : len(record.prompt) - len(suffix_str) - len(record.completion)]

    prefix = tokenizer.encode(prefix_str)
    suffix = tokenizer.encode(suffix_str)
    completion = tokenizer.encode(record.completion) if record.completion else []
    body = tokenizer.encode(body_str)

    # BOS + prefix + body + suffix + completion + EOS
    fixed = 1 + len(prefix) + len(suffix) + len(completion) + (1 if completion else 0)
    if fixed > max_len:
        raise TokenizationOverflow(
            f"instruction needs {fixed} tokens, limit is {max_len}"
        )
    budget = max_len - fixed
    if len(body) > budget:
        body = body[len(body) - budget :]

    ids = [BOS] + prefix + body + suffix + completion + ([EOS] if completion else [])
    mask = [False] * (1 + len(prefix) + len(body) + len(suffix)) + [True] * (
        len(completion) + (1 if completion else 0)
    )
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=bool)


# ---------------------------------------------------------------------------
# QLoRA preparation: 4-bit base + fresh adapters
# ---------------------------------------------------------------------------


def quantize_dequantize(
    w: np.ndarray, double_quant: bool, block_size: int = 64, block_size2: int = 256
) -> np.ndarray:
    """Round a weight matrix through its 4-bit block representation."""
    if double_quant:
        return dequantize_tensor(quantize_tensor(w, block_size=block_size, block_size2=block_size2))
    codebook = build_nf4_codebook()
    flat = np.asarray(w, dtype=np.float64).ravel()
    out = np.empty_like(flat)
    for start in range(0, flat.size, block_size):
        qb = quantize_block(flat[start : start + block_size], codebook, block_size)
        out[start : start + qb.codes.size] = codebook.levels[qb.codes] * qb.absmax
    return out.reshape(w.shape)


def prepare_qlora(
    handle: ModelHandle, cfg: QloraRunConfig, seed: int = 0
) -> tuple[ModelHandle, dict[str, LoraAdapter]]:
    """Copy the base model, store its linear weights through the 4-bit
    codebook when load_4bit is set, and attach zero-initialised adapters to
    every attention projection."""
    model = handle.model.copy()
    if cfg.load_4bit:
        for name in model.quantizable_weights():
            model.params[name] = quantize_dequantize(model.params[name], cfg.double_quant)
    rng = np.random.Generator(np.random.PCG64(seed))
    adapters = {}
    for name in model.adapter_targets():
        d_out, d_in = model.params[name].shape[1], model.params[name].shape[0]
        adapters[name] = init_adapter(
            d_in=d_in,
            d_out=d_out,
            r=cfg.lora_r,
            alpha=cfg.lora_alpha,
            dropout_p=cfg.lora_dropout,
            rng=rng,
        )
    return ModelHandle(model=model, tokenizer=handle.tokenizer), adapters


# ---------------------------------------------------------------------------
# Training log and adapter checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    config: dict
    seed: int
    precision_note: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    base_hash_before: str = ""
    base_hash_after: str = ""

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "config", "seed": self.seed,
                             "precision_note": self.precision_note, **self.config})]
        for rec in self.steps:
            lines.append(json.dumps({"kind": "step", **rec}))
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **rec}))
        lines.append(json.dumps({
            "kind": "summary",
            "wall_clock_s": self.wall_clock_s,
            "base_hash_before": self.base_hash_before,
            "base_hash_after": self.base_hash_after,
        }))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


@dataclass
class AdapterCheckpoint:
    adapters: dict[str, LoraAdapter]
    config: dict
    state_hash: str
    format_version: int = ADAPTER_FORMAT_VERSION

    @staticmethod
    def _hash(adapters: dict[str, LoraAdapter]) -> str:
        h = hashlib.sha256()
        for name in sorted(adapters):
            ad = adapters[name]
            h.update(name.encode())
            h.update(ad.A.tobytes())
            h.update(ad.B.tobytes())
        return h.hexdigest()

    @classmethod
    def capture(cls, adapters: dict[str, LoraAdapter], config: dict) -> "AdapterCheckpoint":
        return cls(adapters=adapters, config=config, state_hash=cls._hash(adapters))

    def save(self, path: str | Path) -> None:
        meta = {
            "format_version": self.format_version,
            "config": self.config,
            "state_hash": self.state_hash,
            "adapters": {
                name: {"r": ad.r, "alpha": ad.alpha, "dropout_p": ad.dropout_p}
                for name, ad in self.adapters.items()
            },
        }
        arrays = {}
        for name, ad in self.adapters.items():
            arrays[f"A::{name}"] = ad.A
            arrays[f"B::{name}"] = ad.B
        np.savez(
            path,
            __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            **arrays,
        )

    @classmethod
    def load(cls, path: str | Path) -> "AdapterCheckpoint":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta["format_version"] != ADAPTER_FORMAT_VERSION:
                raise HarnessError(f"unsupported adapter format {meta['format_version']}")
            adapters = {}
            for name, info in meta["adapters"].items():
                adapters[name] = LoraAdapter(
                    A=data[f"A::{name}"],
                    B=data[f"B::{name}"],
                    r=info["r"],
                    alpha=info["alpha"],
                    dropout_p=info["dropout_p"],
                )
        return cls(adapters=adapters, config=meta["config"], state_hash=meta["state_hash"])


# ---------------------------------------------------------------------------
# Fine-tuning loop
# ---------------------------------------------------------------------------


def run_finetune(
    handle: ModelHandle,
    train_records: Sequence[PromptRecord],
    eval_records: Sequence[PromptRecord],
    cfg: QloraRunConfig = QloraRunConfig(),
    seed: int = 0,
) -> tuple[AdapterCheckpoint, TrainingLog]:
    if not train_records:
        raise EmptyTrainingSet("no training records")
    for rec in train_records:
        if not rec.completion:
            raise HarnessError("training records need a completion")

    t_start = time.perf_counter()
    prepared, adapters = prepare_qlora(handle, cfg, seed)
    model, tokenizer = prepared.model, prepared.tokenizer
    max_len = min(cfg.max_seq_len, model.cfg.n_ctx)

    encoded = [_encode_record(r, tokenizer, max_len) for r in train_records]
    encoded_eval = [_encode_record(r, tokenizer, max_len) for r in eval_records]

    ss = np.random.SeedSequence(seed)
    shuffle_ss, dropout_ss = ss.spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_ss))

    n = len(encoded)
    micro = cfg.per_device_batch
    micro_per_step = cfg.grad_accum_steps
    examples_per_step = micro * micro_per_step
    steps_per_epoch = math.ceil(n / examples_per_step)
    total_steps = steps_per_epoch * cfg.epochs

    trainable = {}
    for name, ad in adapters.items():
        trainable[f"{name}.A"] = ad.A
        trainable[f"{name}.B"] = ad.B
    optimizer = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    log = TrainingLog(
        config=cfg.fingerprint(),
        seed=seed,
        precision_note=(
            "reference arithmetic is float64; fp16/bf16 flags are recorded, "
            "not applied"
        ),
        base_hash_before=model.param_hash(),
    )

    step_idx = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for group_start in range(0, n, examples_per_step):
            group = order[group_start : group_start + examples_per_step]
            acc: dict[str, np.ndarray] = {}
            losses = []
            for pos in range(0, len(group), micro):
                chunk = group[pos : pos + micro]
                for j in chunk:
                    ids, mask = encoded[j]
                    loss, grads = model.loss_and_grads(
                        ids, mask, adapters, dropout_rng=dropout_rng
                    )
                    if not np.isfinite(loss):
                        raise NonFiniteLoss(f"loss became {loss} at step {step_idx + 1}")
                    losses.append(loss)
                    for key, g in grads.items():
                        acc[key] = acc.get(key, 0) + g
            for key in acc:
                acc[key] = acc[key] / len(group)
            raw_norm, clipped_norm = clip_grads(acc, cfg.max_grad_norm)
            step_idx += 1
            if cfg.lr_schedule == "cosine":
                lr = cosine_lr(step_idx, total_steps, cfg.learning_rate, cfg.warmup_ratio)
            else:
                lr = cfg.learning_rate
            optimizer.step(trainable, acc, lr)
            log.steps.append(
                {
                    "step": step_idx,
                    "epoch": epoch + 1,
                    "loss": float(np.mean(losses)),
                    "lr": lr,
                    "grad_norm": raw_norm,
                    "grad_norm_clipped": clipped_norm,
                }
            )
        epoch_steps = log.steps[-steps_per_epoch:]
        record = {
            "epoch": epoch + 1,
            "mean_train_loss": float(np.mean([s["loss"] for s in epoch_steps])),
        }
        if encoded_eval:
            eval_losses = []
            for ids, mask in encoded_eval:
                loss, _ = model.loss_and_grads(ids, mask, adapters)
                eval_losses.append(loss)
            record["mean_eval_loss"] = float(np.mean(eval_losses))
        log.epochs.append(record)

    log.base_hash_after = model.param_hash()
    log.wall_clock_s = time.perf_counter() - t_start
    checkpoint = AdapterCheckpoint.capture(adapters, cfg.fingerprint())
    return checkpoint, log


# ---------------------------------------------------------------------------
# Generation, label extraction, evaluation
# ---------------------------------------------------------------------------


def generate(
    handle: ModelHandle,
    adapters: dict[str, LoraAdapter] | None,
    record: PromptRecord,
    gen: GenerationConfig = GenerationConfig(),
) -> str:
    """Generated continuation text for an inference-mode prompt."""
    if record.completion:
        raise HarnessError("generation expects an inference-mode prompt")
    ids = [BOS] + handle.tokenizer.encode(record.prompt)
    window = min(handle.model.cfg.n_ctx - gen.max_new_tokens, len(ids))
    ids = ids[-window:]
    rng = np.random.Generator(np.random.PCG64(gen.seed))
    out = handle.model.generate(
        ids,
        max_new_tokens=gen.max_new_tokens,
        temperature=gen.temperature,
        adapters=adapters,
        rng=rng,
    )
    return handle.tokenizer.decode(out)


def extract_label(generated: str, domain: Domain) -> int:
    """Earliest keyword wins; longer phrase first at equal positions; no
    recognized keyword encodes as -1."""
    hay = generated.lower()
    phrases = [
        (f"not {domain.value.lower()}", 0),
        (domain.value.lower(), 1),
        (ABSTAIN_KEYWORD, -1),
    ]
    best: tuple[int, int, int] | None = None  # (position, -len, code)
    for phrase, code in phrases:
        pos = hay.find(phrase)
        if pos < 0:
            continue
        key = (pos, -len(phrase), code)
        if best is None or key < best:
            best = key
    return best[2] if best else -1


def evaluate_model(
    predict_fn: Callable[[str], int], test: Sequence[LabeledExample]
) -> WeightedReport:
    """Score encoded predictions {1, 0, -1} against binary gold labels."""
    if not test:
        raise EmptyTestSet("empty test set")
    gold = [ex.label for ex in test]
    pred = [predict_fn(ex.text) for ex in test]
    for p in pred:
        if p not in (1, 0, -1):
            raise HarnessError(f"prediction {p!r} outside {{1, 0, -1}}")
    return weighted_report(gold, pred, classes=[0, 1])


def llm_predict_fn(
    handle: ModelHandle,
    adapters: dict[str, LoraAdapter] | None,
    domain: Domain,
    gen: GenerationConfig = GenerationConfig(),
) -> Callable[[str], int]:
    def predict(text: str) -> int:
        record = build_prompt(
            LabeledExample(text=text, label=0, domain=domain), mode="inference"
        )
        return extract_label(generate(handle, adapters, record, gen), domain)

    return predict
