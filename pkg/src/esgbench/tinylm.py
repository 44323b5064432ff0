"""A tiny causal transformer LM in plain numpy, small enough for a laptop CPU.

Forward and backward passes are hand-written in float64 so gradients are
exact, runs are bit-reproducible for a fixed seed, and low-rank adapters can
be trained while the base weights stay frozen (the training path never
writes to a base array).

Layout: learned token + position embeddings, pre-norm blocks of
multi-head causal attention and a GELU MLP, a final layer norm and an
untied unembedding. Adapters attach to the four attention projections of
each block; a projection with weight W (d_in x d_out, row convention)
computes ``Y = X @ W + (alpha/r) * (X @ A.T) @ B.T``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantlora import LoraAdapter

PAD, UNK, BOS, EOS = 0, 1, 2, 3
_SPECIALS = ["<pad>", "<unk>", "<bos>", "<eos>"]

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class TinyLMError(ValueError):
    pass


class TinyTokenizer:
    """Word-level tokenizer: lowercase words, digits and punctuation marks."""

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def train(cls, texts, max_vocab: int = 512) -> "TinyTokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in _WORD_RE.findall(text.lower()):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        vocab = _SPECIALS + ranked[: max_vocab - len(_SPECIALS)]
        return cls(vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK) for tok in _WORD_RE.findall(text.lower())]

    def decode(self, ids) -> str:
        words = [self.vocab[i] for i in ids if i not in (PAD, BOS, EOS)]
        return " ".join(words)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_dict(cls, d: dict) -> "TinyTokenizer":
        return cls(d["vocab"])


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_mlp: int = 256
    n_ctx: int = 160

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise TinyLMError("d_model must be divisible by n_heads")


def _gelu(x):
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (
        1.0 + 3 * 0.044715 * x**2
    )


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


_LN_EPS = 1e-5


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


class TinyCausalLM:
    def __init__(self, cfg: TinyLMConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, cfg: TinyLMConfig, seed: int = 0) -> "TinyCausalLM":
        rng = np.random.Generator(np.random.PCG64(seed))
        d, dm, v = cfg.d_model, cfg.d_mlp, cfg.vocab_size
        resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, 0.1, size=(v, d)),
            "pos_emb": rng.normal(0.0, 0.1, size=(cfg.n_ctx, d)),
            "lnf.g": np.ones(d),
            "lnf.b": np.zeros(d),
            "unemb": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, v)),
        }
        for i in range(cfg.n_layers):
            p[f"b{i}.ln1.g"] = np.ones(d)
            p[f"b{i}.ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv"):
                p[f"b{i}.attn.{name}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            p[f"b{i}.attn.wo"] = rng.normal(0.0, resid_scale / np.sqrt(d), size=(d, d))
            p[f"b{i}.ln2.g"] = np.ones(d)
            p[f"b{i}.ln2.b"] = np.zeros(d)
            p[f"b{i}.mlp.w_in"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, dm))
            p[f"b{i}.mlp.b_in"] = np.zeros(dm)
            p[f"b{i}.mlp.w_out"] = rng.normal(0.0, resid_scale / np.sqrt(dm), size=(dm, d))
            p[f"b{i}.mlp.b_out"] = np.zeros(d)
        return cls(cfg, p)

    @property
    def num_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def adapter_targets(self) -> list[str]:
        return [
            f"b{i}.attn.{name}"
            for i in range(self.cfg.n_layers)
            for name in ("wq", "wk", "wv", "wo")
        ]

    def quantizable_weights(self) -> list[str]:
        names = []
        for i in range(self.cfg.n_layers):
            names.extend(f"b{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo"))
            names.extend((f"b{i}.mlp.w_in", f"b{i}.mlp.w_out"))
        return names

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def copy(self) -> "TinyCausalLM":
        return TinyCausalLM(self.cfg, {k: v.copy() for k, v in self.params.items()})

    # -- forward ------------------------------------------------------------

    def _proj(self, x, name, adapters, caches, dropout_rng):
        w = self.params[name]
        out = x @ w
        ad = adapters.get(name) if adapters else None
        mask = None
        if ad is not None:
            xa = x
            if dropout_rng is not None and ad.dropout_p > 0.0:
                keep = dropout_rng.random(x.shape) >= ad.dropout_p
                mask = keep.astype(np.float64) / (1.0 - ad.dropout_p)
                xa = x * mask
            out = out + ad.scaling * ((xa @ ad.A.T) @ ad.B.T)
        if caches is not None:
            caches[name] = (x, mask)
        return out

    def forward(
        self,
        ids: np.ndarray,
        adapters: dict[str, LoraAdapter] | None = None,
        cache: dict | None = None,
        dropout_rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Logits (B, T, vocab). Pass `cache={}` to keep activations for backward."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > self.cfg.n_ctx:
            raise TinyLMError(f"sequence length {T} exceeds context {self.cfg.n_ctx}")
        p = self.params
        H = self.cfg.n_heads
        dh = self.cfg.d_model // H

        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        causal = np.triu(np.full((T, T), -np.inf), k=1)
        layers = []
        for i in range(self.cfg.n_layers):
            lc: dict = {"proj": {}}
            lc["x_in"] = x
            a, lc["ln1"] = _layernorm(x, p[f"b{i}.ln1.g"], p[f"b{i}.ln1.b"])
            lc["a"] = a
            q = self._proj(a, f"b{i}.attn.wq", adapters, lc["proj"], dropout_rng)
            k = self._proj(a, f"b{i}.attn.wk", adapters, lc["proj"], dropout_rng)
            v = self._proj(a, f"b{i}.attn.wv", adapters, lc["proj"], dropout_rng)
            q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + causal
            att = _softmax(scores)
            ctx = att @ v
            lc.update(q=q, k=k, v=v, att=att)
            merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, self.cfg.d_model)
            lc["merged"] = merged
            o = self._proj(merged, f"b{i}.attn.wo", adapters, lc["proj"], dropout_rng)
            x = x + o
            lc["x_mid"] = x
            a2, lc["ln2"] = _layernorm(x, p[f"b{i}.ln2.g"], p[f"b{i}.ln2.b"])
            lc["a2"] = a2
            pre = a2 @ p[f"b{i}.mlp.w_in"] + p[f"b{i}.mlp.b_in"]
            lc["pre"] = pre
            hmid = _gelu(pre)
            lc["h"] = hmid
            x = x + hmid @ p[f"b{i}.mlp.w_out"] + p[f"b{i}.mlp.b_out"]
            layers.append(lc)
        xf, lnf_cache = _layernorm(x, p["lnf.g"], p["lnf.b"])
        logits = xf @ p["unemb"]
        if cache is not None:
            cache.update(
                ids=ids, layers=layers, x_final=x, xf=xf, lnf=lnf_cache, shape=(B, T, H, dh)
            )
        return logits

    # -- loss and gradients --------------------------------------------------

    def loss_and_grads(
        self,
        ids: np.ndarray,
        target_mask: np.ndarray,
        adapters: dict[str, LoraAdapter] | None = None,
        train_base: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ):
        """Masked next-token cross-entropy and gradients.

        `target_mask` aligns with `ids`; position t contributes when
        target_mask[t] is true, scoring the prediction of ids[t] from the
        prefix ids[:t]. Returns (loss, grads) where grads maps adapter
        parameter keys "<target>.A"/"<target>.B" and, when train_base is
        set, every base parameter name.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        target_mask = np.asarray(target_mask, dtype=bool)
        if target_mask.ndim == 1:
            target_mask = target_mask[None, :]
        if target_mask.shape != ids.shape:
            raise TinyLMError("target_mask must align with ids")

        cache: dict = {}
        logits = self.forward(ids[:, :-1], adapters, cache=cache, dropout_rng=dropout_rng)
        targets = ids[:, 1:]
        tmask = target_mask[:, 1:].astype(np.float64)
        n_scored = tmask.sum()
        if n_scored == 0:
            raise TinyLMError("target_mask scores no positions")

        probs = _softmax(logits)
        B, T, V = probs.shape
        onehot_rows = np.arange(B)[:, None], np.arange(T)[None, :], targets
        logp = np.log(np.maximum(probs[onehot_rows], 1e-300))
        loss = float(-(logp * tmask).sum() / n_scored)

        dlogits = probs.copy()
        dlogits[onehot_rows] -= 1.0
        dlogits *= (tmask / n_scored)[..., None]

        grads = self._backward(dlogits, cache, adapters, train_base)
        return loss, grads

    def _backward(self, dlogits, cache, adapters, train_base):
        p = self.params
        grads: dict[str, np.ndarray] = {}
        B, T, H, dh = cache["shape"]
        d = self.cfg.d_model

        def add(name, value):
            if train_base:
                grads[name] = grads.get(name, 0) + value

        dxf = dlogits @ p["unemb"].T
        add("unemb", cache["xf"].reshape(-1, d).T @ dlogits.reshape(-1, dlogits.shape[-1]))
        dx, dg, db = _layernorm_backward(dxf, p["lnf.g"], cache["lnf"])
        add("lnf.g", dg)
        add("lnf.b", db)

        def proj_backward(name, dout, proj_cache):
            x_in, mask = proj_cache[name]
            w = p[name]
            dx_in = dout @ w.T
            add(name, x_in.reshape(-1, w.shape[0]).T @ dout.reshape(-1, w.shape[1]))
            ad = adapters.get(name) if adapters else None
            if ad is not None:
                xa = x_in if mask is None else x_in * mask
                s = ad.scaling
                dout2 = dout.reshape(-1, ad.d_out)
                xa2 = xa.reshape(-1, ad.d_in)
                grads[f"{name}.B"] = grads.get(f"{name}.B", 0) + s * dout2.T @ (xa2 @ ad.A.T)
                grads[f"{name}.A"] = grads.get(f"{name}.A", 0) + s * (dout2 @ ad.B).T @ xa2
                dxa = s * (dout @ ad.B) @ ad.A
                dx_in = dx_in + (dxa if mask is None else dxa * mask)
            return dx_in

        for i in reversed(range(self.cfg.n_layers)):
            lc = cache["layers"][i]
            # MLP branch
            dh_out = dx @ p[f"b{i}.mlp.w_out"].T
            add(f"b{i}.mlp.w_out", lc["h"].reshape(-1, self.cfg.d_mlp).T @ dx.reshape(-1, d))
            add(f"b{i}.mlp.b_out", dx.sum(axis=(0, 1)))
            dpre = dh_out * _gelu_grad(lc["pre"])
            da2 = dpre @ p[f"b{i}.mlp.w_in"].T
            add(f"b{i}.mlp.w_in", lc["a2"].reshape(-1, d).T @ dpre.reshape(-1, self.cfg.d_mlp))
            add(f"b{i}.mlp.b_in", dpre.sum(axis=(0, 1)))
            dx_mid, dg2, db2 = _layernorm_backward(da2, p[f"b{i}.ln2.g"], lc["ln2"])
            add(f"b{i}.ln2.g", dg2)
            add(f"b{i}.ln2.b", db2)
            dx = dx + dx_mid

            # attention branch
            dmerged = proj_backward(f"b{i}.attn.wo", dx, lc["proj"])
            dctx = dmerged.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            datt = dctx @ lc["v"].transpose(0, 1, 3, 2)
            dv = lc["att"].transpose(0, 1, 3, 2) @ dctx
            att = lc["att"]
            dscores = (datt - (datt * att).sum(axis=-1, keepdims=True)) * att
            dscores /= np.sqrt(dh)
            dq = dscores @ lc["k"]
            dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]

            def heads_to_flat(t):
                return t.transpose(0, 2, 1, 3).reshape(B, T, d)

            da = proj_backward(f"b{i}.attn.wq", heads_to_flat(dq), lc["proj"])
            da = da + proj_backward(f"b{i}.attn.wk", heads_to_flat(dk), lc["proj"])
            da = da + proj_backward(f"b{i}.attn.wv", heads_to_flat(dv), lc["proj"])
            dx_in, dg1, db1 = _layernorm_backward(da, p[f"b{i}.ln1.g"], lc["ln1"])
            add(f"b{i}.ln1.g", dg1)
            add(f"b{i}.ln1.b", db1)
            dx = dx + dx_in

        if train_base:
            ids = cache["ids"]
            demb = np.zeros_like(p["tok_emb"])
            np.add.at(demb, ids, dx)
            grads["tok_emb"] = demb
            grads["pos_emb"] = np.zeros_like(p["pos_emb"])
            grads["pos_emb"][: ids.shape[1]] = dx.sum(axis=0)
        return grads

    # -- generation -----------------------------------------------------------

    def generate(
        self,
        prompt_ids,
        max_new_tokens: int,
        temperature: float = 0.0,
        adapters: dict[str, LoraAdapter] | None = None,
        rng: np.random.Generator | None = None,
    ) -> list[int]:
        """Continue a prompt; greedy when temperature is 0. Stops after EOS."""
        if max_new_tokens < 1:
            raise TinyLMError("max_new_tokens must be >= 1")
        seq = list(prompt_ids)
        out: list[int] = []
        for _ in range(max_new_tokens):
            window = seq[-self.cfg.n_ctx :]
            logits = self.forward(np.array([window]), adapters)[0, -1]
            if temperature <= 0.0:
                nxt = int(np.argmax(logits))
            else:
                if rng is None:
                    rng = np.random.Generator(np.random.PCG64(0))
                probs = _softmax(logits / temperature)
                nxt = int(rng.choice(len(probs), p=probs))
            out.append(nxt)
            seq.append(nxt)
            if nxt == EOS:
                break
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path, tokenizer: TinyTokenizer | None = None) -> None:
        meta = {
            "cfg": vars(self.cfg) | {},
            "tokenizer": tokenizer.to_dict() if tokenizer else None,
        }
        arrays = {f"param::{k}": v for k, v in self.params.items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["TinyCausalLM", TinyTokenizer | None]:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            params = {
                k[len("param::") :]: data[k] for k in data.files if k.startswith("param::")
            }
        cfg = TinyLMConfig(**meta["cfg"])
        tok = TinyTokenizer.from_dict(meta["tokenizer"]) if meta["tokenizer"] else None
        return cls(cfg, params), tok


# ---------------------------------------------------------------------------
# Optimizer and gradient utilities
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1**self.t)
            vhat = self.v[key] / (1 - self.beta2**self.t)
            params[key] -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * params[key])


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale grads in place to a global-norm cap; returns (raw, clipped) norms."""
    raw = global_grad_norm(grads)
    if raw > max_norm and raw > 0:
        scale = max_norm / raw
        for g in grads.values():
            g *= scale
        return raw, max_norm
    return raw, raw


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to peak_lr, then cosine decay to 0.

    `step` is 1-based: the schedule value applies to optimizer step `step`.
    The peak is reached exactly at the last warmup step.
    """
    warmup = max(1, int(round(warmup_ratio * total_steps)))
    if step <= warmup:
        return peak_lr * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))
