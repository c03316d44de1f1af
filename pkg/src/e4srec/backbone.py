"""Toy decoder-only language model used as the frozen backbone, plus LoRA.

The block layout follows the LLaMA family: pre-norm with rms_norm, causal
self-attention through q/k/v/o projections, and a SiLU-gated MLP built from
``gate_proj``, ``up_proj`` and ``down_proj``. Positions use a learned table.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from e4srec.autodiff import AdamState, DropoutRNG, LRSchedule, Tensor, adam_step, backward, eval_mode, lr_at
from e4srec.autodiff import functional as F
from e4srec.autodiff.init import normal
from e4srec.autodiff.tensor import parameters_hash
from e4srec.checkpoint import load_checkpoint, save_checkpoint
from e4srec.errors import ContractError, DimensionError, DivergenceError, NumericError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

_TOKEN_RE = re.compile(r"#+|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(":,.;!?)'")

ATTN_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP_PROJECTIONS = ("gate_proj", "up_proj", "down_proj")
DEFAULT_LORA_TARGETS = ("gate_proj", "down_proj", "up_proj")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; ids 0-3 are pad, bos, eos, unk."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 2048) -> "Vocabulary":
        from collections import Counter

        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: max_size - len(SPECIALS)]
        return cls(sorted(ranked))

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK_ID) for w in split_words(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        out = ""
        for i in ids:
            w = self.itos[i]
            if w in (PAD, BOS, EOS):
                continue
            if out and w not in _NO_SPACE_BEFORE:
                out += " "
            out += w
        return out


# weights -------------------------------------------------------------------

@dataclass
class BackboneConfig:
    vocab_size: int = 2048
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    context: int = 256


class BackboneWeights:
    """Named parameter arrays. Once frozen every array is read-only."""

    def __init__(self, config: BackboneConfig, vocab: Vocabulary, arrays: dict[str, np.ndarray], frozen: bool = False):
        self.config = config
        self.vocab = vocab
        self.arrays = arrays
        self.frozen = False
        self.merged_adapters: list[int] = []
        self._tensors: dict[str, Tensor] | None = None
        if frozen:
            self.freeze()

    @classmethod
    def initialize(cls, config: BackboneConfig, vocab: Vocabulary, seed: int = 0) -> "BackboneWeights":
        rng = np.random.default_rng(seed)
        d, h = config.dim, config.ffn_dim
        std = 0.02
        arrays = {"tok_emb": normal(rng, (config.vocab_size, d), std)}
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            arrays[pre + "attn_norm"] = np.ones(d, dtype=np.float32)
            for name in ATTN_PROJECTIONS:
                arrays[pre + "attn." + name] = normal(rng, (d, d), std)
            arrays[pre + "mlp_norm"] = np.ones(d, dtype=np.float32)
            arrays[pre + "mlp.gate_proj"] = normal(rng, (d, h), std)
            arrays[pre + "mlp.up_proj"] = normal(rng, (d, h), std)
            arrays[pre + "mlp.down_proj"] = normal(rng, (h, d), std / math.sqrt(2 * config.n_layers))
        arrays["norm"] = np.ones(d, dtype=np.float32)
        return cls(config, vocab, arrays)

    def freeze(self) -> None:
        for a in self.arrays.values():
            a.flags.writeable = False
        self.frozen = True
        self._tensors = None

    @property
    def tensors(self) -> dict[str, Tensor]:
        if self._tensors is None:
            self._tensors = {k: Tensor(v, requires_grad=not self.frozen, name=k) for k, v in self.arrays.items()}
        return self._tensors

    def projection_names(self, short: str) -> list[str]:
        group = "attn" if short in ATTN_PROJECTIONS else "mlp"
        return [f"layers.{i}.{group}.{short}" for i in range(self.config.n_layers)]

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def hash(self) -> str:
        return parameters_hash([self.arrays[k] for k in sorted(self.arrays)])

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "vocab": self.vocab.itos, "frozen": self.frozen}
        save_checkpoint(path, "backbone", self.arrays, meta)

    @classmethod
    def load(cls, path) -> "BackboneWeights":
        arrays, meta = load_checkpoint(path, "backbone")
        vocab = Vocabulary(meta["vocab"][len(SPECIALS):])
        return cls(BackboneConfig(**meta["config"]), vocab, arrays, frozen=meta["frozen"])


# LoRA ----------------------------------------------------------------------

@dataclass
class LoRAAdapter:
    """Low-rank deltas ``(alpha / r) * (x @ A) @ B`` on named projections."""

    r: int
    alpha: int
    dropout: float
    targets: tuple[str, ...]
    A: dict[str, Tensor] = field(default_factory=dict)
    B: dict[str, Tensor] = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def module_names(self) -> list[str]:
        return list(self.A)

    def parameters(self) -> list[Tensor]:
        return [t for name in self.A for t in (self.A[name], self.B[name])]

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))


def attach_lora(weights: BackboneWeights, targets: Sequence[str] = DEFAULT_LORA_TARGETS, r: int = 16,
                alpha: int = 16, dropout: float = 0.05, seed: int = 0) -> LoRAAdapter:
    """New adapter over every layer's copy of each target projection.

    A ~ N(0, 0.02^2), B = 0, so the adapter starts output-invisible.
    """
    known = set(ATTN_PROJECTIONS) | set(MLP_PROJECTIONS)
    unknown = [t for t in targets if t not in known]
    if unknown:
        raise ValueError(f"unknown LoRA target(s) {unknown}; expected names from {sorted(known)}")
    if r < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {r}")
    rng = np.random.default_rng(seed)
    adapter = LoRAAdapter(r=r, alpha=alpha, dropout=dropout, targets=tuple(targets))
    for short in targets:
        for name in weights.projection_names(short):
            d_in, d_out = weights.arrays[name].shape
            adapter.A[name] = Tensor(normal(rng, (d_in, r), 0.02), requires_grad=True, name=name + ".lora_A")
            adapter.B[name] = Tensor(np.zeros((r, d_out), dtype=np.float32), requires_grad=True, name=name + ".lora_B")
    return adapter


def merge_lora(weights: BackboneWeights, adapter: LoRAAdapter) -> BackboneWeights:
    """A new backbone with ``W + (alpha / r) * A @ B`` folded into each target."""
    if id(adapter) in weights.merged_adapters:
        raise ContractError("this adapter is already merged into these weights")
    arrays = {k: np.array(v, copy=True) for k, v in weights.arrays.items()}
    for name in adapter.module_names:
        if name not in arrays:
            raise DimensionError(f"merge_lora: backbone has no projection {name!r}")
        a, b = adapter.A[name].data, adapter.B[name].data
        w = arrays[name]
        if a.shape[0] != w.shape[0] or b.shape[1] != w.shape[1] or a.shape[1] != b.shape[0]:
            raise DimensionError(f"merge_lora: {name} has shape {w.shape}, adapter A {a.shape}, B {b.shape}")
        if np.any(b):
            arrays[name] = (w + np.float32(adapter.scaling) * (a @ b)).astype(np.float32)
    merged = BackboneWeights(weights.config, weights.vocab, arrays, frozen=weights.frozen)
    merged.merged_adapters = weights.merged_adapters + [id(adapter)]
    return merged


# forward -------------------------------------------------------------------

def _project(x: Tensor, name: str, W: dict[str, Tensor], adapter: LoRAAdapter | None, rng: DropoutRNG | None) -> Tensor:
    out = F.linear(x, W[name])
    if adapter is not None and name in adapter.A:
        xa = F.linear(F.dropout(x, adapter.dropout, rng), adapter.A[name])
        delta = F.linear(xa, adapter.B[name])
        out = out + (delta if adapter.scaling == 1.0 else delta * adapter.scaling)
    return out


def position_ids(key_mask: np.ndarray | None, batch: int, length: int) -> np.ndarray:
    if key_mask is None:
        return np.broadcast_to(np.arange(length), (batch, length))
    return np.maximum(np.cumsum(key_mask, axis=1) - 1, 0)


def rotary_tables(positions: np.ndarray, dim: int, n_heads: int, base: float = 10000.0):
    """cos/sin tables (B, T, dim) and the rotate-half matrix for per-head rotary encoding."""
    hd = dim // n_heads
    half = hd // 2
    inv = base ** (-np.arange(half) / half)
    ang = positions[..., None].astype(np.float64) * inv  # (B, T, half)
    cos = np.tile(np.concatenate([np.cos(ang)] * 2, axis=-1), n_heads).astype(np.float32)
    sin = np.tile(np.concatenate([np.sin(ang)] * 2, axis=-1), n_heads).astype(np.float32)
    rot = np.zeros((dim, dim), dtype=np.float32)
    for h in range(n_heads):
        o = h * hd
        for i in range(half):
            rot[o + half + i, o + i] = -1.0  # out[i] = -x[i + half]
            rot[o + i, o + half + i] = 1.0  # out[i + half] = x[i]
    return Tensor(cos), Tensor(sin), Tensor(rot)


def _rotate(x: Tensor, cos: Tensor, sin: Tensor, rot: Tensor) -> Tensor:
    return x * cos + F.matmul(x, rot) * sin


def backbone_forward(weights: BackboneWeights, embeds: Tensor, adapter: LoRAAdapter | None = None,
                     key_mask: np.ndarray | None = None, rng: DropoutRNG | None = None) -> Tensor:
    """Hidden states (B, T, d) for already-embedded inputs (B, T, d).

    ``key_mask`` marks real (non-padding) positions; positions are counted
    from the first real token of each row, so left padding is transparent.
    """
    c = weights.config
    if embeds.ndim != 3 or embeds.shape[-1] != c.dim:
        raise DimensionError(f"backbone_forward: expected (B, T, {c.dim}) embeddings, got {embeds.shape}")
    b, t, _ = embeds.shape
    if t > c.context:
        raise DimensionError(f"backbone_forward: sequence length {t} exceeds context window {c.context}")
    W = weights.tensors
    cos, sin, rot = rotary_tables(position_ids(key_mask, b, t), c.dim, c.n_heads)
    x = embeds
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        h = F.rms_norm(x, W[pre + "attn_norm"])
        q = _rotate(_project(h, pre + "attn.q_proj", W, adapter, rng), cos, sin, rot)
        k = _rotate(_project(h, pre + "attn.k_proj", W, adapter, rng), cos, sin, rot)
        v = _project(h, pre + "attn.v_proj", W, adapter, rng)
        att = F.causal_multihead_attention(q, k, v, c.n_heads, key_mask=key_mask)
        x = x + _project(att, pre + "attn.o_proj", W, adapter, rng)
        h = F.rms_norm(x, W[pre + "mlp_norm"])
        gate = F.silu(_project(h, pre + "mlp.gate_proj", W, adapter, rng))
        up = _project(h, pre + "mlp.up_proj", W, adapter, rng)
        x = x + _project(gate * up, pre + "mlp.down_proj", W, adapter, rng)
    return F.rms_norm(x, W["norm"])


def embed_tokens(weights: BackboneWeights, ids: np.ndarray) -> Tensor:
    return F.embedding_lookup(weights.tensors["tok_emb"], ids)


def lm_logits(weights: BackboneWeights, hidden: Tensor) -> Tensor:
    return F.matmul(hidden, F.transpose(weights.tensors["tok_emb"]))


# toy instruction corpus ----------------------------------------------------

ALPACA_TEMPLATE = "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n{response}"

_SYLLABLES = ("ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su", "do", "fa", "gu", "hi", "ja", "bo")

REC_INSTRUCTION = "Given the user's interaction history in chronological order, predict the next item."


def lexicon(size: int = 160, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    words: set[str] = set()
    while len(words) < size:
        words.add("".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4)))))
    return sorted(words)


CORPUS_SIZE = 18000
TASK_WEIGHTS = {"last": 0.3, "successor": 0.3, "first": 0.1, "reverse": 0.1, "pattern": 0.2}


def instruction_corpus(n: int = CORPUS_SIZE, seed: int = 0) -> list[str]:
    """Seeded Alpaca-format texts exercising copy, recall and next-word prediction.

    The ``successor`` task walks a fixed word-to-word successor table and asks
    for the next word under the recommendation instruction, so the response
    depends on the last input token the same way a next-item answer does.
    """
    rng = np.random.default_rng(seed)
    words = lexicon(seed=seed)
    successor = rng.permutation(len(words))
    kinds = list(TASK_WEIGHTS)
    probs = np.array(list(TASK_WEIGHTS.values()))

    def pick(k):
        return [words[i] for i in rng.choice(len(words), size=k, replace=False)]

    texts = []
    for _ in range(n):
        task = kinds[int(rng.choice(len(kinds), p=probs))]
        if task == "last":
            xs = pick(int(rng.integers(3, 12)))
            instr, inp, resp = "Repeat the last word of the input.", " ".join(xs), xs[-1]
        elif task == "first":
            xs = pick(int(rng.integers(3, 12)))
            instr, inp, resp = "Repeat the first word of the input.", " ".join(xs), xs[0]
        elif task == "reverse":
            xs = pick(int(rng.integers(2, 6)))
            instr, inp, resp = "Reverse the following words.", " ".join(xs), " ".join(xs[::-1])
        elif task == "successor":
            walk = [int(rng.integers(len(words)))]
            for _ in range(int(rng.integers(3, 12))):
                walk.append(int(successor[walk[-1]]))
            instr, inp, resp = REC_INSTRUCTION, " ".join(words[i] for i in walk[:-1]), words[walk[-1]]
        else:
            period = pick(int(rng.integers(2, 5)))
            length = int(rng.integers(len(period) + 2, 20))
            seq = [period[i % len(period)] for i in range(length + 1)]
            instr, inp, resp = "Continue the pattern with the next word.", ", ".join(seq[:-1]), seq[-1]
        texts.append(ALPACA_TEMPLATE.format(instruction=instr, input=inp, response=resp))
    return texts


# pretraining ---------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 1
    lr: float = 5e-3
    batch_size: int = 32
    warmup_steps: int = 20
    weight_decay: float = 0.0
    seed: int = 0


def _encode(vocab: Vocabulary, texts: Sequence[str], context: int) -> list[list[int]]:
    return [([BOS_ID] + vocab.tokenize(t) + [EOS_ID])[:context + 1] for t in texts]


def _lm_batch(seqs: Sequence[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in seqs) - 1
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    tgt = np.full((len(seqs), length), -1, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s) - 1] = s[:-1]
        tgt[r, : len(s) - 1] = s[1:]
    return ids, tgt


def lm_loss(weights: BackboneWeights, ids: np.ndarray, tgt: np.ndarray, rng: DropoutRNG | None = None) -> Tensor:
    hidden = backbone_forward(weights, embed_tokens(weights, ids), rng=rng)
    return F.cross_entropy_with_logits(lm_logits(weights, hidden), tgt)


def perplexity(weights: BackboneWeights, texts: Sequence[str], batch_size: int = 64) -> float:
    seqs = _encode(weights.vocab, texts, weights.config.context)
    total, count = 0.0, 0
    with eval_mode():
        for lo in range(0, len(seqs), batch_size):
            ids, tgt = _lm_batch(seqs[lo:lo + batch_size])
            n = int((tgt >= 0).sum())
            total += lm_loss(weights, ids, tgt).item() * n
            count += n
    return math.exp(total / count)


def pretrain_backbone(corpus: Sequence[str], config: BackboneConfig | None = None,
                      train: PretrainConfig | None = None, vocab: Vocabulary | None = None,
                      extra_words: Iterable[str] = ()) -> tuple[BackboneWeights, list[dict]]:
    """Next-token training on Alpaca-format texts; returns frozen weights."""
    train = train or PretrainConfig()
    if vocab is None:
        vocab = Vocabulary.build(list(corpus) + [ALPACA_TEMPLATE, REC_INSTRUCTION, " ".join(extra_words)])
    config = config or BackboneConfig()
    config = BackboneConfig(**{**asdict(config), "vocab_size": len(vocab)})
    weights = BackboneWeights.initialize(config, vocab, seed=train.seed)
    params = list(weights.tensors.values())
    seqs = _encode(vocab, corpus, config.context)
    rng = np.random.default_rng(train.seed + 1)
    steps_per_epoch = math.ceil(len(seqs) / train.batch_size)
    schedule = LRSchedule(train.lr, min(train.warmup_steps, steps_per_epoch * train.epochs),
                          steps_per_epoch * train.epochs)
    state = AdamState(weight_decay=train.weight_decay)
    history, step = [], 0
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for lo in range(0, len(order), train.batch_size):
            ids, tgt = _lm_batch([seqs[i] for i in order[lo:lo + train.batch_size]])
            try:
                loss = lm_loss(weights, ids, tgt)
            except NumericError as exc:
                raise DivergenceError(f"backbone pretraining diverged at step {step}: {exc}") from exc
            adam_step(params, backward(loss), state, lr_at(schedule, step))
            step += 1
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "final_loss": float(np.mean(losses[-20:]))})
        log.info("backbone %s", history[-1])
    weights.freeze()
    return weights, history
