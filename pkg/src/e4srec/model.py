"""Item IDs injected into a frozen language model, scored over the whole catalog.

The prompt is the Alpaca layout with the user's item history in the input
slot. Text tokens go through the backbone's word table; each item id goes
through ``E`` (frozen) and the trainable ``W_in`` and occupies one position.
The hidden state at the final response-marker position times ``W_out`` gives
one logit per catalog item.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from e4srec.autodiff import AdamState, DropoutRNG, LRSchedule, Tensor, adam_step, backward, eval_mode, lr_at
from e4srec.autodiff import functional as F
from e4srec.autodiff.init import xavier_uniform
from e4srec.backbone import (
    BOS_ID, DEFAULT_LORA_TARGETS, PAD_ID, REC_INSTRUCTION, BackboneWeights, LoRAAdapter, attach_lora,
    backbone_forward, embed_tokens,
)
from e4srec.checkpoint import load_checkpoint, save_checkpoint
from e4srec.data import SplitDataset, truncate
from e4srec.errors import ContractError, DimensionError, DivergenceError, NumericError, OutOfRangeError
from e4srec.evaluation import validation_hr
from e4srec.seqrec import ItemEmbeddingTable

log = logging.getLogger(__name__)

INSTRUCTION = REC_INSTRUCTION


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str = INSTRUCTION
    input_marker: str = "### Input:"
    response_marker: str = "### Response:"
    instruction_marker: str = "### Instruction:"

    def render(self, vocab) -> tuple[list[int], list[int]]:
        """Token ids before and after the item slot."""
        prefix = [BOS_ID] + vocab.tokenize(f"{self.instruction_marker} {self.instruction} {self.input_marker}")
        suffix = vocab.tokenize(self.response_marker)
        return prefix, suffix

    def segments(self, vocab, n_items: int) -> list[tuple[str, list[int]]]:
        """Ordered (kind, ids) segments; item slots hold -1 placeholders."""
        prefix, suffix = self.render(vocab)
        return [("text", prefix), ("items", [-1] * n_items), ("text", suffix)]

    def text(self, item_placeholder: str = "{items}") -> str:
        return f"{self.instruction_marker}\n{self.instruction}\n\n{self.input_marker}\n{item_placeholder}\n\n{self.response_marker}\n"


@dataclass
class TrainConfig:
    """Defaults are the Beauty column of the published training configuration."""

    epochs: int = 3
    learning_rate: float = 3e-4
    batch_size: int = 16
    lora_rank: int = 16
    lora_alpha: int = 16
    lora_dropout: float = 0.05
    lora_modules: tuple[str, ...] = DEFAULT_LORA_TARGETS
    lr_scheduler: str = "cosine"
    weight_decay: float = 0.1
    warmup_steps: int = 100
    max_iterations: int | None = None
    max_len: int = 50
    all_prefixes: bool = False
    random_prefix: bool = False  # redraw one cut point per user each epoch
    eval_every: int = 1  # validation HR@10 every n epochs; the final epoch is always scored
    seed: int = 0

    @classmethod
    def from_mapping(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown training config key(s): {sorted(unknown)}")
        obj = dict(obj)
        if "lora_modules" in obj:
            obj["lora_modules"] = tuple(obj["lora_modules"])
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            obj = tomllib.loads(path.read_text())
        else:
            obj = json.loads(path.read_text())
        return cls.from_mapping(obj.get("train", obj))

    def to_json(self) -> dict:
        d = asdict(self)
        d["lora_modules"] = list(self.lora_modules)
        return d


class InputProjection:
    """W_in, shape (d_s, d_k): ID embedding to backbone width."""

    def __init__(self, weight: np.ndarray):
        if weight.ndim != 2:
            raise DimensionError(f"W_in must be 2-D, got shape {weight.shape}")
        self.weight = Tensor(weight, requires_grad=True, name="W_in")

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight)


class OutputProjection:
    """W_out, shape (d_k, N): column j scores item j. No bias."""

    def __init__(self, weight: np.ndarray):
        if weight.ndim != 2:
            raise DimensionError(f"W_out must be 2-D, got shape {weight.shape}")
        self.weight = Tensor(weight, requires_grad=True, name="W_out")

    def __call__(self, h: Tensor) -> Tensor:
        return F.matmul(h, self.weight)


class E4SRecModel:
    """Frozen backbone + frozen E; trainable adapter, W_in and W_out.

    With ``no_llm`` the backbone is bypassed entirely: the scores are the mean
    projected ID embedding of the history times ``W_out``.
    """

    def __init__(self, backbone: BackboneWeights | None, embeddings: ItemEmbeddingTable,
                 adapter: LoRAAdapter | None, w_in: np.ndarray, w_out: np.ndarray,
                 template: PromptTemplate | None = None, no_llm: bool = False, max_len: int = 50,
                 seed: int = 0):
        if not no_llm and backbone is None:
            raise ContractError("a backbone is required unless no_llm is set")
        self.backbone = backbone
        self.embeddings = embeddings
        self.adapter = adapter
        self.E = Tensor(embeddings.matrix, requires_grad=False, name="E")
        self.input_projection = InputProjection(w_in)
        self.output_projection = OutputProjection(w_out)
        if w_in.shape[0] != embeddings.dim:
            raise DimensionError(f"W_in has {w_in.shape[0]} rows but E is {embeddings.dim} wide")
        if w_out.shape != (w_in.shape[1], embeddings.n_items):
            raise DimensionError(f"W_out has shape {w_out.shape}, expected {(w_in.shape[1], embeddings.n_items)}")
        if backbone is not None and backbone.config.dim != w_in.shape[1]:
            raise DimensionError(f"W_in maps to {w_in.shape[1]} but the backbone is {backbone.config.dim} wide")
        self.template = template or PromptTemplate()
        self.no_llm = no_llm
        self.max_len = max_len
        self.dropout_rng = DropoutRNG(seed + 7)
        if backbone is not None:
            self.prefix, self.suffix = self.template.render(backbone.vocab)
        else:
            self.prefix, self.suffix = [], []

    @classmethod
    def create(cls, backbone: BackboneWeights | None, embeddings: ItemEmbeddingTable,
               config: TrainConfig | None = None, no_llm: bool = False, d_k: int | None = None) -> "E4SRecModel":
        config = config or TrainConfig()
        rng = np.random.default_rng(config.seed)
        if backbone is not None:
            d_k = backbone.config.dim
        elif d_k is None:
            raise ContractError("d_k must be given when there is no backbone")
        adapter = None
        if not no_llm:
            adapter = attach_lora(backbone, config.lora_modules, r=config.lora_rank, alpha=config.lora_alpha,
                                  dropout=config.lora_dropout, seed=config.seed)
        w_in = xavier_uniform(rng, (embeddings.dim, d_k))
        w_out = xavier_uniform(rng, (d_k, embeddings.n_items))
        return cls(backbone, embeddings, adapter, w_in, w_out, no_llm=no_llm, max_len=config.max_len, seed=config.seed)

    @property
    def w_in(self) -> Tensor:
        return self.input_projection.weight

    @property
    def w_out(self) -> Tensor:
        return self.output_projection.weight

    @property
    def n_items(self) -> int:
        return self.embeddings.n_items

    @property
    def d_k(self) -> int:
        return self.w_in.shape[1]

    def trainable_parameters(self) -> list[Tensor]:
        params = [self.w_in, self.w_out]
        if self.adapter is not None:
            params = self.adapter.parameters() + params
        return params

    def bundle_param_count(self) -> int:
        return int(self.E.data.size + sum(p.data.size for p in self.trainable_parameters()))

    # input assembly ----------------------------------------------------------

    def _check_ids(self, histories: Sequence[Sequence[int]]) -> None:
        for h in histories:
            if len(h) == 0:
                raise ContractError("item history must not be empty")
        bad = sorted({int(i) for h in histories for i in h if not 0 <= int(i) < self.n_items})
        if bad:
            raise OutOfRangeError(f"item id(s) outside the catalog [0, {self.n_items}): {bad}")

    def project_items(self, ids: np.ndarray) -> Tensor:
        return self.input_projection(F.embedding_lookup(self.E, ids))

    def assemble_input(self, histories: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Left-padded (B, T, d_k) prompt embeddings and the (B, T) real-token mask."""
        self._check_ids(histories)
        hs = [truncate(h, self.max_len) for h in histories]
        words = sorted(set(self.prefix) | set(self.suffix) | {PAD_ID})
        slot = {w: j for j, w in enumerate(words)}
        flat = np.array([i for h in hs for i in h], dtype=np.int64)
        rows = F.concat([embed_tokens(self.backbone, np.array(words)), self.project_items(flat)], axis=0)
        lengths = [len(self.prefix) + len(h) + len(self.suffix) for h in hs]
        T = max(lengths)
        index = np.full((len(hs), T), slot[PAD_ID], dtype=np.int64)
        mask = np.zeros((len(hs), T), dtype=bool)
        offset = len(words)
        for r, h in enumerate(hs):
            start = T - lengths[r]
            seq = ([slot[w] for w in self.prefix] + list(range(offset, offset + len(h)))
                   + [slot[w] for w in self.suffix])
            index[r, start:] = seq
            mask[r, start:] = True
            offset += len(h)
        return F.embedding_lookup(rows, index), mask

    # scoring -----------------------------------------------------------------

    def final_hidden(self, histories: Sequence[Sequence[int]], rng: DropoutRNG | None = None) -> Tensor:
        if self.no_llm:
            self._check_ids(histories)
            hs = [truncate(h, self.max_len) for h in histories]
            flat = np.array([i for h in hs for i in h], dtype=np.int64)
            avg = np.zeros((len(hs), len(flat)), dtype=np.float32)
            pos = 0
            for r, h in enumerate(hs):
                avg[r, pos:pos + len(h)] = 1.0 / len(h)
                pos += len(h)
            return F.matmul(Tensor(avg), self.project_items(flat))
        embeds, mask = self.assemble_input(histories)
        hidden = backbone_forward(self.backbone, embeds, self.adapter, key_mask=mask, rng=rng)
        return F.slice(hidden, np.s_[:, -1, :])

    def logits(self, histories: Sequence[Sequence[int]], rng: DropoutRNG | None = None) -> Tensor:
        return self.output_projection(self.final_hidden(histories, rng))

    def scores(self, histories: Sequence[Sequence[int]], users=None) -> np.ndarray:
        """(B, N) raw logits, computed with dropout off."""
        with eval_mode():
            return self.logits(histories).data

    def predict_scores(self, item_ids: Sequence[int], probabilities: bool = False) -> np.ndarray:
        with eval_mode():
            z = self.logits([item_ids])
            return (F.softmax(z, axis=-1) if probabilities else z).data[0]

    # persistence -------------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {"E": self.E.data, "W_in": self.w_in.data, "W_out": self.w_out.data}
        if self.adapter is not None:
            for name in self.adapter.module_names:
                arrays[name + ".A"] = self.adapter.A[name].data
                arrays[name + ".B"] = self.adapter.B[name].data
        info = {
            "no_llm": self.no_llm, "max_len": self.max_len, "provenance": self.embeddings.provenance,
            "instruction": self.template.instruction,
            "lora": None if self.adapter is None else {
                "r": self.adapter.r, "alpha": self.adapter.alpha, "dropout": self.adapter.dropout,
                "targets": list(self.adapter.targets), "modules": self.adapter.module_names},
            "backbone_hash": None if self.backbone is None else self.backbone.hash(),
            **(meta or {}),
        }
        save_checkpoint(path, "e4srec", arrays, info)

    @classmethod
    def load(cls, path, backbone: BackboneWeights | None) -> "E4SRecModel":
        arrays, meta = load_checkpoint(path, "e4srec")
        adapter = None
        if meta["lora"] is not None:
            lo = meta["lora"]
            adapter = LoRAAdapter(r=lo["r"], alpha=lo["alpha"], dropout=lo["dropout"], targets=tuple(lo["targets"]))
            for name in lo["modules"]:
                adapter.A[name] = Tensor(arrays[name + ".A"], requires_grad=True, name=name + ".lora_A")
                adapter.B[name] = Tensor(arrays[name + ".B"], requires_grad=True, name=name + ".lora_B")
        if not meta["no_llm"] and backbone is not None and meta["backbone_hash"] != backbone.hash():
            raise ContractError(f"{path} was trained on a different backbone")
        table = ItemEmbeddingTable(arrays["E"], meta["provenance"])
        model = cls(None if meta["no_llm"] else backbone, table, adapter, arrays["W_in"], arrays["W_out"],
                    template=PromptTemplate(instruction=meta["instruction"]), no_llm=meta["no_llm"],
                    max_len=meta["max_len"])
        model.meta = meta
        return model


def loss(logits: Tensor, targets) -> Tensor:
    """Cross-entropy of the target item under softmax(logits); mean over the batch."""
    t = np.atleast_1d(np.asarray(targets))
    n = logits.shape[-1]
    if np.any(t >= n) or np.any(t < 0):
        raise OutOfRangeError(f"target item(s) outside the catalog [0, {n}): {sorted(set(t[(t >= n) | (t < 0)].tolist()))}")
    if logits.ndim == 1:
        logits = F.reshape(logits, (1, n))
    return F.cross_entropy_with_logits(logits, t)


@dataclass
class Optimizer:
    state: AdamState
    schedule: LRSchedule
    step: int = 0


def make_optimizer(config: TrainConfig, total_steps: int) -> Optimizer:
    if config.lr_scheduler != "cosine":
        raise ValueError(f"unsupported scheduler {config.lr_scheduler!r}")
    warm = min(config.warmup_steps, max(total_steps - 1, 0))
    return Optimizer(AdamState(weight_decay=config.weight_decay), LRSchedule(config.learning_rate, warm, total_steps))


def training_step(model: E4SRecModel, batch: Sequence[tuple[Sequence[int], int]], opt: Optimizer) -> float:
    histories = [h for h, _ in batch]
    targets = np.array([t for _, t in batch], dtype=np.int64)
    try:
        value = loss(model.logits(histories, model.dropout_rng), targets)
    except NumericError as exc:
        raise DivergenceError(
            f"non-finite loss at step {opt.step} (batch of {len(batch)}, targets {targets.tolist()}): {exc}") from exc
    params = model.trainable_parameters()
    grads = backward(value, params)
    adam_step(params, grads, opt.state, lr_at(opt.schedule, min(opt.step, opt.schedule.total_steps)))
    opt.step += 1
    return value.item()


def training_instances(split: SplitDataset, all_prefixes: bool = False, max_len: int = 50,
                       rng: np.random.Generator | None = None) -> list[tuple[list[int], int]]:
    """One (history, next item) pair per user from the train split; optionally every prefix.

    With ``rng`` the single cut point is drawn uniformly instead of taking the last train item.
    """
    out = []
    for seq in split.train:
        if len(seq) < 2:
            continue
        if all_prefixes:
            ends = range(1, len(seq))
        elif rng is not None:
            ends = [int(rng.integers(1, len(seq)))]
        else:
            ends = [len(seq) - 1]
        for e in ends:
            out.append((truncate(seq[:e], max_len), seq[e]))
    return out


def train(model: E4SRecModel, split: SplitDataset, config: TrainConfig | None = None,
          eval_each_epoch: bool = True) -> list[dict]:
    config = config or TrainConfig()
    if split.n_items != model.n_items:
        raise ContractError(f"split has {split.n_items} items but the model scores {model.n_items}")
    instances = training_instances(split, config.all_prefixes, config.max_len)
    steps_per_epoch = math.ceil(len(instances) / config.batch_size)
    total = steps_per_epoch * config.epochs
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)
    opt = make_optimizer(config, total)
    rng = np.random.default_rng(config.seed + 11)
    history = []
    for epoch in range(1, config.epochs + 1):
        if config.random_prefix and not config.all_prefixes:
            instances = training_instances(split, False, config.max_len, rng)
        order = rng.permutation(len(instances))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            if opt.step >= total:
                break
            losses.append(training_step(model, [instances[i] for i in order[lo:lo + config.batch_size]], opt))
        rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "steps": opt.step}
        last = epoch == config.epochs or opt.step >= total
        if eval_each_epoch and (last or epoch % max(config.eval_every, 1) == 0):
            rec["valid_hr10"] = validation_hr(model.scores, split)
        log.info("e4srec %s", rec)
        history.append(rec)
        if opt.step >= total:
            break
    return history
