"""ID-embedding providers (SASRec, BPR) and the popularity baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from e4srec.autodiff import AdamState, DropoutRNG, Tensor, adam_step, backward, eval_mode
from e4srec.autodiff import functional as F
from e4srec.autodiff.init import normal, xavier_uniform
from e4srec.checkpoint import load_checkpoint, save_checkpoint
from e4srec.data import SequenceDataset, SplitDataset, truncate
from e4srec.errors import DivergenceError, NumericError
from e4srec.evaluation import validation_hr

log = logging.getLogger(__name__)


@dataclass
class ItemEmbeddingTable:
    matrix: np.ndarray
    provenance: str

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path) -> None:
        save_checkpoint(path, "embeddings", {"E": self.matrix}, {"provenance": self.provenance})

    @classmethod
    def load(cls, path) -> "ItemEmbeddingTable":
        arrays, meta = load_checkpoint(path, "embeddings")
        return cls(arrays["E"], meta["provenance"])


# SASRec --------------------------------------------------------------------

@dataclass
class SASRecConfig:
    dim: int = 64
    max_len: int = 50
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.2
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 4


class SASRecModel:
    """Self-attentive next-item model with the output tied to the item table.

    Item ids run 0..N-1; row N of the item table is the padding id.
    """

    def __init__(self, n_items: int, config: SASRecConfig, params: dict[str, np.ndarray] | None = None):
        self.n_items = n_items
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(config.seed))
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}

    @property
    def pad_id(self) -> int:
        return self.n_items

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        c, d = self.config, self.config.dim
        item = xavier_uniform(rng, (self.n_items + 1, d))
        item[self.n_items] = 0.0
        p = {"item_emb": item, "pos_emb": xavier_uniform(rng, (c.max_len, d))}
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            for name in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
                p[pre + name] = xavier_uniform(rng, (d, d))
            for name in ("bq", "bk", "bv", "bo", "ff1_b", "ff2_b", "ln1_b", "ln2_b"):
                p[pre + name] = np.zeros(d, dtype=np.float32)
            p[pre + "ln1_w"] = np.ones(d, dtype=np.float32)
            p[pre + "ln2_w"] = np.ones(d, dtype=np.float32)
        p["ln_f_w"] = np.ones(d, dtype=np.float32)
        p["ln_f_b"] = np.zeros(d, dtype=np.float32)
        return p

    def pad_batch(self, histories: Sequence[Sequence[int]]) -> np.ndarray:
        L = self.config.max_len
        out = np.full((len(histories), L), self.pad_id, dtype=np.int64)
        for r, h in enumerate(histories):
            h = truncate(h, L)
            if h:
                out[r, L - len(h):] = h
        return out

    def hidden(self, ids: np.ndarray, rng: DropoutRNG | None = None) -> Tensor:
        """Final-layer states (B, L, d) for left-padded id windows."""
        c, P = self.config, self.params
        mask = ids != self.pad_id
        keep = Tensor(mask[..., None].astype(np.float32))
        x = F.embedding_lookup(P["item_emb"], ids) * math.sqrt(c.dim)
        x = x + P["pos_emb"]
        x = F.dropout(x, c.dropout, rng) * keep
        for layer in range(c.n_layers):
            pre = f"blocks.{layer}."
            q_in = F.layer_norm(x, P[pre + "ln1_w"], P[pre + "ln1_b"])
            q = F.linear(q_in, P[pre + "wq"], P[pre + "bq"])
            k = F.linear(x, P[pre + "wk"], P[pre + "bk"])
            v = F.linear(x, P[pre + "wv"], P[pre + "bv"])
            att = F.causal_multihead_attention(q, k, v, c.n_heads, key_mask=mask)
            att = F.dropout(F.linear(att, P[pre + "wo"], P[pre + "bo"]), c.dropout, rng)
            x = q_in + att
            y = F.layer_norm(x, P[pre + "ln2_w"], P[pre + "ln2_b"])
            ff = F.dropout(F.gelu(F.linear(y, P[pre + "ff1"], P[pre + "ff1_b"])), c.dropout, rng)
            ff = F.dropout(F.linear(ff, P[pre + "ff2"], P[pre + "ff2_b"]), c.dropout, rng)
            x = (y + ff) * keep
        return F.layer_norm(x, P["ln_f_w"], P["ln_f_b"])

    def logits(self, h: Tensor) -> Tensor:
        items = F.slice(self.params["item_emb"], np.s_[: self.n_items])
        return F.matmul(h, F.transpose(items))

    def scores(self, histories: Sequence[Sequence[int]], users=None) -> np.ndarray:
        with eval_mode():
            h = self.hidden(self.pad_batch(histories))
            last = F.slice(h, np.s_[:, -1, :])
            return self.logits(last).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    def save(self, path) -> None:
        save_checkpoint(path, "sasrec", self.state_dict(), {"n_items": self.n_items, "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "SASRecModel":
        arrays, meta = load_checkpoint(path, "sasrec")
        return cls(meta["n_items"], SASRecConfig(**meta["config"]), arrays)


def _sasrec_batch(model: SASRecModel, seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = model.config.max_len
    ids = np.full((len(seqs), L), model.pad_id, dtype=np.int64)
    tgt = np.full((len(seqs), L), -1, dtype=np.int64)
    for r, s in enumerate(seqs):
        s = truncate(s, L + 1)
        inp, out = s[:-1], s[1:]
        ids[r, L - len(inp):] = inp
        tgt[r, L - len(out):] = out
    return ids, tgt


def train_sasrec(split: SplitDataset, config: SASRecConfig | None = None) -> tuple[SASRecModel, list[dict]]:
    """Next-item training over every train-split prefix; keeps the best epoch by validation HR@10."""
    config = config or SASRecConfig()
    model = SASRecModel(split.n_items, config)
    params = list(model.params.values())
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    drop = DropoutRNG(config.seed + 2)
    seqs = [s for s in split.train if len(s) >= 2]
    best, best_hr, history = model.state_dict(), -1.0, []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            ids, tgt = _sasrec_batch(model, [seqs[i] for i in order[lo:lo + config.batch_size]])
            try:
                loss = F.cross_entropy_with_logits(model.logits(model.hidden(ids, drop)), tgt)
            except NumericError as exc:
                raise DivergenceError(f"SASRec diverged at epoch {epoch}, batch {lo // config.batch_size}: {exc}") from exc
            grads = backward(loss)
            adam_step(params, grads, state, config.lr)
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if not math.isfinite(rec["loss"]):
            raise DivergenceError(f"SASRec loss is {rec['loss']} at epoch {epoch}")
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            rec["valid_hr10"] = validation_hr(model.scores, split)
            if rec["valid_hr10"] > best_hr:
                best_hr, best = rec["valid_hr10"], model.state_dict()
        log.info("sasrec %s", rec)
        history.append(rec)
    model.load_state(best)
    return model, history


# BPR -----------------------------------------------------------------------

@dataclass
class BPRConfig:
    dim: int = 64
    epochs: int = 30
    lr: float = 5e-3
    batch_size: int = 1024
    negatives: int = 1
    seed: int = 0


class BPRModel:
    def __init__(self, n_users: int, n_items: int, config: BPRConfig, params: dict[str, np.ndarray] | None = None):
        self.n_users, self.n_items, self.config = n_users, n_items, config
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {"user": normal(rng, (n_users, config.dim), 0.1), "item": normal(rng, (n_items, config.dim), 0.1)}
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}

    def scores(self, histories=None, users: Sequence[int] = ()) -> np.ndarray:
        return self.params["user"].data[np.asarray(users, dtype=np.int64)] @ self.params["item"].data.T

    def pair_loss(self, users: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> Tensor:
        u = F.embedding_lookup(self.params["user"], users)
        diff = F.mul(u, F.embedding_lookup(self.params["item"], pos) - F.embedding_lookup(self.params["item"], neg))
        return F.mul(F.mean(F.log_sigmoid(F.sum(diff, axis=-1))), -1.0)

    def save(self, path) -> None:
        save_checkpoint(path, "bpr", {k: t.data for k, t in self.params.items()},
                        {"n_users": self.n_users, "n_items": self.n_items, "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "BPRModel":
        arrays, meta = load_checkpoint(path, "bpr")
        return cls(meta["n_users"], meta["n_items"], BPRConfig(**meta["config"]), arrays)


def train_bpr(split: SplitDataset, config: BPRConfig | None = None) -> tuple[BPRModel, list[dict]]:
    config = config or BPRConfig()
    n_users = max(split.users) + 1
    model = BPRModel(n_users, split.n_items, config)
    params = list(model.params.values())
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    pairs = np.array([(split.users[r], i) for r, s in enumerate(split.train) for i in s], dtype=np.int64)
    seen = {}
    for u, i in pairs:
        seen.setdefault(int(u), set()).add(int(i))
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = np.repeat(pairs[order[lo:lo + config.batch_size]], config.negatives, axis=0)
            neg = rng.integers(0, split.n_items, size=len(batch))
            for j, (u, _) in enumerate(batch):
                while neg[j] in seen[int(u)] and len(seen[int(u)]) < split.n_items:
                    neg[j] = rng.integers(0, split.n_items)
            try:
                loss = model.pair_loss(batch[:, 0], batch[:, 1], neg)
            except NumericError as exc:
                raise DivergenceError(f"BPR diverged at epoch {epoch}: {exc}") from exc
            adam_step(params, backward(loss), state, config.lr)
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        log.info("bpr %s", history[-1])
    return model, history


# POP -----------------------------------------------------------------------

class PopModel:
    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)

    @classmethod
    def fit(cls, split: SplitDataset) -> "PopModel":
        return cls(np.bincount([i for s in split.train for i in s], minlength=split.n_items))

    def scores(self, histories, users=None) -> np.ndarray:
        return np.broadcast_to(self.counts, (len(histories), len(self.counts)))


def rank_pop(data: SequenceDataset | SplitDataset | np.ndarray) -> list[int]:
    """Item indices by descending training-interaction count, ties by index."""
    if isinstance(data, SplitDataset):
        counts = PopModel.fit(data).counts
    elif isinstance(data, SequenceDataset):
        counts = np.bincount([i for s in data.sequences for i in s], minlength=data.n_items)
    else:
        counts = np.asarray(data)
    return np.lexsort((np.arange(len(counts)), -np.asarray(counts, dtype=np.float64))).tolist()


def extract_item_embeddings(model: SASRecModel | BPRModel) -> ItemEmbeddingTable:
    """Copy the item rows verbatim (padding row dropped)."""
    if isinstance(model, SASRecModel):
        return ItemEmbeddingTable(model.params["item_emb"].data[: model.n_items].copy(), "sasrec")
    if isinstance(model, BPRModel):
        return ItemEmbeddingTable(model.params["item"].data.copy(), "bpr")
    raise TypeError(f"cannot extract embeddings from {type(model).__name__}")
