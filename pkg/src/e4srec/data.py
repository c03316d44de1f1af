"""Interaction logs -> 5-core filtered, chronologically ordered, leave-one-out splits."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from e4srec.errors import EmptyDatasetError

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class SequenceDataset:
    user_ids: list[str]
    item_ids: list[str]
    sequences: list[list[int]]
    timestamps: list[list[int]]

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceDataset":
        return cls(**obj)


@dataclass
class SplitDataset:
    """Per-user leave-one-out partition; row u belongs to ``users[u]``."""

    users: list[int]
    train: list[list[int]]
    valid: list[int]
    test: list[int]
    n_items: int
    dataset: SequenceDataset | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.users)

    def history(self, row: int, target: str = "test") -> list[int]:
        """Items visible when predicting ``target`` ('valid' or 'test')."""
        if target == "valid":
            return list(self.train[row])
        if target == "test":
            return list(self.train[row]) + [self.valid[row]]
        raise ValueError(f"target must be 'valid' or 'test', got {target!r}")

    def targets(self, target: str = "test") -> list[int]:
        return list(self.valid if target == "valid" else self.test)


# ingestion -----------------------------------------------------------------

def load_interactions(source: str | os.PathLike, min_timestamp: int | None = None) -> tuple[list[InteractionRecord], int]:
    """Read a headerless ``user \\t item \\t timestamp`` file.

    Returns the parsed records and the number of malformed lines skipped.
    Records older than ``min_timestamp`` are dropped silently (they are
    well-formed, just out of range).
    """
    records: list[InteractionRecord] = []
    malformed = 0
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                malformed += 1
                continue
            try:
                ts = int(parts[2])
            except ValueError:
                malformed += 1
                continue
            if ts < 0:
                malformed += 1
                continue
            if min_timestamp is not None and ts < min_timestamp:
                continue
            records.append(InteractionRecord(parts[0], parts[1], ts))
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", source, malformed)
    if not records:
        raise EmptyDatasetError(f"{source}: no valid interaction records")
    return records, malformed


def write_interactions(records: Iterable[InteractionRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")


def k_core_filter(records: Sequence[InteractionRecord], k: int = 5) -> list[InteractionRecord]:
    """Peel users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    current = list(records)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyDatasetError(f"{k}-core of the interaction log is empty")
    return current


def build_sequences(records: Sequence[InteractionRecord]) -> SequenceDataset:
    """Group by user, order by timestamp (stable on file order), reindex.

    Users and items are indexed by sorted id string so the mapping does not
    depend on file order.
    """
    if not records:
        raise EmptyDatasetError("no records to build sequences from")
    user_ids = sorted({r.user_id for r in records})
    item_ids = sorted({r.item_id for r in records})
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {it: i for i, it in enumerate(item_ids)}
    per_user: list[list[tuple[int, int]]] = [[] for _ in user_ids]
    for r in records:
        per_user[uidx[r.user_id]].append((r.timestamp, iidx[r.item_id]))
    sequences, timestamps = [], []
    for events in per_user:
        events.sort(key=lambda e: e[0])
        sequences.append([i for _, i in events])
        timestamps.append([t for t, _ in events])
    return SequenceDataset(user_ids, item_ids, sequences, timestamps)


def leave_one_out(ds: SequenceDataset) -> SplitDataset:
    users, train, valid, test = [], [], [], []
    skipped = 0
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            skipped += 1
            continue
        users.append(u)
        train.append(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    if skipped:
        log.warning("leave_one_out: excluded %d user(s) with fewer than 3 interactions", skipped)
    if not users:
        raise EmptyDatasetError("no user has enough interactions for a leave-one-out split")
    return SplitDataset(users, train, valid, test, ds.n_items, ds)


def truncate(sequence: Sequence[int], max_len: int = 50) -> list[int]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return list(sequence[-max_len:])


# synthetic corpus ----------------------------------------------------------

@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 200
    transition_sharpness: float = 4.0
    seed: int = 0
    min_len: int = 5
    max_len: int = 40

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SynthConfig":
        return cls(**json.loads(Path(path).read_text()))


def transition_matrix(n_items: int, sharpness: float, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic matrix with rows proportional to exp(sharpness * z), z ~ N(0, 1).

    ``sharpness = inf`` collapses every row onto its argmax, giving each item a
    unique successor.
    """
    z = rng.standard_normal((n_items, n_items))
    if np.isinf(sharpness):
        p = np.zeros_like(z)
        p[np.arange(n_items), z.argmax(axis=1)] = 1.0
        return p
    logits = sharpness * z
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def synth_generate(n_users: int, n_items: int, transition_sharpness: float, seed: int,
                   min_len: int = 5, max_len: int = 40) -> list[InteractionRecord]:
    """Seeded Markov-chain walks, one per user, with increasing timestamps."""
    if n_users < 1 or n_items < 1:
        raise ValueError("n_users and n_items must be >= 1")
    rng = np.random.default_rng(seed)
    p = transition_matrix(n_items, transition_sharpness, rng)
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = 1.0
    width_u = len(str(n_users - 1))
    width_i = len(str(n_items - 1))
    records = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(n_items))
        ts = int(rng.integers(1_500_000_000, 1_600_000_000))
        for _ in range(length):
            records.append(InteractionRecord(f"u{u:0{width_u}d}", f"i{item:0{width_i}d}", ts))
            ts += int(rng.integers(60, 86_400))
            item = int(np.searchsorted(cdf[item], rng.random(), side="right"))
    return records


def prepare(records: Sequence[InteractionRecord], k: int = 5) -> tuple[SequenceDataset, SplitDataset]:
    ds = build_sequences(k_core_filter(records, k))
    return ds, leave_one_out(ds)


def save_dataset(ds: SequenceDataset, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(ds.to_json()))


def load_dataset(path: str | os.PathLike) -> SequenceDataset:
    return SequenceDataset.from_json(json.loads(Path(path).read_text()))
