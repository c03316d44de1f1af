"""Ranking metrics and the two leave-one-out evaluation protocols.

A *scorer* is any callable ``scorer(histories, users) -> (B, N) array`` where
``histories`` are item-id lists and ``users`` the matching dataset user
indices. Ties are always broken by ascending item index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from e4srec.data import SequenceDataset, SplitDataset
from e4srec.errors import ContractError

Scorer = Callable[[list[list[int]], list[int]], np.ndarray]

FULL_KS = (5, 10, 20)
SAMPLED_KS = (1, 5, 10)
SAMPLED_NDCG_KS = (5, 10)


def rank_of_target(scores: np.ndarray, target: int, candidates: Sequence[int] | None = None) -> int:
    """1-based rank of ``target`` among ``candidates`` (all items if None)."""
    scores = np.asarray(scores)
    cand = np.arange(len(scores)) if candidates is None else np.asarray(candidates)
    if target not in set(cand.tolist()):
        raise ContractError(f"target {target} is not among the candidates")
    s = scores[cand]
    st = scores[target]
    return int(1 + np.sum(s > st) + np.sum((s == st) & (cand < target)))


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Full-catalog ranks for each row of ``scores``."""
    rows = np.arange(len(targets))
    st = scores[rows, targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    return 1 + np.sum(scores > st, axis=1) + np.sum((scores == st) & (idx < targets[:, None]), axis=1)


def _check(ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ContractError("no ranks to aggregate")
    return r


def hr_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    r = _check(ranks)
    return float(np.mean(r <= k))


def ndcg_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    r = _check(ranks)
    gains = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(np.mean(gains))


def mrr(ranks) -> float:
    return float(np.mean(1.0 / _check(ranks)))


@dataclass
class RankingResult:
    ranks: np.ndarray
    candidate_size: int
    rows: np.ndarray


@dataclass
class UserGroup:
    label: str
    lower: int
    upper: float
    members: list[int]


def _fmt(v: float | None, digits: int = 4, missing: str = "-") -> str:
    return missing if v is None else f"{v:.{digits}f}"


@dataclass
class MetricsReport:
    protocol: str
    metrics: dict[str, float]
    n_users: int
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    group_sizes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "protocol": self.protocol, "n_users": self.n_users, "metrics": self.metrics,
            "groups": self.groups, "group_sizes": self.group_sizes,
        }, indent=2)

    def to_table(self, name: str = "model") -> str:
        cols = list(self.metrics)
        rows = [("", "users", *cols), (name, str(self.n_users), *(f"{self.metrics[c]:.4f}" for c in cols))]
        for label, vals in self.groups.items():
            rows.append((f"  {label}", str(self.group_sizes.get(label, "")), *(_fmt(vals[c]) for c in cols)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)

    def groups_csv(self) -> str:
        cols = list(self.metrics)
        out = ["group,users," + ",".join(cols)]
        for label, vals in self.groups.items():
            out.append(f"{label},{self.group_sizes[label]}," + ",".join(_fmt(vals[c], 6, "") for c in cols))
        return "\n".join(out) + "\n"


def full_metrics(ranks, ks: Sequence[int] = FULL_KS) -> dict[str, float]:
    out = {f"HR@{k}": hr_at_k(ranks, k) for k in ks}
    out.update({f"nDCG@{k}": ndcg_at_k(ranks, k) for k in ks})
    return out


def sampled_metrics(ranks) -> dict[str, float]:
    out = {f"HR@{k}": hr_at_k(ranks, k) for k in SAMPLED_KS}
    out.update({f"nDCG@{k}": ndcg_at_k(ranks, k) for k in SAMPLED_NDCG_KS})
    out["MRR"] = mrr(ranks)
    return out


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield np.arange(lo, min(lo + size, n))


def rank_full(scorer: Scorer, split: SplitDataset, target: str = "test", mask_history: bool = False,
              batch_size: int = 256) -> RankingResult:
    targets = np.asarray(split.targets(target))
    ranks = np.empty(len(split), dtype=np.int64)
    for rows in _batches(len(split), batch_size):
        hist = [split.history(int(r), target) for r in rows]
        scores = np.array(scorer(hist, [split.users[r] for r in rows]), dtype=np.float64)
        if scores.shape != (len(rows), split.n_items):
            raise ContractError(f"scorer returned shape {scores.shape}, expected {(len(rows), split.n_items)}")
        if mask_history:
            for j, h in enumerate(hist):
                seen = [i for i in set(h) if i != targets[rows[j]]]
                scores[j, seen] = -np.inf
        ranks[rows] = batch_ranks(scores, targets[rows])
    return RankingResult(ranks, split.n_items, np.arange(len(split)))


def sample_negatives(split: SplitDataset, n_neg: int, seed: int) -> np.ndarray:
    """(users, n_neg) uniform negatives excluding each user's interacted items."""
    rng = np.random.default_rng(seed)
    out = np.empty((len(split), n_neg), dtype=np.int64)
    for row in range(len(split)):
        seen = set(split.train[row]) | {split.valid[row], split.test[row]}
        eligible = np.setdiff1d(np.arange(split.n_items), np.fromiter(seen, dtype=np.int64))
        if len(eligible) < n_neg:
            raise ContractError(
                f"user row {row}: only {len(eligible)} eligible negatives, need {n_neg}")
        out[row] = rng.choice(eligible, size=n_neg, replace=False)
    return out


def rank_sampled(scorer: Scorer, split: SplitDataset, n_neg: int = 99, seed: int = 0, target: str = "test",
                 batch_size: int = 256, negatives: np.ndarray | None = None) -> RankingResult:
    if n_neg >= split.n_items:
        raise ContractError(f"n_neg={n_neg} must be smaller than the catalog size {split.n_items}")
    if negatives is None:
        negatives = sample_negatives(split, n_neg, seed)
    targets = np.asarray(split.targets(target))
    ranks = np.empty(len(split), dtype=np.int64)
    for rows in _batches(len(split), batch_size):
        hist = [split.history(int(r), target) for r in rows]
        scores = np.asarray(scorer(hist, [split.users[r] for r in rows]), dtype=np.float64)
        for j, r in enumerate(rows):
            cand = np.concatenate([[targets[r]], negatives[r]])
            s = scores[j, cand]
            st = s[0]
            ranks[r] = 1 + np.sum(s > st) + np.sum((s == st) & (cand < targets[r]))
    return RankingResult(ranks, n_neg + 1, np.arange(len(split)))


def group_by_sparsity(ds: SequenceDataset, bounds: tuple[int, int] = (5, 10)) -> list[UserGroup]:
    """Sparse: exactly ``bounds[0]`` (or fewer) interactions; medium: up to ``bounds[1]``; dense: more."""
    lo, hi = bounds
    groups = [UserGroup("sparse", 0, lo, []), UserGroup("medium", lo + 1, hi, []),
              UserGroup("dense", hi + 1, math.inf, [])]
    for u, seq in enumerate(ds.sequences):
        n = len(seq)
        g = groups[0] if n <= lo else groups[1] if n <= hi else groups[2]
        g.members.append(u)
    return groups


def _with_groups(report: MetricsReport, result: RankingResult, split: SplitDataset,
                 groups: Sequence[UserGroup] | None, metric_fn) -> MetricsReport:
    if not groups:
        return report
    row_of = {u: r for r, u in enumerate(split.users)}
    for g in groups:
        rows = [row_of[u] for u in g.members if u in row_of]
        report.group_sizes[g.label] = len(rows)
        if rows:
            report.groups[g.label] = metric_fn(result.ranks[rows])
        else:
            report.groups[g.label] = {k: None for k in report.metrics}  # no users in this band
    return report


def evaluate_full(scorer: Scorer, split: SplitDataset, target: str = "test", mask_history: bool = False,
                  groups: Sequence[UserGroup] | None = None, ks: Sequence[int] = FULL_KS) -> MetricsReport:
    result = rank_full(scorer, split, target=target, mask_history=mask_history)
    report = MetricsReport("full", full_metrics(result.ranks, ks), len(split))
    return _with_groups(report, result, split, groups, lambda r: full_metrics(r, ks))


def evaluate_sampled(scorer: Scorer, split: SplitDataset, n_neg: int = 99, seed: int = 0, target: str = "test",
                     groups: Sequence[UserGroup] | None = None) -> MetricsReport:
    result = rank_sampled(scorer, split, n_neg=n_neg, seed=seed, target=target)
    report = MetricsReport("sampled99" if n_neg == 99 else f"sampled{n_neg}", sampled_metrics(result.ranks), len(split))
    return _with_groups(report, result, split, groups, sampled_metrics)


def validation_hr(scorer: Scorer, split: SplitDataset, k: int = 10) -> float:
    return hr_at_k(rank_full(scorer, split, target="valid").ranks, k)
