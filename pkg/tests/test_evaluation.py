import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import brute_force_metrics as brute
from fixtures_metrics import FIVE_USERS
from e4srec.data import SplitDataset, build_sequences, InteractionRecord
from e4srec.errors import ContractError
from e4srec.evaluation import (
    batch_ranks, evaluate_full, evaluate_sampled, group_by_sparsity, hr_at_k, mrr, ndcg_at_k, rank_of_target,
    rank_sampled,
)


def test_rank_of_target_examples():
    assert rank_of_target([0.1, 0.9, 0.5], 1) == 1
    assert rank_of_target([0.3, 0.3, 0.3], 0, [0, 1, 2]) == 1
    assert rank_of_target([0.1, 0.9, 0.5], 2) == 2
    with pytest.raises(ContractError):
        rank_of_target([0.1, 0.9, 0.5], 2, [0, 1])


def test_hr_examples():
    assert hr_at_k([3, 7, 12], 5) == pytest.approx(1 / 3)
    assert hr_at_k([1, 1, 1], 1) == 1.0
    assert hr_at_k([4, 6, 2], 6) == 1.0
    with pytest.raises(ContractError):
        hr_at_k([], 5)


def test_ndcg_examples():
    assert ndcg_at_k([1], 10) == 1.0
    assert ndcg_at_k([3], 10) == pytest.approx(0.5, abs=1e-12)
    assert ndcg_at_k([11], 10) == 0.0


def test_mrr_examples():
    assert mrr([1, 2, 4]) == pytest.approx(7 / 12)
    assert mrr([1, 1]) == 1.0
    assert mrr([4]) == 0.25


def test_five_user_fixture_matches_brute_force():
    ranks = [rank_of_target(s, t) for s, t in FIVE_USERS]
    ref = [brute.rank(s, t, list(range(len(s)))) for s, t in FIVE_USERS]
    assert ranks == ref == [1, 3, 5, 6, 2]
    for k in (1, 2, 3, 5, 10):
        assert hr_at_k(ranks, k) == brute.hr(ref, k)
        assert abs(ndcg_at_k(ranks, k) - brute.ndcg(ref, k)) < 1e-9
    assert abs(mrr(ranks) - brute.mrr(ref)) < 1e-12
    scores = np.array([s for s, _ in FIVE_USERS])
    assert batch_ranks(scores, np.array([t for _, t in FIVE_USERS])).tolist() == ref


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_metric_monotonicity(ranks):
    for k in range(1, 30):
        assert hr_at_k(ranks, k) <= hr_at_k(ranks, k + 1)
        assert ndcg_at_k(ranks, k) <= ndcg_at_k(ranks, k + 1) + 1e-15
        assert ndcg_at_k(ranks, k) <= hr_at_k(ranks, k) + 1e-15
        assert 0.0 <= ndcg_at_k(ranks, k) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30))
def test_ranks_agree_with_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=n).astype(float)  # plenty of ties
    t = int(rng.integers(n))
    cand = sorted(set(rng.choice(n, size=max(1, n // 2), replace=False).tolist()) | {t})
    assert rank_of_target(scores, t, cand) == brute.rank(scores, t, cand)


def _split(n_users, n_items, seed=0, hist_len=3):
    rng = np.random.default_rng(seed)
    train = [rng.integers(0, n_items, size=hist_len).tolist() for _ in range(n_users)]
    return SplitDataset(
        users=list(range(n_users)), train=train, valid=rng.integers(0, n_items, size=n_users).tolist(),
        test=rng.integers(0, n_items, size=n_users).tolist(), n_items=n_items,
    )


def test_full_oracle_and_anti_oracle():
    split = _split(50, 30)

    def oracle(hist, users):
        s = np.zeros((len(users), 30))
        s[np.arange(len(users)), [split.test[u] for u in users]] = 1.0
        return s

    def anti(hist, users):
        return -oracle(hist, users)

    rep = evaluate_full(oracle, split)
    assert all(v == 1.0 for v in rep.metrics.values())
    rep = evaluate_full(anti, split)
    assert rep.metrics["HR@20"] == 0.0


def test_full_constant_scorer_binomial():
    n_users, n = 2000, 200
    split = _split(n_users, n, seed=5)
    rep = evaluate_full(lambda h, u: np.zeros((len(u), n)), split)
    p = 10 / n
    sigma = math.sqrt(p * (1 - p) / n_users)
    assert abs(rep.metrics["HR@10"] - p) <= 3 * sigma


def test_full_mask_history_flag():
    split = SplitDataset([0], [[0, 1]], [2], [3], 5)

    def scorer(h, u):
        return np.array([[5.0, 4.0, 3.0, 2.0, 1.0]])

    assert evaluate_full(scorer, split).metrics["HR@5"] == 1.0
    plain = evaluate_full(scorer, split, ks=(1, 2, 4))
    masked = evaluate_full(scorer, split, mask_history=True, ks=(1, 2, 4))
    assert plain.metrics["HR@2"] == 0.0
    assert masked.metrics["HR@1"] == 1.0  # items 0, 1, 2 are history when predicting test


def test_sampled_random_scorer_hr1():
    n_users, n = 2000, 200
    split = _split(n_users, n, seed=9)
    rng = np.random.default_rng(0)
    rep = evaluate_sampled(lambda h, u: rng.random((len(u), n)), split, n_neg=99, seed=1)
    assert abs(rep.metrics["HR@1"] - 0.01) <= 0.0075
    assert set(rep.metrics) == {"HR@1", "HR@5", "HR@10", "nDCG@5", "nDCG@10", "MRR"}


def test_sampled_oracle_and_determinism():
    split = _split(100, 150)

    def oracle(hist, users):
        s = np.zeros((len(users), 150))
        s[np.arange(len(users)), [split.test[u] for u in users]] = 1.0
        return s

    assert evaluate_sampled(oracle, split).metrics["HR@1"] == 1.0
    const = lambda h, u: np.zeros((len(u), 150))
    a = evaluate_sampled(const, split, seed=3).to_json()
    b = evaluate_sampled(const, split, seed=3).to_json()
    assert a == b


def test_sampled_too_few_negatives():
    split = SplitDataset([0], [list(range(8))], [8], [9], 12)
    with pytest.raises(ContractError):
        evaluate_sampled(lambda h, u: np.zeros((1, 12)), split, n_neg=5)
    with pytest.raises(ContractError):
        evaluate_sampled(lambda h, u: np.zeros((1, 12)), split, n_neg=12)


def test_sampled_with_all_negatives_reproduces_full_ranks():
    n = 40
    split = _split(30, n, seed=2)
    rng = np.random.default_rng(4)
    table = rng.integers(0, 5, size=(30, n)).astype(float)
    scorer = lambda h, u: table[u]
    negatives = np.array([[i for i in range(n) if i != t] for t in split.test])
    sampled = rank_sampled(scorer, split, n_neg=n - 1, negatives=negatives).ranks
    full = batch_ranks(table, np.array(split.test))
    np.testing.assert_array_equal(sampled, full)


def test_group_by_sparsity():
    recs = []
    for u, n in [("a", 5), ("b", 7), ("c", 30), ("d", 10), ("e", 11)]:
        recs += [InteractionRecord(u, f"i{j}", j) for j in range(n)]
    ds = build_sequences(recs)
    groups = {g.label: g.members for g in group_by_sparsity(ds)}
    name = ds.user_ids
    assert [name[u] for u in groups["sparse"]] == ["a"]
    assert [name[u] for u in groups["medium"]] == ["b", "d"]
    assert [name[u] for u in groups["dense"]] == ["c", "e"]
    assert sum(len(m) for m in groups.values()) == ds.n_users


def test_report_rendering_with_groups():
    recs = []
    for u, n in [("a", 5), ("b", 7), ("c", 30)]:
        recs += [InteractionRecord(u, f"i{j}", j) for j in range(n)]
    ds = build_sequences(recs)
    from e4srec.data import leave_one_out
    split = leave_one_out(ds)
    rep = evaluate_full(lambda h, u: np.zeros((len(u), ds.n_items)), split, groups=group_by_sparsity(ds))
    assert set(rep.groups) == {"sparse", "medium", "dense"}
    assert sum(rep.group_sizes.values()) == 3
    table = rep.to_table("POP")
    assert "HR@10" in table and "POP" in table and "sparse" in table
    assert rep.groups_csv().startswith("group,users,HR@5")
