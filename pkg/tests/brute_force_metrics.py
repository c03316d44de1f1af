"""Independent reference for the ranking metrics: plain loops, no numpy.

Kept deliberately naive so it shares no code path with e4srec.evaluation.
"""

import math


def rank(scores, target, candidates):
    ordered = sorted(candidates, key=lambda i: (-scores[i], i))
    return ordered.index(target) + 1


def hr(ranks, k):
    return sum(1 for r in ranks if r <= k) / len(ranks)


def ndcg(ranks, k):
    total = 0.0
    for r in ranks:
        if r <= k:
            total += math.log(2) / math.log(r + 1)
    return total / len(ranks)


def mrr(ranks):
    return sum(1.0 / r for r in ranks) / len(ranks)


if __name__ == "__main__":
    from fixtures_metrics import FIVE_USERS

    rs = [rank(s, t, list(range(len(s)))) for s, t in FIVE_USERS]
    print("ranks", rs)
    for k in (1, 2, 3, 5):
        print(k, hr(rs, k), ndcg(rs, k))
    print("mrr", mrr(rs))
