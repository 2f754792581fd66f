"""Leave-one-out ranking evaluation and classical baselines.

Every test case ranks the ground-truth item against sampled negatives
(101 candidates total by default). Score ties break toward the lower item
index — deterministic, and conservative in that it can only push the truth
down, never up. Metrics are reported per ground-truth group (head / tail /
all) plus the slice of head-truth cases whose input sequence contains at
least one tail item.
"""

from __future__ import annotations

import numpy as np

from .data import Catalog, LeaveOneOutSplit, PopularityPartition, sample_negatives
from .errors import DataError
from .model import Model, encode, pad_batch, score_candidates

__all__ = [
    "hit_ratio",
    "reciprocal_rank",
    "rank_of_truth",
    "build_test_candidates",
    "evaluate",
    "ModelRanker",
    "PopRanker",
    "SPopRanker",
    "FomcRanker",
    "RerankByPopularity",
    "transition_counts",
    "rerank_by_popularity",
    "make_baseline",
]


def hit_ratio(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError(f"ranks are 1-based, got {rank}")
    return 1 if rank <= k else 0


def reciprocal_rank(rank: int) -> float:
    if rank < 1:
        raise ValueError(f"ranks are 1-based, got {rank}")
    return 1.0 / rank


def rank_of_truth(scores: np.ndarray, candidates: np.ndarray, truth_column: int = 0) -> int:
    """1-based rank of the truth candidate under descending score, ties by
    ascending item index."""
    order = np.lexsort((candidates, -np.asarray(scores, dtype=np.float64)))
    return int(np.nonzero(order == truth_column)[0][0]) + 1


class ModelRanker:
    """Scores candidate lists with a trained model (inference mode)."""

    def __init__(self, model: Model):
        self.model = model

    def score_batch(self, histories: list[np.ndarray], candidates: np.ndarray) -> np.ndarray:
        batch = pad_batch(histories, self.model.config.max_len, self.model.table.pad_index)
        m, _ = encode(self.model, batch)
        return score_candidates(m, self.model.table, candidates).values


class PopRanker:
    """Global training popularity, identical for every user."""

    def __init__(self, catalog: Catalog):
        self.popularity = catalog.train_popularity.astype(np.float64)

    def score_batch(self, histories, candidates):
        return self.popularity[candidates]


class SPopRanker:
    """In-sequence popularity first, global POP as tiebreak.

    Scalarized as seq_count * (max_global + 1) + global so one descending
    sort realizes the two-key order.
    """

    def __init__(self, catalog: Catalog):
        self.popularity = catalog.train_popularity.astype(np.float64)
        self.scale = float(self.popularity.max()) + 1.0

    def score_batch(self, histories, candidates):
        out = np.empty(candidates.shape, dtype=np.float64)
        for i, (hist, cand) in enumerate(zip(histories, candidates)):
            counts = np.bincount(hist, minlength=len(self.popularity)).astype(np.float64)
            out[i] = counts[cand] * self.scale + self.popularity[cand]
        return out


def transition_counts(split: LeaveOneOutSplit, n_items: int) -> np.ndarray:
    """First-order bigram counts over consecutive pairs of the train prefixes."""
    counts = np.zeros((n_items, n_items), dtype=np.int64)
    for seq in split.train:
        if len(seq) > 1:
            np.add.at(counts, (seq[:-1], seq[1:]), 1)
    return counts


class FomcRanker:
    """First-order Markov chain: rank by count(last -> j), POP tiebreak; a last
    item with no observed outgoing transition falls back to POP entirely."""

    def __init__(self, catalog: Catalog, split: LeaveOneOutSplit):
        self.popularity = catalog.train_popularity.astype(np.float64)
        self.scale = float(self.popularity.max()) + 1.0
        self.transitions = transition_counts(split, catalog.n_items)

    def score_batch(self, histories, candidates):
        out = np.empty(candidates.shape, dtype=np.float64)
        for i, (hist, cand) in enumerate(zip(histories, candidates)):
            last = int(hist[-1])
            row = self.transitions[last]
            if row.sum() == 0:
                out[i] = self.popularity[cand]
            else:
                out[i] = row[cand].astype(np.float64) * self.scale + self.popularity[cand]
        return out


def rerank_by_popularity(pre_ranked: np.ndarray, k: int, popularity: np.ndarray) -> np.ndarray:
    """Reorder the top-(5k) window ascending by popularity (stable), keep k."""
    pre_ranked = np.asarray(pre_ranked)
    if len(pre_ranked) < k:
        raise DataError(f"rerank needs at least {k} candidates, got {len(pre_ranked)}")
    window = pre_ranked[: 5 * k]
    order = np.argsort(popularity[window], kind="stable")
    return window[order][:k]


class RerankByPopularity:
    """Wrap a base ranker: its top-5k candidates are reordered by ascending
    popularity; everything below keeps the base order. Scores are replaced by
    descending position so downstream ranking reproduces the final list."""

    def __init__(self, base, catalog: Catalog, k: int = 10):
        self.base = base
        self.popularity = catalog.train_popularity.astype(np.float64)
        self.k = k

    def score_batch(self, histories, candidates):
        base_scores = self.base.score_batch(histories, candidates)
        out = np.empty(candidates.shape, dtype=np.float64)
        c = candidates.shape[1]
        for i in range(len(candidates)):
            order = np.lexsort((candidates[i], -base_scores[i]))
            window = order[: 5 * self.k]
            reranked = window[np.argsort(self.popularity[candidates[i][window]], kind="stable")]
            final = np.concatenate([reranked, order[5 * self.k :]])
            out[i][final] = np.arange(c, 0, -1, dtype=np.float64)
        return out


def make_baseline(name: str, catalog: Catalog, split: LeaveOneOutSplit, base=None, k: int = 10):
    if name == "pop":
        return PopRanker(catalog)
    if name == "spop":
        return SPopRanker(catalog)
    if name == "fomc":
        return FomcRanker(catalog, split)
    if name == "rerank":
        if base is None:
            raise DataError("rerank baseline needs a base ranker")
        return RerankByPopularity(base, catalog, k=k)
    raise DataError(f"unknown baseline {name!r}")


def _group_metrics(ranks: np.ndarray) -> dict:
    if len(ranks) == 0:
        return {"hr5": 0.0, "hr10": 0.0, "mrr": 0.0, "support": 0}
    return {
        "hr5": float((ranks <= 5).mean()),
        "hr10": float((ranks <= 10).mean()),
        "mrr": float((1.0 / ranks).mean()),
        "support": int(len(ranks)),
    }


def build_test_candidates(
    split: LeaveOneOutSplit,
    catalog: Catalog,
    n_negatives: int,
    rng: np.random.Generator,
    negative_source: str = "full",
) -> np.ndarray:
    """(n_users, 1 + n_negatives) candidate matrix, truth in column 0.

    Prebuilding and reusing one matrix makes before/after model comparisons
    paired: both sides rank against identical negatives.
    """
    candidates = np.empty((split.n_users, 1 + n_negatives), dtype=np.int64)
    for u in range(split.n_users):
        candidates[u, 0] = split.test[u]
        candidates[u, 1:] = sample_negatives(
            split.full_sequence(u), catalog, n_negatives, rng, source=negative_source
        )
    return candidates


def evaluate(
    ranker,
    split: LeaveOneOutSplit,
    partition: PopularityPartition,
    catalog: Catalog,
    n_negatives: int = 100,
    rng: np.random.Generator | None = None,
    max_len: int = 50,
    batch_size: int = 256,
    negative_source: str = "full",
    candidates: np.ndarray | None = None,
) -> dict:
    """Run the leave-one-out protocol and return the grouped metrics report.

    The input for each user is everything before the test item (train prefix
    plus validation item), capped to the last ``max_len`` entries. Pass
    ``candidates`` to reuse a fixed (n_users, 1 + n_negatives) matrix — truth
    in column 0 — for before/after comparisons; otherwise they are sampled
    here from ``rng``.
    """
    n_users = split.n_users
    if candidates is None:
        if rng is None:
            raise DataError("evaluate needs an rng when candidates are not supplied")
        candidates = build_test_candidates(split, catalog, n_negatives, rng, negative_source)

    tail_mask = np.zeros(catalog.n_items, dtype=bool)
    tail_mask[partition.tail_set] = True

    histories = [
        np.append(split.train[u], split.valid[u])[-max_len:] for u in range(n_users)
    ]
    ranks = np.empty(n_users, dtype=np.int64)
    for lo in range(0, n_users, batch_size):
        hi = min(lo + batch_size, n_users)
        scores = ranker.score_batch(histories[lo:hi], candidates[lo:hi])
        for u in range(lo, hi):
            ranks[u] = rank_of_truth(scores[u - lo], candidates[u])

    truth_is_tail = tail_mask[split.test]
    has_tail_input = np.array([bool(tail_mask[h].any()) for h in histories])
    head_slice = ~truth_is_tail & has_tail_input

    report = {
        "all": _group_metrics(ranks),
        "head": _group_metrics(ranks[~truth_is_tail]),
        "tail": _group_metrics(ranks[truth_is_tail]),
        "head_with_tail_in_sequence": {
            "hr10": float((ranks[head_slice] <= 10).mean()) if head_slice.any() else 0.0,
            "support": int(head_slice.sum()),
        },
    }
    return report
