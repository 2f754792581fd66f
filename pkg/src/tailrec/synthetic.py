"""Synthetic long-tail interaction corpora with planted first-order structure.

Item popularity follows a Zipf law (weight 1/rank^s), and each item has a
fixed successor under a random permutation. A user's next action continues
the chain with probability ``transition_prob`` and otherwise draws fresh from
the Zipf marginal, so sequences carry learnable first-order signal on top of
a heavy popularity skew. This is the corpus the directional experiments run
on; real datasets enter through the normal CSV/JSONL ingestion path.
"""

from __future__ import annotations

import numpy as np

from .data import Interaction

__all__ = [
    "synthetic_interactions",
    "write_log_csv",
    "new_item_artifacts",
]


def _zipf_weights(n_items: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    w = ranks**-s
    return w / w.sum()


def synthetic_interactions(
    n_users: int = 2000,
    n_items: int = 500,
    zipf_s: float = 1.2,
    transition_prob: float = 0.55,
    min_len: int = 5,
    max_len: int = 50,
    seed: int = 0,
) -> list[Interaction]:
    """Generate a corpus; item index 0 is the most popular.

    Identifiers are zero-padded strings ("u0000", "i0000") and timestamps are
    per-user positions, so ingestion reproduces generation order exactly.
    """
    rng = np.random.default_rng(seed)
    weights = _zipf_weights(n_items, zipf_s)
    successor = rng.permutation(n_items)
    uw = len(str(n_users - 1))
    iw = len(str(n_items - 1))
    rows: list[Interaction] = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.choice(n_items, p=weights))
        for t in range(length):
            rows.append(Interaction(user=f"u{u:0{uw}d}", item=f"i{item:0{iw}d}", timestamp=t))
            if rng.random() < transition_prob:
                item = int(successor[item])
            else:
                item = int(rng.choice(n_items, p=weights))
    return rows


def write_log_csv(path, interactions: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user,item,timestamp\n")
        for it in interactions:
            fh.write(f"{it.user},{it.item},{it.timestamp}\n")


def new_item_artifacts(
    interactions: list[Interaction],
    n_new: int = 8,
    omega1: int = 24,
    omega2: int = 24,
    min_occurrences: int = 6,
    seed: int = 0,
) -> tuple[list[Interaction], dict]:
    """Withhold a few mid-popularity items entirely and export their contexts.

    Returns (filtered log without the withheld items, context payload). The
    payload maps each withheld item to inference windows (earlier half of its
    occurrences) and held-out test cases (later half), all expressed in
    original string identifiers over the surviving vocabulary.
    """
    rng = np.random.default_rng(seed)
    by_user: dict[str, list[str]] = {}
    for it in interactions:
        by_user.setdefault(it.user, []).append(it.item)

    counts: dict[str, int] = {}
    for it in interactions:
        counts[it.item] = counts.get(it.item, 0) + 1
    # mid-popularity candidates: frequent enough to have contexts, not so
    # frequent that removing them guts the corpus
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    lo, hi = len(ranked) // 5, len(ranked) // 2
    candidates = [i for i in ranked[lo:hi] if counts[i] >= min_occurrences]
    if len(candidates) < n_new:
        raise ValueError(f"only {len(candidates)} items have >= {min_occurrences} occurrences in the mid range")
    chosen = sorted(rng.choice(len(candidates), size=n_new, replace=False).tolist())
    new_items = [candidates[c] for c in chosen]
    new_set = set(new_items)

    items_payload = []
    for target in new_items:
        occurrences = []  # (window dict, history list) in corpus order
        for user, seq in by_user.items():
            for p, item in enumerate(seq):
                if item != target:
                    continue
                left = [x for x in seq[max(0, p - omega1) : p] if x not in new_set]
                right = [x for x in seq[p + 1 : p + 1 + omega2] if x not in new_set]
                history = [x for x in seq[:p] if x not in new_set]
                if not left and not right:
                    continue
                occurrences.append(({"left": left, "right": right}, history))
        half = max(1, (len(occurrences) + 1) // 2)
        windows = [w for w, _ in occurrences[:half]]
        test_cases = [
            {"history": h} for _, h in occurrences[half:] if len(h) >= 2
        ]
        items_payload.append({"item": target, "windows": windows, "test_cases": test_cases})

    filtered = [it for it in interactions if it.item not in new_set]
    payload = {"omega1": omega1, "omega2": omega2, "items": items_payload}
    return filtered, payload
