#!/usr/bin/env python3
"""Generate a synthetic long-tail interaction log (plus a new-item payload).

Writes <out>/log.csv and, when --new-items > 0, <out>/new_item_contexts.json
with the withheld items' context windows and held-out test cases. The log is
ready for `tailrec ingest`; the payload feeds `tailrec new-item`.
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tailrec.synthetic import new_item_artifacts, synthetic_interactions, write_log_csv


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--zipf", type=float, default=1.2, help="popularity skew exponent")
    p.add_argument("--transition-prob", type=float, default=0.75,
                   help="probability the next action follows the planted successor chain")
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--new-items", type=int, default=8,
                   help="mid-popularity items to withhold for the new-item protocol")
    p.add_argument("--window", type=int, default=9,
                   help="context half-width exported for withheld items")
    return p.parse_args()


def main():
    args = parse_args()
    os.makedirs(args.out, exist_ok=True)
    rows = synthetic_interactions(
        n_users=args.users, n_items=args.items, zipf_s=args.zipf,
        transition_prob=args.transition_prob, min_len=args.min_len,
        max_len=args.max_len, seed=args.seed,
    )
    payload = None
    if args.new_items > 0:
        rows, payload = new_item_artifacts(
            rows, n_new=args.new_items, omega1=args.window, omega2=args.window,
            seed=args.seed,
        )

    log_path = os.path.join(args.out, "log.csv")
    write_log_csv(log_path, rows)
    print(f"wrote {len(rows)} interactions to {log_path}")

    if payload is not None:
        ctx_path = os.path.join(args.out, "new_item_contexts.json")
        with open(ctx_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
        n_cases = sum(len(e["test_cases"]) for e in payload["items"])
        print(f"withheld {len(payload['items'])} items "
              f"({n_cases} test cases) -> {ctx_path}")


if __name__ == "__main__":
    main()
