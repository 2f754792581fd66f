#!/usr/bin/env python3
"""Drive the full pipeline on a generated corpus: ingest -> pretrain ->
train-cities -> apply-eval, plus a popularity baseline and the new-item
protocol. A smoke-scale demo of every subcommand; pass --full for the
acceptance-scale corpus (takes a few minutes).
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tailrec.cli import main as tailrec
from tailrec.synthetic import new_item_artifacts, synthetic_interactions, write_log_csv

SMOKE = dict(n_users=300, n_items=100, min_len=5, max_len=12,
             pre=dict(max_len=12, d=24, n_blocks=2, n_heads=2, epochs=4,
                      batch_size=128, n_negatives=50, warmup_steps=50),
             cities_epochs=8, n_new=4)
FULL = dict(n_users=2000, n_items=500, min_len=5, max_len=15,
            pre=dict(max_len=20, d=32, n_blocks=2, n_heads=2, epochs=20,
                     batch_size=128, n_negatives=100, warmup_steps=100),
            cities_epochs=50, n_new=8)


def run(*argv):
    printable = " ".join(str(a) for a in argv)
    print(f"\n$ tailrec {printable}")
    rc = tailrec([str(a) for a in argv])
    if rc != 0:
        sys.exit(f"command failed with exit code {rc}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--variant", choices=["gru", "transformer"], default="gru")
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--full", action="store_true", help="acceptance-scale corpus")
    args = p.parse_args()

    scale = FULL if args.full else SMOKE
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()

    rows = synthetic_interactions(
        n_users=scale["n_users"], n_items=scale["n_items"], zipf_s=1.2,
        transition_prob=0.75, min_len=scale["min_len"], max_len=scale["max_len"],
        seed=11,
    )
    rows, payload = new_item_artifacts(rows, n_new=scale["n_new"],
                                       omega1=scale["pre"]["max_len"] - 1,
                                       omega2=0, seed=11)
    log = os.path.join(args.out, "log.csv")
    write_log_csv(log, rows)
    contexts = os.path.join(args.out, "new_item_contexts.json")
    with open(contexts, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)

    config = os.path.join(args.out, "config.json")
    with open(config, "w", encoding="utf-8") as fh:
        json.dump({
            "dataset": {"path": log},
            "variant": args.variant,
            "seed": args.seed,
            "out": args.out,
            "pretrain": scale["pre"],
            "cities": {"epochs": scale["cities_epochs"]},
            "evaluate": {"n_negatives": scale["pre"]["n_negatives"]},
            "new_item": {"contexts": contexts},
        }, fh, indent=1)
    print(f"corpus: {len(rows)} interactions; config: {config}")

    run("--config", config, "ingest")
    run("--config", config, "pretrain")
    run("--config", config, "baseline", "--name", "pop")
    run("--config", config, "train-cities")
    run("--config", config, "apply-eval")
    run("--config", config, "new-item")
    run("--config", config, "export-embeddings",
        "--checkpoint", os.path.join(args.out, f"applied_{args.variant}.json"))

    print(f"\ndone in {time.time() - t0:.1f}s; artifacts in {args.out}/")


if __name__ == "__main__":
    main()
