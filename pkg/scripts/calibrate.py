"""Train several schemes on the desk corpus and print held-out metrics.

Usage: python3 scripts/calibrate.py [--schemes A,B] [--seeds 0,1] [--epochs 60] [--data DIR]
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from snrkit import data as D
from snrkit.harness.evaluate import divergence, evaluate, train_split_rank1
from snrkit.harness.schedule import TrainConfig
from snrkit.harness.train import train_run


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--schemes", default="Baseline,Baseline-IN,Baseline-SNR,SNR w/o L_SNR")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--data", default="/tmp/snrkit_desk")
    ap.add_argument("--out", default=None, help="optional JSON-lines results file")
    args = ap.parse_args()

    root = Path(args.data)
    if not (root / "manifest.jsonl").exists():
        D.generate_from_spec(D.desk_dataset_spec(), root)
    man = D.DatasetManifest.read(root / "manifest.jsonl")
    for seed in [int(s) for s in args.seeds.split(",")]:
        for scheme in args.schemes.split(","):
            t = time.time()
            tc = TrainConfig(scheme=scheme, seed=seed, epochs=args.epochs, warmup_epochs=min(20, args.epochs))
            model, rec = train_run(tc, man)
            m = evaluate(model, man, 2)
            div = divergence(model, man, 0, 1, split="train").per_stage
            row = {
                "scheme": scheme, "seed": seed, "mAP": round(m["mAP"], 4), "r1": round(m["cmc"]["1"], 4),
                "train_r1": round(train_split_rank1(model, man), 4), "div": [round(x, 4) for x in div],
                "loss": round(rec.epochs[-1]["total"], 4), "sec": round(time.time() - t, 1),
            }
            print(json.dumps(row), flush=True)
            if args.out:
                with open(args.out, "a") as fh:
                    fh.write(json.dumps(row) + "\n")


if __name__ == "__main__":
    main()
