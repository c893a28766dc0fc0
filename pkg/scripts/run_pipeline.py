"""Fit autoencoder, clustering and tree classifier on a dataset, plus the FcNN baseline.

    python3 scripts/run_pipeline.py --data corpus.odxupb --out runs/pipeline
    python3 scripts/run_pipeline.py --demo --out runs/demo
"""

import argparse
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from odxu import payload, pipeline
from odxu.config import RunConfig
from odxu.synth import blob_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="payload dataset (.csv or .odxupb)")
    src.add_argument("--demo", action="store_true", help="3000-row 3-class synthetic corpus")
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--no-fcnn", action="store_true")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict(
        {"ae": {"max_epochs": 15, "eta": 10}, "dec": {"max_epochs": 15, "eta": 10}, "fcnn": {"max_epochs": 5}}
    )
    data = blob_corpus(3000, 3, seed=7) if args.demo else payload.load(args.data)
    out = Path(args.out)
    with threadpool_limits(1):
        t0 = time.perf_counter()
        _, man = pipeline.run_pipeline(data, cfg, out)
        print(f"pipeline ({time.perf_counter() - t0:.0f} s)")
        print(json.dumps(man.metrics, indent=2, sort_keys=True))
        if not args.no_fcnn:
            fm = pipeline.run_fcnn_baseline(data, cfg, out / "fcnn")
            print("fcnn baseline")
            print(json.dumps(fm.metrics, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
