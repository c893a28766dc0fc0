"""Transfer grid on a source corpus and a target whose class means are translated.

Prints accuracy per (portion, case) and writes transfer_grid.csv with a
manifest under --out.

    python3 scripts/run_transfer_grid.py --out runs/transfer
"""

import argparse
import time

from threadpoolctl import threadpool_limits

from odxu import pipeline
from odxu.config import RunConfig
from odxu.synth import blob_corpus, blob_means, translate_means

DEFAULT = {
    "ae": {"hidden": [128, 32], "max_epochs": 15, "eta": 5},
    "dec": {"max_epochs": 15, "eta": 5},
    "clf": {"rounds": 30},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--translate", type=float, default=60.0, help="per-class mean step on active bytes")
    ap.add_argument("--target-rows", type=int, default=3000)
    ap.add_argument("--target-noise", type=float, default=250.0)
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()

    cfg = RunConfig.from_dict({**DEFAULT, "seed": args.seed})
    base = blob_means(3, 11)
    source = blob_corpus(1500, 3, seed=1, means=base, noise=120)
    target = blob_corpus(args.target_rows, 3, seed=2, means=translate_means(base, args.translate, seed=5), noise=args.target_noise)
    t0 = time.perf_counter()
    with threadpool_limits(1):
        fitted, man = pipeline.run_pipeline(source, cfg)
        print(f"source accuracy {man.metrics['multiclass_accuracy']:.4f}")
        rows, _ = pipeline.run_grid(pipeline.SourceModels.from_fitted(fitted), target, cfg, out=args.out)
    print(",".join(pipeline.grid_header(pipeline.CASES)))
    for r in rows:
        print(",".join([str(r[0])] + [f"{v:.4f}" for v in r[1:]]))
    print(f"{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
