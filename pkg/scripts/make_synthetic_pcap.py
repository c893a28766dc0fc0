"""Write a labeled synthetic capture: blob payloads as UDP packets, one port per class.

    python3 scripts/make_synthetic_pcap.py --rows 3000 --classes 3 --out corpus.pcap

Also writes ``<out>.rules.json`` for ``odxu extract --rules``.
"""

import argparse
import json
from pathlib import Path

from odxu import payload
from odxu.synth import blob_corpus, corpus_packets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=3000)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--noise", type=float, default=40.0)
    ap.add_argument("--shift", type=float, default=0.0, help="translate all class means (target domain)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--names", help="comma-separated class names")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    names = args.names.split(",") if args.names else None
    data = blob_corpus(args.rows, args.classes, seed=args.seed, noise=args.noise, shift=args.shift, class_names=names)
    packets, rules = corpus_packets(data)
    out = Path(args.out)
    with out.open("wb") as fh:
        payload.write_pcap(packets, fh)
    out.with_suffix(".rules.json").write_text(json.dumps(rules, indent=1) + "\n")
    print(f"{len(packets)} packets -> {out}; counts {data.counts()}")


if __name__ == "__main__":
    main()
