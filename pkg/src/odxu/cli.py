"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import dec, gbdt, nn, payload, pipeline, store
from .config import RunConfig
from .pipeline import Fitted, OutDir, RunManifest, ScenarioConfig, SourceModels

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, top: bool) -> None:
    d = None if top else argparse.SUPPRESS
    p.add_argument("--config", default=d, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d, help="override the configured seed")
    p.add_argument("--out", default=d, help="output file (extract, resample) or directory (everything else)")
    p.add_argument("-v", "--verbose", action="store_true", default=False if top else argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odxu", description="Payload-byte intrusion detection with transfer learning and uncertainty.")
    _common(parser, top=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help):
        p = sub.add_parser(name, help=help)
        _common(p, top=False)
        return p

    p = cmd("extract", "pcap -> payload dataset (CSV or binary)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--rules", help="JSON list of labeling rules")

    p = cmd("resample", "rescale per-class counts")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--plan", required=True, help='JSON object or file: {"class": multiplier}')

    p = cmd("train-dec", "fit autoencoder and clustering stages")
    p.add_argument("--data", required=True)

    for name, help in (("train-clf", "fit the tree classifier on encoded rows"), ("eval", "detection metrics on the held-out split"),
                       ("train-meta", "fit the three metamodels")):
        p = cmd(name, help)
        p.add_argument("--data", required=True)
        p.add_argument("--dec", required=True, help="clustering model file")
        if name == "train-clf":
            p.add_argument("--base", help="classifier file to fine-tune instead of training fresh")
        else:
            p.add_argument("--clf", required=True, help="classifier model file")

    p = cmd("transfer", "transfer scenarios on a target dataset")
    p.add_argument("--source", help="source dataset (trained from scratch when --source-models is absent)")
    p.add_argument("--source-models", help="directory holding ae.odxunn, dec.odxudc, clf.odxugb, manifest.json")
    p.add_argument("--target", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", action="store_true", help="all six cases at every configured portion")
    g.add_argument("--case", type=int, choices=sorted(pipeline.CASES))
    p.add_argument("--portion", type=float, default=1.0)

    p = cmd("osr", "open-set recognition with one class held out")
    p.add_argument("--data", required=True)
    p.add_argument("--unknown", required=True, help="class name to hold out")

    p = cmd("misclf", "misclassification detection")
    p.add_argument("--data", required=True)
    p.add_argument("--dec", help="use this clustering model instead of training")
    p.add_argument("--clf", help="use this classifier instead of training")
    return parser


# ---------------------------------------------------------------------------
# handlers


def _out_dir(args, default: str) -> Path:
    return Path(getattr(args, "out", None) or default)


def _fitted_from_files(data: payload.PayloadSet, cfg: RunConfig, dec_path, clf_path) -> Fitted:
    parts = pipeline.protocol_split(data.y, cfg, pipeline.stage_seeds(cfg.seed)["split"], data.classes)
    clf = store.load(clf_path, "gbdt") if clf_path else None
    return Fitted(None, store.load(dec_path, "dec"), clf, list(data.classes), parts)


def do_extract(args, cfg):
    if not args.out:
        raise UsageError("extract needs --out <file.csv|file.odxupb>")
    rules = payload.parse_rules(json.loads(Path(args.rules).read_text())) if args.rules else []
    stats = Counter()
    with open(args.inp, "rb") as fh:
        records = payload.label_packets(payload.extract_all(payload.parse_pcap(fh), stats), rules)
    if not records:
        raise ValueError(f"{args.inp}: no packet carried a transport payload ({dict(stats)})")
    payload.save(payload.PayloadSet.from_records(records), args.out)
    print(json.dumps(dict(stats), sort_keys=True))


def do_resample(args, cfg):
    if not args.out:
        raise UsageError("resample needs --out <file>")
    text = Path(args.plan).read_text() if Path(args.plan).is_file() else args.plan
    data = payload.resample(payload.load(args.inp), json.loads(text), cfg.seed)
    payload.save(data, args.out)
    print(json.dumps(data.counts(), sort_keys=True))


def do_train_dec(args, cfg):
    data = payload.load(args.data)
    man = RunManifest("train_dec", cfg.to_dict(), pipeline.stage_seeds(cfg.seed))
    seeds = man.seeds
    X, y = data.features(), data.y
    parts = pipeline.protocol_split(y, cfg, seeds["split"], data.classes)
    tr, va = parts["train"], parts["valid"]
    with pipeline._timed(man.timings, "autoencoder"):
        ae, t1 = nn.train_autoencoder(X[tr], cfg.ae.spec(X.shape[1]), cfg.ae.train(seeds["ae"]), cfg.ae.stop(), X[va])
    with pipeline._timed(man.timings, "cluster"):
        model, t2 = dec.train_dec(ae, X[tr], y[tr], cfg.dec.train(seeds["dec"]), cfg.dec.stop(), len(data.classes), (X[va], y[va]))
    man.record("train", "train", data.X, tr)
    man.record("train", "valid", data.X, va)
    man.extra = {"classes": data.classes, "epochs": {"autoencoder": len(t1), "cluster": len(t2)}}
    o = OutDir(_out_dir(args, "out"), man)
    o.model("ae.odxunn", ae)
    o.model("dec.odxudc", model)
    print(o.finish())


def do_train_clf(args, cfg):
    data = payload.load(args.data)
    f = _fitted_from_files(data, cfg, args.dec, None)
    xt = f.parts["xgb_train"]
    Z = f.dec.encode(data.features()[xt])
    man = RunManifest("train_clf", cfg.to_dict(), pipeline.stage_seeds(cfg.seed))
    params = cfg.clf.params(man.seeds["clf"])
    with pipeline._timed(man.timings, "classifier"):
        if args.base:
            clf = gbdt.continue_training(store.load(args.base, "gbdt"), Z, data.y[xt], params, extra_rounds=cfg.clf.rounds)
        else:
            clf = gbdt.train(Z, data.y[xt], params, n_classes=len(data.classes))
    man.record("train", "xgb_train", data.X, xt)
    o = OutDir(_out_dir(args, "out"), man)
    o.model("clf.odxugb", clf)
    print(o.finish("manifest_clf.json"))


def do_eval(args, cfg):
    data = payload.load(args.data)
    f = _fitted_from_files(data, cfg, args.dec, args.clf)
    te = f.parts["xgb_test"]
    man = RunManifest("eval", cfg.to_dict(), pipeline.stage_seeds(cfg.seed))
    man.metrics = pipeline.classification_metrics(
        f.dec, f.clf, data.features()[te], data.y[te], pipeline.benign_id(data.classes, cfg.benign)
    )
    man.record("eval", "xgb_test", data.X, te)
    o = OutDir(_out_dir(args, "out"), man)
    o.json("metrics.json", man.metrics)
    o.finish("manifest_eval.json")
    print(json.dumps(man.metrics, indent=2, sort_keys=True))


def do_train_meta(args, cfg):
    data = payload.load(args.data)
    f = _fitted_from_files(data, cfg, args.dec, args.clf)
    pool = f.parts["xgb_test"]
    Z = f.dec.encode(data.features()[pool])
    man = RunManifest("train_meta", cfg.to_dict(), pipeline.stage_seeds(cfg.seed))
    stage = pipeline.fit_meta_stage(f.clf, Z, data.y[pool], cfg, man.timings)
    man.record("train", "meta_train", data.X, pool[stage.train])
    o = OutDir(_out_dir(args, "out"), man)
    for variant, md in stage.train_aug.items():
        o.model(f"meta_{variant}.odxugb", stage.models[variant].ensemble)
        o.csv(f"meta_{variant}_train.csv", md.columns + ["y_meta"],
              [[*map(pipeline._fmt, r), int(t)] for r, t in zip(md.X, md.y)])
    o.csv("background.csv", [f"x{i}" for i in range(Z.shape[1])], [[pipeline._fmt(v) for v in r] for r in stage.background])
    print(o.finish("manifest_meta.json"))


def do_transfer(args, cfg):
    target = payload.load(args.target)
    out = _out_dir(args, "out")
    if args.source_models:
        d = Path(args.source_models)
        classes = RunManifest.read(d / "manifest.json").extra.get("classes", [])
        source = SourceModels.load(d / "ae.odxunn", d / "dec.odxudc", d / "clf.odxugb", classes)
    elif args.source:
        fitted, _ = pipeline.run_pipeline(payload.load(args.source), cfg, out / "source")
        source = SourceModels.from_fitted(fitted)
    else:
        raise UsageError("transfer needs --source or --source-models")
    if args.grid:
        rows, _ = pipeline.run_grid(source, target, cfg, out=out)
        print(",".join(pipeline.grid_header(pipeline.CASES)))
        for r in rows:
            print(",".join([str(r[0])] + [f"{v:.4f}" for v in r[1:]]))
    else:
        man = pipeline.run_scenario(ScenarioConfig.case(args.case, args.portion), source, target, cfg, out=out)
        print(json.dumps(man.metrics, indent=2, sort_keys=True))


def do_osr(args, cfg):
    man = pipeline.run_osr(payload.load(args.data), cfg, args.unknown, out=_out_dir(args, "out"))
    print(json.dumps(man.metrics, indent=2, sort_keys=True))


def do_misclf(args, cfg):
    data = payload.load(args.data)
    fitted = None
    if args.dec or args.clf:
        if not (args.dec and args.clf):
            raise UsageError("misclf needs both --dec and --clf, or neither")
        fitted = _fitted_from_files(data, cfg, args.dec, args.clf)
    man = pipeline.run_misclassification(data, cfg, fitted, out=_out_dir(args, "out"))
    print(json.dumps(man.metrics, indent=2, sort_keys=True))


HANDLERS = {
    "extract": do_extract, "resample": do_resample, "train-dec": do_train_dec, "train-clf": do_train_clf,
    "train-meta": do_train_meta, "eval": do_eval, "transfer": do_transfer, "osr": do_osr, "misclf": do_misclf,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"odxu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"odxu {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
