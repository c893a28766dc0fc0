"""Experiment orchestration: splits, the three-stage pipeline, transfer
scenarios, misclassification and open-set runs, and run manifests.

Partition names used throughout:

``train`` / ``valid``
    DEC-Train, split 75/25; ``valid`` drives early stopping only.
``xgb_train`` / ``xgb_test``
    DEC-Test split in half; the classifier is fitted on the first and
    evaluated on the second.
``meta_train`` / ``meta_test``
    Subsampled rows of ``xgb_test`` used by the uncertainty runs.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dec, gbdt, metrics, nn, store, uq
from .config import RunConfig
from .payload import PayloadSet

log = logging.getLogger(__name__)

AE_MODES = ("as_is", "fine_tune")
CLUSTER_MODES = ("fine_tune", "train")
CLF_MODES = ("train", "fine_tune")

CASES = {
    1: ("fine_tune", "train", "train"),
    2: ("as_is", "fine_tune", "train"),
    3: ("as_is", "train", "train"),
    4: ("fine_tune", "train", "fine_tune"),
    5: ("as_is", "fine_tune", "fine_tune"),
    6: ("as_is", "train", "fine_tune"),
}

SEED_OFFSETS = {"split": 0, "ae": 1, "dec": 2, "clf": 3, "meta": 4, "fcnn": 5, "osr": 6}


class InvalidScenario(ValueError):
    pass


def stage_seeds(seed: int) -> dict[str, int]:
    return {k: seed + v for k, v in SEED_OFFSETS.items()}


@contextlib.contextmanager
def _timed(timings: dict, name: str):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(n: int, fractions: np.ndarray) -> np.ndarray:
    raw = n * fractions
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def stratified_split(y, fractions, seed, names=None) -> list[np.ndarray]:
    """Partition ``range(len(y))`` by ``fractions`` within every class.

    Per-class counts follow the largest-remainder rule, so each class lands
    within one sample of its proportional share in every part.
    """
    y = np.asarray(y)
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fr]
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if len(members) < len(fr):
            name = names[int(c)] if names is not None else c
            raise ValueError(f"class {name!r} has {len(members)} samples, fewer than {len(fr)} partitions")
        members = rng.permutation(members)
        start = 0
        for k, cnt in enumerate(_largest_remainder(len(members), fr)):
            parts[k].append(members[start : start + cnt])
            start += cnt
    return [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]


def portion_subset(idx, y, portion: float, seed) -> np.ndarray:
    """Keep ``portion`` of ``idx`` per class; smaller portions are prefixes of larger ones."""
    idx = np.asarray(idx)
    if portion >= 1.0:
        return idx
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(y[idx]):
        members = rng.permutation(idx[y[idx] == c])
        keep.append(members[: max(1, int(round(portion * len(members))))])
    return np.sort(np.concatenate(keep))


def protocol_split(y, cfg: RunConfig, seed: int | None = None, names=None, portion: float = 1.0) -> dict[str, np.ndarray]:
    """The named partitions of one dataset; indices into ``y``."""
    s = cfg.split
    seed = cfg.seed if seed is None else seed
    y = np.asarray(y)
    dec_train, dec_test = stratified_split(y, [1 - s.dec_test, s.dec_test], [seed, 0], names)
    dec_train = portion_subset(dec_train, y, portion, [seed, 1])
    a, b = stratified_split(y[dec_train], [1 - s.valid, s.valid], [seed, 2], names)
    c, d = stratified_split(y[dec_test], [1 - s.xgb_test, s.xgb_test], [seed, 3], names)
    return {"train": dec_train[a], "valid": dec_train[b], "xgb_train": dec_test[c], "xgb_test": dec_test[d]}


# ---------------------------------------------------------------------------
# manifests


def row_digests(X: np.ndarray, idx) -> list[str]:
    """Digest of (row index, row content); equal digests mean the same dataset row."""
    out = []
    for i in np.asarray(idx, dtype=np.int64).tolist():
        h = hashlib.sha256(i.to_bytes(8, "little"))
        h.update(np.ascontiguousarray(X[i]).tobytes())
        out.append(h.hexdigest()[:32])
    return out


@dataclass
class RunManifest:
    kind: str
    config: dict
    seeds: dict
    digests: dict = field(default_factory=lambda: {"train": {}, "eval": {}})
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def record(self, role: str, name: str, X: np.ndarray, idx) -> None:
        self.digests[role][name] = row_digests(X, idx)

    def leakage(self) -> set[str]:
        train = {d for rows in self.digests["train"].values() for d in rows}
        ev = {d for rows in self.digests["eval"].values() for d in rows}
        return train & ev

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "config": self.config, "seeds": self.seeds, "digests": self.digests,
            "timings": self.timings, "artifacts": self.artifacts, "metrics": self.metrics, "extra": self.extra,
        }

    def write(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


class OutDir:
    """Writes artifacts under one directory and remembers their digests."""

    def __init__(self, root, manifest: RunManifest):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def _note(self, path: Path) -> Path:
        self.manifest.artifacts[path.name] = store.sha256_file(path)
        return path

    def model(self, name: str, model) -> Path:
        path = self.root / name
        store.save(model, path)
        return self._note(path)

    def json(self, name: str, obj) -> Path:
        path = self.root / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return self._note(path)

    def csv(self, name: str, header, rows) -> Path:
        path = self.root / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return self._note(path)

    def roc(self, name: str, scores, labels) -> Path:
        return self._note(metrics.write_roc_csv(metrics.roc_curve(scores, labels), self.root / name))

    def finish(self, name: str = "manifest.json") -> Path:
        return self.manifest.write(self.root / name)


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# three-stage pipeline


@dataclass
class Fitted:
    ae: nn.Autoencoder
    dec: dec.DecModel
    clf: gbdt.TreeEnsemble
    classes: list[str]
    parts: dict[str, np.ndarray]
    traces: dict = field(default_factory=dict)


def benign_id(classes, name: str) -> int:
    """Index of the benign class; class 0 stands in when no class carries that name."""
    return classes.index(name) if name in classes else 0


def classification_metrics(model: dec.DecModel, clf: gbdt.TreeEnsemble, X, y, benign: int) -> dict:
    """All six detection metrics; competence uses the top-two probability margin as certainty."""
    p = clf.predict_proba(model.encode(X))
    frame = metrics.EvalFrame(y, p.argmax(axis=1), benign, uq.confidence_score(p))
    report = metrics.classification_report(frame)
    report.update(metrics.error_counts(frame))
    return report


def fit_pipeline(data: PayloadSet, cfg: RunConfig, timings: dict | None = None) -> Fitted:
    """Autoencoder, clustering and classifier trained from scratch on ``data``."""
    timings = {} if timings is None else timings
    seeds = stage_seeds(cfg.seed)
    X, y = data.features(), data.y
    k = len(data.classes)
    parts = protocol_split(y, cfg, seeds["split"], data.classes)
    tr, va = parts["train"], parts["valid"]
    with _timed(timings, "autoencoder"):
        ae, ae_trace = nn.train_autoencoder(X[tr], cfg.ae.spec(X.shape[1]), cfg.ae.train(seeds["ae"]), cfg.ae.stop(), X[va])
    with _timed(timings, "cluster"):
        model, dec_trace = dec.train_dec(ae, X[tr], y[tr], cfg.dec.train(seeds["dec"]), cfg.dec.stop(), k, (X[va], y[va]))
    with _timed(timings, "classifier"):
        xt = parts["xgb_train"]
        clf = gbdt.train(model.encode(X[xt]), y[xt], cfg.clf.params(seeds["clf"]), n_classes=k)
    return Fitted(ae, model, clf, list(data.classes), parts, {"autoencoder": ae_trace, "cluster": dec_trace})


def _trace_dict(t: nn.EpochLossTrace) -> dict:
    return {"train": t.train, "valid": t.valid, "epochs": len(t), "stopped_early": t.stopped_early}


def _record_parts(man: RunManifest, X, parts: dict, index_map=None) -> None:
    for name in ("train", "valid", "xgb_train"):
        idx = parts[name] if index_map is None else index_map[parts[name]]
        man.record("train", name, X, idx)


def run_pipeline(data: PayloadSet, cfg: RunConfig, out=None) -> tuple[Fitted, RunManifest]:
    """Fit all three stages and evaluate on the classifier's held-out split."""
    man = RunManifest("pipeline", cfg.to_dict(), stage_seeds(cfg.seed))
    fitted = fit_pipeline(data, cfg, man.timings)
    X, y = data.features(), data.y
    te = fitted.parts["xgb_test"]
    with _timed(man.timings, "evaluate"):
        man.metrics = classification_metrics(fitted.dec, fitted.clf, X[te], y[te], benign_id(data.classes, cfg.benign))
    _record_parts(man, data.X, fitted.parts)
    man.record("eval", "xgb_test", data.X, te)
    man.extra = {"classes": data.classes, "traces": {k: _trace_dict(v) for k, v in fitted.traces.items()}}
    if out is not None:
        o = OutDir(out, man)
        o.model("ae.odxunn", fitted.ae)
        o.model("dec.odxudc", fitted.dec)
        o.model("clf.odxugb", fitted.clf)
        o.json("metrics.json", man.metrics)
        o.finish()
    return fitted, man


def run_fcnn_baseline(data: PayloadSet, cfg: RunConfig, out=None) -> RunManifest:
    """Fully connected classifier on raw payload features, same held-out split."""
    seeds = stage_seeds(cfg.seed)
    man = RunManifest("fcnn", cfg.to_dict(), seeds)
    parts = protocol_split(data.y, cfg, seeds["split"], data.classes)
    X, y = data.features(), data.y
    fit_rows = np.sort(np.concatenate([parts["train"], parts["valid"], parts["xgb_train"]]))
    with _timed(man.timings, "fcnn"):
        model = nn.train_fcnn(X[fit_rows], y[fit_rows], tuple(cfg.fcnn.hidden), cfg.fcnn.train(seeds["fcnn"]), len(data.classes))
    te = parts["xgb_test"]
    p = model.predict_proba(X[te])
    frame = metrics.EvalFrame(y[te], p.argmax(axis=1), benign_id(data.classes, cfg.benign), uq.confidence_score(p))
    man.metrics = metrics.classification_report(frame)
    man.metrics.update(metrics.error_counts(frame))
    man.record("train", "fit", data.X, fit_rows)
    man.record("eval", "xgb_test", data.X, te)
    if out is not None:
        o = OutDir(out, man)
        o.model("fcnn.odxunn", model)
        o.json("metrics.json", man.metrics)
        o.finish()
    return man


# ---------------------------------------------------------------------------
# transfer scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    ae_mode: str
    cluster_mode: str
    clf_mode: str
    portion: float = 1.0

    def __post_init__(self):
        for value, allowed, what in (
            (self.ae_mode, AE_MODES, "ae_mode"),
            (self.cluster_mode, CLUSTER_MODES, "cluster_mode"),
            (self.clf_mode, CLF_MODES, "clf_mode"),
        ):
            if value not in allowed:
                raise ValueError(f"{what} must be one of {allowed}, got {value!r}")
        if not 0.0 < self.portion <= 1.0:
            raise ValueError(f"portion must be in (0, 1], got {self.portion}")
        # a fine-tuned encoder no longer matches the source clustering checkpoint
        if self.ae_mode == "fine_tune" and self.cluster_mode != "train":
            raise InvalidScenario(
                f"ae_mode=fine_tune requires cluster_mode=train (got {self.cluster_mode}/{self.clf_mode})"
            )

    @classmethod
    def case(cls, n: int, portion: float = 1.0) -> "ScenarioConfig":
        if n not in CASES:
            raise ValueError(f"case must be 1..6, got {n}")
        return cls(*CASES[n], portion=portion)

    @property
    def modes(self) -> tuple[str, str, str]:
        return (self.ae_mode, self.cluster_mode, self.clf_mode)

    @property
    def case_number(self) -> int | None:
        return next((n for n, m in CASES.items() if m == self.modes), None)


def mode_triples():
    return [(a, c, k) for a in AE_MODES for c in CLUSTER_MODES for k in CLF_MODES]


def scenario_is_valid(ae_mode: str, cluster_mode: str, clf_mode: str) -> bool:
    try:
        ScenarioConfig(ae_mode, cluster_mode, clf_mode)
    except InvalidScenario:
        return False
    return True


@dataclass
class SourceModels:
    ae: nn.Autoencoder | None
    dec: dec.DecModel | None
    clf: gbdt.TreeEnsemble | None
    classes: list[str]

    @classmethod
    def from_fitted(cls, f: Fitted) -> "SourceModels":
        return cls(f.ae, f.dec, f.clf, list(f.classes))

    @classmethod
    def load(cls, ae_path=None, dec_path=None, clf_path=None, classes=None) -> "SourceModels":
        return cls(
            store.load(ae_path, "autoencoder") if ae_path else None,
            store.load(dec_path, "dec") if dec_path else None,
            store.load(clf_path, "gbdt") if clf_path else None,
            list(classes or []),
        )


def label_translation(source_classes, target_classes, label_map: dict | None = None) -> np.ndarray:
    """Array mapping target label ids to source label ids."""
    out = []
    for name in target_classes:
        src = label_map.get(name, name) if label_map else name
        if src not in source_classes:
            raise ValueError(f"target class {name!r} has no source counterpart; add it to transfer.label_map")
        out.append(source_classes.index(src))
    if len(set(out)) != len(out):
        raise ValueError("label map sends two target classes to one source class")
    return np.array(out, dtype=np.int64)


def _need(model, what: str):
    if model is None:
        raise ValueError(f"scenario needs a source {what} checkpoint")
    return model


def _dec_stage(sc: ScenarioConfig, source: SourceModels, X, y, parts, cfg: RunConfig, k: int, timings: dict):
    seeds = stage_seeds(cfg.seed)
    factor = cfg.transfer.fine_tune_lr_factor
    tr, va = parts["train"], parts["valid"]
    ae = _need(source.ae, "autoencoder") if sc.cluster_mode == "train" else None
    if sc.ae_mode == "fine_tune":
        with _timed(timings, "autoencoder"):
            ae, _ = nn.train_autoencoder(X[tr], ae, cfg.ae.train(seeds["ae"]).scaled(factor), cfg.ae.stop(), X[va])
    with _timed(timings, "cluster"):
        if sc.cluster_mode == "train":
            model, _ = dec.train_dec(ae, X[tr], y[tr], cfg.dec.train(seeds["dec"]), cfg.dec.stop(), k, (X[va], y[va]))
        else:
            src = _need(source.dec, "clustering")
            model, _ = dec.train_dec(src, X[tr], y[tr], cfg.dec.train(seeds["dec"]).scaled(factor), cfg.dec.stop(), k, (X[va], y[va]))
    return model


def run_scenario(
    sc: ScenarioConfig, source: SourceModels, target: PayloadSet, cfg: RunConfig, out=None, cache: dict | None = None,
) -> RunManifest:
    """One transfer case on ``target``; accuracy is measured on its held-out split.

    ``cache`` shares clustering-stage results between scenarios that differ
    only in the classifier mode.
    """
    ScenarioConfig(*sc.modes, portion=sc.portion)  # re-validate before any work
    seeds = stage_seeds(cfg.seed)
    man = RunManifest("scenario", cfg.to_dict(), seeds)
    man.extra = {"scenario": {"ae_mode": sc.ae_mode, "cluster_mode": sc.cluster_mode, "clf_mode": sc.clf_mode,
                              "portion": sc.portion, "case": sc.case_number}}
    X = target.features()
    y = target.y
    classes = list(target.classes)
    uses_source_labels = sc.cluster_mode == "fine_tune" or sc.clf_mode == "fine_tune"
    if uses_source_labels:
        y = label_translation(source.classes, target.classes, cfg.transfer.label_map)[y]
        classes = list(source.classes)
    k = len(classes)
    parts = protocol_split(target.y, cfg, seeds["split"], target.classes, portion=sc.portion)

    key = (sc.ae_mode, sc.cluster_mode, sc.portion, uses_source_labels)
    if cache is not None and key in cache:
        model = cache[key]
    else:
        model = _dec_stage(sc, source, X, y, parts, cfg, k, man.timings)
        if cache is not None:
            cache[key] = model

    xt, te = parts["xgb_train"], parts["xgb_test"]
    with _timed(man.timings, "classifier"):
        Z = model.encode(X[xt])
        if sc.clf_mode == "train":
            clf = gbdt.train(Z, y[xt], cfg.clf.params(seeds["clf"]), n_classes=k)
        else:
            base = _need(source.clf, "classifier")
            if base.class_count != k:
                raise ValueError(f"source classifier has {base.class_count} classes, target maps to {k}")
            clf = gbdt.continue_training(base, Z, y[xt], cfg.clf.params(seeds["clf"]), extra_rounds=cfg.clf.rounds)
    with _timed(man.timings, "evaluate"):
        man.metrics = classification_metrics(model, clf, X[te], y[te], benign_id(classes, cfg.benign))
    _record_parts(man, target.X, parts)
    man.record("eval", "xgb_test", target.X, te)
    if out is not None:
        o = OutDir(out, man)
        o.model("dec.odxudc", model)
        o.model("clf.odxugb", clf)
        o.json("metrics.json", man.metrics)
        o.finish()
    return man


def run_grid(
    source: SourceModels, target: PayloadSet, cfg: RunConfig, portions=None, cases=tuple(CASES), out=None,
) -> tuple[list[list], list[RunManifest]]:
    """Accuracy for every (portion, case); rows are portions, columns cases."""
    portions = tuple(cfg.transfer.portions if portions is None else portions)
    cache: dict = {}
    rows, manifests = [], []
    for portion in portions:
        row = [int(round(portion * 100))]
        for n in cases:
            m = run_scenario(ScenarioConfig.case(n, portion), source, target, cfg, cache=cache)
            manifests.append(m)
            row.append(m.metrics["multiclass_accuracy"])
        rows.append(row)
    if out is not None:
        man = RunManifest("transfer_grid", cfg.to_dict(), stage_seeds(cfg.seed))
        man.metrics = {"grid": rows, "cases": list(cases)}
        man.extra = {"cells": [m.to_dict() | {"digests": None} for m in manifests]}
        for m in manifests:
            for k, v in m.timings.items():
                man.timings[k] = man.timings.get(k, 0.0) + v
        o = OutDir(out, man)
        write_grid_csv(rows, cases, o)
        o.finish()
    return rows, manifests


def grid_header(cases) -> list[str]:
    return ["portion_pct"] + [f"Case {n}" for n in cases]


def write_grid_csv(rows, cases, o: OutDir) -> Path:
    return o.csv("transfer_grid.csv", grid_header(cases), [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows])


# ---------------------------------------------------------------------------
# uncertainty runs


@dataclass
class MetaStage:
    y_meta: np.ndarray  # over all rows of the evaluated pool
    train: np.ndarray
    test: np.ndarray
    background: np.ndarray
    models: dict  # variant -> uq.MetaModel
    train_aug: dict  # variant -> augmented training rows


def meta_partition(clf: gbdt.TreeEnsemble, Z, y, cfg: RunConfig, seed: int):
    """Error labels, the subsampled row set, and its stratified train/test split."""
    y_meta = uq.meta_labels(clf.predict(Z), y)
    rows = uq.select_meta_rows(y_meta, cfg.meta.ratio, seed)
    tf = cfg.meta.test_fraction
    a, b = stratified_split(y_meta[rows], [1 - tf, tf], [seed, 1])
    return y_meta, rows[a], rows[b]


def fit_meta_stage(clf: gbdt.TreeEnsemble, Z, y, cfg: RunConfig, timings: dict) -> MetaStage:
    seed = stage_seeds(cfg.seed)["meta"]
    y_meta, tr, te = meta_partition(clf, Z, y, cfg, seed)
    rng = np.random.default_rng([seed, 2])
    bg_rows = rng.choice(tr, size=min(cfg.meta.background, len(tr)), replace=False)
    background = Z[np.sort(bg_rows)]
    models, aug = {}, {}
    params = cfg.meta.boost.params(seed)
    for variant in ("prob", "shap", "ig"):
        with _timed(timings, f"meta_{variant}"):
            Xa = uq.augment(clf, Z[tr], variant, background)
            cols = uq.column_names(variant, Z.shape[1], clf.class_count)
            md = uq.MetaDataset(Xa, y_meta[tr], variant, cols, tr)
            models[variant] = uq.train_metamodel(md, params)
            aug[variant] = md
    return MetaStage(y_meta, tr, te, background, models, aug)


def score_all(clf: gbdt.TreeEnsemble, stage: MetaStage, Z, timings: dict | None = None) -> dict[str, np.ndarray]:
    timings = {} if timings is None else timings
    out = {}
    for method in uq.METHODS:
        with _timed(timings, f"score_{method}"):
            variant = uq.META_VARIANTS.get(method)
            mm = stage.models[variant] if variant else None
            out[method] = uq.score_with(method, clf, Z, mm, stage.background)
    return out


def uq_reports(scores: dict, labels) -> dict:
    return {m: metrics.uq_report(s, labels) for m, s in scores.items()}


def _write_uq(o: OutDir, stage: MetaStage, scores: dict, labels, report: dict, clf, prefix: str) -> None:
    o.json(f"{prefix}_report.json", report)
    for m, s in scores.items():
        o.roc(f"{prefix}_roc_{m}.csv", s, labels)
    header = ["row", "label", *scores]
    rows = [[i, int(labels[i]), *(_fmt(scores[m][i]) for m in scores)] for i in range(len(labels))]
    o.csv(f"{prefix}_scores.csv", header, rows)
    for variant, md in stage.train_aug.items():
        o.csv(f"meta_{variant}_train.csv", md.columns + ["y_meta"], [[*map(_fmt, r), int(t)] for r, t in zip(md.X, md.y)])
        o.model(f"meta_{variant}.odxugb", stage.models[variant].ensemble)


@dataclass
class UqSetup:
    """A fitted pipeline plus its metamodel stage, shared by the uncertainty runs."""

    fitted: Fitted
    pool: np.ndarray  # rows of the data forming the metamodel pool (classifier test split)
    Z: np.ndarray  # latents of the pool
    stage: MetaStage
    timings: dict


def prepare_uq(data: PayloadSet, cfg: RunConfig, fitted: Fitted | None = None) -> UqSetup:
    timings: dict = {}
    if fitted is None:
        fitted = fit_pipeline(data, cfg, timings)
    pool = fitted.parts["xgb_test"]
    Z = fitted.dec.encode(data.features()[pool])
    stage = fit_meta_stage(fitted.clf, Z, data.y[pool], cfg, timings)
    return UqSetup(fitted, pool, Z, stage, timings)


def run_misclassification(
    data: PayloadSet, cfg: RunConfig, fitted: Fitted | None = None, out=None, setup: UqSetup | None = None,
) -> RunManifest:
    """Can each method flag the base classifier's own mistakes?"""
    man = RunManifest("misclassification", cfg.to_dict(), stage_seeds(cfg.seed))
    setup = prepare_uq(data, cfg, fitted) if setup is None else setup
    man.timings.update(setup.timings)
    stage, pool = setup.stage, setup.pool
    labels = stage.y_meta[stage.test]
    scores = score_all(setup.fitted.clf, stage, setup.Z[stage.test], man.timings)
    report = uq_reports(scores, labels)
    for m in report:
        report[m]["metamodel_stages"] = int(m in uq.META_VARIANTS)
    man.metrics = report
    man.extra = {"n_meta_train": len(stage.train), "n_meta_test": len(stage.test), "n_errors_test": int(labels.sum())}
    _record_parts(man, data.X, setup.fitted.parts)
    man.record("train", "meta_train", data.X, pool[stage.train])
    man.record("eval", "meta_test", data.X, pool[stage.test])
    if out is not None:
        o = OutDir(out, man)
        _write_uq(o, stage, scores, labels, report, setup.fitted.clf, "misclf")
        o.finish()
    return man


def drop_class(data: PayloadSet, name: str) -> tuple[PayloadSet, np.ndarray, np.ndarray]:
    """Known-class subset (labels renumbered), its source rows, and the held-out rows."""
    if name not in data.classes:
        raise ValueError(f"unknown class {name!r} is not in the data (classes: {data.classes})")
    u = data.classes.index(name)
    known = np.flatnonzero(data.y != u)
    held = np.flatnonzero(data.y == u)
    if len(held) == 0:
        raise ValueError(f"class {name!r} has no samples")
    remap = np.cumsum(np.arange(len(data.classes)) != u) - 1
    classes = [c for c in data.classes if c != name]
    return PayloadSet(data.X[known], remap[data.y[known]], classes), known, held


def run_osr(data: PayloadSet, cfg: RunConfig, unknown: str, out=None, setup: UqSetup | None = None) -> RunManifest:
    """Hold one class out of all training and ask each method to flag it.

    ``setup`` may carry a pipeline already fitted on the known-class subset
    returned by :func:`drop_class`.
    """
    man = RunManifest("osr", cfg.to_dict(), stage_seeds(cfg.seed))
    known, known_rows, held_rows = drop_class(data, unknown)
    setup = prepare_uq(known, cfg) if setup is None else setup
    man.timings.update(setup.timings)
    fitted, stage, pool, Z = setup.fitted, setup.stage, setup.pool, setup.Z

    rng = np.random.default_rng(stage_seeds(cfg.seed)["osr"])
    n = min(len(stage.test), len(held_rows))
    mix_known = np.sort(rng.choice(stage.test, size=n, replace=False))
    mix_held = np.sort(rng.choice(held_rows, size=n, replace=False))
    Z_mix = np.vstack([Z[mix_known], fitted.dec.encode(data.features()[mix_held])])
    labels = np.r_[np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)]
    scores = score_all(fitted.clf, stage, Z_mix, man.timings)
    man.metrics = uq_reports(scores, labels)
    man.extra = {"unknown": unknown, "n_known": n, "n_unknown": n, "classes": known.classes}
    _record_parts(man, data.X, fitted.parts, index_map=known_rows)
    man.record("train", "meta_train", data.X, known_rows[pool[stage.train]])
    man.record("eval", "osr_known", data.X, known_rows[pool[mix_known]])
    man.record("eval", "osr_unknown", data.X, mix_held)
    if out is not None:
        o = OutDir(out, man)
        _write_uq(o, stage, scores, labels, man.metrics, fitted.clf, "osr")
        o.finish()
    return man


def run_uq_tasks(data: PayloadSet, cfg: RunConfig, unknown: str, out=None) -> tuple[RunManifest, RunManifest]:
    """Misclassification and open-set runs sharing one pipeline fitted without ``unknown``."""
    known, _, _ = drop_class(data, unknown)
    setup = prepare_uq(known, cfg)
    out = None if out is None else Path(out)
    misclf = run_misclassification(known, cfg, out=None if out is None else out / "misclf", setup=setup)
    osr = run_osr(data, cfg, unknown, out=None if out is None else out / "osr", setup=setup)
    return misclf, osr
