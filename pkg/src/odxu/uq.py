"""Uncertainty scores for a tree-ensemble classifier.

Two score-based methods (top-two probability margin, Shannon entropy) and
three metamodels: a binary booster trained to predict whether the base
classifier is wrong, fed the base input augmented with either sorted class
probabilities, exact Shapley values, or per-feature cumulative split gain.

Every ``score_with`` output is an *uncertainty*: larger means less certain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import gbdt
from .gbdt import BoostParams, TreeEnsemble
from .nn import softmax

MAX_SHAP_FEATURES = 16
METHODS = ("confidence", "entropy", "meta_prob", "meta_shap", "meta_ig")
META_VARIANTS = {"meta_prob": "prob", "meta_shap": "shap", "meta_ig": "ig"}


class ShapCapacityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# score-based


def confidence_score(p) -> np.ndarray | float:
    """Largest minus second-largest class probability."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("confidence needs at least two classes")
    top = np.sort(p, axis=-1)
    out = top[..., -1] - top[..., -2]
    return float(out) if out.ndim == 0 else out


def entropy_score(p) -> np.ndarray | float:
    """Natural-log Shannon entropy with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# exact Shapley values


@dataclass
class ShapRow:
    phi: np.ndarray
    base_value: float  # value of the empty coalition
    value: float  # value of the full coalition

    @property
    def efficiency_gap(self) -> float:
        return float(np.sum(self.phi) - (self.value - self.base_value))


@lru_cache(maxsize=None)
def shapley_weights(d: int) -> np.ndarray:
    """``|S|! (d - |S| - 1)! / d!`` indexed by coalition size."""
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


@lru_cache(maxsize=None)
def _popcount(d: int) -> np.ndarray:
    S = np.arange(1 << d)
    return np.array([bin(s).count("1") for s in S.tolist()], dtype=np.int64)


@dataclass
class _LeafPaths:
    """Root-to-leaf constraints of one tree, padded to the deepest path."""

    feature: np.ndarray  # (L, D) int
    threshold: np.ndarray  # (L, D)
    left: np.ndarray  # (L, D) bool: path goes left at this step
    valid: np.ndarray  # (L, D) bool: step exists
    weight: np.ndarray  # (L,)

    @classmethod
    def of(cls, tree) -> "_LeafPaths":
        paths = list(tree.leaf_paths())
        depth = max(1, max(len(p) for _, p in paths))
        L = len(paths)
        feat = np.zeros((L, depth), dtype=np.int64)
        thr = np.zeros((L, depth))
        left = np.zeros((L, depth), dtype=bool)
        valid = np.zeros((L, depth), dtype=bool)
        for i, (_, path) in enumerate(paths):
            for j, (f, t, went_left) in enumerate(path):
                feat[i, j], thr[i, j], left[i, j], valid[i, j] = f, t, went_left, True
        return cls(feat, thr, left, valid, tree.weight[[leaf for leaf, _ in paths]])


class ShapPlan:
    """Per-model path tables, reusable across explained samples."""

    def __init__(self, model: TreeEnsemble):
        self.model = model
        self.trees = [(c, _LeafPaths.of(tree)) for c, tree in model.trees]
        self._comp: dict[tuple, np.ndarray] = {}

    def compress(self, feats: tuple) -> np.ndarray:
        """Map every full coalition bitmask onto the bits of ``feats`` only."""
        if feats not in self._comp:
            S = np.arange(1 << self.model.n_features)
            comp = np.zeros_like(S)
            for j, f in enumerate(feats):
                comp |= ((S >> f) & 1) << j
            self._comp[feats] = comp
        return self._comp[feats]


def _bits_of(mask: int) -> tuple:
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


def _tree_coalition_leaves(tp: _LeafPaths, x, bg, plan: ShapPlan) -> np.ndarray:
    """Leaf weight reached by every hybrid point of one tree, shape ``(2**d, R)``.

    Along a path, a step that only ``x`` satisfies forces its feature into the
    coalition, a step that only the background row satisfies forces it out,
    and a step neither satisfies makes the leaf unreachable for that row.
    """
    R = len(bg)
    x_ok = ((x[tp.feature] < tp.threshold) == tp.left) | ~tp.valid
    r_ok = ((bg[:, tp.feature] < tp.threshold) == tp.left) | ~tp.valid
    bits = np.left_shift(1, tp.feature)
    m1 = np.bitwise_or.reduce(np.where(x_ok & ~r_ok, bits, 0), axis=-1)
    m0 = np.bitwise_or.reduce(np.where(~x_ok & r_ok, bits, 0), axis=-1)
    live = ~(~x_ok & ~r_ok).any(axis=-1) & ((m1 & m0) == 0)
    ri, li = np.nonzero(live)
    m1, m0 = m1[ri, li], m0[ri, li]
    feats = _bits_of(int(np.bitwise_or.reduce(m1 | m0)) if len(m1) else 0)
    if feats:
        pos = np.array(feats)
        c1 = ((m1[:, None] >> pos) & 1) @ (1 << np.arange(len(pos)))
        c0 = ((m0[:, None] >> pos) & 1) @ (1 << np.arange(len(pos)))
    else:
        c1 = c0 = np.zeros(len(ri), dtype=np.int64)
    s = np.arange(1 << len(feats))[:, None]
    si, pi = np.nonzero(((s & c1) == c1) & ((s & c0) == 0))
    small = np.empty((1 << len(feats), R))
    small[si, ri[pi]] = tp.weight[li[pi]]
    if not feats:
        return np.broadcast_to(small[0], (1 << len(x), R))
    return small[plan.compress(feats)]


def coalition_margins(model: TreeEnsemble, x, background, plan: ShapPlan | None = None) -> np.ndarray:
    """Margins of every hybrid point, shape ``(2**d, R, K)``.

    The hybrid for coalition ``S`` (bitmask over features) and background row
    ``r`` takes ``x`` on features in ``S`` and ``r`` elsewhere. Trees are
    accumulated in model order, so each entry matches ``model.margins`` on the
    explicit hybrid row bit for bit.
    """
    plan = ShapPlan(model) if plan is None else plan
    x = np.asarray(x, dtype=np.float64)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    M = np.full((1 << model.n_features, len(bg), model.class_count), model.base_score)
    for c, tp in plan.trees:
        M[:, :, c] += _tree_coalition_leaves(tp, x, bg, plan)
    return M


def coalition_values(model: TreeEnsemble, x, background, class_index: int, output: str = "proba", plan=None) -> np.ndarray:
    """``b(S)`` for every coalition: background mean of the explained output."""
    M = coalition_margins(model, x, background, plan)
    if output == "proba":
        out = softmax(M)[..., class_index]
    elif output == "margin":
        out = M[..., class_index]
    else:
        raise ValueError(f"unknown output {output!r}")
    R = out.shape[1]
    return np.array([math.fsum(row) / R for row in out.tolist()])


def shapley_from_values(v: np.ndarray, d: int) -> np.ndarray:
    """Shapley values from a full table of coalition values indexed by bitmask."""
    w = shapley_weights(d)
    size = _popcount(d)
    S = np.arange(1 << d)
    phi = np.empty(d)
    for i in range(d):
        bit = 1 << i
        without = S[(S & bit) == 0]
        terms = w[size[without]] * (v[without | bit] - v[without])
        phi[i] = math.fsum(terms.tolist())
    return phi


def exact_shap(model: TreeEnsemble, x, background, class_index: int, output: str = "proba", plan: ShapPlan | None = None) -> ShapRow:
    """Exact interventional Shapley values by enumerating all coalitions.

    The value of a coalition is the background-averaged class probability (or
    raw margin with ``output="margin"``) with features outside the coalition
    replaced by each background row.
    """
    d = model.n_features
    if d > MAX_SHAP_FEATURES:
        raise ShapCapacityError(f"{d} features exceeds exact enumeration limit {MAX_SHAP_FEATURES}")
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.size == 0 or len(bg) == 0:
        raise ValueError("background set is empty")
    v = coalition_values(model, x, bg, class_index, output, plan)
    return ShapRow(shapley_from_values(v, d), float(v[0]), float(v[-1]))


# ---------------------------------------------------------------------------
# augmentation


def sorted_probs(p: np.ndarray) -> np.ndarray:
    return -np.sort(-np.atleast_2d(p), axis=1)


def prob_augment(model: TreeEnsemble, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = model.predict_proba(X)
    return np.hstack([X, sorted_probs(p), confidence_score(p)[:, None]])


def shap_augment(model: TreeEnsemble, X, background) -> np.ndarray:
    """Append the Shapley row for each sample's *predicted* class."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pred = model.predict(X)
    plan = ShapPlan(model)
    phi = np.array([exact_shap(model, x, background, int(c), plan=plan).phi for x, c in zip(X, pred)]).reshape(len(X), -1)
    return np.hstack([X, phi])


def ig_matrix(model: TreeEnsemble, n: int) -> np.ndarray:
    return np.tile(gbdt.feature_gain(model), (n, 1))


def ig_augment(model: TreeEnsemble, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = model.predict_proba(X)
    return np.hstack([X, sorted_probs(p), ig_matrix(model, len(X))])


def augment(model: TreeEnsemble, X, variant: str, background=None) -> np.ndarray:
    if variant == "prob":
        return prob_augment(model, X)
    if variant == "shap":
        if background is None:
            raise ValueError("shap augmentation needs a background set")
        return shap_augment(model, X, background)
    if variant == "ig":
        return ig_augment(model, X)
    raise ValueError(f"unknown metamodel variant {variant!r}")


def column_names(variant: str, d: int, k: int) -> list[str]:
    x = [f"x{i}" for i in range(d)]
    p = [f"p_sorted_{i}" for i in range(k)]
    if variant == "prob":
        return x + p + ["z_conf"]
    if variant == "shap":
        return x + [f"phi_{i}" for i in range(d)]
    if variant == "ig":
        return x + p + [f"ig_{i}" for i in range(d)]
    raise ValueError(f"unknown metamodel variant {variant!r}")


# ---------------------------------------------------------------------------
# metamodel datasets


@dataclass
class MetaDataset:
    X: np.ndarray
    y: np.ndarray
    variant: str
    columns: list[str]
    rows: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    base_pred: np.ndarray | None = None

    def __post_init__(self):
        if self.X.shape[1] != len(self.columns):
            raise ValueError("row width disagrees with the column layout")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("meta labels must be 0/1")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "MetaDataset":
        idx = np.asarray(idx, dtype=np.int64)
        bp = None if self.base_pred is None else self.base_pred[idx]
        return MetaDataset(self.X[idx], self.y[idx], self.variant, list(self.columns), self.rows[idx], bp)


def meta_labels(pred, y_true) -> np.ndarray:
    """1 where the base prediction is wrong, 0 where it is right."""
    return (np.asarray(pred) != np.asarray(y_true)).astype(np.int64)


def select_meta_rows(y_meta: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """All wrong rows plus ``ratio`` times as many right rows drawn without replacement."""
    wrong = np.flatnonzero(y_meta == 1)
    right = np.flatnonzero(y_meta == 0)
    if len(wrong) == 0:
        raise ValueError("base classifier made no mistakes; metamodel is untrainable")
    keep = min(len(right), int(round(ratio * len(wrong))))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(right, size=keep, replace=False) if keep else np.array([], dtype=np.int64)
    return np.sort(np.concatenate([wrong, chosen]))


def build_meta_dataset(
    model: TreeEnsemble, X, y_true, variant: str, ratio: float = 5.0, seed: int = 0, background=None,
) -> MetaDataset:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pred = model.predict(X)
    y_meta = meta_labels(pred, y_true)
    rows = select_meta_rows(y_meta, ratio, seed)
    if variant == "shap" and background is None:
        rng = np.random.default_rng(seed)
        background = X[rng.choice(len(X), size=min(32, len(X)), replace=False)]
    Xa = augment(model, X[rows], variant, background)
    cols = column_names(variant, X.shape[1], model.class_count)
    return MetaDataset(Xa, y_meta[rows], variant, cols, rows, pred[rows])


@dataclass
class MetaModel:
    ensemble: TreeEnsemble
    variant: str

    def certainty(self, X_aug) -> np.ndarray:
        """Probability that the base prediction is correct."""
        return self.ensemble.predict_proba(np.atleast_2d(X_aug))[:, 0]


def train_metamodel(md: MetaDataset, params: BoostParams | None = None) -> MetaModel:
    if len(np.unique(md.y)) < 2:
        raise ValueError("meta dataset holds a single class")
    return MetaModel(gbdt.train(md.X, md.y, params or BoostParams(), n_classes=2), md.variant)


# ---------------------------------------------------------------------------
# dispatch


def score_with(method: str, model: TreeEnsemble, X, metamodel: MetaModel | None = None, background=None, X_aug=None) -> np.ndarray:
    """Per-sample uncertainty (higher = less certain) under one method.

    ``X_aug`` may carry precomputed augmented rows for a metamodel method.
    """
    if method not in METHODS:
        raise ValueError(f"unknown UQ method {method!r}; choose from {METHODS}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if method == "confidence":
        return 1.0 - confidence_score(model.predict_proba(X))
    if method == "entropy":
        return entropy_score(model.predict_proba(X))
    if metamodel is None:
        raise ValueError(f"{method} needs a trained metamodel")
    variant = META_VARIANTS[method]
    if metamodel.variant != variant:
        raise ValueError(f"metamodel variant {metamodel.variant!r} does not serve {method}")
    if X_aug is None:
        X_aug = augment(model, X, variant, background)
    return 1.0 - metamodel.certainty(X_aug)
