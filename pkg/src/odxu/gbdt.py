"""Gradient-boosted decision trees with exact greedy splits.

Multiclass softmax boosting: each round fits one regression tree per class to
the first/second-order statistics of the cross-entropy loss. Split quality is
the L2-regularised second-order gain

    1/2 [GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam)] - gamma

and leaves take the Newton weight ``-G/(H+lam)`` scaled by the learning rate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._binary import ContainerError, Reader, Writer
from .nn import ShapeError, softmax

GB_MAGIC = b"ODXUGB1"


@dataclass(frozen=True)
class BoostParams:
    lam: float = 1.0
    gamma: float = 0.0
    learning_rate: float = 0.3
    max_depth: int = 6
    rounds: int = 50
    min_child_hessian: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or self.min_child_hessian < 0:
            raise ValueError("lam, gamma and min_child_hessian must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 0 or self.rounds < 0:
            raise ValueError("max_depth and rounds must be >= 0")

    def with_(self, **kw) -> "BoostParams":
        return replace(self, **kw)


def softmax_grad_hess(labels, margins) -> tuple[np.ndarray, np.ndarray]:
    margins = np.atleast_2d(np.asarray(margins, dtype=np.float64))
    p = softmax(margins)
    g = p.copy()
    g[np.arange(len(g)), np.asarray(labels, dtype=np.int64)] -= 1.0
    return g, p * (1.0 - p)


def split_gain(GL, HL, GR, HR, params: BoostParams | None = None, *, lam=None, gamma=None):
    """Second-order split gain; works elementwise on arrays."""
    lam = (params.lam if params else 1.0) if lam is None else lam
    gamma = (params.gamma if params else 0.0) if gamma is None else gamma
    G = GL + GR
    H = HL + HR
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)) - gamma


@dataclass
class Tree:
    """Flat preorder tree; ``feature == -1`` marks a leaf. Samples with
    ``x[feature] < threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    gain: np.ndarray
    weight: np.ndarray
    grad_sum: np.ndarray
    hess_sum: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def internal_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.feature >= 0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.atleast_2d(X)
        n = len(X)
        idx = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            f = self.feature[idx]
            active = f >= 0
            if not active.any():
                return idx
            xv = X[rows, np.where(active, f, 0)]
            go_left = xv < self.threshold[idx]
            idx = np.where(active, np.where(go_left, self.left[idx], self.right[idx]), idx)

    def predict(self, X) -> np.ndarray:
        return self.weight[self.apply(X)]

    def leaf_paths(self):
        """Yield ``(leaf, [(feature, threshold, went_left), ...])`` root-to-leaf."""
        stack = [(0, [])]
        while stack:
            i, path = stack.pop()
            if self.feature[i] < 0:
                yield i, path
                continue
            f, t = int(self.feature[i]), float(self.threshold[i])
            stack.append((int(self.right[i]), path + [(f, t, False)]))
            stack.append((int(self.left[i]), path + [(f, t, True)]))


class _Builder:
    def __init__(self, X, g, h, params: BoostParams):
        self.X, self.g, self.h, self.p = X, g, h, params
        self.nodes: list[list] = []

    def node(self, idx: np.ndarray, depth: int) -> int:
        me = len(self.nodes)
        G = float(np.sum(self.g[idx]))
        H = float(np.sum(self.h[idx]))
        # feature, threshold, left, right, gain, weight, G, H
        self.nodes.append([-1, 0.0, -1, -1, 0.0, 0.0, G, H])
        split = self.best_split(idx, G, H) if depth < self.p.max_depth else None
        if split is None:
            self.nodes[me][5] = -G / (H + self.p.lam) * self.p.learning_rate
            return me
        f, thr = split
        go_left = self.X[idx, f] < thr
        left = self.node(idx[go_left], depth + 1)
        right = self.node(idx[~go_left], depth + 1)
        GL, HL = self.nodes[left][6], self.nodes[left][7]
        GR, HR = self.nodes[right][6], self.nodes[right][7]
        self.nodes[me][:5] = [f, thr, left, right, float(split_gain(GL, HL, GR, HR, self.p))]
        return me

    def best_split(self, idx: np.ndarray, G: float, H: float):
        n = len(idx)
        if n < 2:
            return None
        Xn = self.X[idx]
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        GL = np.cumsum(self.g[idx][order], axis=0)[:-1]
        HL = np.cumsum(self.h[idx][order], axis=0)[:-1]
        GR, HR = G - GL, H - HL
        mch = self.p.min_child_hessian
        ok = (xs[1:] != xs[:-1]) & (HL >= mch) & (HR >= mch)
        if not ok.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = split_gain(GL, HL, GR, HR, self.p)
        gain = np.where(ok & np.isfinite(gain), gain, -np.inf)
        # feature-major flattening: first maximum = lowest feature, then lowest threshold
        flat = gain.T.ravel()
        best = int(np.argmax(flat))
        if not flat[best] > 0:
            return None
        f, pos = divmod(best, n - 1)
        lo, hi = xs[pos, f], xs[pos + 1, f]
        thr = 0.5 * (lo + hi)
        if not lo < thr:
            thr = hi
        return f, float(thr)


def build_tree(X, g, h, params: BoostParams, depth: int = 0) -> Tree:
    """Exact greedy tree on ``X`` for gradients ``g`` and Hessians ``h``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("cannot build a tree on zero samples")
    b = _Builder(X, np.asarray(g, dtype=np.float64), np.asarray(h, dtype=np.float64), params)
    b.node(np.arange(len(X)), depth)
    cols = list(zip(*b.nodes))
    return Tree(
        np.array(cols[0], dtype=np.int64),
        np.array(cols[1], dtype=np.float64),
        np.array(cols[2], dtype=np.int64),
        np.array(cols[3], dtype=np.int64),
        np.array(cols[4], dtype=np.float64),
        np.array(cols[5], dtype=np.float64),
        np.array(cols[6], dtype=np.float64),
        np.array(cols[7], dtype=np.float64),
    )


@dataclass
class TreeEnsemble:
    trees: list[tuple[int, Tree]]
    class_count: int
    n_features: int
    base_score: float = 0.0
    params: BoostParams = field(default_factory=BoostParams)
    history: list[float] = field(default_factory=list, compare=False, repr=False)

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def margins(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.full((len(X), self.class_count), self.base_score)
        for c, tree in self.trees:
            out[:, c] += tree.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        single = np.ndim(X) == 1
        p = softmax(self.margins(X))
        return p[0] if single else p

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // max(self.class_count, 1)


def log_loss(model: TreeEnsemble, X, y) -> float:
    p = model.predict_proba(np.atleast_2d(X))
    return float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))))


def _boost(model: TreeEnsemble, X, y, params: BoostParams, rounds: int) -> TreeEnsemble:
    margins = model.margins(X)
    K = model.class_count
    history = list(model.history)
    for _ in range(rounds):
        g, h = softmax_grad_hess(y, margins)
        new = [build_tree(X, g[:, c], h[:, c], params) for c in range(K)]
        for c, tree in enumerate(new):
            margins[:, c] += tree.predict(X)
            model.trees.append((c, tree))
        p = softmax(margins)
        history.append(float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None)))))
    model.history = history
    return model


def _labels(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if len(y) and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def train(X, y, params: BoostParams | None = None, n_classes: int | None = None) -> TreeEnsemble:
    params = params or BoostParams()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain at least two classes")
    k = int(y.max()) + 1 if n_classes is None else n_classes
    y = _labels(y, k)
    model = TreeEnsemble([], k, X.shape[1], 0.0, params)
    return _boost(model, X, y, params, params.rounds)


def continue_training(model: TreeEnsemble, X, y, params: BoostParams | None = None, extra_rounds: int | None = None) -> TreeEnsemble:
    """Append boosting rounds fitted from the model's current margins on new data."""
    params = params or model.params
    rounds = params.rounds if extra_rounds is None else extra_rounds
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ShapeError(f"model has {model.n_features} features, data has {X.shape[1]}")
    y = _labels(y, model.class_count)
    out = TreeEnsemble(list(model.trees), model.class_count, model.n_features, model.base_score, model.params)
    return _boost(out, X, y, params, rounds)


def feature_gain(model: TreeEnsemble) -> np.ndarray:
    """Total split gain per feature over every internal node of every tree."""
    out = np.zeros(model.n_features)
    for _, tree in model.trees:
        nodes = tree.internal_nodes()
        np.add.at(out, tree.feature[nodes], tree.gain[nodes])
    return out


# ---------------------------------------------------------------------------
# persistence


def to_bytes(model: TreeEnsemble) -> bytes:
    p = model.params
    w = Writer(GB_MAGIC)
    w.f64(p.lam)
    w.f64(p.gamma)
    w.f64(p.learning_rate)
    w.u32(p.max_depth)
    w.u32(p.rounds)
    w.f64(p.min_child_hessian)
    w.u64(p.seed)
    w.u32(model.class_count)
    w.u32(model.n_features)
    w.f64(model.base_score)
    w.u32(len(model.trees))
    for c, t in model.trees:
        w.u32(c)
        w.u32(t.n_nodes)
        for i in range(t.n_nodes):
            w.u8(1 if t.feature[i] < 0 else 0)
            w.i32(int(t.feature[i]))
            w.f64(t.threshold[i])
            w.i32(int(t.left[i]))
            w.i32(int(t.right[i]))
            w.f64(t.gain[i])
            w.f64(t.weight[i])
            w.f64(t.grad_sum[i])
            w.f64(t.hess_sum[i])
    return w.getvalue()


def from_bytes(buf: bytes) -> TreeEnsemble:
    r = Reader(buf, GB_MAGIC)
    params = BoostParams(
        lam=r.f64(), gamma=r.f64(), learning_rate=r.f64(), max_depth=r.u32(),
        rounds=r.u32(), min_child_hessian=r.f64(), seed=r.u64(),
    )
    k, d, base = r.u32(), r.u32(), r.f64()
    trees = []
    for _ in range(r.u32()):
        c, n = r.u32(), r.u32()
        if c >= k:
            raise ContainerError(f"tree class {c} >= class count {k}")
        recs = []
        for _ in range(n):
            leaf = r.u8()
            rec = (r.i32(), r.f64(), r.i32(), r.i32(), r.f64(), r.f64(), r.f64(), r.f64())
            if bool(leaf) != (rec[0] < 0):
                raise ContainerError("leaf flag disagrees with feature index")
            recs.append(rec)
        cols = list(zip(*recs))
        trees.append((c, Tree(
            np.array(cols[0], dtype=np.int64), np.array(cols[1]), np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int64), np.array(cols[4]), np.array(cols[5]),
            np.array(cols[6]), np.array(cols[7]),
        )))
    r.done()
    return TreeEnsemble(trees, k, d, base, params)


def params_dict(p: BoostParams) -> dict:
    return asdict(p)
