"""Deep embedded clustering with a three-term objective.

The encoder from a pretrained autoencoder is refined jointly with one centroid
per class by minimising

    KL(P || Q) + n_c (n_c - 1) / sum_{i != j} ||u_i - u_j|| + CE(y, Q)

where Q are Student-t soft assignments, P the sharpened target distribution
(held fixed within an epoch) and the soft assignment row doubles as the class
probability vector for the cross-entropy term.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nn
from ._binary import Reader, Writer
from .nn import Autoencoder, DenseLayer, EpochLossTrace, ShapeError, TrainConfig
from .stopping import EarlyStop

CE_EPS = 1e-12
MIN_CENTROID_DIST = 1e-12
DC_MAGIC = b"ODXUDC1"


class CentroidError(ValueError):
    pass


# ---------------------------------------------------------------------------
# centroid initialisation


def _kmeans_pp(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(Z[i])
        d2 = np.minimum(d2, np.sum((Z - Z[i]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(Z: np.ndarray, U: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    U = U.copy()
    for _ in range(max_iter):
        d2 = ((Z[:, None, :] - U[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        new = U.copy()
        for j in range(len(U)):
            members = Z[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(new - U, axis=1))
        U = new
        if shift <= tol:
            break
    return U


def _has_duplicates(U: np.ndarray) -> bool:
    d = np.linalg.norm(U[:, None, :] - U[None, :, :], axis=-1)
    return bool(np.any(d[np.triu_indices(len(U), 1)] <= MIN_CENTROID_DIST))


def init_centroids(latents, k: int, seed: int, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations."""
    Z = np.asarray(latents, dtype=np.float64)
    if k > len(Z):
        raise CentroidError(f"cannot place {k} centroids on {len(Z)} points")
    if k < 1:
        raise CentroidError("k must be >= 1")
    for attempt in range(2):
        rng = np.random.default_rng([seed, attempt])
        U = _lloyd(Z, _kmeans_pp(Z, k, rng), tol, max_iter)
        if not _has_duplicates(U):
            return U
    raise CentroidError("k-means produced coincident centroids twice")


def align_to_labels(Z: np.ndarray, y: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Reorder centroids so that centroid ``j`` best covers class ``j``.

    Maximises the cluster/class contingency trace with the Hungarian method.
    """
    k = len(U)
    assign = np.argmin(((Z[:, None, :] - U[None]) ** 2).sum(-1), axis=1)
    table = np.zeros((k, k))
    np.add.at(table, (assign, y), 1)
    rows, cols = linear_sum_assignment(-table)
    out = np.empty_like(U)
    out[cols] = U[rows]
    return out


# ---------------------------------------------------------------------------
# assignments and losses


def soft_assign(z, centroids, alpha: float = 1.0) -> np.ndarray:
    """Student-t kernel soft assignment; accepts one latent vector or a batch."""
    Z = np.asarray(z, dtype=np.float64)
    U = np.asarray(centroids, dtype=np.float64)
    d2 = ((Z[..., None, :] - U) ** 2).sum(-1)
    k = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return k / k.sum(axis=-1, keepdims=True)


def target_distribution(Q) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    w = Q**2 / Q.sum(axis=0)
    return w / w.sum(axis=1, keepdims=True)


def kl_loss(P, Q) -> float:
    """Row-averaged KL(P || Q), natural log, with 0 log 0 = 0."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if P.shape != Q.shape:
        raise ShapeError(f"P {P.shape} and Q {Q.shape} differ")
    pos = P > 0
    if np.any(pos & (Q <= 0)):
        raise ValueError("Q is zero where P is positive")
    terms = np.zeros_like(P)
    terms[pos] = P[pos] * np.log(P[pos] / Q[pos])
    return float(terms.sum() / len(P))


def contrastive_loss(centroids) -> float:
    """n_c (n_c - 1) over the sum of distances across ordered centroid pairs."""
    U = np.asarray(centroids, dtype=np.float64)
    n = len(U)
    if n < 2:
        raise CentroidError("contrastive loss needs at least two centroids")
    dist = np.linalg.norm(U[:, None, :] - U[None, :, :], axis=-1)
    off = dist[~np.eye(n, dtype=bool)]
    if np.any(off < MIN_CENTROID_DIST):
        raise CentroidError("coincident centroids")
    return float(n * (n - 1) / off.sum())


def _onehot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    return np.eye(k)[y.astype(np.int64)]


def ce_loss(y, y_hat) -> float:
    """Mean cross-entropy; ``y`` is one-hot ``(N, K)`` or integer labels."""
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=np.float64))
    Y = _onehot(y, y_hat.shape[1])
    if Y.shape != y_hat.shape:
        raise ShapeError(f"labels {Y.shape} and predictions {y_hat.shape} differ")
    return float(-np.sum(Y * np.log(y_hat + CE_EPS)) / len(Y))


def dec_total_loss(P, Q, centroids, y, y_hat) -> float:
    return kl_loss(P, Q) + contrastive_loss(centroids) + ce_loss(y, y_hat)


def _contrastive_grad(U: np.ndarray) -> np.ndarray:
    n = len(U)
    diff = U[:, None, :] - U[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    D = np.sum(dist[np.isfinite(dist)])
    # each unordered pair appears twice in D
    dD = 2.0 * np.sum(diff / dist[..., None], axis=1)
    return -n * (n - 1) / D**2 * dD


def dec_loss_grads(encoder: Sequence[DenseLayer], U: np.ndarray, X: np.ndarray, P: np.ndarray, y, alpha: float = 1.0):
    """Composite loss on a batch and its gradients w.r.t. encoder and centroids.

    ``P`` is treated as a constant. Returns ``(loss, encoder_grads, dU)``.
    """
    cache: list = []
    Z = nn.forward(encoder, X, cache)
    B = len(Z)
    diff = Z[:, None, :] - U[None, :, :]
    d2 = (diff**2).sum(-1)
    base = 1.0 + d2 / alpha
    e = (alpha + 1.0) / 2.0
    K = base**-e
    s = K.sum(axis=1, keepdims=True)
    Q = K / s
    Y = _onehot(y, U.shape[0])
    loss = kl_loss(P, Q) + contrastive_loss(U) + ce_loss(Y, Q)

    dQ = -(P / Q + Y / (Q + CE_EPS)) / B
    dK = (dQ - np.sum(dQ * Q, axis=1, keepdims=True)) / s
    G = dK * (-(e / alpha) * K / base)
    dZ = 2.0 * np.einsum("ij,ijd->id", G, diff)
    dU = -2.0 * np.einsum("ij,ijd->jd", G, diff) + _contrastive_grad(U)
    grads, _ = nn.backward(encoder, cache, dZ)
    return loss, grads, dU


# ---------------------------------------------------------------------------
# model and training


@dataclass
class DecModel:
    encoder: list[DenseLayer]
    centroids: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.shape[1] != self.encoder[-1].out_dim:
            raise ShapeError("centroid dimension differs from encoder output")

    @property
    def class_count(self) -> int:
        return len(self.centroids)

    @property
    def latent_dim(self) -> int:
        return self.centroids.shape[1]

    def encode(self, X) -> np.ndarray:
        return nn.forward(self.encoder, X)

    def predict_proba(self, X) -> np.ndarray:
        return soft_assign(self.encode(X), self.centroids, self.alpha)


@dataclass
class LatentSet:
    Z: np.ndarray
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.Z)


def transform(model: DecModel, X, y=None) -> LatentSet:
    """Encode payload features (``(N, d)`` floats or a PayloadSet)."""
    if hasattr(X, "features"):
        X, y = X.features(), X.y if y is None else y
    return LatentSet(model.encode(X), None if y is None else np.asarray(y))


def _full_loss(model: DecModel, X: np.ndarray, y: np.ndarray) -> float:
    Q = model.predict_proba(X)
    return dec_total_loss(target_distribution(Q), Q, model.centroids, y, Q)


def train_dec(
    source: Autoencoder | DecModel | Sequence[DenseLayer],
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    stop: EarlyStop | None = None,
    n_classes: int | None = None,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[DecModel, EpochLossTrace]:
    """Refine encoder and centroids on the composite objective.

    ``source`` is an autoencoder (decoder discarded, centroids from k-means on
    the encoded training data) or an existing DecModel to fine-tune.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if k < 2:
        raise ValueError("clustering needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    if validation is None:
        tr, va = nn.holdout_split(len(X), rng)
        X, y, Xv, yv = X[tr], y[tr], X[va], y[va]
    else:
        Xv, yv = (np.asarray(a) for a in validation)
        Xv = Xv.astype(np.float64)

    if isinstance(source, DecModel):
        model = copy.deepcopy(source)
        if model.class_count != k:
            raise ValueError(f"model has {model.class_count} centroids, data has {k} classes")
    else:
        encoder = copy.deepcopy(source.encoder if isinstance(source, Autoencoder) else list(source))
        Z = nn.forward(encoder, X)
        U = align_to_labels(Z, y, init_centroids(Z, k, cfg.seed))
        model = DecModel(encoder, U)

    params = nn.net_params(model.encoder) + [model.centroids]
    opt = nn.Optimizer(params, cfg)
    mon = stop.monitor() if stop is not None else None
    trace = EpochLossTrace()
    for _ in range(cfg.max_epochs):
        P_all = target_distribution(model.predict_proba(X))
        total = 0.0
        for idx in nn._batches(len(X), cfg.batch_size, rng):
            loss, grads, dU = dec_loss_grads(model.encoder, model.centroids, X[idx], P_all[idx], y[idx], model.alpha)
            total += loss * len(idx)
            opt.step(nn.flat_grads(grads) + [dU])
        trace.train.append(total / len(X))
        trace.valid.append(_full_loss(model, Xv, yv))
        if mon is not None and mon.update(trace.valid[-1]):
            trace.stopped_early = True
            break
    return model, trace


# ---------------------------------------------------------------------------
# persistence


def to_bytes(model: DecModel) -> bytes:
    w = Writer(DC_MAGIC)
    w.blob(nn.to_bytes(model.encoder))
    w.u32(model.class_count)
    w.u32(model.latent_dim)
    w.f64(model.alpha)
    w.f64s(model.centroids)
    return w.getvalue()


def from_bytes(buf: bytes) -> DecModel:
    r = Reader(buf, DC_MAGIC)
    encoder = nn.from_bytes(r.blob())
    if not isinstance(encoder, list):
        raise ValueError("embedded network is not a bare encoder")
    n_c, dim = r.u32(), r.u32()
    alpha = r.f64()
    U = r.f64s(n_c * dim).reshape(n_c, dim)
    r.done()
    return DecModel(encoder, U, alpha)
