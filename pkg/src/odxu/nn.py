"""Small dense-network engine: layers, backprop, optimizers, the denoising
autoencoder used for payload embedding, and a fully connected baseline
classifier."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._binary import ContainerError, Reader, Writer
from .stopping import EarlyStop

ACTIVATIONS = ("relu", "linear", "softmax")
NN_MAGIC = b"ODXUNN1"


class ShapeError(ValueError):
    pass


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"weights {self.W.shape} and bias {self.b.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def init_layer(n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> DenseLayer:
    a = np.sqrt(6.0 / (n_in + n_out))
    return DenseLayer(rng.uniform(-a, a, size=(n_out, n_in)), np.zeros(n_out), activation)


def build_mlp(sizes: Sequence[int], activations: Sequence[str], rng) -> list[DenseLayer]:
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    return [init_layer(i, o, a, rng) for i, o, a in zip(sizes[:-1], sizes[1:], activations)]


def check_net(net: Sequence[DenseLayer]) -> None:
    for k, (a, b) in enumerate(zip(net[:-1], net[1:])):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"layer {k} outputs {a.out_dim} but layer {k + 1} takes {b.in_dim}")
        if a.activation == "softmax":
            raise ValueError("softmax is only allowed on the final layer")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "softmax":
        return softmax(z)
    return z


def forward(net: Sequence[DenseLayer], x, cache: list | None = None) -> np.ndarray:
    """Apply the layers to a vector ``(in,)`` or a batch ``(N, in)``.

    If ``cache`` is a list it receives ``(input, pre_activation, output)`` per
    layer for :func:`backward`.
    """
    h = np.asarray(x, dtype=np.float64)
    if not net:
        return h
    if h.shape[-1] != net[0].in_dim:
        raise ShapeError(f"input has {h.shape[-1]} features, network expects {net[0].in_dim}")
    for layer in net:
        z = h @ layer.W.T + layer.b
        out = _activate(z, layer.activation)
        if cache is not None:
            cache.append((h, z, out))
        h = out
    return h


def backward(net: Sequence[DenseLayer], cache: list, grad_out: np.ndarray, from_logits: bool = False):
    """Backpropagate ``dL/d(output)`` through a batch forward pass.

    With ``from_logits`` the gradient is taken to be w.r.t. the final layer's
    pre-activation (used for fused softmax + cross-entropy).
    Returns ``(param_grads, grad_input)`` with ``param_grads[k] = (dW, db)``.
    """
    grads = [None] * len(net)
    g = np.asarray(grad_out, dtype=np.float64)
    for k in range(len(net) - 1, -1, -1):
        layer = net[k]
        h_in, z, out = cache[k]
        if not (from_logits and k == len(net) - 1):
            if layer.activation == "relu":
                g = g * (z > 0)
            elif layer.activation == "softmax":
                g = out * (g - np.sum(g * out, axis=-1, keepdims=True))
        grads[k] = (g.T @ h_in, g.sum(axis=0))
        g = g @ layer.W
    return grads, g


def mse_loss(x_hat, x) -> float:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shapes {x_hat.shape} and {x.shape} differ")
    return float(np.mean((x_hat - x) ** 2))


def cross_entropy(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    probs = np.atleast_2d(probs)
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + eps)))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def scaled(self, factor: float) -> "TrainConfig":
        return replace(self, learning_rate=self.learning_rate * factor)


class Optimizer:
    """In-place SGD or Adam over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(self.params, grads):
                p -= cfg.learning_rate * g
            return
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def net_params(net: Sequence[DenseLayer]) -> list[np.ndarray]:
    out = []
    for layer in net:
        out += [layer.W, layer.b]
    return out


def flat_grads(grads) -> list[np.ndarray]:
    out = []
    for dW, db in grads:
        out += [dW, db]
    return out


@dataclass
class EpochLossTrace:
    train: list[float] = field(default_factory=list)
    valid: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.train)


def holdout_split(n: int, rng: np.random.Generator, train_frac: float = 0.75):
    perm = rng.permutation(n)
    k = int(round(n * train_frac))
    if n >= 2:
        k = min(max(k, 1), n - 1)
        return np.sort(perm[:k]), np.sort(perm[k:])
    return perm, perm


# ---------------------------------------------------------------------------
# denoising autoencoder


@dataclass(frozen=True)
class AutoencoderSpec:
    input_dim: int = 1500
    hidden: tuple[int, ...] = (512, 64)
    latent: int = 12
    corruption_rate: float = 0.1

    def build(self, rng: np.random.Generator) -> "Autoencoder":
        sizes = [self.input_dim, *self.hidden, self.latent]
        enc_acts = ["relu"] * len(self.hidden) + ["linear"]
        dec_sizes = sizes[::-1]
        return Autoencoder(
            build_mlp(sizes, enc_acts, rng),
            build_mlp(dec_sizes, enc_acts, rng),
            self.corruption_rate,
        )


@dataclass
class Autoencoder:
    encoder: list[DenseLayer]
    decoder: list[DenseLayer]
    corruption_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.corruption_rate < 1.0:
            raise ValueError("corruption_rate must be in [0, 1)")
        check_net(self.encoder)
        check_net(self.decoder)
        if self.encoder[-1].out_dim != self.decoder[0].in_dim or self.decoder[-1].out_dim != self.encoder[0].in_dim:
            raise ShapeError("decoder does not mirror encoder dimensions")

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].out_dim

    def reconstruct(self, X) -> np.ndarray:
        return forward(self.decoder, forward(self.encoder, X))


def corrupt(X: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each coordinate independently with probability ``rate``."""
    if rate == 0.0:
        return X
    return X * (rng.random(X.shape) >= rate)


def encode(ae: Autoencoder | Sequence[DenseLayer], X) -> np.ndarray:
    net = ae.encoder if isinstance(ae, Autoencoder) else ae
    return forward(net, X)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, size):
        yield perm[s : s + size]


def train_autoencoder(
    data: np.ndarray,
    arch: AutoencoderSpec | Autoencoder,
    cfg: TrainConfig,
    stop: EarlyStop | None = None,
    validation: np.ndarray | None = None,
) -> tuple[Autoencoder, EpochLossTrace]:
    """Fit (or continue fitting) a denoising autoencoder with MSE reconstruction.

    ``arch`` may be a spec (fresh Glorot init) or an existing model, which is
    copied and fine-tuned. Without ``validation`` a seeded 75/25 split of
    ``data`` is used.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("train_autoencoder needs a non-empty (N, d) array")
    rng = np.random.default_rng(cfg.seed)
    ae = arch.build(rng) if isinstance(arch, AutoencoderSpec) else copy.deepcopy(arch)
    if validation is None:
        tr, va = holdout_split(len(X), rng)
        X, V = X[tr], X[va]
    else:
        V = np.asarray(validation, dtype=np.float64)
    if X.shape[1] != ae.encoder[0].in_dim:
        raise ShapeError(f"data has {X.shape[1]} features, autoencoder expects {ae.encoder[0].in_dim}")

    net = ae.encoder + ae.decoder
    opt = Optimizer(net_params(net), cfg)
    mon = stop.monitor() if stop is not None else None
    trace = EpochLossTrace()
    for _ in range(cfg.max_epochs):
        total = 0.0
        for idx in _batches(len(X), cfg.batch_size, rng):
            clean = X[idx]
            noisy = corrupt(clean, ae.corruption_rate, rng)
            cache: list = []
            out = forward(net, noisy, cache)
            diff = out - clean
            total += float(np.sum(diff * diff)) / clean.shape[1]
            grads, _ = backward(net, cache, 2.0 * diff / diff.size)
            opt.step(flat_grads(grads))
        trace.train.append(total / len(X))
        trace.valid.append(mse_loss(ae.reconstruct(V), V))
        if mon is not None and mon.update(trace.valid[-1]):
            trace.stopped_early = True
            break
    return ae, trace


# ---------------------------------------------------------------------------
# fully connected baseline


@dataclass
class FcnnClassifier:
    layers: list[DenseLayer]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    def predict_proba(self, X) -> np.ndarray:
        return forward(self.layers, X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)


def train_fcnn(
    X: np.ndarray,
    y: np.ndarray,
    hidden: Sequence[int] = (1024, 512, 68),
    cfg: TrainConfig | None = None,
    n_classes: int | None = None,
) -> FcnnClassifier:
    """Relu MLP with a softmax head trained on multiclass cross-entropy."""
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if len(y) == 0 or y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(cfg.seed)
    sizes = [X.shape[1], *hidden, k]
    layers = build_mlp(sizes, ["relu"] * len(hidden) + ["softmax"], rng)
    opt = Optimizer(net_params(layers), cfg)
    onehot = np.eye(k)[y]
    for _ in range(cfg.max_epochs):
        for idx in _batches(len(X), cfg.batch_size, rng):
            cache: list = []
            p = forward(layers, X[idx], cache)
            grads, _ = backward(layers, cache, (p - onehot[idx]) / len(idx), from_logits=True)
            opt.step(flat_grads(grads))
    return FcnnClassifier(layers)


# ---------------------------------------------------------------------------
# persistence

_KINDS = {b"A": Autoencoder, b"E": list, b"C": FcnnClassifier}


def _write_net(w: Writer, net: Sequence[DenseLayer]) -> None:
    w.u32(len(net))
    for layer in net:
        w.u32(layer.in_dim)
        w.u32(layer.out_dim)
        w.u8(ACTIVATIONS.index(layer.activation))
        w.f64s(layer.W)
        w.f64s(layer.b)


def _read_net(r: Reader) -> list[DenseLayer]:
    net = []
    for _ in range(r.u32()):
        n_in, n_out, act = r.u32(), r.u32(), r.u8()
        if act >= len(ACTIVATIONS):
            raise ContainerError(f"unknown activation code {act}")
        W = r.f64s(n_in * n_out).reshape(n_out, n_in)
        net.append(DenseLayer(W, r.f64s(n_out), ACTIVATIONS[act]))
    return net


def to_bytes(model) -> bytes:
    """Serialize an Autoencoder, FcnnClassifier or bare layer list."""
    w = Writer(NN_MAGIC)
    if isinstance(model, Autoencoder):
        w.raw(b"A")
        w.f64(model.corruption_rate)
        sections = [model.encoder, model.decoder]
    elif isinstance(model, FcnnClassifier):
        w.raw(b"C")
        w.f64(0.0)
        sections = [model.layers]
    else:
        w.raw(b"E")
        w.f64(0.0)
        sections = [list(model)]
    w.u32(len(sections))
    for s in sections:
        _write_net(w, s)
    return w.getvalue()


def from_bytes(buf: bytes):
    r = Reader(buf, NN_MAGIC)
    kind = r.raw(1)
    if kind not in _KINDS:
        raise ContainerError(f"unknown network kind {kind!r}")
    rate = r.f64()
    sections = [_read_net(r) for _ in range(r.u32())]
    r.done()
    if kind == b"A":
        return Autoencoder(sections[0], sections[1], rate)
    if kind == b"C":
        return FcnnClassifier(sections[0])
    return sections[0]
