"""Model persistence with kind checking.

Every container announces its kind in the magic; ``load`` refuses a file
whose kind differs from the one requested, so an autoencoder file can never
be read back as a booster (or the reverse).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from . import dec, gbdt, nn, payload
from ._binary import MAGIC_LEN, ContainerError

_BY_MAGIC = {
    nn.NN_MAGIC: ("network", nn.from_bytes),
    dec.DC_MAGIC: ("dec", dec.from_bytes),
    gbdt.GB_MAGIC: ("gbdt", gbdt.from_bytes),
    payload.BIN_MAGIC: ("payload", payload.from_bytes),
}

# requested kind -> (container kind, python type or None)
KINDS = {
    "autoencoder": ("network", nn.Autoencoder),
    "fcnn": ("network", nn.FcnnClassifier),
    "encoder": ("network", list),
    "network": ("network", None),
    "dec": ("dec", None),
    "gbdt": ("gbdt", None),
    "payload": ("payload", None),
}


def to_bytes(model) -> bytes:
    if isinstance(model, gbdt.TreeEnsemble):
        return gbdt.to_bytes(model)
    if isinstance(model, dec.DecModel):
        return dec.to_bytes(model)
    if isinstance(model, payload.PayloadSet):
        return payload.to_bytes(model)
    if isinstance(model, (nn.Autoencoder, nn.FcnnClassifier, list)):
        return nn.to_bytes(model)
    raise TypeError(f"cannot persist {type(model).__name__}")


def from_bytes(buf: bytes, kind: str | None = None):
    head = bytes(buf[:MAGIC_LEN])
    entry = _BY_MAGIC.get(head)
    if entry is None:
        known = {m[:-1]: m for m in _BY_MAGIC}
        if head[:-1] in known:
            # same family, different version: let the family reader explain
            _BY_MAGIC[known[head[:-1]]][1](buf)
        raise ContainerError(f"unrecognized container magic {head!r}")
    container, reader = entry
    if kind is not None:
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(KINDS)}")
        want, typ = KINDS[kind]
        if container != want:
            raise ContainerError(f"file holds a {container} container, expected {kind}")
    model = reader(buf)
    if kind is not None and typ is not None and type(model) is not typ:
        raise ContainerError(f"file holds a {type(model).__name__}, expected {kind}")
    return model


def save(model, path) -> str:
    """Write ``model`` and return the sha256 of the written bytes."""
    data = to_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path, kind: str | None = None):
    path = Path(path)
    try:
        return from_bytes(path.read_bytes(), kind)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
