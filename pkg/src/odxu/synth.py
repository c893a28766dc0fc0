"""Synthetic packets and byte-space blob corpora for desk-scale runs."""

from __future__ import annotations

import ipaddress
import struct
from typing import Sequence

import numpy as np

from .payload import (
    ETH_IPV4,
    ETH_IPV6,
    IPPROTO_TCP,
    IPPROTO_UDP,
    PAYLOAD_LEN,
    PayloadSet,
    RawPacket,
)

_MAC_A = bytes.fromhex("020000000001")
_MAC_B = bytes.fromhex("020000000002")


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def tcp_segment(sport: int, dport: int, payload: bytes, flags: int = 0x18) -> bytes:
    return struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, flags, 65535, 0, 0) + payload


def udp_datagram(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, (8 + len(payload)) & 0xFFFF, 0) + payload


def ipv4_packet(src: str, dst: str, proto: int, segment: bytes) -> bytes:
    total = 20 + len(segment)
    hdr = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total & 0xFFFF, 0, 0x4000, 64, proto, 0,
        ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed,
    )
    hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
    return hdr + segment


def ipv6_packet(src: str, dst: str, proto: int, segment: bytes) -> bytes:
    hdr = struct.pack(
        "!IHBB16s16s", 6 << 28, len(segment) & 0xFFFF, proto, 64,
        ipaddress.IPv6Address(src).packed, ipaddress.IPv6Address(dst).packed,
    )
    return hdr + segment


def ethernet_frame(ethertype: int, body: bytes) -> bytes:
    frame = _MAC_B + _MAC_A + struct.pack("!H", ethertype) + body
    return frame.ljust(60, b"\x00")


def build_packet(
    payload: bytes,
    *,
    proto: int = IPPROTO_UDP,
    src: str = "10.0.0.1",
    dst: str = "10.0.0.2",
    sport: int = 40000,
    dport: int = 80,
    ts: tuple[int, int] = (0, 0),
    tcp_flags: int = 0x18,
) -> RawPacket:
    """A complete Ethernet frame carrying ``payload`` over TCP or UDP."""
    seg = tcp_segment(sport, dport, payload, tcp_flags) if proto == IPPROTO_TCP else udp_datagram(sport, dport, payload)
    if ":" in src:
        frame = ethernet_frame(ETH_IPV6, ipv6_packet(src, dst, proto, seg))
    else:
        frame = ethernet_frame(ETH_IPV4, ipv4_packet(src, dst, proto, seg))
    return RawPacket(ts[0], ts[1], frame, len(frame), len(frame))


def blob_means(n_classes: int, seed: int, shift: float = 0.0, active: int = 400) -> np.ndarray:
    """Per-class mean byte vectors.

    The first ``active`` positions carry class structure, the tail is padding
    (zero), mimicking short application payloads. ``shift`` translates every
    mean by a shared random direction, giving a shifted target domain.
    """
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, PAYLOAD_LEN))
    means[:, :active] = rng.uniform(40, 215, size=(n_classes, active))
    if shift:
        direction = np.zeros(PAYLOAD_LEN)
        direction[:active] = rng.choice([-1.0, 1.0], size=active)
        means = means + shift * direction
    return np.clip(means, 0, 255)


def translate_means(means: np.ndarray, magnitude: float, seed: int) -> np.ndarray:
    """Move each class mean by its own random +-``magnitude`` step on the non-padding positions."""
    rng = np.random.default_rng(seed)
    active = means.max(axis=0) > 0
    steps = np.zeros_like(means)
    steps[:, active] = rng.choice([-1.0, 1.0], size=(len(means), int(active.sum())))
    return np.clip(means + magnitude * steps, 0, 255)


def blob_corpus(
    n: int,
    n_classes: int = 3,
    *,
    seed: int = 0,
    noise: float | Sequence[float] = 40.0,
    shift: float = 0.0,
    means: np.ndarray | None = None,
    class_names: Sequence[str] | None = None,
    weights: Sequence[float] | None = None,
    mean_seed: int | None = None,
    mimic: dict[int, tuple[int, float, float]] | None = None,
) -> PayloadSet:
    """Gaussian blobs in byte space, rounded and clipped to uint8.

    ``mimic`` maps a class to ``(other, fraction, blend)``: that fraction of
    its rows is centred at ``blend`` of the way from ``other``'s mean to its
    own, imitating traffic that disguises itself as another class.
    """
    if means is None:
        means = blob_means(n_classes, seed if mean_seed is None else mean_seed, shift)
    n_classes = len(means)
    rng = np.random.default_rng(seed + 1)
    w = np.full(n_classes, 1.0 / n_classes) if weights is None else np.asarray(weights, float) / np.sum(weights)
    counts = np.floor(w * n).astype(int)
    counts[: n - counts.sum()] += 1
    y = np.repeat(np.arange(n_classes), counts)
    centre = means[y]
    for c, (other, fraction, blend) in (mimic or {}).items():
        rows = np.flatnonzero(y == c)
        rows = rows[: int(round(fraction * len(rows)))]
        centre[rows] = means[other] + blend * (means[c] - means[other])
    sd = np.broadcast_to(np.asarray(noise, float), (n_classes,))[y]
    X = centre + sd[:, None] * rng.normal(0.0, 1.0, size=(n, PAYLOAD_LEN))
    X[:, means.max(axis=0) == 0] = 0
    X = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    perm = rng.permutation(n)
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(n_classes)]
    return PayloadSet(X[perm], y[perm], names)


def corpus_packets(data: PayloadSet, base_port: int = 8000, payload_len: int | None = None) -> tuple[list[RawPacket], list[dict]]:
    """Encode a corpus as UDP packets, one destination port per class.

    Returns the packets and the matching label rules (JSON form).
    """
    packets = []
    for i, (row, lab) in enumerate(zip(data.X, data.y)):
        body = bytes(row)
        if payload_len is not None:
            body = body[:payload_len]
        else:
            body = body.rstrip(b"\x00") or body[:1]
        packets.append(build_packet(body, dport=base_port + int(lab), sport=40000 + i % 20000, ts=(1_600_000_000 + i, i % 1_000_000)))
    rules = [{"match": {"dst_port": base_port + k}, "label": name} for k, name in enumerate(data.classes)]
    return packets, rules
