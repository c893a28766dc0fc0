"""Packet captures to fixed-width payload-byte vectors.

A packet is reduced to its transport-layer payload (TCP or UDP over IPv4/IPv6
on Ethernet II), zero-padded or truncated to ``PAYLOAD_LEN`` bytes. Headers are
dropped entirely; labels come from first-match flow rules.
"""

from __future__ import annotations

import csv
import io
import ipaddress
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence

import numpy as np

from ._binary import ContainerError, Reader, Writer

PAYLOAD_LEN = 1500
BENIGN = "Benign"

PCAP_MAGIC_BE = b"\xa1\xb2\xc3\xd4"
PCAP_MAGIC_LE = b"\xd4\xc3\xb2\xa1"
LINKTYPE_ETHERNET = 1

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = (0x8100, 0x88A8)
IPPROTO_TCP = 6
IPPROTO_UDP = 17
_IPV6_EXT = (0, 43, 60)  # hop-by-hop, routing, destination options
_IPV6_FRAG = 44


class PcapFormatError(ValueError):
    pass


class PcapTruncatedError(PcapFormatError):
    def __init__(self, index: int, what: str = "record"):
        super().__init__(f"packet {index}: truncated {what}")
        self.index = index


class PacketParseError(ValueError):
    """Header fields disagree with the captured length."""


@dataclass(frozen=True)
class RawPacket:
    ts_sec: int
    ts_usec: int
    link_bytes: bytes
    caplen: int
    origlen: int

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec * 1e-6


@dataclass(frozen=True)
class FlowKey:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int


@dataclass(frozen=True)
class LabeledPayload:
    bytes: bytes
    label: str
    flow: FlowKey | None = None

    def __post_init__(self):
        if len(self.bytes) != PAYLOAD_LEN:
            raise ValueError(f"payload must be {PAYLOAD_LEN} bytes, got {len(self.bytes)}")


# ---------------------------------------------------------------------------
# libpcap


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        b = stream.read(n)
        if not b:
            break
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


def parse_pcap(stream: BinaryIO | bytes) -> Iterator[RawPacket]:
    """Yield packets from a classic libpcap capture in file order."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    header = _read_exact(stream, 24)
    if len(header) < 4:
        raise PcapFormatError("missing pcap global header")
    magic = header[:4]
    if magic == PCAP_MAGIC_BE:
        endian = ">"
    elif magic == PCAP_MAGIC_LE:
        endian = "<"
    else:
        raise PcapFormatError(f"bad pcap magic {magic.hex()}")
    if len(header) < 24:
        raise PcapFormatError("truncated pcap global header")
    _, _, _, _, _, network = struct.unpack(endian + "HHiIII", header[4:])
    if network != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"unsupported link type {network}")

    rec = struct.Struct(endian + "IIII")
    index = 0
    while True:
        rh = _read_exact(stream, 16)
        if not rh:
            return
        if len(rh) < 16:
            raise PcapTruncatedError(index, "record header")
        ts_sec, ts_usec, incl, orig = rec.unpack(rh)
        if incl > orig:
            raise PcapFormatError(f"packet {index}: caplen {incl} > origlen {orig}")
        data = _read_exact(stream, incl)
        if len(data) < incl:
            raise PcapTruncatedError(index, "packet data")
        yield RawPacket(ts_sec, ts_usec, data, incl, orig)
        index += 1


def write_pcap(packets: Iterable[RawPacket], stream: BinaryIO, endian: str = "<") -> None:
    stream.write(struct.pack(endian + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    for p in packets:
        stream.write(struct.pack(endian + "IIII", p.ts_sec, p.ts_usec, p.caplen, p.origlen))
        stream.write(p.link_bytes)


# ---------------------------------------------------------------------------
# header stripping


def _transport(proto: int, seg: memoryview, src: str, dst: str):
    if proto == IPPROTO_TCP:
        if len(seg) < 20:
            raise PacketParseError("TCP header exceeds captured bytes")
        sport, dport = struct.unpack("!HH", seg[:4])
        off = (seg[12] >> 4) * 4
        if off < 20 or off > len(seg):
            raise PacketParseError(f"TCP data offset {off} inconsistent with {len(seg)} bytes")
        payload = seg[off:]
    elif proto == IPPROTO_UDP:
        if len(seg) < 8:
            raise PacketParseError("UDP header exceeds captured bytes")
        sport, dport = struct.unpack("!HH", seg[:4])
        payload = seg[8:]
    else:
        return None
    if len(payload) == 0:
        return None
    return bytes(payload), FlowKey(src, dst, sport, dport, proto)


def extract_payload(pkt: RawPacket) -> tuple[bytes, FlowKey] | None:
    """Strip Ethernet/IP/transport headers and return the padded payload.

    Returns ``None`` for unsupported protocols, IP fragments and packets with
    an empty transport payload.
    """
    buf = memoryview(pkt.link_bytes)[: pkt.caplen]
    if len(buf) < 14:
        raise PacketParseError("frame shorter than an Ethernet header")
    ethertype = struct.unpack("!H", buf[12:14])[0]
    pos = 14
    while ethertype in ETH_VLAN:
        if len(buf) < pos + 4:
            raise PacketParseError("VLAN tag exceeds captured bytes")
        ethertype = struct.unpack("!H", buf[pos + 2 : pos + 4])[0]
        pos += 4
    ip = buf[pos:]

    if ethertype == ETH_IPV4:
        if len(ip) < 20:
            raise PacketParseError("IPv4 header exceeds captured bytes")
        if ip[0] >> 4 != 4:
            raise PacketParseError("IPv4 ethertype with non-4 version")
        ihl = (ip[0] & 0x0F) * 4
        total = struct.unpack("!H", ip[2:4])[0]
        if ihl < 20 or ihl > len(ip) or total < ihl:
            raise PacketParseError(f"IPv4 lengths ihl={ihl} total={total} inconsistent")
        frag = struct.unpack("!H", ip[6:8])[0]
        if frag & 0x1FFF:
            return None
        proto = ip[9]
        src = str(ipaddress.IPv4Address(bytes(ip[12:16])))
        dst = str(ipaddress.IPv4Address(bytes(ip[16:20])))
        # total length bounds away link-layer padding; snaplen may cut it short
        seg = ip[ihl:min(total, len(ip))]
    elif ethertype == ETH_IPV6:
        if len(ip) < 40:
            raise PacketParseError("IPv6 header exceeds captured bytes")
        plen = struct.unpack("!H", ip[4:6])[0]
        proto = ip[6]
        src = str(ipaddress.IPv6Address(bytes(ip[8:24])))
        dst = str(ipaddress.IPv6Address(bytes(ip[24:40])))
        seg = ip[40:40 + plen]
        while proto in _IPV6_EXT:
            if len(seg) < 8:
                raise PacketParseError("IPv6 extension header exceeds captured bytes")
            n = (seg[1] + 1) * 8
            if n > len(seg):
                raise PacketParseError("IPv6 extension length inconsistent")
            proto, seg = seg[0], seg[n:]
        if proto == _IPV6_FRAG:
            return None
    else:
        return None

    got = _transport(proto, seg, src, dst)
    if got is None:
        return None
    payload, key = got
    return pad_payload(payload), key


def pad_payload(payload: bytes) -> bytes:
    return payload[:PAYLOAD_LEN].ljust(PAYLOAD_LEN, b"\x00")


# ---------------------------------------------------------------------------
# labeling

_RULE_FIELDS = ("src_ip", "dst_ip", "src_port", "dst_port", "protocol")


@dataclass(frozen=True)
class LabelRule:
    """Exact-match pattern over the 5-tuple; absent or ``"*"`` fields match anything."""

    label: str
    match: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.match) - set(_RULE_FIELDS)
        if bad:
            raise ValueError(f"unknown rule fields {sorted(bad)}")

    def matches(self, key: FlowKey) -> bool:
        for name, want in self.match.items():
            if want == "*" or want is None:
                continue
            have = getattr(key, name)
            if name.endswith("_ip"):
                if ipaddress.ip_address(str(want)) != ipaddress.ip_address(have):
                    return False
            elif int(want) != have:
                return False
        return True


def parse_rules(obj) -> list[LabelRule]:
    """Rules from JSON-like data: ``[{"match": {...}, "label": "..."}, ...]``."""
    return [LabelRule(label=r["label"], match=dict(r.get("match", {}))) for r in obj]


def label_packets(
    payloads: Iterable[tuple[bytes, FlowKey]], rules: Sequence[LabelRule]
) -> list[LabeledPayload]:
    out = []
    for data, key in payloads:
        label = next((r.label for r in rules if r.matches(key)), BENIGN)
        out.append(LabeledPayload(data, label, key))
    return out


def extract_all(packets: Iterable[RawPacket], stats: Counter | None = None):
    """Run :func:`extract_payload` over a stream, counting what was skipped."""
    stats = Counter() if stats is None else stats
    for pkt in packets:
        stats["packets"] += 1
        try:
            got = extract_payload(pkt)
        except PacketParseError:
            stats["malformed"] += 1
            continue
        if got is None:
            stats["skipped"] += 1
            continue
        stats["emitted"] += 1
        yield got


def normalize(payload) -> np.ndarray:
    """Bytes in [0, 255] to floats in [0, 1]; accepts a payload, bytes or uint8 array."""
    if isinstance(payload, LabeledPayload):
        payload = payload.bytes
    if isinstance(payload, (bytes, bytearray)):
        payload = np.frombuffer(payload, dtype=np.uint8)
    return np.asarray(payload, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset


@dataclass
class PayloadSet:
    """Columnar payload dataset: ``X`` is ``(N, 1500)`` uint8, ``y`` indexes ``classes``."""

    X: np.ndarray
    y: np.ndarray
    classes: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.uint8)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[1] != PAYLOAD_LEN:
            raise ValueError(f"X must be (N, {PAYLOAD_LEN}), got {self.X.shape}")
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.classes)):
            raise ValueError("label id outside class table")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_records(cls, records: Sequence[LabeledPayload], classes: Sequence[str] | None = None):
        names = sorted({r.label for r in records}) if classes is None else list(classes)
        ids = {n: i for i, n in enumerate(names)}
        X = np.frombuffer(b"".join(r.bytes for r in records), dtype=np.uint8)
        X = X.reshape(len(records), PAYLOAD_LEN)
        return cls(X.copy(), np.array([ids[r.label] for r in records], dtype=np.int64), names)

    def subset(self, idx) -> "PayloadSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PayloadSet(self.X[idx], self.y[idx], list(self.classes))

    def features(self) -> np.ndarray:
        return normalize(self.X)

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def counts(self) -> dict[str, int]:
        c = np.bincount(self.y, minlength=len(self.classes))
        return {n: int(k) for n, k in zip(self.classes, c)}


def resample(data: PayloadSet, plan: Mapping[str, float], seed: int) -> PayloadSet:
    """Rescale each class to ``round(n * m)`` rows.

    ``m < 1`` draws without replacement; ``m > 1`` keeps every original row and
    adds uniform-with-replacement duplicates. Classes absent from ``plan`` keep
    multiplier 1.
    """
    for name, m in plan.items():
        if not m > 0:
            raise ValueError(f"multiplier for {name!r} must be > 0, got {m}")
        if name not in data.classes:
            raise ValueError(f"plan names unknown class {name!r}")
    rng = np.random.default_rng(seed)
    keep = []
    for cid, name in enumerate(data.classes):
        idx = np.flatnonzero(data.y == cid)
        n = len(idx)
        m = float(plan.get(name, 1.0))
        target = int(np.floor(n * m + 0.5))
        if n and target == 0:
            raise ValueError(f"multiplier {m} would remove class {name!r} ({n} rows)")
        if m == 1.0 or n == 0:
            keep.append(idx)
        elif target <= n:
            keep.append(np.sort(rng.choice(idx, size=target, replace=False)))
        else:
            extra = rng.choice(idx, size=target - n, replace=True)
            keep.append(np.concatenate([idx, extra]))
    order = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    return data.subset(order)


# ---------------------------------------------------------------------------
# on-disk forms

BIN_MAGIC = b"ODXUPB1"


def write_csv(data: PayloadSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"b{i}" for i in range(PAYLOAD_LEN)] + ["label"])
        for row, lab in zip(data.X, data.y):
            w.writerow([*row.tolist(), data.classes[lab]])


def read_csv(path) -> PayloadSet:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) != PAYLOAD_LEN + 1 or header[-1] != "label":
            raise ValueError(f"{path}: not a payload CSV")
        rows, labels = [], []
        for line in r:
            rows.append([int(v) for v in line[:-1]])
            labels.append(line[-1])
    X = np.array(rows, dtype=np.int64).reshape(-1, PAYLOAD_LEN)
    if X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError(f"{path}: byte value outside [0, 255]")
    names = sorted(set(labels))
    ids = {n: i for i, n in enumerate(names)}
    return PayloadSet(X.astype(np.uint8), np.array([ids[l] for l in labels], dtype=np.int64), names)


def to_bytes(data: PayloadSet) -> bytes:
    w = Writer(BIN_MAGIC)
    w.u32(len(data))
    rows = np.empty((len(data), PAYLOAD_LEN + 2), dtype=np.uint8)
    rows[:, :PAYLOAD_LEN] = data.X
    rows[:, PAYLOAD_LEN:] = data.y.astype("<u2").view(np.uint8).reshape(-1, 2)
    w.raw(rows.tobytes())
    w.u16(len(data.classes))
    for name in data.classes:
        enc = name.encode("utf-8")
        w.u16(len(enc))
        w.raw(enc)
    return w.getvalue()


def from_bytes(buf: bytes) -> PayloadSet:
    r = Reader(buf, BIN_MAGIC)
    n = r.u32()
    rows = np.frombuffer(r.raw(n * (PAYLOAD_LEN + 2)), dtype=np.uint8).reshape(n, PAYLOAD_LEN + 2)
    y = rows[:, PAYLOAD_LEN:].copy().view("<u2").reshape(n).astype(np.int64)
    names = [r.raw(r.u16()).decode("utf-8") for _ in range(r.u16())]
    r.done()
    return PayloadSet(rows[:, :PAYLOAD_LEN].copy(), y, names)


def save(data: PayloadSet, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        write_csv(data, path)
    else:
        path.write_bytes(to_bytes(data))


def load(path) -> PayloadSet:
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv(path)
    try:
        return from_bytes(path.read_bytes())
    except ContainerError as exc:
        raise ValueError(f"{path}: {exc}") from exc
