import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odxu import payload
from odxu.payload import (
    IPPROTO_TCP,
    IPPROTO_UDP,
    PAYLOAD_LEN,
    FlowKey,
    LabelRule,
    PayloadSet,
    RawPacket,
)
from odxu.synth import build_packet, ethernet_frame


def _global_header(magic_le=True, network=1):
    if magic_le:
        return struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, network)
    return struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, network)


def _record(ts, us, data, endian="<", orig=None):
    return struct.pack(endian + "IIII", ts, us, len(data), len(data) if orig is None else orig) + data


def test_empty_big_endian_capture():
    assert list(payload.parse_pcap(_global_header(magic_le=False))) == []


def test_little_endian_single_record():
    frame = bytes(range(60))
    pkts = list(payload.parse_pcap(_global_header() + _record(7, 9, frame)))
    assert len(pkts) == 1
    assert pkts[0].caplen == 60 and pkts[0].link_bytes == frame


def test_hand_assembled_two_packets():
    a = build_packet(b"AB", proto=IPPROTO_TCP).link_bytes
    b = build_packet(b"xyz", proto=IPPROTO_UDP).link_bytes
    buf = _global_header() + _record(1_600_000_000, 250, a) + _record(1_600_000_001, 999_999, b)
    pkts = list(payload.parse_pcap(io.BytesIO(buf)))
    assert [(p.ts_sec, p.ts_usec) for p in pkts] == [(1_600_000_000, 250), (1_600_000_001, 999_999)]
    assert [p.link_bytes for p in pkts] == [a, b]


def test_big_endian_records_parse():
    frame = bytes(64)
    buf = _global_header(magic_le=False) + _record(3, 4, frame, ">")
    (p,) = payload.parse_pcap(buf)
    assert (p.ts_sec, p.ts_usec, p.caplen) == (3, 4, 64)


def test_bad_magic():
    with pytest.raises(payload.PcapFormatError, match="magic"):
        list(payload.parse_pcap(b"\x00" * 24))


def test_truncated_record_names_index():
    frame = bytes(60)
    buf = _global_header() + _record(0, 0, frame) + _record(0, 0, frame)[:-5]
    with pytest.raises(payload.PcapTruncatedError) as e:
        list(payload.parse_pcap(buf))
    assert e.value.index == 1


def test_write_then_parse():
    pkts = [build_packet(bytes([i]) * (i + 1), ts=(i, 2 * i)) for i in range(5)]
    buf = io.BytesIO()
    payload.write_pcap(pkts, buf)
    assert list(payload.parse_pcap(buf.getvalue())) == pkts


# extraction

def test_tcp_payload_padded():
    vec, key = payload.extract_payload(build_packet(b"\x41\x42", proto=IPPROTO_TCP))
    assert len(vec) == PAYLOAD_LEN
    assert vec[:2] == b"AB" and vec[2:] == bytes(PAYLOAD_LEN - 2)
    assert key.protocol == IPPROTO_TCP


def test_udp_payload_truncated():
    body = bytes(i % 251 for i in range(1600))
    vec, _ = payload.extract_payload(build_packet(body, proto=IPPROTO_UDP))
    assert vec == body[:PAYLOAD_LEN]


def test_syn_without_payload_is_skipped():
    assert payload.extract_payload(build_packet(b"", proto=IPPROTO_TCP, tcp_flags=0x02)) is None


def test_ipv6_udp():
    vec, key = payload.extract_payload(build_packet(b"hi", src="fe80::1", dst="fe80::2"))
    assert vec[:2] == b"hi" and key.src_ip == "fe80::1"


def test_unsupported_ethertype_is_skipped():
    frame = ethernet_frame(0x0806, bytes(28))
    assert payload.extract_payload(RawPacket(0, 0, frame, len(frame), len(frame))) is None


def test_inconsistent_ip_header_is_parse_error():
    frame = bytearray(build_packet(b"abc").link_bytes)
    frame[14] = 0x4F  # ihl 60 bytes, longer than the capture allows
    frame = bytes(frame[:40])
    with pytest.raises(payload.PacketParseError):
        payload.extract_payload(RawPacket(0, 0, frame, len(frame), len(frame)))


def test_link_padding_not_in_payload():
    # a 1-byte UDP payload sits in a frame padded to 60 bytes
    vec, _ = payload.extract_payload(build_packet(b"\x07"))
    assert vec[0] == 7 and not any(vec[1:])


@given(st.binary(min_size=1, max_size=1700), st.sampled_from([IPPROTO_TCP, IPPROTO_UDP]))
@settings(max_examples=60, deadline=None)
def test_extract_is_pad_or_truncate(body, proto):
    vec, _ = payload.extract_payload(build_packet(body, proto=proto))
    assert vec == payload.pad_payload(body)
    assert len(vec) == PAYLOAD_LEN


# labeling

KEY80 = FlowKey("10.0.0.1", "10.0.0.2", 40000, 80, IPPROTO_TCP)


def test_rule_exact_match():
    (lp,) = payload.label_packets([(bytes(PAYLOAD_LEN), KEY80)], [LabelRule("DoS Hulk", {"dst_port": 80})])
    assert lp.label == "DoS Hulk"


def test_no_rule_is_benign():
    (lp,) = payload.label_packets([(bytes(PAYLOAD_LEN), KEY80)], [LabelRule("x", {"dst_port": 22})])
    assert lp.label == "Benign"


def test_first_rule_wins():
    rules = payload.parse_rules([
        {"match": {"dst_port": 80}, "label": "first"},
        {"match": {"dst_ip": "10.0.0.2"}, "label": "second"},
    ])
    (lp,) = payload.label_packets([(bytes(PAYLOAD_LEN), KEY80)], rules)
    assert lp.label == "first"


def test_rule_rejects_unknown_field():
    with pytest.raises(ValueError):
        LabelRule("x", {"vlan": 3})


# normalization

def test_normalize_examples():
    assert not payload.normalize(bytes(PAYLOAD_LEN)).any()
    assert payload.normalize(bytes([255]))[0] == 1.0
    assert payload.normalize(bytes([51]))[0] == pytest.approx(0.2, abs=0)


# resampling

def _set(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    X = np.zeros((len(y), PAYLOAD_LEN), dtype=np.uint8)
    X[:, 0] = np.arange(len(y)) % 256
    X[:, 1] = np.arange(len(y)) // 256
    return PayloadSet(X, y, [f"c{i}" for i in range(len(counts))])


def test_downsample_to_ten_percent():
    out = payload.resample(_set([1000, 5]), {"c0": 0.10}, seed=0)
    assert out.counts() == {"c0": 100, "c1": 5}


def test_triple_small_class():
    out = payload.resample(_set([10, 58]), {"c1": 3.0}, seed=0)
    assert out.counts()["c1"] == 174


def test_multiplier_one_is_identity():
    d = _set([7, 9])
    out = payload.resample(d, {"c0": 1.0, "c1": 1.0}, seed=3)
    assert np.array_equal(out.X, d.X) and np.array_equal(out.y, d.y)


def test_vanishing_class_is_error():
    with pytest.raises(ValueError, match="c1"):
        payload.resample(_set([10, 3]), {"c1": 0.1}, seed=0)


@given(st.integers(1, 200), st.floats(0.05, 4.0))
@settings(max_examples=60, deadline=None)
def test_resample_count_rule(n, m):
    target = int(np.floor(n * m + 0.5))
    if target == 0:
        return
    out = payload.resample(_set([n, 1]), {"c0": m}, seed=1)
    assert out.counts()["c0"] == target
    # every row comes from the original class
    ids = out.X[out.y == 0, 0].astype(int) + 256 * out.X[out.y == 0, 1].astype(int)
    assert set(ids.tolist()) <= set(range(n))


# on-disk forms

@pytest.mark.parametrize("suffix", [".csv", ".odxupb"])
def test_dataset_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    d = PayloadSet(rng.integers(0, 256, size=(12, PAYLOAD_LEN)), rng.integers(0, 3, 12), ["Benign", "a", "b"])
    path = tmp_path / f"d{suffix}"
    payload.save(d, path)
    back = payload.load(path)
    assert np.array_equal(back.X, d.X)
    assert [back.classes[i] for i in back.y] == [d.classes[i] for i in d.y]


def test_binary_rejects_bad_magic(tmp_path):
    d = _set([2, 2])
    buf = bytearray(payload.to_bytes(d))
    buf[0] ^= 0xFF
    with pytest.raises(ValueError):
        payload.from_bytes(bytes(buf))
