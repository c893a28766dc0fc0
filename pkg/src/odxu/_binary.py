"""Little-endian container primitives shared by the model file formats.

Every container starts with a 7-byte ASCII magic whose last character is the
format version (``ODXUNN1``, ``ODXUDC1``, ``ODXUGB1``, ``ODXUPB1``).
"""

from __future__ import annotations

import struct

import numpy as np


class ContainerError(ValueError):
    """Raised when a container has the wrong magic, version or layout."""


MAGIC_LEN = 7


def check_magic(buf: bytes, magic: bytes) -> None:
    got = bytes(buf[:MAGIC_LEN])
    if len(got) < MAGIC_LEN:
        raise ContainerError(f"container too short to hold magic {magic!r}")
    if got == magic:
        return
    if got[:-1] == magic[:-1]:
        raise ContainerError(
            f"unsupported {magic[:-1].decode()} version {got[-1:]!r} "
            f"(expected {magic[-1:]!r})"
        )
    raise ContainerError(f"bad magic {got!r}, expected {magic!r}")


class Writer:
    def __init__(self, magic: bytes):
        assert len(magic) == MAGIC_LEN
        self._parts = [magic]

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def i32(self, v: int) -> None:
        self._parts.append(struct.pack("<i", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v & 0xFFFFFFFFFFFFFFFF))

    def f64(self, v: float) -> None:
        self._parts.append(struct.pack("<d", v))

    def f64s(self, arr) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def raw(self, b: bytes) -> None:
        self._parts.append(bytes(b))

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, buf: bytes, magic: bytes):
        check_magic(buf, magic)
        self._buf = memoryview(buf)
        self._pos = MAGIC_LEN

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._buf):
            raise ContainerError("container truncated")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def i32(self) -> int:
        return self._unpack("<i")

    def u64(self) -> int:
        return self._unpack("<Q")

    def f64(self) -> float:
        return self._unpack("<d")

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64)

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def blob(self) -> bytes:
        return self.raw(self.u32())

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise ContainerError(f"{len(self._buf) - self._pos} trailing bytes")
