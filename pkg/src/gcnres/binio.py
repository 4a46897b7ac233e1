"""Little-endian helpers for the binary containers."""
import struct

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def magic(self, tag: bytes, version: int):
        self.fh.write(tag)
        self.u32(version)

    def u32(self, v):
        self.fh.write(struct.pack("<I", int(v)))

    def u64(self, v):
        self.fh.write(struct.pack("<Q", int(v)))

    def array(self, a, dtype):
        self.fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def u64_array(self, a):
        a = np.asarray(a)
        self.u64(a.size)
        self.array(a, "<u8")

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u64(len(raw))
        self.fh.write(raw)


class Reader:
    def __init__(self, fh):
        self.fh = fh

    def _take(self, n):
        raw = self.fh.read(n)
        if len(raw) != n:
            raise FormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
        return raw

    def magic(self, tag: bytes, version: int):
        got = self.fh.read(len(tag))
        if got != tag:
            raise FormatError(f"bad magic {got!r}, expected {tag!r}")
        v = self.u32()
        if v != version:
            raise FormatError(f"unsupported version {v} (expected {version})")

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def array(self, count, dtype, shape=None):
        dt = np.dtype(dtype)
        a = np.frombuffer(self._take(int(count) * dt.itemsize), dtype=dt)
        a = a.astype(dt.newbyteorder("="))
        return a.reshape(shape) if shape is not None else a

    def u64_array(self):
        n = self.u64()
        return self.array(n, "<u8").astype(np.int64)

    def string(self):
        n = self.u64()
        return self._take(n).decode("utf-8")

    def expect_eof(self):
        if self.fh.read(1):
            raise FormatError("trailing bytes after container payload")
