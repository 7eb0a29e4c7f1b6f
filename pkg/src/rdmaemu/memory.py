"""Per-node application address space."""
from __future__ import annotations

import bisect

DEFAULT_BASE = 0x1000_0000


class OutOfMemory(MemoryError):
    pass


class FirstFit:
    """First-fit allocator over offsets ``[0, size)`` with free-block coalescing."""

    def __init__(self, size: int, align: int = 64):
        self.size = size
        self.align = align
        self._free = [(0, size)]  # sorted (offset, length)
        self._used: dict[int, int] = {}

    @property
    def in_use(self) -> int:
        return sum(self._used.values())

    def alloc(self, length: int) -> int:
        if length <= 0:
            raise ValueError("allocation length must be positive")
        need = -(-length // self.align) * self.align
        for i, (off, n) in enumerate(self._free):
            if n >= need:
                if n == need:
                    del self._free[i]
                else:
                    self._free[i] = (off + need, n - need)
                self._used[off] = need
                return off
        raise OutOfMemory(f"cannot allocate {length} bytes")

    def free(self, off: int) -> None:
        n = self._used.pop(off)
        i = bisect.bisect(self._free, (off, n))
        self._free.insert(i, (off, n))
        # coalesce with neighbours
        if i + 1 < len(self._free) and off + n == self._free[i + 1][0]:
            self._free[i] = (off, n + self._free[i + 1][1])
            del self._free[i + 1]
        if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == off:
            poff, pn = self._free[i - 1]
            self._free[i - 1] = (poff, pn + self._free[i][1])
            del self._free[i]


class NodeMemory:
    """A flat byte arena addressed from ``base``.

    Application code reads and writes through :meth:`read`/:meth:`write`;
    the NIC engine only ever touches it through :meth:`view` after a DMA
    guard lookup.
    """

    def __init__(self, size: int, base: int = DEFAULT_BASE, align: int = 64):
        self.base = base
        self.size = size
        self._buf = bytearray(size)
        self._mv = memoryview(self._buf)
        self._heap = FirstFit(size, align)

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.end and length >= 0

    def alloc(self, length: int) -> int:
        return self.base + self._heap.alloc(length)

    def free(self, addr: int) -> None:
        self._heap.free(addr - self.base)

    def _check(self, addr: int, length: int) -> int:
        if not self.contains(addr, length):
            raise IndexError(f"range {addr:#x}+{length} outside node memory")
        return addr - self.base

    def view(self, addr: int, length: int) -> memoryview:
        off = self._check(addr, length)
        return self._mv[off:off + length]

    def read(self, addr: int, length: int) -> bytes:
        off = self._check(addr, length)
        return bytes(self._mv[off:off + length])

    def write(self, addr: int, data) -> None:
        off = self._check(addr, len(data))
        self._mv[off:off + len(data)] = data

    def fill(self, addr: int, length: int, byte: int = 0) -> None:
        off = self._check(addr, length)
        self._mv[off:off + length] = bytes([byte]) * length
