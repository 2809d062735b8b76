"""Bit-string values, reproducible uniform sampling, and serialization.

Bit strings are stored as contiguous numpy uint8 arrays (one byte per bit),
which keeps window scans cache-friendly and lets the block machinery work on
views without copies. Values are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Invalid text for a bit string; carries the offending offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Seed:
    """Reproducible RNG root: a 64-bit value plus a substream path.

    Identical (value, stream) pairs reproduce identical random sequences.
    `derive` appends to the stream path, giving statistically independent
    substreams (e.g. one per trace of a Monte Carlo batch) that never need
    coordination between workers.
    """

    value: int
    stream: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= self.value < 2**64:
            raise ValueError(f"seed value must be a 64-bit unsigned int, got {self.value}")
        object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))

    def derive(self, *path: int) -> "Seed":
        return Seed(self.value, self.stream + path)

    def generator(self) -> np.random.Generator:
        # Philox is counter-based, so derived substreams are cheap and
        # independent regardless of how much each one is consumed.
        ss = np.random.SeedSequence(self.value, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


class BitString:
    """Immutable finite sequence of bits with positional indexing."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.ndim != 1:
            raise ValueError("bits must be one-dimensional")
        if arr.size and arr.max() > 1:
            raise ValueError("bits must be 0 or 1")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "_bits", arr)

    def __setattr__(self, name, value):
        raise AttributeError("BitString is immutable")

    @property
    def bits(self) -> np.ndarray:
        """Read-only uint8 array of the bits."""
        return self._bits

    def __len__(self) -> int:
        return int(self._bits.size)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return BitString(self._bits[idx])
        return int(self._bits[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitString):
            return NotImplemented
        return self._bits.shape == other._bits.shape and bool(
            np.array_equal(self._bits, other._bits)
        )

    def __hash__(self) -> int:
        return hash((len(self), self._bits.tobytes()))

    def __repr__(self) -> str:
        if len(self) <= 64:
            return f"BitString('{format_text(self)}')"
        return f"BitString(length={len(self)}, '{format_text(self[:32])}...')"

    def segment(self, i: int, j: int) -> "BitString":
        """Inclusive slice: bits i through j, length j - i + 1."""
        n = len(self)
        if not (0 <= i <= j < n):
            raise IndexError(f"segment [{i}, {j}] out of range for length {n}")
        return BitString(self._bits[i : j + 1])

    def signed(self) -> np.ndarray:
        """The bits mapped 0 -> -1, 1 -> +1, as an int8 array."""
        return (2 * self._bits.astype(np.int8) - 1).astype(np.int8)

    def concat(self, other: "BitString") -> "BitString":
        return BitString(np.concatenate([self._bits, other._bits]))


def sample_uniform(n: int, seed: Seed) -> BitString:
    """n i.i.d. fair bits, deterministic given the seed."""
    if n < 0:
        raise ValueError("length must be nonnegative")
    rng = seed.generator()
    return BitString(rng.integers(0, 2, size=n, dtype=np.uint8))


def parse_text(text: str) -> BitString:
    """Parse an ASCII run of '0'/'1' characters."""
    out = np.empty(len(text), dtype=np.uint8)
    for i, ch in enumerate(text):
        if ch == "0":
            out[i] = 0
        elif ch == "1":
            out[i] = 1
        else:
            raise ParseError(f"invalid bit character {ch!r}", i)
    return BitString(out)


def format_text(x: BitString) -> str:
    return "".join("1" if b else "0" for b in x.bits)


def format_hex(x: BitString) -> str:
    """`<length>:<hex nibbles>`, most significant bit first.

    The explicit length header disambiguates strings whose length is not a
    multiple of four; the final nibble is zero-padded on the right.
    """
    n = len(x)
    padded = np.zeros(((n + 3) // 4) * 4, dtype=np.uint8)
    padded[:n] = x.bits
    nibbles = padded.reshape(-1, 4) @ np.array([8, 4, 2, 1], dtype=np.uint8)
    return f"{n}:" + "".join(f"{v:x}" for v in nibbles)


def parse_hex(text: str) -> BitString:
    head, sep, body = text.partition(":")
    if not sep:
        raise ParseError("missing ':' length header", 0)
    try:
        n = int(head)
    except ValueError:
        raise ParseError(f"invalid length header {head!r}", 0) from None
    if n < 0:
        raise ParseError("negative length header", 0)
    if len(body) != (n + 3) // 4:
        raise ParseError(
            f"expected {(n + 3) // 4} hex digits for length {n}, got {len(body)}",
            len(head) + 1,
        )
    bits = np.zeros(len(body) * 4, dtype=np.uint8)
    for i, ch in enumerate(body):
        try:
            v = int(ch, 16)
        except ValueError:
            raise ParseError(f"invalid hex digit {ch!r}", len(head) + 1 + i) from None
        bits[4 * i : 4 * i + 4] = [(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1]
    if bits[n:].any():
        raise ParseError("nonzero padding bits beyond declared length", len(head) + 1)
    return BitString(bits[:n])
