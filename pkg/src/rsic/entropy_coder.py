"""Bit-exact range coding against explicit integer distributions.

Byte stream layout (stable across versions):

* 32-bit coder state (``low``/``range``), renormalized one byte at a time.
  A byte is emitted when the top bytes of ``low`` and ``low + range`` agree,
  or when ``range`` drops below 2**16 (the carry-less underflow rule: the
  range is clipped up to the next 2**16 boundary and a byte is released).
* All symbol distributions share a fixed total mass of 2**16, every symbol
  carrying at least one unit of mass.
* Flush writes the four bytes of ``low``; the decoder pre-loads exactly
  those four bytes as its initial state. Encoder writes and decoder reads
  are in one-to-one correspondence, so a truncated stream always exhausts
  the decoder's input instead of decoding silently.
* An empty symbol sequence encodes to an empty byte string.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

PRECISION = 32
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
_TOP = 1 << (PRECISION - 8)
_BOTTOM = 1 << (PRECISION - 16)
_MASK = (1 << PRECISION) - 1


class StreamError(ValueError):
    """Raised when a byte stream is truncated or structurally invalid."""


@dataclass(frozen=True)
class SymbolDistribution:
    """Integer CDF over the contiguous support [min_symbol, max_symbol].

    ``cdf`` has one more entry than the support size, starts at 0, ends at
    TOTAL, and is strictly increasing (every symbol has nonzero mass).
    """

    cdf: np.ndarray
    min_symbol: int

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.int64)
        if cdf.ndim != 1 or len(cdf) < 2:
            raise ValueError("cdf must have at least two entries")
        if cdf[0] != 0 or cdf[-1] != TOTAL:
            raise ValueError(f"cdf must run from 0 to {TOTAL}")
        if np.any(np.diff(cdf) <= 0):
            raise ValueError("cdf must be strictly increasing")
        object.__setattr__(self, "cdf", cdf)
        self.cdf.setflags(write=False)
        object.__setattr__(self, "_cdf_list", cdf.tolist())

    @property
    def max_symbol(self) -> int:
        return self.min_symbol + len(self.cdf) - 2

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    def contains(self, symbol: int) -> bool:
        return self.min_symbol <= symbol <= self.max_symbol

    def probability(self, symbol: int) -> float:
        i = symbol - self.min_symbol
        return float(self.cdf[i + 1] - self.cdf[i]) / TOTAL

    @classmethod
    def from_probabilities(cls, probs, min_symbol: int = 0) -> "SymbolDistribution":
        """Quantize real probabilities to the fixed 16-bit total.

        Every symbol is floored at one unit of mass; the remaining deficit or
        surplus is absorbed by the most probable symbols (deterministically).
        """
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) == 0:
            raise ValueError("need a non-empty 1-D probability vector")
        if len(probs) > TOTAL:
            raise ValueError(f"alphabet larger than {TOTAL}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite and non-negative")
        total = probs.sum()
        if total <= 0:
            raise ValueError("probabilities sum to zero")
        freq = np.maximum(1, np.rint(probs / total * TOTAL).astype(np.int64))
        diff = TOTAL - int(freq.sum())
        if diff != 0:
            # Adjust the largest bins first; never drop a bin below 1.
            order = np.argsort(-freq, kind="stable")
            i = 0
            step = 1 if diff > 0 else -1
            while diff != 0:
                j = order[i % len(order)]
                if step < 0 and freq[j] <= 1:
                    i += 1
                    continue
                freq[j] += step
                diff -= step
                i += 1
        cdf = np.zeros(len(freq) + 1, dtype=np.int64)
        np.cumsum(freq, out=cdf[1:])
        return cls(cdf, min_symbol)

    @classmethod
    def uniform(cls, num_symbols: int, min_symbol: int = 0) -> "SymbolDistribution":
        return cls.from_probabilities(np.ones(num_symbols), min_symbol)

    @classmethod
    def gaussian(cls, mean: float, scale: float, min_symbol: int,
                 max_symbol: int) -> "SymbolDistribution":
        """Discretize N(mean, scale) onto integer bins with folded tails."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        if max_symbol < min_symbol:
            raise ValueError("empty support")
        edges = np.arange(min_symbol, max_symbol + 1) + 0.5
        upper = ndtr((edges - mean) / scale)
        probs = np.empty(max_symbol - min_symbol + 1, dtype=np.float64)
        probs[0] = upper[0]
        probs[1:] = np.diff(upper)
        probs[-1] += 1.0 - upper[-1]
        return cls.from_probabilities(probs, min_symbol)


def ideal_rate(probabilities) -> float:
    """Shannon information content, in bits: sum of -log2(p)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.size and (np.any(probs <= 0) or np.any(probs > 1)):
        raise ValueError("probabilities must lie in (0, 1]")
    return float(-np.log2(probs).sum()) if probs.size else 0.0


class RangeEncoder:
    """Single-use streaming encoder; call ``encode`` per symbol then ``finish``."""

    def __init__(self):
        self.low = 0
        self.range_ = _MASK
        self.out = bytearray()
        self.finished = False
        self.count = 0

    def encode(self, symbol: int, dist: SymbolDistribution) -> None:
        if self.finished:
            raise RuntimeError("encoder already finished")
        if not dist.contains(symbol):
            raise ValueError(
                f"symbol {symbol} outside support [{dist.min_symbol}, {dist.max_symbol}]")
        i = symbol - dist.min_symbol
        cdf = dist._cdf_list
        c = cdf[i]
        d = cdf[i + 1]
        r = self.range_ // TOTAL
        self.low += c * r
        self.range_ = (d - c) * r
        self._normalize()
        self.count += 1

    def _normalize(self) -> None:
        low, range_, out = self.low, self.range_, self.out
        while True:
            if (low ^ (low + range_)) < _TOP:
                out.append(low >> (PRECISION - 8))
                low = (low << 8) & _MASK
                range_ <<= 8
                continue
            if range_ < _BOTTOM:
                range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
                out.append(low >> (PRECISION - 8))
                low = (low << 8) & _MASK
                range_ <<= 8
                continue
            break
        self.low, self.range_ = low, range_

    def finish(self) -> bytes:
        if not self.finished:
            if self.count > 0:
                low = self.low
                for _ in range(PRECISION // 8):
                    self.out.append(low >> (PRECISION - 8))
                    low = (low << 8) & _MASK
            self.finished = True
        return bytes(self.out)


class RangeDecoder:
    """Single-use streaming decoder; mirror of :class:`RangeEncoder`."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range_ = _MASK
        self.state = 0
        self.primed = False

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise StreamError("range-coded stream exhausted")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, dist: SymbolDistribution) -> int:
        if not self.primed:
            for _ in range(PRECISION // 8):
                self.state = (self.state << 8) | self._next_byte()
            self.primed = True
        r = self.range_ // TOTAL
        value = min((self.state - self.low) // r, TOTAL - 1)
        cdf = dist._cdf_list
        i = bisect_right(cdf, value) - 1
        c = cdf[i]
        d = cdf[i + 1]
        self.low += c * r
        self.range_ = (d - c) * r
        self._normalize()
        return i + dist.min_symbol

    def _normalize(self) -> None:
        low, range_, state = self.low, self.range_, self.state
        while True:
            if (low ^ (low + range_)) < _TOP:
                state = ((state << 8) | self._next_byte()) & _MASK
                low = (low << 8) & _MASK
                range_ <<= 8
                continue
            if range_ < _BOTTOM:
                range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
                state = ((state << 8) | self._next_byte()) & _MASK
                low = (low << 8) & _MASK
                range_ <<= 8
                continue
            break
        self.low, self.range_, self.state = low, range_, state


def encode_symbols(symbols, dists) -> bytes:
    """Encode ``symbols[i]`` under ``dists[i]``. Lossless with decode_symbols.

    ``dists`` may be a single distribution shared by all symbols.
    """
    symbols = list(symbols)
    if isinstance(dists, SymbolDistribution):
        dists = [dists] * len(symbols)
    else:
        dists = list(dists)
    if len(symbols) != len(dists):
        raise ValueError(f"{len(symbols)} symbols but {len(dists)} distributions")
    enc = RangeEncoder()
    for s, d in zip(symbols, dists):
        enc.encode(int(s), d)
    return enc.finish()


def decode_symbols(data: bytes, dists, n: int | None = None) -> list[int]:
    """Decode ``n`` symbols; with a distribution list, ``n`` defaults to its length."""
    if isinstance(dists, SymbolDistribution):
        if n is None:
            raise ValueError("n is required with a shared distribution")
        dists = [dists] * n
    else:
        dists = list(dists)
        if n is None:
            n = len(dists)
        elif n != len(dists):
            raise ValueError(f"n={n} but {len(dists)} distributions")
    if n == 0:
        if data:
            raise StreamError("expected empty stream for zero symbols")
        return []
    dec = RangeDecoder(data)
    out = [dec.decode(d) for d in dists]
    # Encoder writes and decoder reads match one-to-one, so anything left
    # over means the stream does not belong to this distribution sequence.
    if dec.pos != len(data):
        raise StreamError(f"{len(data) - dec.pos} unread bytes after decoding {n} symbols")
    return out


def entropy_bits(probs) -> float:
    """Shannon entropy of one distribution, in bits per symbol."""
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs[probs > 0]
    return float(-(probs * np.log2(probs)).sum())
